"""Training, checkpointing, evaluation and ablation drivers.

Everything here is deterministic given the config's seeds: the training
loop is single-threaded, every random draw comes from a generator seeded
from the config, and the metrics log differs between identical runs only in
its ``wall_time`` column.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .aga import AgaState, combine, grad_stats
from .fileio import Dataset, checkpoint_bytes, load_dataset, parse_checkpoint, save_dataset
from .flow import Codebook, draw_noise, joint_losses, make_batch, rollout_targets, sample
from .metrics import energy_distance
from .tasks import (GENERATIVE_TASKS, REACH_TASK, TASKS, ExpertPolicy, FlowPolicy, ReachEnv,
                    collect_demos, make_dataset, rollout_policy)
from .velocity import VelocityModel

log = logging.getLogger(__name__)

SCHEDULE_STEPS = (2, 4, 8)
METRICS_HEADER = ("step", "epoch", "loss_fm", "loss_mc", "alpha1", "c", "delta", "A", "B",
                  "branch", "wall_time")
ED_SAMPLES = 4096
EVAL_EPISODES = 100
ABLATION_SEEDS = (0, 1, 2)
ABLATION_AXES = {
    "schedule": ("8", "4", "8-2", "4-2", "random", "4-8-2"),
    "init-c": (1.0, 0.5, 0.01),
    "nfe": (1, 3, 5, 10),
    "aga-onoff": ("on", "off"),
}


class ConfigError(ValueError):
    pass


class NumericalError(RuntimeError):
    """Training produced a non-finite loss; ``params`` holds the last good weights."""

    def __init__(self, msg, params=None, epoch=0):
        super().__init__(msg)
        self.params = params
        self.epoch = epoch


# ------------------------------------------------------------------ config

@dataclass
class AgaConfig:
    enabled: bool = True
    c0: float = 1.0
    beta: float = 0.9
    gamma: float = 0.1
    n_start: int | None = None  # None -> first 10% of optimizer steps
    per_epoch: bool = True


@dataclass
class CodebookConfig:
    enabled: bool = True
    size: int = 1024
    seed: int = 0


@dataclass
class ModelConfig:
    hidden: list = field(default_factory=lambda: [128, 128, 128])
    n_freq: int = 6
    activation: str = "gelu"


@dataclass
class Seeds:
    data: int = 0
    init: int = 0
    train: int = 0


@dataclass
class TrainConfig:
    task: str = "gauss-mixture-8"
    n_samples: int = 8192       # generative tasks: dataset size
    episodes: int = 200         # reach task: demonstration episodes
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-4
    lr_schedule: str = "constant"  # "constant" or "cosine" (decays to 0 over training)
    ema_decay: float = 0.0      # > 0: checkpoint carries an EMA of the weights
    optimizer: str = "adam"     # "adam" or "sgd-momentum"
    momentum: float = 0.9
    adam_betas: list = field(default_factory=lambda: [0.9, 0.999])
    weight_decay: float = 0.0
    consistency_fraction: float = 0.25
    schedule: object = field(default_factory=lambda: [4, 8, 2])  # list of n, or "random"
    aga: AgaConfig = field(default_factory=AgaConfig)
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seeds: Seeds = field(default_factory=Seeds)

    def validate(self) -> "TrainConfig":
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        for name in ("n_samples", "episodes", "epochs", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        f = self.consistency_fraction
        if f != 0 and not (1 / 8 - 1e-12 <= f <= 1 / 4 + 1e-12):
            raise ConfigError("consistency_fraction must be 0 or within [1/8, 1/4]")
        parse_schedule(self.schedule)
        if not 0 < self.aga.c0 <= 1:
            raise ConfigError("aga.c0 must lie in (0, 1]")
        if not 0 <= self.aga.beta < 1:
            raise ConfigError("aga.beta must lie in [0, 1)")
        if self.aga.gamma < 0:
            raise ConfigError("aga.gamma must be >= 0")
        if self.aga.n_start is not None and self.aga.n_start < 0:
            raise ConfigError("aga.n_start must be >= 0")
        if self.codebook.size < 1:
            raise ConfigError("codebook.size must be >= 1")
        if self.model.activation not in ("gelu", "tanh") or not self.model.hidden:
            raise ConfigError("bad model section")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        sections = {"aga": AgaConfig, "codebook": CodebookConfig, "model": ModelConfig, "seeds": Seeds}
        try:
            kw = {}
            for key, value in data.items():
                if key in sections:
                    kw[key] = _strict(sections[key], value, key)
                else:
                    kw[key] = value
            return _strict(cls, kw, "config", build=lambda **k: cls(**k)).validate()
        except TypeError as err:
            raise ConfigError(str(err)) from None

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _strict(cls, data, where, build=None):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")
    return (build or cls)(**data)


def parse_schedule(schedule) -> list[int] | str:
    """``[4, 8, 2]``, ``"4-8-2"``, ``"8"`` or ``"random"``."""
    if isinstance(schedule, str):
        if schedule == "random":
            return "random"
        try:
            schedule = [int(s) for s in schedule.split("-")]
        except ValueError:
            raise ConfigError(f"bad schedule {schedule!r}") from None
    if isinstance(schedule, (int, np.integer)):
        schedule = [int(schedule)]
    if not isinstance(schedule, (list, tuple)) or not schedule:
        raise ConfigError(f"bad schedule {schedule!r}")
    if any(int(n) not in SCHEDULE_STEPS or int(n) != n for n in schedule):
        raise ConfigError(f"schedule entries must be in {SCHEDULE_STEPS}")
    return [int(n) for n in schedule]


def schedule_n(schedule, epoch: int, epochs: int, rng: np.random.Generator) -> int:
    """Step count for this epoch: equal-length phases, or uniform over {2, 4, 8}."""
    if schedule == "random":
        return int(rng.choice(SCHEDULE_STEPS))
    phase = min(epoch * len(schedule) // epochs, len(schedule) - 1)
    return schedule[phase]


# ---------------------------------------------------------------- training

class Adam:
    def __init__(self, size, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, betas[0], betas[1], eps, weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return params * (1 - self.lr * self.wd) - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGDMomentum:
    def __init__(self, size, lr, momentum=0.9):
        self.lr, self.mu = lr, momentum
        self.buf = np.zeros(size)

    def step(self, params, grad):
        self.buf = self.mu * self.buf + grad
        return params - self.lr * self.buf


def make_optimizer(cfg: TrainConfig, size: int):
    if cfg.optimizer == "adam":
        return Adam(size, cfg.lr, tuple(cfg.adam_betas), weight_decay=cfg.weight_decay)
    return SGDMomentum(size, cfg.lr, cfg.momentum)


@dataclass
class TrainingData:
    x: np.ndarray            # normalised targets, (N, D)
    o: np.ndarray | None     # observations, (N, C)
    action_scale: float = 1.0


def training_data(ds: Dataset) -> TrainingData:
    scale = float(ds.metadata.get("action_scale", 1.0))
    return TrainingData(ds.samples / scale, ds.conditions, scale)


def build_model(cfg: TrainConfig, x_dim: int, cond_dim: int) -> VelocityModel:
    m = cfg.model
    return VelocityModel.init(x_dim, cond_dim, tuple(m.hidden), m.n_freq, m.activation, seed=cfg.seeds.init)


def build_codebook(cfg: TrainConfig, dim: int) -> Codebook | None:
    cb = cfg.codebook
    return Codebook(cb.size, dim, cb.seed) if cb.enabled else None


def lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "cosine":
        return cfg.lr * 0.5 * (1 + math.cos(math.pi * step / total))
    return cfg.lr


def resolve(cfg: TrainConfig, n_data: int) -> TrainConfig:
    """Fill derived defaults so the stored config has no hidden values."""
    steps = cfg.epochs * steps_per_epoch(n_data, cfg.batch_size)
    if cfg.aga.n_start is None:
        cfg = replace(cfg, aga=replace(cfg.aga, n_start=steps // 10))
    return cfg


def steps_per_epoch(n: int, batch: int) -> int:
    return max(1, n // batch)


@dataclass
class TrainResult:
    model: VelocityModel
    aga: AgaState
    config: TrainConfig
    rows: list
    action_scale: float = 1.0
    epoch: int = 0


def train(cfg: TrainConfig, ds: Dataset, metrics_path=None) -> TrainResult:
    """Multi-step consistency training with adaptive gradient allocation.

    Per step: split the batch, roll consistency targets out of the current
    (frozen) weights, take both losses from one forward pass, differentiate
    each separately, combine the gradients and hand the result to the
    optimizer.  Raises :class:`NumericalError` on a non-finite loss.
    """
    data = training_data(ds)
    cfg = resolve(cfg.validate(), len(data.x))
    if ds.cond_dim and cfg.task != REACH_TASK or not ds.cond_dim and cfg.task == REACH_TASK:
        raise ConfigError("dataset does not match the configured task")
    schedule = parse_schedule(cfg.schedule)
    N, D = data.x.shape
    model = build_model(cfg, D, ds.cond_dim)
    codebook = build_codebook(cfg, D)
    opt = make_optimizer(cfg, model.n_params)
    a = cfg.aga
    state = AgaState(c=a.c0, beta=a.beta, gamma=a.gamma, n_start=a.n_start, per_epoch=a.per_epoch)
    rng = np.random.default_rng(cfg.seeds.train)
    spe = steps_per_epoch(N, cfg.batch_size)
    total = spe * cfg.epochs
    ema = model.params.copy() if cfg.ema_decay > 0 else None

    rows = []
    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
    t0 = time.perf_counter()
    step = 0
    try:
        for epoch in range(cfg.epochs):
            n = schedule_n(schedule, epoch, cfg.epochs, rng)
            perm = rng.permutation(N)
            for b in range(spe):
                idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                o = None if data.o is None else data.o[idx]
                if schedule == "random":
                    n = schedule_n(schedule, epoch, cfg.epochs, rng)
                batch = make_batch(data.x[idx], o, rng, fraction=cfg.consistency_fraction, n=n,
                                   codebook=codebook)
                targets = None
                if len(batch.cons_xt):
                    targets = rollout_targets(model.snapshot(), batch.cons_xt, batch.cons_o,
                                              batch.cons_t, batch.cons_d, n)
                loss_fm, loss_mc = joint_losses(model, batch, targets)
                lf, lm = float(loss_fm.value), float(loss_mc.value)
                if not (np.isfinite(lf) and np.isfinite(lm)):
                    raise NumericalError(f"non-finite loss at step {step}", model.params.copy(), epoch)
                g1 = ad.backward(loss_fm)
                g2 = ad.backward(loss_mc)
                if a.enabled:
                    direction, diag = combine(state, g1, g2, lf, lm)
                else:
                    st = grad_stats(g1, g2)
                    direction = g1 + g2
                    diag = {"alpha1": 0.5, "c": state.c, "delta": st.delta, "A": st.A, "B": st.B,
                            "branch": "sum"}
                opt.lr = lr_at(cfg, step, total)
                new = opt.step(model.params, direction)
                if not np.all(np.isfinite(new)):
                    raise NumericalError(f"non-finite parameters at step {step}", model.params.copy(), epoch)
                model.params = new
                if ema is not None:
                    ema = cfg.ema_decay * ema + (1 - cfg.ema_decay) * new
                row = (step, epoch, lf, lm, diag["alpha1"], diag["c"], diag["delta"], diag["A"],
                       diag["B"], diag["branch"], time.perf_counter() - t0)
                rows.append(row)
                if writer:
                    writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
                step += 1
            if a.enabled:
                state.end_epoch()
            if epoch % 25 == 0 or epoch == cfg.epochs - 1:
                log.info("epoch %d: loss_fm=%.4g loss_mc=%.4g c=%.3g", epoch, lf, lm, state.c)
    finally:
        if fh:
            fh.close()
    if ema is not None:
        model = model.with_params(ema)
    return TrainResult(model, state, cfg, rows, data.action_scale, cfg.epochs)


# -------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    model: VelocityModel
    config: TrainConfig
    aga: AgaState
    epoch: int = 0
    action_scale: float = 1.0

    @property
    def step_conditioned(self) -> bool:
        """Plain flow-matching runs never see d > 0 and are sampled with d = 0."""
        return self.config.consistency_fraction > 0

    @property
    def codebook(self) -> Codebook | None:
        return build_codebook(self.config, self.model.x_dim)

    def header(self) -> dict:
        return {
            "architecture": self.model.architecture(),
            "config": self.config.to_dict(),
            "config_digest": self.config.digest(),
            "epoch": self.epoch,
            "aga_state": self.aga.to_dict(),
            "action_scale": self.action_scale,
            "n_params": self.model.n_params,
        }

    def to_bytes(self) -> bytes:
        return checkpoint_bytes(self.header(), self.model.params)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        head, params = parse_checkpoint(buf)
        arch = head["architecture"]
        model = VelocityModel(arch["x_dim"], arch["cond_dim"], tuple(arch["hidden"]), arch["n_freq"],
                              arch["activation"], params)
        return cls(model, TrainConfig.from_dict(head["config"]), AgaState.from_dict(head["aga_state"]),
                   head["epoch"], head["action_scale"])

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    @classmethod
    def from_result(cls, res: TrainResult) -> "Checkpoint":
        return cls(res.model, res.config, res.aga, res.epoch, res.action_scale)


def write_metrics(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


# --------------------------------------------------------------- data/eval

def generate_dataset(cfg: TrainConfig) -> Dataset:
    if cfg.task == REACH_TASK:
        env = ReachEnv()
        return collect_demos(env, ExpertPolicy(env), cfg.episodes, cfg.seeds.data)
    return make_dataset(cfg.task, cfg.n_samples, cfg.seeds.data)


def heldout_dataset(task: str, data_seed: int, n: int = ED_SAMPLES) -> Dataset:
    return make_dataset(task, n, [data_seed, 1])


def generate_samples(ckpt: Checkpoint, steps: int, count: int, seed: int,
                     conditions: np.ndarray | None = None) -> np.ndarray:
    """Sample ``count`` outputs with ``steps`` Euler steps, de-normalised."""
    model = ckpt.model
    rng = np.random.default_rng(seed)
    x0 = draw_noise(ckpt.codebook, rng, count, model.x_dim)
    return sample(model, x0, conditions, steps, ckpt.step_conditioned) * ckpt.action_scale


def reach_policy(ckpt: Checkpoint, steps: int) -> FlowPolicy:
    return FlowPolicy(ckpt.model, ReachEnv(), steps, ckpt.codebook, ckpt.action_scale,
                      ckpt.step_conditioned)


def evaluate(ckpt: Checkpoint, task: str, steps_list, seed: int = 0,
             episodes: int = EVAL_EPISODES, n_samples: int = ED_SAMPLES) -> dict:
    """Per-NFE quality: energy distance (generative) or success rate (reach)."""
    if task != ckpt.config.task or task not in TASKS:
        raise ConfigError(f"checkpoint was trained on {ckpt.config.task!r}, not {task!r}")
    rows = []
    for n in steps_list:
        n = int(n)
        if n < 1:
            raise ConfigError("steps must be >= 1")
        if task == REACH_TASK:
            rate = rollout_policy(ReachEnv(), reach_policy(ckpt, n), episodes, seed)
            rows.append({"nfe": n, "success_rate": rate, "episodes": episodes})
        else:
            ref = heldout_dataset(task, ckpt.config.seeds.data, n_samples).samples
            gen = generate_samples(ckpt, n, n_samples, seed)
            rows.append({"nfe": n, "energy_distance": energy_distance(gen, ref), "samples": n_samples})
    metric = "success_rate" if task == REACH_TASK else "energy_distance"
    return {"task": task, "metric": metric, "seed": seed, "results": rows}


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["task", "nfe", report["metric"]])
    for r in report["results"]:
        w.writerow([report["task"], r["nfe"], repr(r[report["metric"]])])
    return buf.getvalue()


# ---------------------------------------------------------------- ablation

def ablation_cells(cfg: TrainConfig, axis: str):
    """``(label, config)`` pairs for an ablation axis (nfe reuses the base config)."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    grid = ABLATION_AXES[axis]
    if axis == "schedule":
        return [(g, replace(cfg, schedule=parse_schedule(g))) for g in grid]
    if axis == "init-c":
        return [(str(g), replace(cfg, aga=replace(cfg.aga, c0=g))) for g in grid]
    if axis == "aga-onoff":
        return [(g, replace(cfg, aga=replace(cfg.aga, enabled=g == "on"))) for g in grid]
    return [(str(g), cfg) for g in grid]


def ablate(cfg: TrainConfig, axis: str, seeds=ABLATION_SEEDS, eval_seed: int = 0,
           episodes: int = EVAL_EPISODES, n_samples: int = ED_SAMPLES) -> dict:
    """Train every grid cell for each seed and score one-step quality.

    The nfe axis trains once per seed and scores each NFE; the others score
    NFE 1.  Training data is shared across seeds; init and train seeds vary.
    """
    cells = ablation_cells(cfg, axis)
    ds = generate_dataset(cfg)
    raw: dict[str, list[float]] = {label: [] for label, _ in cells}
    metric = "success_rate" if cfg.task == REACH_TASK else "energy_distance"
    trained = {}
    for label, cell in cells:
        for s in seeds:
            cell_s = replace(cell, seeds=replace(cell.seeds, init=s, train=s))
            key = cell_s.digest()
            if key not in trained:
                trained[key] = Checkpoint.from_result(train(cell_s, ds))
            nfe = int(label) if axis == "nfe" else 1
            rep = evaluate(trained[key], cfg.task, [nfe], eval_seed, episodes, n_samples)
            raw[label].append(rep["results"][0][metric])
    summary = {label: (float(np.mean(v)), float(np.std(v))) for label, v in raw.items()}
    return {"task": cfg.task, "axis": axis, "metric": metric, "seeds": list(seeds),
            "grid": [label for label, _ in cells], "raw": raw, "summary": summary}


def ablation_csv(table: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["task", *table["grid"]])
    w.writerow([table["task"], *(f"{m:.4g}±{s:.2g}" for m, s in (table["summary"][g] for g in table["grid"]))])
    return buf.getvalue()


__all__ = [
    "AgaConfig", "CodebookConfig", "ModelConfig", "Seeds", "TrainConfig", "ConfigError",
    "NumericalError", "train", "TrainResult", "Checkpoint", "generate_dataset", "evaluate",
    "ablate", "ablation_csv", "report_csv", "write_metrics", "generate_samples", "load_dataset",
    "save_dataset", "GENERATIVE_TASKS",
]
