"""Command line: ``mscfm {gen-data,train,sample,eval,ablate}``.

Exit codes: 0 ok, 2 bad config / bad input, 3 numerical failure during
training (the last finite weights are still written).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .aga import AgaState
from .fileio import Dataset, FormatError, load_dataset, save_dataset
from .harness import (ABLATION_AXES, Checkpoint, ConfigError, NumericalError, TrainConfig, ablate,
                      ablation_csv, evaluate, generate_dataset, generate_samples, report_csv, resolve,
                      steps_per_epoch, train)
from .tasks import REACH_TASK, ReachEnv
from .velocity import VelocityModel

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("mscfm")


def _config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig().validate()
    if args.seed is not None:
        s = int(args.seed)
        cfg = replace(cfg, seeds=replace(cfg.seeds, data=s, init=s, train=s))
    return cfg


def _steps(text: str) -> list[int]:
    try:
        steps = [int(s) for s in str(text).replace(" ", "").split(",") if s]
    except ValueError:
        raise ConfigError(f"bad --steps {text!r}") from None
    if not steps or any(n < 1 for n in steps):
        raise ConfigError("--steps entries must be positive integers")
    return steps


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    ds = generate_dataset(cfg)
    path = _out(args) / "dataset.msfm"
    save_dataset(path, ds)
    print(f"wrote {ds.n} samples to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args)
    ds = load_dataset(args.data) if args.data else generate_dataset(cfg)
    try:
        res = train(cfg, ds, out / "metrics.csv")
    except NumericalError as err:
        # keep the last finite weights next to the partial metrics log
        r = resolve(cfg, ds.n)
        model = VelocityModel.init(ds.dim, ds.cond_dim, tuple(r.model.hidden), r.model.n_freq,
                                   r.model.activation).with_params(err.params)
        scale = float(ds.metadata.get("action_scale", 1.0))
        Checkpoint(model, r, AgaState(c=r.aga.c0), err.epoch, scale).save(out / "model.ckpt")
        print(f"error: {err}; last good checkpoint kept at {out / 'model.ckpt'}", file=sys.stderr)
        return EXIT_NUMERIC
    Checkpoint.from_result(res).save(out / "model.ckpt")
    _write_json(out / "config.json", res.config.to_dict())
    print(f"trained {len(res.rows)} steps ({res.config.epochs} epochs, "
          f"{steps_per_epoch(ds.n, cfg.batch_size)}/epoch); checkpoint at {out / 'model.ckpt'}")
    return EXIT_OK


def _scatter_svg(path: Path, x: np.ndarray, title: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(x[:, 0], x[:, 1], s=2, alpha=0.5)
    ax.set_aspect("equal")
    ax.set_title(title)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_sample(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    steps = _steps(args.steps)
    if len(steps) != 1:
        raise ConfigError("sample takes a single --steps value")
    n = steps[0]
    seed = 0 if args.seed is None else int(args.seed)
    cond = None
    if ckpt.config.task == REACH_TASK:
        env = ReachEnv()
        rng = np.random.default_rng([seed, 2])
        cond = np.stack([env.observe(env.reset(rng)) for _ in range(args.count)])
    x = generate_samples(ckpt, n, args.count, seed, cond)
    meta = {"name": ckpt.config.task, "nfe": n, "seed": seed, "codebook": ckpt.config.codebook.enabled,
            "config_digest": ckpt.config.digest()}
    out = _out(args)
    save_dataset(out / "samples.msfm", Dataset(x, cond, meta))
    if args.svg and x.shape[1] == 2:
        _scatter_svg(out / "samples.svg", x, f"{ckpt.config.task}, NFE {n}")
    print(f"wrote {len(x)} samples (NFE {n}) to {out / 'samples.msfm'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    task = args.task or ckpt.config.task
    seed = 0 if args.seed is None else int(args.seed)
    report = evaluate(ckpt, task, _steps(args.steps), seed, args.episodes)
    out = _out(args)
    _write_json(out / "report.json", report)
    (out / "report.csv").write_text(report_csv(report))
    print(report_csv(report), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    table = ablate(cfg, args.axis, episodes=args.episodes)
    out = _out(args)
    _write_json(out / f"ablation-{args.axis}.json", table)
    (out / f"ablation-{args.axis}.csv").write_text(ablation_csv(table))
    print(ablation_csv(table), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mscfm", description="Multi-step consistency flow matching toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON training config (defaults used when omitted)")
        sp.add_argument("--seed", type=int, help="overrides every seed in the config")
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("gen-data", help="generate a dataset file")
    common(sp)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model, write model.ckpt and metrics.csv")
    common(sp)
    sp.add_argument("--data", help="dataset file (generated from the config when omitted)")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sample", help="draw samples from a checkpoint")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--steps", default="1")
    sp.add_argument("--count", type=int, default=4096)
    sp.add_argument("--svg", action="store_true", help="also write a scatter plot (2-D tasks)")
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("eval", help="score a checkpoint at several step counts")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--task")
    sp.add_argument("--steps", default="1,3,5,10")
    sp.add_argument("--episodes", type=int, default=100)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="run an ablation grid over 3 seeds")
    common(sp)
    sp.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    sp.add_argument("--episodes", type=int, default=100)
    sp.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, FormatError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
