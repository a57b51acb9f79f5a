import json
import math
from dataclasses import replace

import numpy as np
import pytest

from mscfm import autodiff as ad
from mscfm.harness import (ABLATION_AXES, Checkpoint, ConfigError, ModelConfig, NumericalError, TrainConfig,
                           ablate, ablation_csv, evaluate, generate_dataset, lr_at, parse_schedule,
                           report_csv, schedule_n, train, write_metrics)
from mscfm.metrics import energy_distance
from mscfm.velocity import VelocityModel


def tiny(**kw):
    base = TrainConfig(task="gauss-mixture-8", n_samples=128, epochs=3, batch_size=32, lr=1e-3,
                       model=ModelConfig(hidden=[16, 16], n_freq=3))
    return replace(base, **kw)


# ---------------------------------------------------------------- config

def test_config_round_trip():
    cfg = tiny(schedule=[8, 2])
    back = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg and back.digest() == cfg.digest()


@pytest.mark.parametrize("patch", [
    {"consistency_fraction": 0.3},
    {"consistency_fraction": 0.1},
    {"schedule": [3]},
    {"schedule": "4-x"},
    {"task": "mnist"},
    {"optimizer": "lbfgs"},
    {"lr": 0.0},
    {"lr_schedule": "step"},
    {"aga": {"c0": 0.0}},
    {"aga": {"c0": 1.5}},
    {"bogus": 1},
    {"aga": {"bogus": 1}},
])
def test_bad_config_rejected(patch):
    data = tiny().to_dict()
    for key, value in patch.items():
        if isinstance(value, dict) and key in data:
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    with pytest.raises(ConfigError):
        TrainConfig.from_dict(data)


def test_fraction_bounds_accepted():
    for f in (0.0, 0.125, 0.25):
        tiny(consistency_fraction=f).validate()


def test_load_rejects_unreadable(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        TrainConfig.load(p)


def test_parse_schedule_forms():
    assert parse_schedule("4-8-2") == [4, 8, 2]
    assert parse_schedule("8") == [8]
    assert parse_schedule([2]) == [2]
    assert parse_schedule("random") == "random"


def test_schedule_phases_split_epochs():
    rng = np.random.default_rng(0)
    got = [schedule_n([4, 8, 2], e, 9, rng) for e in range(9)]
    assert got == [4, 4, 4, 8, 8, 8, 2, 2, 2]


def test_cosine_lr():
    cfg = tiny(lr_schedule="cosine", lr=1.0)
    assert lr_at(cfg, 0, 10) == 1.0
    assert lr_at(cfg, 5, 10) == pytest.approx(0.5)
    assert lr_at(tiny(lr=0.3), 7, 10) == 0.3


# -------------------------------------------------------------- training

def test_plain_fm_matches_reference_loop():
    """Fraction 0 with AGA off is plain flow matching, step for step."""
    cfg = tiny(consistency_fraction=0.0, codebook=replace(tiny().codebook, enabled=False),
               aga=replace(tiny().aga, enabled=False))
    ds = generate_dataset(cfg)
    res = train(cfg, ds)

    m = VelocityModel.init(2, 0, (16, 16), 3, "gelu", seed=cfg.seeds.init)
    rng = np.random.default_rng(cfg.seeds.train)
    mom, sec = np.zeros(m.n_params), np.zeros(m.n_params)
    b1, b2 = 0.9, 0.999
    k = 0
    x = ds.samples
    for _ in range(cfg.epochs):
        perm = rng.permutation(len(x))
        for b in range(len(x) // 32):
            x1 = x[perm[b * 32:(b + 1) * 32]]
            x0 = rng.standard_normal(x1.shape)
            t = rng.random(len(x1))
            xt = (1 - t)[:, None] * x0 + t[:, None] * x1
            out = m.forward(xt, None, t, np.zeros(len(t)))
            g = ad.backward(ad.mean(ad.sum(ad.square(out - (x1 - x0)), axis=1)))
            k += 1
            mom = b1 * mom + (1 - b1) * g
            sec = b2 * sec + (1 - b2) * g * g
            mh, vh = mom / (1 - b1 ** k), sec / (1 - b2 ** k)
            m.params = m.params - 1e-3 * mh / (np.sqrt(vh) + 1e-8)
    assert res.model.params.tobytes() == m.params.tobytes()
    assert {r[9] for r in res.rows} == {"sum"}
    assert all(r[3] == 0.0 for r in res.rows)


def test_training_is_deterministic(tmp_path):
    cfg = tiny()
    ds = generate_dataset(cfg)
    a = train(cfg, ds, tmp_path / "a.csv")
    b = train(cfg, ds, tmp_path / "b.csv")
    assert Checkpoint.from_result(a).to_bytes() == Checkpoint.from_result(b).to_bytes()
    la = [line.rsplit(",", 1)[0] for line in (tmp_path / "a.csv").read_text().splitlines()]
    lb = [line.rsplit(",", 1)[0] for line in (tmp_path / "b.csv").read_text().splitlines()]
    assert la == lb and len(la) == 1 + 3 * 4


def test_seed_changes_result():
    cfg = tiny()
    ds = generate_dataset(cfg)
    a = train(cfg, ds)
    b = train(replace(cfg, seeds=replace(cfg.seeds, train=1)), ds)
    assert not np.array_equal(a.model.params, b.model.params)


def test_branches_recorded():
    res = train(tiny(epochs=4), generate_dataset(tiny()))
    branches = [r[9] for r in res.rows]
    n_start = res.config.aga.n_start
    assert n_start == len(res.rows) // 10
    # the zero-initialised output layer makes the first consistency gradient vanish
    assert set(branches[:n_start]) <= {"warmup", "degenerate"}
    assert set(branches[n_start:]) <= {"aga", "fallback", "degenerate"}
    assert all(0 < r[5] <= 1 for r in res.rows)


def test_losses_decrease():
    cfg = tiny(epochs=30, n_samples=256, lr=3e-3)
    res = train(cfg, generate_dataset(cfg))
    first = np.mean([r[2] for r in res.rows[:24]])
    last = np.mean([r[2] for r in res.rows[-24:]])
    assert last < 0.9 * first


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_numerical_error():
    cfg = tiny(optimizer="sgd-momentum", lr=1e200, aga=replace(tiny().aga, enabled=False))
    with pytest.raises(NumericalError) as info:
        train(cfg, generate_dataset(cfg))
    assert np.all(np.isfinite(info.value.params))


def test_reach_training_runs():
    cfg = tiny(task="reach", episodes=4, epochs=1)
    ds = generate_dataset(cfg)
    res = train(cfg, ds)
    assert res.action_scale == 0.1
    rep = evaluate(Checkpoint.from_result(res), "reach", [1, 2], episodes=4)
    assert [r["nfe"] for r in rep["results"]] == [1, 2]
    assert all(0 <= r["success_rate"] <= 1 for r in rep["results"])


def test_task_mismatch_rejected():
    cfg = tiny()
    ds = generate_dataset(tiny(task="reach", episodes=2))
    with pytest.raises(ConfigError):
        train(cfg, ds)


# ----------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    cfg = tiny(epochs=1)
    ck = Checkpoint.from_result(train(cfg, generate_dataset(cfg)))
    ck.save(tmp_path / "m.ckpt")
    back = Checkpoint.load(tmp_path / "m.ckpt")
    assert back.to_bytes() == ck.to_bytes()
    assert back.config == ck.config
    assert back.aga.c == ck.aga.c
    x = np.ones((3, 2))
    assert back.model.evaluate(x, None, 0.5, 0.25).tobytes() == ck.model.evaluate(x, None, 0.5, 0.25).tobytes()


def test_write_metrics(tmp_path):
    cfg = tiny(epochs=1)
    res = train(cfg, generate_dataset(cfg))
    write_metrics(res.rows, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0].startswith("step,epoch,loss_fm,loss_mc,alpha1,c")
    assert len(lines) == 1 + len(res.rows)


# ------------------------------------------------------------ evaluation

def test_energy_distance_identical_sets_zero():
    x = np.random.default_rng(0).standard_normal((50, 2))
    assert energy_distance(x, x) == pytest.approx(0.0, abs=1e-12)


def test_energy_distance_point_masses():
    a = np.zeros((5, 2))
    b = np.tile([2.0, 0.0], (7, 1))
    assert energy_distance(a, b) == pytest.approx(4.0, rel=1e-14)


def test_energy_distance_brute_force():
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((30, 3)), rng.standard_normal((20, 3)) + 0.5

    def mean_dist(a, b):
        return np.mean([[math.dist(p, q) for q in b] for p in a])

    expect = 2 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y)
    assert energy_distance(x, y) == pytest.approx(expect, rel=1e-12)


def test_evaluate_report():
    cfg = tiny(epochs=1)
    ck = Checkpoint.from_result(train(cfg, generate_dataset(cfg)))
    rep = evaluate(ck, cfg.task, [1, 4], n_samples=200)
    assert rep["metric"] == "energy_distance"
    assert [r["nfe"] for r in rep["results"]] == [1, 4]
    text = report_csv(rep)
    assert text.splitlines()[0] == "task,nfe,energy_distance"
    assert evaluate(ck, cfg.task, [1, 4], n_samples=200) == rep
    with pytest.raises(ConfigError):
        evaluate(ck, "two-moons", [1])
    with pytest.raises(ConfigError):
        evaluate(ck, cfg.task, [0])


# -------------------------------------------------------------- ablation

def test_ablation_table():
    cfg = tiny(epochs=1, n_samples=64)
    table = ablate(cfg, "aga-onoff", seeds=(0, 1), n_samples=64)
    assert table["grid"] == ["on", "off"]
    assert all(len(v) == 2 for v in table["raw"].values())
    lines = ablation_csv(table).splitlines()
    assert lines[0] == "task,on,off"
    assert lines[1].startswith("gauss-mixture-8,") and "±" in lines[1]


def test_nfe_axis_trains_once_per_seed():
    cfg = tiny(epochs=1, n_samples=64)
    table = ablate(cfg, "nfe", seeds=(0,), n_samples=64)
    assert table["grid"] == [str(n) for n in ABLATION_AXES["nfe"]]


def test_unknown_axis_rejected():
    with pytest.raises(ConfigError):
        ablate(tiny(), "width")
