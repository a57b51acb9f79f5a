"""Multi-step consistency flow matching: targets, losses and sampling.

Conventions: ``x_t = (1 - t) x0 + t x1`` with noise at t=0 and data at t=1.
A velocity *field* is anything callable as ``field(x, o, t, d)`` on batched
``x`` of shape (B, D) with per-row or scalar ``t`` and ``d``; a
:class:`~mscfm.velocity.VelocityModel` qualifies, as do the analytic fields
used in tests.  ``d = 0`` asks for the instantaneous velocity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

MAX_DYADIC_LEVEL = 7  # smallest consistency step is 2**-7


@dataclass(frozen=True)
class InterpolationPoint:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    v_true: np.ndarray


def interpolate(x0, x1, t) -> InterpolationPoint:
    """Point on the straight path from noise ``x0`` to data ``x1``.

    ``t`` may be a scalar or one value per row of a batch.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"x0 shape {x0.shape} != x1 shape {x1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    tb = t.reshape(t.shape + (1,) * (x0.ndim - t.ndim)) if t.ndim else t
    x_t = (1.0 - tb) * x0 + tb * x1
    return InterpolationPoint(x0, x1, t, x_t, x1 - x0)


class Codebook:
    """Fixed table of K standard-normal noise vectors."""

    def __init__(self, size: int, dim: int, seed: int = 0):
        if size < 1 or dim < 1:
            raise ValueError("codebook size and dim must be positive")
        self.seed = seed
        table = np.random.default_rng(seed).standard_normal((size, dim))
        table.setflags(write=False)
        self.table = table

    @property
    def size(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.table[rng.integers(0, self.size, size=n)]


def draw_noise(codebook: Codebook | None, rng: np.random.Generator, n: int, dim: int | None = None) -> np.ndarray:
    """``n`` starting noises: codebook rows if a codebook is given, else fresh N(0, I)."""
    if codebook is not None:
        if dim is not None and dim != codebook.dim:
            raise ValueError(f"codebook dim {codebook.dim} != requested {dim}")
        return codebook.draw(rng, n)
    if dim is None:
        raise ValueError("dim is required without a codebook")
    return rng.standard_normal((n, dim))


# ------------------------------------------------------------------ batches

@dataclass
class ConsistencyBatch:
    """One training batch split into flow-matching and consistency rows."""

    fm: InterpolationPoint
    fm_o: np.ndarray | None
    cons_xt: np.ndarray
    cons_o: np.ndarray | None
    cons_t: np.ndarray
    cons_d: np.ndarray
    n: int
    fraction: float

    @property
    def size(self) -> int:
        return len(self.fm.x_t) + len(self.cons_xt)


def sample_step_grid(rng: np.random.Generator, n: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Dyadic base steps ``d`` with ``n d <= 1`` and start times on the d-grid.

    ``d = 2**-j`` with j uniform over admissible levels; ``t`` uniform over
    multiples of ``d`` in ``[0, 1 - n d]`` so the rollout stays inside [0, 1].
    """
    if n < 2:
        raise ValueError("step count n must be >= 2")
    lo = int(np.ceil(np.log2(n)))
    if lo > MAX_DYADIC_LEVEL:
        raise ValueError(f"n={n} leaves no admissible dyadic step")
    j = rng.integers(lo, MAX_DYADIC_LEVEL + 1, size=size)
    d = 2.0 ** -j.astype(np.float64)
    slots = (2 ** j) - n + 1  # number of admissible start multiples
    t = np.floor(rng.random(size) * slots) * d
    return t, d


def make_batch(x1, o, rng: np.random.Generator, *, fraction: float, n: int,
               codebook: Codebook | None = None) -> ConsistencyBatch:
    """Split ``x1`` (and its conditions ``o``) into FM rows and consistency rows.

    The first ``B - m`` rows get fresh Gaussian noise and uniform t; the last
    ``m = round(fraction * B)`` rows get codebook noise (when given) and a
    dyadic (t, d) with ``t + n d <= 1``.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    B, D = x1.shape
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    m = int(round(fraction * B))
    k = B - m
    o = None if o is None else np.asarray(o, dtype=np.float64)

    x0 = rng.standard_normal((k, D))
    t_fm = rng.random(k)
    fm = interpolate(x0, x1[:k], t_fm)

    if m:
        t, d = sample_step_grid(rng, n, m)
        if np.any(t + n * d > 1.0):
            raise ValueError("consistency rollout leaves [0, 1]")
        x0c = draw_noise(codebook, rng, m, D)
        xt = interpolate(x0c, x1[k:], t).x_t
    else:
        t = d = np.zeros(0)
        xt = np.zeros((0, D))
    return ConsistencyBatch(
        fm=fm,
        fm_o=None if o is None else o[:k],
        cons_xt=xt,
        cons_o=None if o is None else o[k:],
        cons_t=t,
        cons_d=d,
        n=n,
        fraction=m / B,
    )


# ------------------------------------------------------------------ targets

@dataclass(frozen=True)
class RolloutTargets:
    """Small-step velocities ``v_i`` (i < n) and prefix means for k = 2..n."""

    velocities: np.ndarray  # (n, B, D)
    averages: np.ndarray    # (n - 1, B, D); averages[k - 2] = mean of first k velocities
    n: int

    def target(self, k: int) -> np.ndarray:
        return self.averages[k - 2]


def rollout_targets(field, x_t, o, t, d, n: int) -> RolloutTargets:
    """Roll ``n`` Euler steps of size ``d`` from ``x_t`` and average the velocities.

    ``field`` must be a frozen snapshot; nothing here is recorded for
    differentiation, so the targets are constants w.r.t. the trained weights.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    x = np.asarray(x_t, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.any(t + n * d > 1.0):
        raise ValueError("t + n*d exceeds 1")
    db = d[:, None] if d.ndim else d
    vs = []
    for i in range(n):
        v = np.asarray(field(x, o, t + i * d, d), dtype=np.float64)
        vs.append(v)
        x = x + v * db
    vel = np.stack(vs)
    csum = np.cumsum(vel, axis=0)
    ks = np.arange(2, n + 1, dtype=np.float64).reshape(-1, *([1] * (vel.ndim - 1)))
    return RolloutTargets(vel, csum[1:] / ks, n)


# ------------------------------------------------------------------- losses

def _sq_mean(res: ad.Tensor) -> ad.Tensor:
    return ad.mean(ad.sum(ad.square(res), axis=1))


def _zero_loss(model) -> ad.Tensor:
    tape = ad.Tape()
    for name, arr in model.layout.unflatten(model.params).items():
        tape.param(name, arr)
    return tape.constant(0.0)


def _cons_rows(batch: ConsistencyBatch, targets: RolloutTargets):
    """Stack consistency rows once per k = 2..n with step k*d."""
    reps = batch.n - 1
    xt = np.tile(batch.cons_xt, (reps, 1))
    o = None if batch.cons_o is None else np.tile(batch.cons_o, (reps, 1))
    t = np.tile(batch.cons_t, reps)
    ks = np.repeat(np.arange(2, batch.n + 1, dtype=np.float64), len(batch.cons_t))
    d = ks * np.tile(batch.cons_d, reps)
    y = targets.averages.reshape(-1, batch.cons_xt.shape[1])
    return xt, o, t, d, y


def fm_loss(model, batch: ConsistencyBatch) -> ad.Tensor:
    """Mean squared error of ``v(x_t, o, t, 0)`` against ``x1 - x0``."""
    fm = batch.fm
    if len(fm.x_t) == 0:
        return _zero_loss(model)
    out = model.forward(fm.x_t, batch.fm_o, fm.t, 0.0)
    return _sq_mean(out - fm.v_true)


def mc_loss(model, batch: ConsistencyBatch, targets: RolloutTargets) -> ad.Tensor:
    """Mean over rows and k of ``||v(x_t, o, t, k d) - target_k||^2``."""
    if len(batch.cons_xt) == 0:
        return _zero_loss(model)
    xt, o, t, d, y = _cons_rows(batch, targets)
    return _sq_mean(model.forward(xt, o, t, d) - y)


def joint_losses(model, batch: ConsistencyBatch, targets: RolloutTargets | None):
    """Both losses from one forward pass on one tape.

    Returns ``(loss_fm, loss_mc)``; call :func:`~mscfm.autodiff.backward` on
    each separately to get the two gradient vectors.
    """
    fm = batch.fm
    k = len(fm.x_t)
    has_cons = len(batch.cons_xt) > 0 and targets is not None
    if not k and not has_cons:
        z = _zero_loss(model)
        return z, z
    xs, os_, ts, ds = [fm.x_t], [batch.fm_o], [fm.t], [np.zeros(k)]
    if has_cons:
        xt, o, t, d, y = _cons_rows(batch, targets)
        xs.append(xt)
        os_.append(o)
        ts.append(t)
        ds.append(d)
    o_all = None if os_[0] is None else np.concatenate(os_)
    out = model.forward(np.concatenate(xs), o_all, np.concatenate(ts), np.concatenate(ds))
    tape = out.tape
    loss_fm = _sq_mean(out[:k] - fm.v_true) if k else tape.constant(0.0)
    loss_mc = _sq_mean(out[k:] - y) if has_cons else tape.constant(0.0)
    return loss_fm, loss_mc


# ----------------------------------------------------------------- sampling

def sample(field, x0, o=None, steps: int = 1, step_conditioned: bool = True) -> np.ndarray:
    """Euler integration from t=0 to 1 with ``steps`` uniform steps of size d = 1/steps.

    Each step queries the field's average velocity for step size d; with
    ``step_conditioned=False`` it queries the instantaneous velocity (d = 0)
    instead, which is the right call for a plain flow-matching model.
    """
    if int(steps) != steps or steps < 1:
        raise ValueError("steps must be a positive integer")
    steps = int(steps)
    x = np.asarray(x0, dtype=np.float64)
    d = 1.0 / steps
    query = d if step_conditioned else 0.0
    for i in range(steps):
        x = x + np.asarray(field(x, o, i / steps, query), dtype=np.float64) * d
    return x
