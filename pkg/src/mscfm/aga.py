"""Adaptive gradient allocation between the flow-matching and consistency losses.

The update direction is ``g = a1 g1 + a2 g2`` with ``a1 + a2 = 1`` chosen so
that ``c * (g . u1) == g . u2`` where ``u_i`` are the unit gradient
directions.  ``c`` adapts to the relative descent rates of the two losses.
Early steps use PCGrad instead, and an invalid ``c`` falls back to equal
weights.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

PREV_LOSS_FLOOR = 1e-12
RATIO_CLIP = (0.1, 10.0)
C_MIN = 1e-12

BRANCHES = ("warmup", "aga", "fallback", "degenerate", "sum")


@dataclass
class GradPairStats:
    A: float
    B: float
    delta: float
    u1: np.ndarray
    u2: np.ndarray


def grad_stats(g1: np.ndarray, g2: np.ndarray) -> GradPairStats:
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    A = float(np.linalg.norm(g1))
    B = float(np.linalg.norm(g2))
    u1 = g1 / A if A > 0 else np.zeros_like(g1)
    u2 = g2 / B if B > 0 else np.zeros_like(g2)
    delta = float(np.clip(u1 @ u2, -1.0, 1.0)) if A > 0 and B > 0 else 0.0
    return GradPairStats(A, B, delta, u1, u2)


def alpha_closed_form(A, B, delta, c):
    """Mixing weights ``(a1, a2)`` that satisfy the projection ratio ``c``.

    Works elementwise on arrays.  Where the denominator
    ``A (c - delta) + B (1 - c delta)`` vanishes the weights are NaN; callers
    treat that as an invalid configuration.
    """
    A, B, delta, c = (np.asarray(v, dtype=np.float64) for v in (A, B, delta, c))
    num = B * (1.0 - c * delta)
    den = A * (c - delta) + num
    with np.errstate(divide="ignore", invalid="ignore"):
        a1 = np.where(den != 0.0, num / np.where(den != 0.0, den, 1.0), np.nan)
    a2 = 1.0 - a1
    if a1.ndim == 0:
        return float(a1), float(a2)
    return a1, a2


def c_validity(A, B, delta, c):
    """Whether ``c`` lies in the admissible region for the given gradient pair.

    For ``delta <= 0`` any positive ``c``.  For ``delta > 0`` the lower bound
    is ``delta``; the ratio ``(A delta - B) / (A - B delta)`` is an upper bound
    when ``A < B delta`` and a further lower bound when ``A > B delta``, and
    ``A / B`` is the extra lower bound on the boundary ``A == B delta``.
    Vectorised over array inputs.
    """
    A, B, delta, c = (np.asarray(v, dtype=np.float64) for v in (A, B, delta, c))
    pos = delta > 0
    lin = A - B * delta
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = (A * delta - B) / np.where(lin != 0.0, lin, 1.0)
        a_over_b = A / np.where(B != 0.0, B, 1.0)
    below = (c > delta) & (c < ratio)
    edge = c > np.maximum(delta, a_over_b)
    above = c > np.maximum(delta, ratio)
    positive = np.where(lin < 0, below, np.where(lin == 0, edge, above))
    out = np.where(pos, positive, c > 0)
    return bool(out) if out.ndim == 0 else out


@dataclass
class AgaState:
    c: float = 1.0
    beta: float = 0.9
    gamma: float = 0.1
    n_start: int = 0
    step: int = 0
    per_epoch: bool = True
    prev_loss_fm: float | None = None
    prev_loss_mc: float | None = None
    epoch_sum_fm: float = 0.0
    epoch_sum_mc: float = 0.0
    epoch_count: int = 0

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("c must be positive")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")

    @property
    def warming_up(self) -> bool:
        return self.step < self.n_start

    def end_epoch(self) -> float:
        """Fold the epoch-mean losses into ``c`` (per-epoch mode, after warm-up)."""
        if self.per_epoch and self.epoch_count and not self.warming_up:
            update_c(self, self.epoch_sum_fm / self.epoch_count,
                     self.epoch_sum_mc / self.epoch_count)
        self.epoch_sum_fm = self.epoch_sum_mc = 0.0
        self.epoch_count = 0
        return self.c

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AgaState":
        return cls(**data)


def update_c(state: AgaState, loss_fm: float, loss_mc: float) -> float:
    """Adapt ``c`` to the descent-rate ratio of the two losses, then EMA-smooth it.

    The first call only fills the previous-loss registers.  The ratio
    ``v2 / v1`` is clipped to [0.1, 10] and the result clamped to (0, 1].
    """
    loss_fm, loss_mc = float(loss_fm), float(loss_mc)
    if state.prev_loss_fm is None or state.prev_loss_mc is None:
        state.prev_loss_fm, state.prev_loss_mc = loss_fm, loss_mc
        return state.c
    v1 = loss_fm / max(state.prev_loss_fm, PREV_LOSS_FLOOR)
    v2 = loss_mc / max(state.prev_loss_mc, PREV_LOSS_FLOOR)
    ratio = v2 / max(v1, PREV_LOSS_FLOOR)
    ratio = min(max(ratio, RATIO_CLIP[0]), RATIO_CLIP[1])
    c_new = state.c * math.exp(state.gamma * (ratio - 1.0))
    c = state.beta * state.c + (1.0 - state.beta) * c_new
    state.c = min(max(c, C_MIN), 1.0)
    state.prev_loss_fm, state.prev_loss_mc = loss_fm, loss_mc
    return state.c


def pcgrad_project(g1: np.ndarray, g2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Remove each gradient's component along the other when they conflict.

    Both projections use the original (unprojected) partner gradient.
    """
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    dot = float(g1 @ g2)
    n1 = float(g1 @ g1)
    n2 = float(g2 @ g2)
    p1, p2 = g1.copy(), g2.copy()
    if dot < 0:
        if n2 > 0:
            p1 = g1 - (dot / n2) * g2
        if n1 > 0:
            p2 = g2 - (dot / n1) * g1
    return p1, p2


def combine(state: AgaState, g1: np.ndarray, g2: np.ndarray, loss_fm: float, loss_mc: float):
    """Update direction for one optimizer step, plus a diagnostics dict.

    Diagnostics keys: ``alpha1, c, delta, A, B, branch``.
    """
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    if g1.shape != g2.shape:
        raise ValueError(f"gradient shapes differ: {g1.shape} vs {g2.shape}")
    bad = [name for name, v in (("g1", g1), ("g2", g2), ("loss_fm", loss_fm), ("loss_mc", loss_mc))
           if not np.all(np.isfinite(v))]
    if bad:
        raise ValueError(f"non-finite input to gradient allocation: {', '.join(bad)}")

    st = grad_stats(g1, g2)
    diag = {"A": st.A, "B": st.B, "delta": st.delta}
    warm = state.warming_up
    state.step += 1
    state.epoch_sum_fm += float(loss_fm)
    state.epoch_sum_mc += float(loss_mc)
    state.epoch_count += 1

    if st.A == 0.0 or st.B == 0.0:
        out = g2.copy() if st.A == 0.0 else g1.copy()
        diag.update(alpha1=1.0 if st.B == 0.0 and st.A > 0 else 0.0, c=state.c, branch="degenerate")
        return out, diag

    if warm:
        p1, p2 = pcgrad_project(g1, g2)
        diag.update(alpha1=0.5, c=state.c, branch="warmup")
        return 0.5 * p1 + 0.5 * p2, diag

    if not state.per_epoch:
        update_c(state, loss_fm, loss_mc)
    a1, a2 = alpha_closed_form(st.A, st.B, st.delta, state.c)
    if c_validity(st.A, st.B, st.delta, state.c) and 0.0 < a1 < 1.0:
        diag.update(alpha1=a1, c=state.c, branch="aga")
        return a1 * g1 + a2 * g2, diag
    diag.update(alpha1=0.5, c=state.c, branch="fallback")
    return 0.5 * g1 + 0.5 * g2, diag
