"""Step-conditioned velocity network ``v(x_t, o, t, d)``.

A plain MLP over ``[x_t, o, emb(t), emb(d)]``.  Time and step size share one
sinusoidal embedding; ``d = 0`` (instantaneous velocity) lands on the
zero-phase point ``sin = 0, cos = 1`` and is distinct from every positive
dyadic step.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad

ACTIVATIONS = {"gelu": ad.gelu, "tanh": ad.tanh}


def embed_scalar(s: np.ndarray, n_freq: int) -> np.ndarray:
    """Features ``[s, sin(pi 2^k s), cos(pi 2^k s)]`` for k < n_freq; shape (B, 1 + 2 n_freq)."""
    s = np.asarray(s, dtype=np.float64).reshape(-1, 1)
    w = np.pi * 2.0 ** np.arange(n_freq)
    return np.concatenate([s, np.sin(s * w), np.cos(s * w)], axis=1)


@dataclass
class VelocityModel:
    x_dim: int
    cond_dim: int = 0
    hidden: tuple[int, ...] = (128, 128, 128)
    n_freq: int = 6
    activation: str = "gelu"
    params: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.layout = _layout(self.in_dim, self.hidden, self.x_dim)
        if self.params is None:
            self.params = np.zeros(self.layout.size)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.layout.size,):
            raise ValueError(f"expected {self.layout.size} parameters, got {self.params.shape}")

    @property
    def in_dim(self) -> int:
        return self.x_dim + self.cond_dim + 2 * (1 + 2 * self.n_freq)

    @property
    def n_params(self) -> int:
        return self.layout.size

    @classmethod
    def init(cls, x_dim: int, cond_dim: int = 0, hidden=(128, 128, 128), n_freq: int = 6,
             activation: str = "gelu", seed: int = 0) -> "VelocityModel":
        """Fan-in scaled Gaussian weights, zero biases, zero output layer."""
        model = cls(x_dim, cond_dim, tuple(hidden), n_freq, activation)
        rng = np.random.default_rng(seed)
        arrays = {}
        widths = [model.in_dim, *model.hidden]
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            arrays[f"W{i}"] = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            arrays[f"b{i}"] = np.zeros(fan_out)
        last = len(model.hidden)
        arrays[f"W{last}"] = np.zeros((widths[-1], x_dim))
        arrays[f"b{last}"] = np.zeros(x_dim)
        model.params = model.layout.flatten(arrays)
        return model

    def architecture(self) -> dict:
        return {"x_dim": self.x_dim, "cond_dim": self.cond_dim, "hidden": list(self.hidden),
                "n_freq": self.n_freq, "activation": self.activation}

    def with_params(self, params: np.ndarray) -> "VelocityModel":
        return replace(self, params=np.array(params, dtype=np.float64))

    def snapshot(self) -> "VelocityModel":
        return self.with_params(self.params.copy())

    # ------------------------------------------------------------------ eval

    def features(self, x, o, t, d) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.ndim != 2 or x.shape[1] != self.x_dim:
            raise ValueError(f"x_t must have trailing dimension {self.x_dim}, got {np.shape(x)}")
        B = x.shape[0]
        t = _check_unit("t", t, B)
        d = _check_unit("d", d, B)
        parts = [x]
        if self.cond_dim:
            if o is None:
                raise ValueError("model is conditional; observation o is required")
            o = np.asarray(o, dtype=np.float64)
            o = np.broadcast_to(o.reshape(-1, self.cond_dim), (B, self.cond_dim))
            parts.append(o)
        elif o is not None and np.size(o):
            raise ValueError("model is unconditional; got an observation")
        parts += [embed_scalar(t, self.n_freq), embed_scalar(d, self.n_freq)]
        return np.concatenate(parts, axis=1), single

    def graph(self, leaves: dict, h) -> ad.Tensor:
        act = ACTIVATIONS[self.activation]
        n = len(self.hidden)
        for i in range(n):
            h = act(h @ leaves[f"W{i}"] + leaves[f"b{i}"])
        return h @ leaves[f"W{n}"] + leaves[f"b{n}"]

    def forward(self, x, o, t, d, record: bool = True) -> ad.Tensor:
        """Batched forward on a fresh tape; output shape (B, x_dim)."""
        feats, _ = self.features(x, o, t, d)
        return ad.forward(self.graph, (feats,), self.params, self.layout, record=record)

    def evaluate(self, x, o=None, t=0.0, d=0.0) -> np.ndarray:
        """Velocity at ``x`` without recording; keeps a 1-D input 1-D."""
        feats, single = self.features(x, o, t, d)
        out = ad.forward(self.graph, (feats,), self.params, self.layout, record=False).value
        return out[0] if single else out

    __call__ = evaluate


def _layout(in_dim: int, hidden: tuple[int, ...], out_dim: int) -> ad.ParamLayout:
    widths = [in_dim, *hidden, out_dim]
    entries = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        entries += [(f"W{i}", (a, b)), (f"b{i}", (b,))]
    return ad.ParamLayout(tuple(entries))


def _check_unit(name: str, v, B: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim > 1 or (v.ndim == 1 and v.shape[0] not in (1, B)):
        raise ValueError(f"{name} must be a scalar or length-{B} vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)) or np.any(v < 0.0) or np.any(v > 1.0):
        raise ValueError(f"{name} must lie in [0, 1]")
    return np.broadcast_to(v, (B,))
