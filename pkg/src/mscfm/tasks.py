"""Toy tasks: unconditional 2-D point clouds and a planar reach-around-obstacle
imitation problem with a bimodal scripted expert."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fileio import Dataset
from .flow import draw_noise, sample

GENERATIVE_TASKS = ("two-moons", "gauss-mixture-8", "swiss-roll")
REACH_TASK = "reach"
TASKS = GENERATIVE_TASKS + (REACH_TASK,)

GMM_RADIUS = 2.0
GMM_STD = 0.2


def gmm_centers() -> np.ndarray:
    ang = 2 * np.pi * np.arange(8) / 8
    return GMM_RADIUS * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _two_moons(rng, n):
    # Moons scaled by 0.9 reach radius ~1.37; noise is capped at 0.1 so every
    # sample stays inside radius 1.5.
    upper = rng.random(n) < 0.5
    theta = np.pi * rng.random(n)
    x = np.where(upper, np.cos(theta) - 0.5, 0.5 - np.cos(theta))
    y = np.where(upper, np.sin(theta) - 0.25, 0.25 - np.sin(theta))
    pts = 0.9 * np.stack([x, y], axis=1)
    noise = 0.05 * rng.standard_normal((n, 2))
    norm = np.linalg.norm(noise, axis=1, keepdims=True)
    noise *= np.minimum(1.0, 0.1 / np.maximum(norm, 1e-300))
    return pts + noise


def _gauss_mixture_8(rng, n):
    k = rng.integers(0, 8, size=n)
    return gmm_centers()[k] + GMM_STD * rng.standard_normal((n, 2))


def _swiss_roll(rng, n):
    theta = 1.5 * np.pi * (1 + 2 * rng.random(n))
    pts = np.stack([theta * np.cos(theta), theta * np.sin(theta)], axis=1) / 10.0
    return pts + 0.02 * rng.standard_normal((n, 2))


_GENERATORS = {
    "two-moons": _two_moons,
    "gauss-mixture-8": _gauss_mixture_8,
    "swiss-roll": _swiss_roll,
}


def make_dataset(name: str, n: int, seed: int) -> Dataset:
    """Unconditional 2-D dataset.

    two-moons: two interleaved half circles (scale 0.9), noise 0.05 capped at 0.1.
    gauss-mixture-8: equal-weight isotropic Gaussians (std 0.2) on a radius-2 circle.
    swiss-roll: 2-D spiral ``theta (cos, sin)(theta) / 10``, theta in [1.5pi, 4.5pi], noise 0.02.
    """
    if name not in _GENERATORS:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(_GENERATORS)}")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return Dataset(_GENERATORS[name](rng, n), None, {"name": name, "seed": seed, "n": n})


# ------------------------------------------------------------------ reach

def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, 1e-12)


def _perp(v):
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def _segment_distance(p, a, b):
    """Distance from point(s) p to segment(s) a-b."""
    ab = b - a
    denom = np.maximum(np.sum(ab * ab, axis=-1), 1e-24)
    s = np.clip(np.sum((p - a) * ab, axis=-1) / denom, 0.0, 1.0)
    return np.linalg.norm(a + s[..., None] * ab - p, axis=-1)


@dataclass
class ReachState:
    agent: np.ndarray   # (2,)
    goal: np.ndarray
    center: np.ndarray


@dataclass
class ReachEnv:
    """Point agent moving with velocity commands toward a goal past a disk obstacle.

    Observation is ``(agent, goal, obstacle center)``.  Touching the disk
    ends the episode as a failure; coming within ``success_radius`` of the
    goal ends it as a success.
    """

    obstacle_radius: float = 0.15
    horizon: int = 50
    success_radius: float = 0.05
    max_speed: float = 0.1
    with_obstacle: bool = True
    chunk: int = 8
    execute: int = 4

    obs_dim = 6

    @property
    def action_dim(self) -> int:
        return 2 * self.chunk

    def reset(self, rng: np.random.Generator) -> ReachState:
        while True:
            start = rng.uniform(-0.9, 0.9, size=2)
            ang = rng.uniform(0, 2 * np.pi)
            dist = rng.uniform(1.0, 1.5)
            goal = start + dist * np.array([np.cos(ang), np.sin(ang)])
            along = rng.uniform(0.45, 0.55)
            lateral = rng.uniform(-0.03, 0.03)
            u = (goal - start) / dist
            center = start + along * dist * u + lateral * _perp(u)
            if np.all(np.abs(goal) <= 0.9) and np.all(np.abs(center) <= 0.7):
                break
        return ReachState(start, goal, center)

    @property
    def radius(self) -> float:
        return self.obstacle_radius if self.with_obstacle else 0.0

    def observe(self, s: ReachState) -> np.ndarray:
        return np.concatenate([s.agent, s.goal, s.center])

    def clip_action(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        n = np.linalg.norm(a, axis=-1, keepdims=True)
        return a * np.minimum(1.0, self.max_speed / np.maximum(n, 1e-300))

    def move(self, agent: np.ndarray, a: np.ndarray) -> np.ndarray:
        return np.clip(agent + self.clip_action(a), -1.0, 1.0)

    def succeeded(self, s: ReachState) -> bool:
        return bool(np.linalg.norm(s.agent - s.goal) <= self.success_radius)

    def collided(self, s: ReachState) -> bool:
        return self.with_obstacle and bool(np.linalg.norm(s.agent - s.center) < self.obstacle_radius)


@dataclass
class ExpertPolicy:
    """Proportional controller that detours around the obstacle on one side.

    While the straight segment to the goal passes within ``radius + margin``
    of the obstacle, it heads at full speed for a waypoint offset
    ``detour * radius`` from the obstacle center, perpendicular to the
    center-to-goal direction on the episode's side (+1 left, -1 right).
    """

    env: ReachEnv
    gain: float = 0.5
    detour: float = 2.5
    margin: float = 0.08
    side: int = 1

    def reset(self, rng: np.random.Generator) -> int:
        self.side = 1 if rng.random() < 0.5 else -1
        return self.side

    def waypoint(self, goal, center) -> np.ndarray:
        return center + self.side * self.detour * self.env.obstacle_radius * _perp(_unit(goal - center))

    def blocked(self, agent, goal, center) -> bool:
        if not self.env.with_obstacle:
            return False
        return bool(_segment_distance(center, agent, goal) < self.env.obstacle_radius + self.margin)

    def action(self, agent, goal, center) -> np.ndarray:
        if self.blocked(agent, goal, center):
            return self.env.max_speed * _unit(self.waypoint(goal, center) - agent)
        return self.env.clip_action(self.gain * (goal - agent))

    def act(self, obs: np.ndarray, rng=None) -> np.ndarray:
        """Next ``chunk`` commands from observation(s); shape (..., chunk, 2)."""
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim == 2:
            return np.stack([self.act(o) for o in obs])
        agent, goal, center = obs[:2].copy(), obs[2:4], obs[4:6]
        out = []
        for _ in range(self.env.chunk):
            a = self.action(agent, goal, center)
            out.append(a)
            agent = self.env.move(agent, a)
        return np.array(out)


def collect_demos(env: ReachEnv, expert: ExpertPolicy, episodes: int, seed: int) -> Dataset:
    """Roll the expert and keep (observation, next-chunk) pairs of successful episodes.

    Samples are raw commands flattened to ``2 * chunk`` values; metadata lists
    each kept episode's detour side and each sample's episode index.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    obs_rows, act_rows, ep_index, sides = [], [], [], []
    kept = 0
    for e in range(episodes):
        rng = np.random.default_rng([seed, e])
        s = env.reset(rng)
        side = expert.reset(rng)
        o_ep, a_ep = [], []
        ok = False
        for _ in range(env.horizon):
            o = env.observe(s)
            chunk = expert.act(o)
            o_ep.append(o)
            a_ep.append(chunk.ravel())
            s = ReachState(env.move(s.agent, chunk[0]), s.goal, s.center)
            if env.collided(s):
                break
            if env.succeeded(s):
                ok = True
                break
        if ok:
            obs_rows += o_ep
            act_rows += a_ep
            ep_index += [kept] * len(o_ep)
            sides.append(side)
            kept += 1
    if not kept:
        raise RuntimeError("expert produced no successful episode")
    meta = {
        "name": REACH_TASK, "seed": seed, "episodes": episodes, "kept_episodes": kept,
        "sides": sides, "episode_index": ep_index, "chunk": env.chunk,
        "action_scale": env.max_speed, "with_obstacle": env.with_obstacle,
    }
    return Dataset(np.array(act_rows), np.array(obs_rows), meta)


class FlowPolicy:
    """Action-chunk sampler around a trained conditional velocity model."""

    def __init__(self, model, env: ReachEnv, steps: int, codebook=None, action_scale: float | None = None,
                 step_conditioned: bool = True):
        self.step_conditioned = step_conditioned
        self.model = model
        self.env = env
        self.steps = steps
        self.codebook = codebook
        self.action_scale = env.max_speed if action_scale is None else action_scale

    def act(self, obs, rngs) -> np.ndarray:
        obs = np.atleast_2d(obs)
        x0 = np.concatenate([draw_noise(self.codebook, r, 1, self.model.x_dim) for r in rngs])
        x1 = sample(self.model, x0, obs, self.steps, self.step_conditioned)
        return x1.reshape(len(obs), self.env.chunk, 2) * self.action_scale


def rollout_policy(env: ReachEnv, policy, episodes: int, seed: int) -> float:
    """Success rate of ``policy`` over seeded episodes, re-planning every ``env.execute`` steps.

    ``policy`` is either a :class:`FlowPolicy`-like object whose ``act(obs, rngs)``
    takes one generator per row, or an :class:`ExpertPolicy` (its side is
    re-drawn per episode).  Episodes run in lockstep; each owns its generator,
    so results do not depend on batching.
    """
    rngs = [np.random.default_rng([seed, e]) for e in range(episodes)]
    states = [env.reset(r) for r in rngs]
    expert = isinstance(policy, ExpertPolicy)
    sides = [policy.reset(r) for r in rngs] if expert else None
    done = np.zeros(episodes, dtype=bool)
    success = np.zeros(episodes, dtype=bool)
    t = 0
    while t < env.horizon and not done.all():
        active = np.flatnonzero(~done)
        obs = np.stack([env.observe(states[i]) for i in active])
        if expert:
            chunks = []
            for i, o in zip(active, obs):
                policy.side = sides[i]
                chunks.append(policy.act(o))
            chunks = np.stack(chunks)
        else:
            chunks = policy.act(obs, [rngs[i] for i in active])
        for j, i in enumerate(active):
            s = states[i]
            for k in range(min(env.execute, env.horizon - t)):
                s = ReachState(env.move(s.agent, chunks[j, k]), s.goal, s.center)
                if env.collided(s):
                    done[i] = True
                    break
                if env.succeeded(s):
                    done[i] = success[i] = True
                    break
            states[i] = s
        t += env.execute
    return float(success.mean())
