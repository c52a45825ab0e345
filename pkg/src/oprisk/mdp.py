"""Finite-horizon tabular MDPs, stationary policies, trajectory sampling and
importance weights."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _rng
from .errors import (
    CoverageViolation,
    DatasetFormatError,
    InvalidMdp,
    InvalidPolicy,
    OutOfRangeLambda,
    ZeroBehaviorProbability,
)

SCHEMA = "oprisk-dataset-v1"
_SUM_TOL = 1e-12


def _readonly(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite MDP with finite-support rewards.

    Rewards are stored against a global sorted list of atoms
    ``reward_values``; ``reward_probs[s, a, s2, k]`` is the probability of
    atom ``k`` on the transition ``s --a--> s2``.  Rewards that do not depend
    on the next state are the special case built by :meth:`from_sa_rewards`.
    """

    transition: np.ndarray
    reward_values: np.ndarray
    reward_probs: np.ndarray
    gamma: float
    start_dist: np.ndarray
    horizon: int
    name: str = "mdp"

    def __post_init__(self):
        P = _readonly(self.transition)
        vals = _readonly(self.reward_values)
        R = _readonly(self.reward_probs)
        mu = _readonly(self.start_dist)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward_values", vals)
        object.__setattr__(self, "reward_probs", R)
        object.__setattr__(self, "start_dist", mu)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "horizon", int(self.horizon))

        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise InvalidMdp(f"transition must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if S < 1 or A < 1:
            raise InvalidMdp("need at least one state and one action")
        if np.any(P < 0) or np.any(np.abs(P.sum(-1) - 1) > _SUM_TOL):
            raise InvalidMdp("transition rows must be nonnegative and sum to 1")
        if vals.ndim != 1 or vals.size < 1 or np.any(np.diff(vals) <= 0):
            raise InvalidMdp("reward_values must be strictly increasing")
        if not np.all(np.isfinite(vals)):
            raise InvalidMdp("reward atoms must be finite")
        if R.shape != (S, A, S, vals.size):
            raise InvalidMdp(f"reward_probs must have shape {(S, A, S, vals.size)}, got {R.shape}")
        if np.any(R < 0) or np.any(np.abs(R.sum(-1) - 1) > _SUM_TOL):
            raise InvalidMdp("reward distributions must be nonnegative and sum to 1")
        if mu.shape != (S,) or np.any(mu < 0) or abs(mu.sum() - 1) > _SUM_TOL:
            raise InvalidMdp("start_dist must be a distribution over states")
        if not 0 < self.gamma <= 1:
            raise InvalidMdp("gamma must lie in (0, 1]")
        if self.horizon < 1:
            raise InvalidMdp("horizon must be >= 1")

    @classmethod
    def from_sa_rewards(cls, transition, reward_values, reward_probs, gamma, start_dist, horizon, name="mdp"):
        """Build from rewards that depend only on ``(s, a)``; shape (S, A, K)."""
        P = np.asarray(transition, dtype=float)
        R = np.asarray(reward_probs, dtype=float)
        R4 = np.broadcast_to(R[:, :, None, :], (P.shape[0], P.shape[1], P.shape[2], R.shape[-1]))
        return cls(P, reward_values, R4, gamma, start_dist, horizon, name)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def with_horizon(self, horizon: int) -> "TabularMdp":
        return TabularMdp(self.transition, self.reward_values, self.reward_probs,
                          self.gamma, self.start_dist, horizon, self.name)

    def reward_dist(self, s: int, a: int) -> tuple[np.ndarray, np.ndarray]:
        """Marginal reward distribution of ``(s, a)`` as (atoms, probs)."""
        p = self.transition[s, a] @ self.reward_probs[s, a]
        keep = p > 0
        return self.reward_values[keep], p[keep]

    def _used_atoms(self) -> np.ndarray:
        used = (self.transition[..., None] * self.reward_probs).reshape(-1, self.reward_values.size).max(0) > 0
        return self.reward_values[used]

    @property
    def r_min(self) -> float:
        return float(self._used_atoms().min())

    @property
    def r_max(self) -> float:
        return float(self._used_atoms().max())

    @property
    def return_bounds(self) -> tuple[float, float]:
        disc = self.gamma ** np.arange(self.horizon)
        return float(self.r_min * disc.sum()), float(self.r_max * disc.sum())

    @property
    def return_width(self) -> float:
        lo, hi = self.return_bounds
        return hi - lo


@dataclass(frozen=True, eq=False)
class Policy:
    """Stationary policy, ``probs[s, a] = pi(a | s)``."""

    probs: np.ndarray

    def __post_init__(self):
        p = _readonly(self.probs)
        if p.ndim != 2:
            raise InvalidPolicy("policy table must be 2-D (states x actions)")
        if np.any(p < 0) or np.any(np.abs(p.sum(1) - 1) > _SUM_TOL):
            raise InvalidPolicy("policy rows must be nonnegative and sum to 1")
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions: Sequence[int], n_actions: int) -> "Policy":
        actions = np.asarray(actions, dtype=int)
        p = np.zeros((actions.size, n_actions))
        p[np.arange(actions.size), actions] = 1.0
        return cls(p)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    def key(self) -> bytes:
        return self.probs.tobytes()


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    cum_weights: np.ndarray
    partial_returns: np.ndarray

    @property
    def horizon(self) -> int:
        return self.actions.size

    @property
    def ret(self) -> float:
        return float(self.partial_returns[-1])


def step_weight(pi: Policy, beta: Policy, s: int, a: int) -> float:
    b = beta.probs[s, a]
    if b <= 0:
        raise ZeroBehaviorProbability(f"beta({a}|{s}) = 0")
    return float(pi.probs[s, a] / b)


def uncovered_pairs(pi: Policy, beta: Policy, states: Iterable[int] | None = None) -> list[tuple[int, int]]:
    states = range(pi.n_states) if states is None else states
    bad = []
    for s in states:
        for a in np.flatnonzero((pi.probs[s] > 0) & (beta.probs[s] <= 0)):
            bad.append((int(s), int(a)))
    return bad


def check_coverage(pi: Policy, beta: Policy, states: Iterable[int] | None = None) -> None:
    bad = uncovered_pairs(pi, beta, states)
    if bad:
        raise CoverageViolation(bad)


def max_weight(pi: Policy, beta: Policy) -> float:
    """Largest single-step importance ratio over all supported (s, a)."""
    check_coverage(pi, beta)
    mask = beta.probs > 0
    return float((pi.probs[mask] / beta.probs[mask]).max())


def mixture_policy(pi: Policy, lam: float) -> Policy:
    """``lam * pi + (1 - lam) * uniform``, row by row."""
    if not 0.0 <= lam <= 1.0:
        raise OutOfRangeLambda(f"lambda must lie in [0, 1], got {lam}")
    unif = 1.0 / pi.n_actions
    return Policy(lam * pi.probs + (1.0 - lam) * unif)


class Dataset:
    """``n`` fixed-length trajectories collected by a behavior policy.

    Trajectory data live in dense arrays.  Importance weights depend on the
    target policy, so they are computed on first request for a given target
    and cached.
    """

    def __init__(self, states, actions, rewards, behavior: Policy, gamma: float = 1.0,
                 env_id: str = "", seed: int = 0):
        self.states = _readonly(states, dtype=np.int64)
        self.actions = _readonly(actions, dtype=np.int64)
        self.rewards = _readonly(rewards)
        self.behavior = behavior
        self.gamma = float(gamma)
        self.env_id = env_id
        self.seed = int(seed)
        n, H = self.actions.shape
        if self.states.shape != (n, H + 1) or self.rewards.shape != (n, H):
            raise InvalidMdp("inconsistent trajectory array shapes")
        if n > 0:
            bp = behavior.probs[self.states[:, :-1], self.actions]
            if np.any(bp <= 0):
                raise ZeroBehaviorProbability("a recorded action has zero behavior probability")
            self.behavior_probs = _readonly(bp)
        else:
            self.behavior_probs = _readonly(np.zeros((0, H)))
        disc = self.gamma ** np.arange(H)
        z = np.zeros((n, H + 1))
        for h in range(H):
            z[:, h + 1] = z[:, h] + disc[h] * self.rewards[:, h]
        self.partial_returns = _readonly(z)
        self._weight_cache: dict[bytes, np.ndarray] = {}

    @property
    def n(self) -> int:
        return self.actions.shape[0]

    def __len__(self) -> int:
        return self.n

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def returns(self) -> np.ndarray:
        return self.partial_returns[:, -1]

    def check_coverage(self, pi: Policy) -> None:
        check_coverage(pi, self.behavior, np.unique(self.states[:, :-1]))

    def step_weights(self, pi: Policy) -> np.ndarray:
        return pi.probs[self.states[:, :-1], self.actions] / self.behavior_probs

    def cum_weights(self, pi: Policy) -> np.ndarray:
        """(n, H+1) array with ``w_0 = 1`` and ``w_h = w_{h-1} * w(a_h, s_h)``."""
        key = pi.key()
        cached = self._weight_cache.get(key)
        if cached is None:
            self.check_coverage(pi)
            sw = self.step_weights(pi)
            cw = np.ones((self.n, self.horizon + 1))
            for h in range(self.horizon):
                cw[:, h + 1] = cw[:, h] * sw[:, h]
            cached = _readonly(cw)
            self._weight_cache[key] = cached
        return cached

    def trajectory(self, i: int, pi: Policy | None = None) -> Trajectory:
        cw = self.cum_weights(pi if pi is not None else self.behavior)
        return Trajectory(self.states[i], self.actions[i], self.rewards[i], cw[i], self.partial_returns[i])

    def trajectories(self, pi: Policy | None = None) -> list[Trajectory]:
        return [self.trajectory(i, pi) for i in range(self.n)]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.states[idx], self.actions[idx], self.rewards[idx], self.behavior,
                       self.gamma, self.env_id, self.seed)


def _draw(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row; ``cum`` rows end at exactly 1."""
    return np.minimum((u[:, None] >= cum).sum(1), cum.shape[1] - 1)


def _cumulative(p: np.ndarray) -> np.ndarray:
    c = np.cumsum(p, axis=-1)
    return c / c[..., -1:]


def sample_dataset(mdp: TabularMdp, beta: Policy, n: int, seed: int, env_id: str | None = None) -> Dataset:
    """Roll out ``n`` trajectories of ``mdp.horizon`` steps under ``beta``.

    Trajectory ``i`` is a deterministic function of ``(seed, i)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    H = mdp.horizon
    keys = _rng.stream_keys(seed, np.arange(n, dtype=np.uint64))
    cum_mu = _cumulative(mdp.start_dist)[None, :]
    cum_beta = _cumulative(beta.probs)
    cum_P = _cumulative(mdp.transition)
    cum_R = _cumulative(mdp.reward_probs)

    states = np.zeros((n, H + 1), dtype=np.int64)
    actions = np.zeros((n, H), dtype=np.int64)
    rewards = np.zeros((n, H))
    states[:, 0] = _draw(np.broadcast_to(cum_mu, (n, mdp.n_states)), _rng.uniforms(keys, 0))
    for h in range(H):
        s = states[:, h]
        a = _draw(cum_beta[s], _rng.uniforms(keys, 3 * h + 1))
        s2 = _draw(cum_P[s, a], _rng.uniforms(keys, 3 * h + 2))
        k = _draw(cum_R[s, a, s2], _rng.uniforms(keys, 3 * h + 3))
        actions[:, h] = a
        states[:, h + 1] = s2
        rewards[:, h] = mdp.reward_values[k]
    return Dataset(states, actions, rewards, beta, mdp.gamma, env_id if env_id is not None else mdp.name, seed)


# -- JSON Lines persistence ---------------------------------------------------

def save_dataset(data: Dataset, path: str | Path, target: Policy | None = None) -> None:
    """Write ``data`` as JSON Lines.

    With ``target`` given, the header also stores the target table and each
    line its cumulative weights under ``"w"``, which loaders verify.
    """
    header = {
        "schema": SCHEMA,
        "env_id": data.env_id,
        "horizon": data.horizon,
        "gamma": data.gamma,
        "seed": data.seed,
        "behavior": data.behavior.probs.tolist(),
    }
    cw = None
    if target is not None:
        header["target"] = target.probs.tolist()
        cw = data.cum_weights(target)
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for i in range(data.n):
            rec = {"s": data.states[i].tolist(), "a": data.actions[i].tolist(), "r": data.rewards[i].tolist()}
            if cw is not None:
                rec["w"] = cw[i].tolist()
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError("empty file", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"header is not JSON ({exc.msg})", 1) from None
    if not isinstance(header, dict) or header.get("schema") != SCHEMA:
        raise DatasetFormatError(f"expected schema {SCHEMA!r}", 1)
    for k in ("horizon", "gamma", "behavior"):
        if k not in header:
            raise DatasetFormatError(f"header missing {k!r}", 1)
    try:
        behavior = Policy(np.asarray(header["behavior"], dtype=float))
        target = Policy(np.asarray(header["target"], dtype=float)) if "target" in header else None
    except (ValueError, InvalidPolicy) as exc:
        raise DatasetFormatError(f"bad policy table: {exc}", 1) from None
    H = int(header["horizon"])
    S, A = behavior.probs.shape
    states, actions, rewards, cached = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            s = np.asarray(rec["s"], dtype=np.int64)
            a = np.asarray(rec["a"], dtype=np.int64)
            r = np.asarray(rec["r"], dtype=float)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"malformed trajectory record ({exc})", lineno) from None
        if s.shape != (H + 1,) or a.shape != (H,) or r.shape != (H,):
            raise DatasetFormatError(f"expected {H + 1} states, {H} actions and {H} rewards", lineno)
        if s.min() < 0 or s.max() >= S or a.min() < 0 or a.max() >= A:
            raise DatasetFormatError("state or action index out of range", lineno)
        if np.any(behavior.probs[s[:-1], a] <= 0):
            raise DatasetFormatError("recorded action has zero behavior probability", lineno)
        states.append(s)
        actions.append(a)
        rewards.append(r)
        cached.append((lineno, rec.get("w")))
    data = Dataset(np.array(states).reshape(-1, H + 1), np.array(actions).reshape(-1, H),
                   np.array(rewards).reshape(-1, H), behavior, header["gamma"],
                   header.get("env_id", ""), header.get("seed", 0))
    if target is not None:
        cw = data.cum_weights(target)
        for i, (lineno, w) in enumerate(cached):
            if w is not None and np.max(np.abs(np.asarray(w, dtype=float) - cw[i])) > 1e-12:
                raise DatasetFormatError("cached weights disagree with recomputed weights", lineno)
    return data


def dataset_target(path: str | Path) -> Policy | None:
    """Target policy stored in a dataset header, if any."""
    with open(path) as fh:
        header = json.loads(fh.readline())
    return Policy(np.asarray(header["target"])) if "target" in header else None
