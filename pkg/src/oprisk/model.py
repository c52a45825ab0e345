"""Return-distribution models: the CDF Bellman recursion on a (true or
learned) tabular MDP, in exact-atom or projected-grid form."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import sparse

from .errors import IncompatibleAtomMode, ModelStateMissing, SupportOutsideGrid
from .mdp import Dataset, Policy, TabularMdp
from .stepfn import StepFunction, ValidCdf

DEFAULT_ATOMS = 1024
_MERGE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class LearnedMdp:
    """Empirical MDP plus visit counts; unvisited (s, a) use a uniform
    transition and zero reward."""

    mdp: TabularMdp
    visit_counts: np.ndarray

    @property
    def unvisited(self) -> np.ndarray:
        return self.visit_counts == 0

    def coverage_report(self) -> dict:
        return {"unvisited_pairs": int(self.unvisited.sum()), "total_pairs": int(self.visit_counts.size)}


def learn_mdp(data: Dataset, n_states: int, n_actions: int, horizon_override: int | None = None) -> LearnedMdp:
    """Empirical transition and reward frequencies pooled over all steps."""
    if data.n == 0:
        raise ValueError("cannot learn a model from an empty dataset")
    S, A = n_states, n_actions
    s = data.states[:, :-1].ravel()
    a = data.actions.ravel()
    s2 = data.states[:, 1:].ravel()
    r = data.rewards.ravel()
    atoms, k = np.unique(np.append(r, 0.0), return_inverse=True)
    k = k[:-1]
    K = atoms.size
    joint = np.bincount(((s * A + a) * S + s2) * K + k, minlength=S * A * S * K).reshape(S, A, S, K).astype(float)
    visits = joint.sum((2, 3))
    trans_counts = joint.sum(3)
    zero_k = int(np.searchsorted(atoms, 0.0))

    P = np.full((S, A, S), 1.0 / S)
    seen = visits > 0
    P[seen] = trans_counts[seen] / visits[seen][:, None]
    R = np.zeros((S, A, S, K))
    has = trans_counts > 0
    R[has] = joint[has] / trans_counts[has][:, None]
    R[~has, zero_k] = 1.0
    mu = np.bincount(data.states[:, 0], minlength=S).astype(float)
    mu /= mu.sum()
    H = data.horizon if horizon_override is None else int(horizon_override)
    mdp = TabularMdp(P, atoms, R, data.gamma, mu, H, "learned")
    return LearnedMdp(mdp, visits.astype(np.int64))


def _merge_sorted(x: np.ndarray, tol: float = _MERGE_TOL) -> np.ndarray:
    x = np.unique(x)
    if x.size < 2:
        return x
    keep = np.concatenate([[True], np.diff(x) > tol * np.maximum(1.0, np.abs(x[1:]))])
    return x[keep]


def _locate(grid: np.ndarray, x: np.ndarray, tol: float = _MERGE_TOL) -> np.ndarray:
    """Index of the grid atom each value was merged into."""
    return np.searchsorted(grid, x + tol * np.maximum(1.0, np.abs(x)), side="right") - 1


def projection_matrix(x: np.ndarray, grid: np.ndarray) -> sparse.csr_matrix:
    """Sparse (len(grid), len(x)) matrix that splits each point mass at
    ``x[j]`` between its two neighbouring grid atoms."""
    lo, hi = grid[0], grid[-1]
    span = hi - lo
    eps = 1e-12 * max(1.0, abs(lo), abs(hi))
    if np.any(x < lo - eps) or np.any(x > hi + eps):
        raise SupportOutsideGrid(f"atoms outside grid [{lo}, {hi}]")
    m = grid.size
    if m == 1:
        return sparse.csr_matrix(np.ones((1, x.size)))
    pos = np.clip((x - lo) / span * (m - 1), 0.0, m - 1)
    i = np.minimum(np.floor(pos).astype(np.int64), m - 2)
    frac = pos - i
    frac[np.abs(frac) < 1e-12] = 0.0
    frac[np.abs(frac - 1) < 1e-12] = 1.0
    cols = np.arange(x.size)
    rows = np.concatenate([i, i + 1])
    vals = np.concatenate([1.0 - frac, frac])
    M = sparse.csr_matrix((vals, (rows, np.concatenate([cols, cols]))), shape=(m, x.size))
    M.eliminate_zeros()
    return M


def project_distribution(atoms, probs, grid) -> np.ndarray:
    """Probabilities on ``grid`` after linear splitting of off-grid atoms."""
    grid = np.asarray(grid, dtype=float)
    return projection_matrix(np.asarray(atoms, dtype=float), grid) @ np.asarray(probs, dtype=float)


class ReturnDistributionModel:
    """Discrete return distributions per (state, level) and per
    (state, action, level), levels ``h = 1 .. H+1``.

    Level ``H+1`` is the point mass at 0.  State tables are stored; the
    state-action table of a level is rebuilt on demand from the next level
    (it is cheap and can be large).
    """

    def __init__(self, horizon: int, gamma: float, n_states: int, n_actions: int,
                 atoms: list, state_pmf: list, sa_builder: Callable[[int], np.ndarray], mode: str):
        self.horizon = horizon
        self.gamma = gamma
        self.n_states = n_states
        self.n_actions = n_actions
        self.atoms = atoms
        self.state_pmf = state_pmf
        self._sa_builder = sa_builder
        self.mode = mode
        self._sa_cache: dict[int, np.ndarray] = {}
        self._cdf_cache: dict[tuple, np.ndarray] = {}

    @classmethod
    def zero(cls, n_states: int, n_actions: int, horizon: int, gamma: float = 1.0) -> "ReturnDistributionModel":
        """The model ``F̄ = 0`` at every state and level before the terminal one."""
        atoms = [None] + [np.zeros(1) for _ in range(horizon + 1)]
        pmf = [None] + [np.zeros((n_states, 1)) for _ in range(horizon)] + [np.ones((n_states, 1))]
        return cls(horizon, gamma, n_states, n_actions, atoms, pmf,
                   lambda h: np.zeros((n_states, n_actions, 1)), "zero")

    def _check_level(self, h: int) -> None:
        if not 1 <= h <= self.horizon + 1:
            raise ModelStateMissing(f"model has no level {h} (horizon {self.horizon})")

    def sa_pmf(self, h: int) -> np.ndarray:
        """(S, A, |G_h|) state-action return probabilities at level ``h``."""
        self._check_level(h)
        if h == self.horizon + 1:
            return np.broadcast_to(self.state_pmf[h][:, None, :], (self.n_states, self.n_actions, 1))
        out = self._sa_cache.get(h)
        if out is None:
            out = self._sa_builder(h)
            self._sa_cache[h] = out
        return out

    def _cdf(self, h: int, kind: str) -> np.ndarray:
        key = (h, kind)
        out = self._cdf_cache.get(key)
        if out is None:
            pmf = self.state_pmf[h] if kind == "s" else self.sa_pmf(h)
            out = np.cumsum(pmf, axis=-1)
            self._cdf_cache[key] = out
        return out

    def state_cdf_at(self, h: int, s, x) -> np.ndarray:
        """``F̄_{s,h}(x)`` with ``s`` and ``x`` broadcast together."""
        self._check_level(h)
        cdf = self._cdf(h, "s")
        idx = _locate(self.atoms[h], np.asarray(x, dtype=float))
        s = np.asarray(s)
        s, idx = np.broadcast_arrays(s, idx)
        return np.where(idx >= 0, cdf[s, np.maximum(idx, 0)], 0.0)

    def sa_cdf_at(self, h: int, s, a, x) -> np.ndarray:
        """``F̄_{s,a,h}(x)`` with ``s``, ``a`` and ``x`` broadcast together."""
        self._check_level(h)
        cdf = self._cdf(h, "sa")
        idx = _locate(self.atoms[h], np.asarray(x, dtype=float))
        s, a, idx = np.broadcast_arrays(np.asarray(s), np.asarray(a), idx)
        return np.where(idx >= 0, cdf[s, a, np.maximum(idx, 0)], 0.0)

    def state_distribution(self, s: int, h: int) -> tuple[np.ndarray, np.ndarray]:
        self._check_level(h)
        p = self.state_pmf[h][s]
        keep = p > 0
        return self.atoms[h][keep], p[keep]

    def state_cdf(self, s: int, h: int = 1) -> ValidCdf:
        atoms, p = self.state_distribution(s, h)
        if atoms.size == 0:
            raise ModelStateMissing(f"state {s} has no return distribution at level {h}")
        return ValidCdf.snap(_cdf_from_atoms(atoms, p))

    def mean_state_values(self, h: int) -> np.ndarray:
        return self.state_pmf[h] @ self.atoms[h]

    def mean_sa_values(self, h: int) -> np.ndarray:
        return self.sa_pmf(h) @ self.atoms[h]

    def dump(self) -> list[dict]:
        rows = []
        for h in range(1, self.horizon + 2):
            for s in range(self.n_states):
                atoms, p = self.state_distribution(s, h)
                rows.append({"s": s, "h": h, "atoms": atoms.tolist(), "p": p.tolist()})
        return rows


def _cdf_from_atoms(atoms: np.ndarray, p: np.ndarray) -> StepFunction:
    return StepFunction(atoms, np.cumsum(p), 0.0)


def _reward_kernels(mdp: TabularMdp) -> list[tuple[float, sparse.csr_matrix]]:
    """Per reward atom, the sparse (S*A, S) matrix of P(s2, r | s, a)."""
    S, A = mdp.n_states, mdp.n_actions
    joint = mdp.transition[..., None] * mdp.reward_probs
    out = []
    for k, r in enumerate(mdp.reward_values):
        M = joint[..., k].reshape(S * A, S)
        if np.any(M > 0):
            out.append((float(r), sparse.csr_matrix(M)))
    return out


def compute_return_model(mdp: TabularMdp | LearnedMdp, pi: Policy, mode: str = "auto",
                         n_atoms: int = DEFAULT_ATOMS, bounds: tuple[float, float] | None = None
                         ) -> ReturnDistributionModel:
    """Backward CDF recursion ``h = H .. 1`` under the target policy.

    ``mode`` is ``"exact"`` (requires gamma = 1), ``"projected"`` (uniform grid
    of ``n_atoms`` atoms per level; by default each level's grid spans its
    remaining-horizon return range widened to contain 0, or the fixed
    ``bounds`` if given), or ``"auto"`` (exact when gamma = 1).
    """
    if isinstance(mdp, LearnedMdp):
        mdp = mdp.mdp
    if mode == "auto":
        mode = "exact" if mdp.gamma == 1.0 else "projected"
    if mode == "exact" and mdp.gamma != 1.0:
        raise IncompatibleAtomMode("exact atoms need gamma = 1; use projected mode")
    if mode not in ("exact", "projected"):
        raise ValueError(f"unknown atom mode {mode!r}")
    S, A, H, g = mdp.n_states, mdp.n_actions, mdp.horizon, mdp.gamma
    kernels = _reward_kernels(mdp)
    pi_probs = pi.probs

    atoms: list = [None] * (H + 2)
    state_pmf: list = [None] * (H + 2)
    atoms[H + 1] = np.zeros(1)
    state_pmf[H + 1] = np.ones((S, 1))

    if mode == "exact":
        placement: list = [None] * (H + 2)
        for h in range(H, 0, -1):
            shifted = [r + atoms[h + 1] for r, _ in kernels]
            grid = _merge_sorted(np.concatenate(shifted))
            atoms[h] = grid
            placement[h] = [_locate(grid, x) for x in shifted]

        def build(h: int) -> np.ndarray:
            nxt = state_pmf[h + 1]
            # scatter along rows of the transposed table (much faster than columns)
            out = np.zeros((atoms[h].size, S * A))
            for (_, M), idx in zip(kernels, placement[h]):
                out[idx] += (M @ nxt).T
            return np.ascontiguousarray(out.T).reshape(S, A, -1)
    else:
        # one uniform grid per level spanning that level's return range (plus 0)
        if bounds is None:
            r_lo, r_hi = mdp.r_min, mdp.r_max
        for h in range(H, 0, -1):
            if bounds is None:
                disc = (g ** np.arange(H - h + 1)).sum()
                lo, hi = min(0.0, r_lo * disc), max(0.0, r_hi * disc)
            else:
                lo, hi = bounds
            atoms[h] = np.linspace(lo, hi, n_atoms) if hi > lo else np.array([lo])
        proj = {}

        def proj_for(h: int, r: float) -> sparse.csr_matrix:
            key = (h, r)
            if key not in proj:
                proj[key] = projection_matrix(r + g * atoms[h + 1], atoms[h])
            return proj[key]

        def build(h: int) -> np.ndarray:
            nxt = state_pmf[h + 1]
            out = np.zeros((S * A, atoms[h].size))
            for r, M in kernels:
                out += (proj_for(h, r) @ (M @ nxt).T).T
            return out.reshape(S, A, -1)

    model = ReturnDistributionModel(H, g, S, A, atoms, state_pmf, build, mode)
    for h in range(H, 0, -1):
        state_pmf[h] = np.einsum("sa,sag->sg", pi_probs, model.sa_pmf(h))
    return model


def true_cdf(mdp: TabularMdp, pi: Policy, mode: str = "auto", n_atoms: int = 4096) -> ValidCdf:
    """Return CDF of ``pi`` under the start distribution, from the recursion
    on the true MDP (exact atoms for gamma = 1, a fine grid otherwise)."""
    model = compute_return_model(mdp, pi, mode=mode, n_atoms=n_atoms)
    return start_mixture_cdf(model, mdp.start_dist)


def start_mixture_cdf(model: ReturnDistributionModel, mu: np.ndarray) -> ValidCdf:
    p = np.asarray(mu) @ model.state_pmf[1]
    keep = p > 0
    return ValidCdf.snap(_cdf_from_atoms(model.atoms[1][keep], p[keep]))
