"""Exact ground truth by enumerating every trajectory of a small MDP."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import AtlasTooLarge, NotUdag, UnsupportedForExactMoments
from .estimators import LINEAR_KINDS, _normalize_kind, contributions
from .mdp import Dataset, Policy, TabularMdp
from .model import ReturnDistributionModel, compute_return_model

DEFAULT_MAX_COUNT = 10 ** 6


@dataclass(frozen=True, eq=False)
class TrajectoryAtlas:
    """All trajectories with positive probability under the behavior policy."""

    mdp: TabularMdp
    behavior: Policy
    dataset: Dataset
    prob_beta: np.ndarray
    prob_pi: np.ndarray | None

    @property
    def size(self) -> int:
        return self.prob_beta.size

    @property
    def returns(self) -> np.ndarray:
        return self.dataset.returns

    def weights(self, pi: Policy) -> np.ndarray:
        return self.dataset.cum_weights(pi)[:, -1]

    def expect(self, values: np.ndarray) -> np.ndarray:
        """Expectation under the behavior distribution along axis 0."""
        return np.tensordot(self.prob_beta, values, axes=(0, 0))

    def cdf_under_target(self, pi: Policy, t) -> np.ndarray:
        """``P_pi(Z <= t)`` by reweighting the behavior trajectories."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        w = self.weights(pi)
        return self.expect(w[:, None] * (self.returns[:, None] <= t[None, :]))


def enumerate_trajectories(mdp: TabularMdp, beta: Policy, pi: Policy | None = None,
                           max_count: int = DEFAULT_MAX_COUNT) -> TrajectoryAtlas:
    """Breadth-first expansion over actions, next states and reward atoms
    with positive behavior probability."""
    S, A, H = mdp.n_states, mdp.n_actions, mdp.horizon
    joint = beta.probs[:, :, None, None] * mdp.transition[..., None] * mdp.reward_probs
    branches = []
    for s in range(S):
        a, s2, k = np.nonzero(joint[s])
        branches.append((a, s2, k, joint[s][a, s2, k]))
    counts = np.array([b[0].size for b in branches])

    start = np.flatnonzero(mdp.start_dist > 0)
    states = start[:, None]
    actions = np.zeros((start.size, 0), dtype=np.int64)
    rewards = np.zeros((start.size, 0))
    prob = mdp.start_dist[start].copy()
    for _ in range(H):
        cur = states[:, -1]
        fan = counts[cur]
        total = int(fan.sum())
        if total > max_count:
            raise AtlasTooLarge(f"more than {max_count} trajectories")
        parent = np.repeat(np.arange(cur.size), fan)
        offs = np.arange(total) - np.repeat(np.cumsum(fan) - fan, fan)
        new_a = np.empty(total, dtype=np.int64)
        new_s = np.empty(total, dtype=np.int64)
        new_k = np.empty(total, dtype=np.int64)
        new_p = np.empty(total)
        for s in np.unique(cur):
            sel = cur[parent] == s
            a, s2, k, p = branches[s]
            o = offs[sel]
            new_a[sel], new_s[sel], new_k[sel], new_p[sel] = a[o], s2[o], k[o], p[o]
        states = np.column_stack([states[parent], new_s])
        actions = np.column_stack([actions[parent], new_a])
        rewards = np.column_stack([rewards[parent], mdp.reward_values[new_k]])
        prob = prob[parent] * new_p
    data = Dataset(states, actions, rewards, beta, mdp.gamma, mdp.name, 0)
    p_pi = None
    if pi is not None:
        p_pi = prob * data.cum_weights(pi)[:, -1]
    return TrajectoryAtlas(mdp, beta, data, prob, p_pi)


def exact_estimator_moments(atlas: TrajectoryAtlas, pi: Policy, kind: str, t,
                            model: ReturnDistributionModel | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of the single-trajectory estimator at ``t``.

    Only estimators that are averages of per-trajectory terms qualify; an
    ``n``-trajectory estimate has variance ``var / n``.
    """
    kind = _normalize_kind(kind)
    if kind not in LINEAR_KINDS:
        raise UnsupportedForExactMoments(f"{kind!r} is not an average of per-trajectory terms")
    c = contributions(atlas.dataset, pi, kind, t, model)
    mean = atlas.expect(c)
    var = atlas.expect((c - mean) ** 2)
    if kind == "s_is":
        mean = 1.0 - mean
    return _squeeze(mean, t), _squeeze(var, t)


def _squeeze(x, t):
    return float(x[0]) if np.ndim(t) == 0 else x


def mean_square_weight(atlas: TrajectoryAtlas, pi: Policy) -> float:
    return float(atlas.expect(atlas.weights(pi) ** 2))


def recursive_variance(mdp: TabularMdp, beta: Policy, pi: Policy, t: float, kind: str = "f_is",
                       model: ReturnDistributionModel | None = None) -> float:
    """Variance of the single-trajectory estimator from the per-step
    decomposition (law of total variance, one step at a time):

        V_h(s, u) = Var_{a~β}[w Δ_{s,a}(u)]
                    + Σ_a β w² (E[V_{h+1}(s', u')] + Var[G_{s',h+1}(u')]),
        u' = (u - r)/γ,  V_{H+1} = 0,

    where ``G`` is the true CDF (survival function for ``s_is``) and
    ``Δ = G_{s,a} - Ḡ_{s,a}`` with the model ``Ḡ`` (zero for IS).  The total
    adds ``Var_μ[G_{s,1}(t)]``.
    """
    kind = _normalize_kind(kind)
    if kind not in LINEAR_KINDS:
        raise UnsupportedForExactMoments(f"{kind!r} has no variance recursion")
    if kind == "dr" and model is None:
        raise ValueError("dr variance needs a model")
    truth = compute_return_model(mdp, pi)
    S, H, g = mdp.n_states, mdp.horizon, mdp.gamma
    survival = kind == "s_is"
    joint = mdp.transition[..., None] * mdp.reward_probs
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(beta.probs > 0, pi.probs / beta.probs, 0.0)

    def G(h, s, u):
        v = float(truth.state_cdf_at(h, s, u)) if h <= H else float(u >= 0)
        return 1.0 - v if survival else v

    def G_sa(h, s, a, u):
        v = float(truth.sa_cdf_at(h, s, a, u))
        return 1.0 - v if survival else v

    def Gbar_sa(h, s, a, u):
        if kind != "dr":
            return 0.0
        return float(model.sa_cdf_at(h, s, a, u))

    @lru_cache(maxsize=None)
    def V(h: int, s: int, u: float) -> float:
        if h == H + 1:
            return 0.0
        means, second, tail = [], [], 0.0
        for a in np.flatnonzero(beta.probs[s] > 0):
            b = beta.probs[s, a]
            d = w[s, a] * (G_sa(h, s, a, u) - Gbar_sa(h, s, a, u))
            means.append(b * d)
            second.append(b * d * d)
            s2s, ks = np.nonzero(joint[s, a])
            if w[s, a] == 0:
                continue
            ev = eg = eg2 = 0.0
            for s2, k in zip(s2s, ks):
                p = joint[s, a, s2, k]
                u2 = (u - mdp.reward_values[k]) / g
                gv = G(h + 1, s2, u2)
                ev += p * V(h + 1, int(s2), float(u2))
                eg += p * gv
                eg2 += p * gv * gv
            tail += b * w[s, a] ** 2 * (ev + eg2 - eg * eg)
        return float(sum(second) - sum(means) ** 2 + tail)

    mu = mdp.start_dist
    starts = np.flatnonzero(mu > 0)
    inner = sum(mu[s] * V(1, int(s), float(t)) for s in starts)
    gv = np.array([G(1, int(s), float(t)) for s in starts])
    return float(inner + mu[starts] @ gv ** 2 - (mu[starts] @ gv) ** 2)


def check_udag(mdp: TabularMdp) -> list[set]:
    """Levels of reachable states; raises NotUdag unless every state is
    reachable at a single level ``h = 1 .. H`` and gamma = 1."""
    if mdp.gamma != 1.0:
        raise NotUdag("layered structure assumes gamma = 1")
    level = set(np.flatnonzero(mdp.start_dist > 0).tolist())
    levels = [level]
    reach = mdp.transition.sum(1) > 0
    for _ in range(mdp.horizon - 1):
        level = set(np.flatnonzero(reach[sorted(level)].any(0)).tolist())
        levels.append(level)
    seen: dict[int, int] = {}
    for h, lv in enumerate(levels, start=1):
        for s in lv:
            if s in seen:
                raise NotUdag(f"state {s} is reachable at levels {seen[s]} and {h}")
            seen[s] = h
    return levels


def cramer_rao_bound(atlas: TrajectoryAtlas, pi: Policy, t) -> np.ndarray | float:
    """Variance lower bound for unbiased off-policy CDF estimates at ``t``:

        Var_μ[F_{s_1}(t)] + Σ_h E_β[w_{1:h}² Var_{r_h, s_{h+1}}[F_{s_{h+1}, h+1}(t - z_h)]],

    with the conditional variance taken given ``(s_h, a_h)`` and the
    cumulative weight including the step-``h`` action.
    """
    mdp = atlas.mdp
    check_udag(mdp)
    truth = compute_return_model(mdp, pi)
    T = np.atleast_1d(np.asarray(t, dtype=float))
    data = atlas.dataset
    H = mdp.horizon
    cw = data.cum_weights(pi)
    z = data.partial_returns
    joint = mdp.transition[..., None] * mdp.reward_probs
    r = mdp.reward_values

    mu = mdp.start_dist
    F1 = truth.state_cdf_at(1, np.arange(mdp.n_states)[:, None], T[None, :])
    total = mu @ F1 ** 2 - (mu @ F1) ** 2
    for h in range(1, H + 1):
        s, a = data.states[:, h - 1], data.actions[:, h - 1]
        p = joint[s, a]  # (N, S, K)
        # next-level CDF at t - z_{h-1} - r for every (s', r)
        u = T[None, None, :] - z[:, h - 1][:, None, None] - r[None, :, None]  # (N, K, m)
        S = mdp.n_states
        Fn = np.empty((data.n, S, r.size, T.size))
        for s2 in range(S):
            Fn[:, s2] = truth.state_cdf_at(h + 1, s2, u) if h < H else (u >= 0)
        m1 = np.einsum("nsk,nskm->nm", p, Fn)
        m2 = np.einsum("nsk,nskm->nm", p, Fn ** 2)
        total = total + atlas.expect(cw[:, h][:, None] ** 2 * (m2 - m1 ** 2))
    return _squeeze(total, t)
