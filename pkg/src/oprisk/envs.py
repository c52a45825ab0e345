"""Benchmark environments and the environment registry."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import InvalidMdp, UnknownEnvironment
from .mdp import Policy, TabularMdp

UP, RIGHT, DOWN, LEFT = range(4)
_MOVES = {UP: (-1, 0), RIGHT: (0, 1), DOWN: (1, 0), LEFT: (0, -1)}


def _from_joint(joint: np.ndarray, atoms: np.ndarray, gamma, start, horizon, name) -> TabularMdp:
    """Build an MDP from a joint table ``joint[s, a, s2, k]`` of (next state, reward) probabilities."""
    P = joint.sum(-1)
    R = np.zeros_like(joint)
    pos = P > 0
    R[pos] = joint[pos] / P[pos][:, None]
    # rows for impossible transitions still need a valid distribution
    R[~pos, 0] = 1.0
    return TabularMdp(P, atoms, R, gamma, start, horizon, name)


@dataclass(frozen=True)
class CliffwalkSpec:
    rows: int = 4
    cols: int = 12
    slip_prob: float = 0.05
    cliff_cost: float = 100.0
    step_cost: float = 1.0
    horizon: int = 200
    gamma: float = 1.0

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise InvalidMdp("cliffwalk needs at least 2 rows and 2 columns")
        if not 0.0 <= self.slip_prob <= 1.0:
            raise InvalidMdp("slip_prob must lie in [0, 1]")
        if self.horizon < 1:
            raise InvalidMdp("horizon must be >= 1")


def cliffwalk_cells(spec: CliffwalkSpec) -> dict[str, object]:
    """Start, goal and cliff state indices (row-major, row 0 at the top)."""
    bottom = spec.rows - 1
    return {
        "start": bottom * spec.cols,
        "goal": bottom * spec.cols + spec.cols - 1,
        "cliff": [bottom * spec.cols + c for c in range(1, spec.cols - 1)],
    }


def build_cliffwalk(spec: CliffwalkSpec | None = None) -> TabularMdp:
    """Slippery cliff-walking grid.

    The chosen move happens with probability ``1 - slip_prob``; otherwise the
    agent moves one cell down (toward the cliff row), clamped at the border.
    Stepping onto a cliff cell costs ``cliff_cost`` and returns the agent to
    the start cell; the goal is absorbing and free.
    """
    spec = spec or CliffwalkSpec()
    R, C = spec.rows, spec.cols
    S = R * C
    cells = cliffwalk_cells(spec)
    start, goal, cliff = cells["start"], cells["goal"], set(cells["cliff"])
    atoms = np.unique([-spec.cliff_cost, -spec.step_cost, 0.0])
    k_of = {float(v): i for i, v in enumerate(atoms)}

    def land(s, move):
        r, c = divmod(s, C)
        dr, dc = _MOVES[move]
        r2 = min(max(r + dr, 0), R - 1)
        c2 = min(max(c + dc, 0), C - 1)
        s2 = r2 * C + c2
        if s2 in cliff:
            return start, -spec.cliff_cost
        return s2, -spec.step_cost

    joint = np.zeros((S, 4, S, atoms.size))
    for s in range(S):
        for a in range(4):
            if s == goal:
                joint[s, a, goal, k_of[0.0]] = 1.0
            elif s in cliff:
                # unreachable; behaves like a reset
                joint[s, a, start, k_of[0.0]] = 1.0
            else:
                for move, p in ((a, 1.0 - spec.slip_prob), (DOWN, spec.slip_prob)):
                    if p > 0:
                        s2, rew = land(s, move)
                        joint[s, a, s2, k_of[float(rew)]] += p
    mu = np.zeros(S)
    mu[start] = 1.0
    return _from_joint(joint, atoms, spec.gamma, mu, spec.horizon, "cliffwalk")


def build_toy_bandit(reward_p: float | None = None) -> TabularMdp:
    """One state, two actions, one step. ``a0`` pays 0; ``a1`` pays 1, or
    Bernoulli(``reward_p``) when given."""
    p1 = 1.0 if reward_p is None else float(reward_p)
    P = np.ones((1, 2, 1))
    Rp = np.array([[[1.0, 0.0], [1.0 - p1, p1]]])
    return TabularMdp.from_sa_rewards(P, [0.0, 1.0], Rp, 1.0, [1.0], 1, "toy_bandit")


def build_toy_chain() -> TabularMdp:
    """Two steps: a fair coin picks s2g or s2b; s2g then pays 1, s2b pays 0.

    States are 0 = s1, 1 = s2g, 2 = s2b, 3 = absorbing end.
    """
    P = np.zeros((4, 1, 4))
    P[0, 0, 1] = P[0, 0, 2] = 0.5
    P[1:, 0, 3] = 1.0
    Rp = np.zeros((4, 1, 2))
    Rp[:, 0, 0] = 1.0
    Rp[1, 0] = [0.0, 1.0]
    return TabularMdp.from_sa_rewards(P, [0.0, 1.0], Rp, 1.0, [1, 0, 0, 0], 2, "toy_chain")


def build_random_udag(n_states_per_level: int, n_actions: int, levels: int,
                      reward_atoms: int, seed: int) -> TabularMdp:
    """Random layered MDP in which every state lives on exactly one level.

    States are numbered level by level, followed by one absorbing terminal
    state entered after the last level.  Each (s, a) gets its own reward
    distribution over ``reward_atoms`` dyadic values (multiples of 1/8), so
    returns stay exactly representable.
    """
    if min(n_states_per_level, n_actions, levels, reward_atoms) < 1:
        raise InvalidMdp("all udag dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    K, A, L = n_states_per_level, n_actions, levels
    S = K * L + 1
    term = S - 1
    pool = np.arange(max(9, reward_atoms)) / 8.0
    P = np.zeros((S, A, S))
    Rsa = np.zeros((S, A, pool.size))
    for lvl in range(L):
        nxt = np.arange((lvl + 1) * K, (lvl + 2) * K) if lvl < L - 1 else np.array([term])
        for s in range(lvl * K, (lvl + 1) * K):
            for a in range(A):
                P[s, a, nxt] = rng.dirichlet(np.ones(nxt.size))
                picks = rng.choice(pool.size, size=reward_atoms, replace=False)
                Rsa[s, a, picks] = rng.dirichlet(np.ones(reward_atoms))
    P[term, :, term] = 1.0
    Rsa[term, :, 0] = 1.0
    mu = np.zeros(S)
    mu[:K] = rng.dirichlet(np.ones(K))
    return TabularMdp.from_sa_rewards(P, pool, Rsa, 1.0, mu, L, f"udag:{seed}:{K}x{A}x{L}x{reward_atoms}")


def optimal_policy(mdp: TabularMdp, tol: float = 1e-9) -> Policy:
    """Stationary greedy policy from finite-horizon Q-iteration on the true MDP.

    The policy is greedy for the first-step action values; tied actions share
    probability equally.
    """
    r_exp = np.einsum("sat,satk,k->sa", mdp.transition, mdp.reward_probs, mdp.reward_values)
    V = np.zeros(mdp.n_states)
    Q = r_exp
    for _ in range(mdp.horizon):
        Q = r_exp + mdp.gamma * mdp.transition @ V
        V = Q.max(1)
    best = Q >= Q.max(1, keepdims=True) - tol * (1.0 + np.abs(Q).max(1, keepdims=True))
    return Policy(best / best.sum(1, keepdims=True))


def parse_udag_id(env_id: str) -> dict:
    """``udag:<seed>:<K>x<A>x<L>x<R>`` (states per level, actions, levels, reward atoms)."""
    try:
        _, seed, dims = env_id.split(":")
        K, A, L, R = (int(x) for x in dims.split("x"))
    except ValueError:
        raise UnknownEnvironment(f"bad udag id {env_id!r}; expected udag:<seed>:<K>x<A>x<L>x<R>") from None
    return {"n_states_per_level": K, "n_actions": A, "levels": L, "reward_atoms": R, "seed": int(seed)}


def make_env(env_id: str, **overrides) -> TabularMdp:
    """Build an environment from its registry id.

    ``overrides`` are CliffwalkSpec fields for ``cliffwalk``, ``reward_p`` for
    ``toy_bandit`` and ``horizon`` for any environment.
    """
    horizon = overrides.pop("horizon", None)
    if env_id == "cliffwalk":
        spec = CliffwalkSpec(**overrides)
        if horizon is not None:
            spec = replace(spec, horizon=int(horizon))
        return build_cliffwalk(spec)
    if env_id == "toy_bandit":
        mdp = build_toy_bandit(overrides.pop("reward_p", None))
    elif env_id == "toy_chain":
        mdp = build_toy_chain()
    elif env_id.startswith("udag:"):
        mdp = build_random_udag(**parse_udag_id(env_id))
    else:
        raise UnknownEnvironment(f"unknown environment {env_id!r}")
    if overrides:
        raise UnknownEnvironment(f"unsupported overrides for {env_id!r}: {sorted(overrides)}")
    return mdp if horizon is None else mdp.with_horizon(int(horizon))


def default_cliffwalk_spec() -> dict:
    return asdict(CliffwalkSpec())
