"""Acceptance suite: ten criteria, each printed as one PASS/FAIL line.

Run with pytest (lines appear in the terminal summary) or directly with
``python3 tests/test_acceptance.py``.  A criterion also fails when it runs
past its time budget.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np
import pytest

from oprisk.envs import build_random_udag, build_toy_bandit, build_toy_chain, make_env, optimal_policy
from oprisk.errors import OpriskError
from oprisk.estimators import (
    ModelSkeleton,
    confidence_band,
    contributions,
    estimate_c_is,
    estimate_dm,
    estimate_f_is,
    estimate_is_clip,
    estimate_s_is,
    fit_model,
    uniform_grid,
)
from oprisk.harness import PRESETS, read_rows, run_sweep
from oprisk.mdp import Policy, mixture_policy, sample_dataset
from oprisk.model import compute_return_model, true_cdf
from oprisk.oracle import cramer_rao_bound, enumerate_trajectories, exact_estimator_moments, recursive_variance
from oprisk.risk import distortion_risk, identity, parse_risk, variance_risk
from oprisk.stepfn import StepFunction, from_weighted_samples, sup_norm_distance

RESULTS: dict[int, str] = {}


@dataclass
class Outcome:
    ok: bool
    detail: str


def _fixtures():
    """toy_chain and a seeded three-level random UDAG with a non-trivial
    target and a mixture behavior."""
    chain = build_toy_chain()
    udag = build_random_udag(2, 2, 3, 2, seed=3)
    rng = np.random.default_rng(17)
    p = rng.dirichlet(np.ones(2), size=udag.n_states) + 0.05
    pi_u = Policy(p / p.sum(1, keepdims=True))
    pi_c = Policy.uniform(4, 1)
    return [("toy_chain", chain, pi_c, mixture_policy(pi_c, 0.5)),
            ("udag", udag, pi_u, mixture_policy(pi_u, 0.5))]


def _misspecified_model(mdp, pi, beta, seed):
    """A model learned from 8 trajectories and evaluated under pi: wrong,
    but consistent with pi as the estimator requires."""
    data = sample_dataset(mdp, beta, 8, seed)
    return fit_model(data, pi, ModelSkeleton(mdp.n_states, mdp.n_actions))


def _grid(mdp, m):
    lo, hi = mdp.return_bounds
    return np.linspace(lo - 0.25, hi, m)


# -- criteria -----------------------------------------------------------------

def criterion_1() -> Outcome:
    worst = 0.0
    for _, mdp, pi, beta in _fixtures():
        atlas = enumerate_trajectories(mdp, beta, pi)
        t = _grid(mdp, 7)
        F = true_cdf(mdp, pi)(t)
        model = _misspecified_model(mdp, pi, beta, 1)
        for kind, m in (("f_is", None), ("dr", model)):
            mean, _ = exact_estimator_moments(atlas, pi, kind, t, m)
            worst = max(worst, float(np.max(np.abs(mean - F))))
    return Outcome(worst <= 1e-10, f"max |E[F_hat] - F| = {worst:.2e} (tol 1e-10)")


def criterion_2() -> Outcome:
    worst = 0.0
    mc_worst = 0.0
    for idx, (_, mdp, pi, beta) in enumerate(_fixtures()):
        atlas = enumerate_trajectories(mdp, beta, pi)
        t = _grid(mdp, 7)
        model = _misspecified_model(mdp, pi, beta, 2)
        big = sample_dataset(mdp, beta, 10 ** 5, 100 + idx)
        for kind, m in (("f_is", None), ("dr", model)):
            _, var = exact_estimator_moments(atlas, pi, kind, t, m)
            rec = np.array([recursive_variance(mdp, beta, pi, x, kind, m) for x in t])
            worst = max(worst, float(np.max(np.abs(rec - var))))
            mc = contributions(big, pi, kind, t, m).var(0, ddof=1)
            pos = var > 1e-9
            if pos.any():
                mc_worst = max(mc_worst, float(np.max(np.abs(mc[pos] / var[pos] - 1))))
            if (~pos).any():
                mc_worst = max(mc_worst, float(np.max(mc[~pos])) * 1e6)
    ok = worst <= 1e-10 and mc_worst <= 0.05
    return Outcome(ok, f"recursion vs enumeration {worst:.2e} (tol 1e-10); "
                       f"Monte Carlo rel. error {mc_worst:.3f} (tol 0.05)")


def criterion_3() -> Outcome:
    worst = 0.0
    min_gap = math.inf
    for mdp in (build_random_udag(2, 2, 3, 2, seed=3), build_random_udag(3, 2, 2, 3, seed=8)):
        rng = np.random.default_rng(23)
        p = rng.dirichlet(np.ones(2), size=mdp.n_states) + 0.05
        pi = Policy(p / p.sum(1, keepdims=True))
        atlas = enumerate_trajectories(mdp, mixture_policy(pi, 0.5), pi)
        lo, hi = mdp.return_bounds
        t = np.linspace(lo + 0.3, hi - 0.3, 5)
        bound = cramer_rao_bound(atlas, pi, t)
        _, dr = exact_estimator_moments(atlas, pi, "dr", t, compute_return_model(mdp, pi))
        _, fis = exact_estimator_moments(atlas, pi, "f_is", t)
        worst = max(worst, float(np.max(np.abs(dr - bound))))
        min_gap = min(min_gap, float(np.min(fis - bound)))
    ok = worst <= 1e-10 and min_gap >= -1e-12
    return Outcome(ok, f"|Var_DR - CR| = {worst:.2e} (tol 1e-10); min(Var_IS - CR) = {min_gap:.3e}")


def criterion_4() -> Outcome:
    mdp = build_toy_chain()
    pi = Policy.uniform(4, 1)
    beta = mixture_policy(pi, 0.5)
    F = true_cdf(mdp, pi)
    ns = [2 ** k for k in range(6, 15)]
    errs = []
    for i, n in enumerate(ns):
        e = [sup_norm_distance(estimate_is_clip(sample_dataset(mdp, beta, n, 1000 * i + r), pi), F)
             for r in range(200)]
        errs.append(np.mean(e))
    slope = float(np.polyfit(np.log(ns), np.log(errs), 1)[0])
    return Outcome(-0.6 <= slope <= -0.4, f"log-log slope {slope:.3f} (want [-0.6, -0.4])")


def criterion_5() -> Outcome:
    mdp = build_toy_chain()
    pi = Policy.uniform(4, 1)
    beta = mixture_policy(pi, 0.5)
    F = true_cdf(mdp, pi)
    grid = uniform_grid(*mdp.return_bounds, 10)
    hits = sum(confidence_band(sample_dataset(mdp, beta, 200, 5000 + r), pi, "f_is", grid, 0.1).contains(F)
               for r in range(1000))
    return Outcome(hits / 1000 >= 0.9, f"coverage {hits / 1000:.3f} (want >= 0.90)")


def criterion_6() -> Outcome:
    mdp = build_toy_bandit(reward_p=0.7)
    pi = Policy.deterministic([1], 2)
    beta = Policy.uniform(1, 2)
    grid = uniform_grid(0.0, 1.0, 50)
    F = true_cdf(mdp, pi)(grid)
    worst = -math.inf
    for i, n in enumerate((64, 256, 1024)):
        sq = {"c": 0.0, "f": 0.0, "s": 0.0}
        for r in range(2000):
            data = sample_dataset(mdp, beta, n, 10 ** 6 * (i + 1) + r)
            sq["c"] = sq["c"] + (estimate_c_is(data, pi, grid)(grid) - F) ** 2
            sq["f"] = sq["f"] + (estimate_f_is(data, pi)(grid) - F) ** 2
            sq["s"] = sq["s"] + (estimate_s_is(data, pi)(grid) - F) ** 2
        mse = {k: v / 2000 for k, v in sq.items()}
        best = np.minimum(mse["f"], mse["s"])
        worst = max(worst, float(np.max(mse["c"] - 1.1 * best)))
    return Outcome(worst <= 0.0, f"max(MSE_C - 1.1 min(MSE_F, MSE_S)) = {worst:.3e} (want <= 0)")


def _cliffwalk_table(text):
    """Per-rep values keyed by (n, metric, estimator, rep)."""
    vals = {}
    for r in read_rows(text):
        if r["rep"].isdigit() and not r["metric"].startswith("error:"):
            vals[(int(r["n"]), r["metric"], r["estimator"], int(r["rep"]))] = float(r["value"])
    return vals


def criterion_7() -> Outcome:
    cfg = replace(PRESETS["desk_cliffwalk"], lambdas=(0.5,), estimators=("f_is", "wis", "dr", "wdr"),
                  risks=("mean", "cvar:0.25"), crossfit=True)
    vals = _cliffwalk_table(run_sweep(cfg))
    ok = True
    parts = []
    for n in cfg.sample_sizes[-2:]:
        for metric in ("sup_norm", "mse:mean", "mse:cvar:0.25"):
            for good, base in (("dr", "f_is"), ("wdr", "wis")):
                reps = [r for r in range(cfg.repetitions)
                        if (n, metric, good, r) in vals and (n, metric, base, r) in vals]
                if not reps:
                    ok = False
                    parts.append(f"n={n} {metric} {good}<={base}: no rep where both are defined")
                    continue
                a = np.mean([vals[(n, metric, good, r)] for r in reps])
                b = np.mean([vals[(n, metric, base, r)] for r in reps])
                ok &= bool(a <= b)
                parts.append(f"n={n} {metric} {good}={a:.4g} {base}={b:.4g} over {len(reps)} reps")
    return Outcome(ok, "; ".join(parts))


def criterion_8() -> Outcome:
    rng = np.random.default_rng(8)
    mean_dev = 0.0
    exact = True
    for _ in range(100):
        # dyadic samples with a power-of-two count keep every sum exact
        x = rng.integers(-64, 64, size=2 ** rng.integers(0, 6)) / 8.0
        F = from_weighted_samples(x, np.ones(x.size), x.size)
        exact &= distortion_risk(F, identity()) == x.mean()
        y = rng.normal(size=rng.integers(1, 20))
        G = from_weighted_samples(y, np.ones(y.size), y.size)
        mean_dev = max(mean_dev, abs(distortion_risk(G, identity()) - y.mean()))
    var_dev = 0.0
    for _ in range(100):
        k = rng.integers(1, 10)
        x = np.sort(rng.choice(np.linspace(-3, 3, 61), size=k, replace=False))
        p = rng.dirichlet(np.ones(k))
        F = StepFunction(x, np.cumsum(p))
        var_dev = max(var_dev, abs(variance_risk(F, (-3, 3)) - (p @ x ** 2 - (p @ x) ** 2)))
    lip_viol = 0
    lo, hi = -3.0, 3.0
    funcs = [parse_risk(n) for n in ("mean", "cvar:0.25", "ccar:0.25", "variance")]
    for _ in range(1000):
        pair = []
        for _ in range(2):
            k = rng.integers(1, 10)
            x = np.sort(rng.choice(np.linspace(lo, hi, 61), size=k, replace=False))
            pair.append(StepFunction(x, np.cumsum(rng.dirichlet(np.ones(k)))))
        d = sup_norm_distance(*pair)
        for f in funcs:
            gap = abs(f(pair[0], (lo, hi)) - f(pair[1], (lo, hi)))
            lip_viol += gap > f.lipschitz_constant(hi - lo) * d + 1e-12
    ok = exact and mean_dev <= 1e-12 and var_dev <= 1e-12 and lip_viol == 0
    return Outcome(ok, f"dyadic means bitwise equal: {exact}; real-valued mean dev {mean_dev:.1e}; "
                       f"variance dev {var_dev:.1e}; Lipschitz violations {lip_viol}/4000")


def criterion_9() -> Outcome:
    cases = [
        (build_toy_chain(), Policy.uniform(4, 1)),
        (build_toy_bandit(), Policy.deterministic([1], 2)),
        (build_toy_bandit(reward_p=0.3), Policy.uniform(1, 2)),
        (build_random_udag(1, 3, 4, 3, seed=2), None),
        (make_env("cliffwalk", horizon=20), None),
    ]
    worst = 0.0
    for mdp, pi in cases:
        pi = pi if pi is not None else optimal_policy(mdp)
        data = sample_dataset(mdp, Policy.uniform(mdp.n_states, mdp.n_actions), 5, 0)
        dm = estimate_dm(data, compute_return_model(mdp, pi))
        worst = max(worst, sup_norm_distance(dm, true_cdf(mdp, pi)))
    return Outcome(worst <= 1e-12, f"max sup-norm(DM, true) = {worst:.1e} over {len(cases)} fixtures (tol 1e-12)")


def criterion_10() -> Outcome:
    cfg = PRESETS["reference"]
    one = run_sweep(cfg, threads=1)
    four = run_sweep(cfg, threads=4)
    return Outcome(one == four, f"{len(one.splitlines())} lines; byte-identical: {one == four}")


CRITERIA = {
    1: ("oracle unbiasedness", criterion_1, 1.0),
    2: ("variance recursion", criterion_2, 120.0),
    3: ("Cramer-Rao attainment", criterion_3, 10.0),
    4: ("IS-clip rate", criterion_4, 180.0),
    5: ("band coverage", criterion_5, 120.0),
    6: ("C-IS dominance", criterion_6, 120.0),
    7: ("Cliffwalk ordering", criterion_7, 1800.0),
    8: ("risk-layer exactness", criterion_8, 30.0),
    9: ("DM exactness", criterion_9, 1.0),
    10: ("determinism", criterion_10, 120.0),
}


def run_criterion(k: int) -> tuple[bool, str]:
    name, fn, budget = CRITERIA[k]
    start = time.perf_counter()
    try:
        out = fn()
    except OpriskError as exc:
        out = Outcome(False, f"raised {type(exc).__name__}: {exc}")
    elapsed = time.perf_counter() - start
    ok = out.ok and elapsed <= budget
    line = (f"{'PASS' if ok else 'FAIL'} criterion {k} ({name}): {out.detail}; "
            f"{elapsed:.2f}s (budget {budget:g}s)")
    RESULTS[k] = line
    return ok, line


@pytest.mark.parametrize("k", sorted(CRITERIA))
def test_criterion(k):
    ok, line = run_criterion(k)
    print(line)
    assert ok, line


if __name__ == "__main__":
    for k in sorted(CRITERIA):
        print(run_criterion(k)[1], flush=True)
