from __future__ import annotations

import math

import numpy as np
import pytest

from oprisk.envs import build_toy_bandit, make_env, optimal_policy
from oprisk.errors import AllWeightsZero, ZeroStepwiseNormalizer
from oprisk.estimators import (
    ISCLIP_BOUND_C1,
    ISCLIP_BOUND_C2,
    ModelSkeleton,
    bernstein_halfwidth,
    c_is_choices,
    contributions,
    crossfit_estimate,
    diagnostic_bounds,
    direct_mean_estimators,
    dr_recursive,
    empirical_variance,
    estimate_c_is,
    estimate_dm,
    estimate_dr,
    estimate_f_is,
    estimate_is_clip,
    estimate_m_dr,
    estimate_s_is,
    estimate_wdr,
    estimate_wis,
    fit_model,
)
from oprisk.mdp import Dataset, Policy, mixture_policy, sample_dataset
from oprisk.model import ReturnDistributionModel, compute_return_model, true_cdf
from oprisk.risk import distortion_risk, identity
from oprisk.stepfn import ValidCdf, sup_norm_distance

from conftest import random_policy

T = np.array([-1.0, 0.0, 0.5, 1.0, 2.0])


def _udag_setup(udag, n, seed, lam=0.5):
    rng = np.random.default_rng(seed)
    pi = random_policy(rng, udag.n_states, udag.n_actions)
    beta = mixture_policy(pi, lam)
    return pi, beta, sample_dataset(udag, beta, n, seed)


# -- importance sampling --------------------------------------------------------

def test_f_is_on_policy_is_empirical_cdf():
    data = Dataset([[0, 0], [0, 0]], [[0], [0]], [[1.0], [3.0]], Policy.uniform(1, 1))
    assert estimate_f_is(data, Policy.uniform(1, 1))(2.0) == 0.5


def test_bandit_pair_hand_values(bandit_pair):
    data, pi = bandit_pair
    f = estimate_f_is(data, pi)
    assert f(0.5) == 0.0 and f(1.0) == 1.0
    assert estimate_s_is(data, pi)(0.5) == 0.0
    wis = estimate_wis(data, pi)
    assert isinstance(wis, ValidCdf) and wis(1.0) == 1.0 and wis(0.5) == 0.0
    assert estimate_c_is(data, pi, [0.5])(0.5) == 0.0
    assert c_is_choices(data, pi, [0.5])[0]


def test_partition_identity(udag):
    pi, _, data = _udag_setup(udag, 40, 1)
    w = data.cum_weights(pi)[:, -1].mean()
    f, s = estimate_f_is(data, pi), estimate_s_is(data, pi)
    t = np.linspace(-1, 4, 101)
    assert np.allclose(f(t) + (1 - s(t)), w, atol=1e-12)


def test_on_policy_s_is_equals_f_is(udag):
    pi = Policy.uniform(udag.n_states, 2)
    data = sample_dataset(udag, pi, 50, 3)
    t = np.linspace(-1, 4, 101)
    assert np.allclose(estimate_s_is(data, pi)(t), estimate_f_is(data, pi)(t), atol=1e-12)
    assert np.allclose(estimate_wis(data, pi)(t), estimate_f_is(data, pi)(t), atol=1e-12)


def test_c_is_ties_choose_s_is_and_agree(udag):
    pi = Policy.uniform(udag.n_states, 2)
    data = sample_dataset(udag, pi, 30, 5)
    grid = np.linspace(0, 3, 7)
    assert not c_is_choices(data, pi, grid).any()
    t = np.linspace(-1, 4, 51)
    assert np.allclose(estimate_c_is(data, pi, grid)(t), estimate_f_is(data, pi)(t), atol=1e-12)


def test_c_is_holds_choice_between_grid_points(udag):
    pi, _, data = _udag_setup(udag, 60, 2)
    grid = np.linspace(0, 3, 5)
    choice = c_is_choices(data, pi, grid)
    c, f, s = estimate_c_is(data, pi, grid), estimate_f_is(data, pi), estimate_s_is(data, pi)
    for j, g in enumerate(grid):
        x = np.linspace(g, grid[j + 1] if j + 1 < grid.size else g + 2, 9, endpoint=False)
        ref = f(x) if choice[j] else s(x)
        assert np.allclose(c(x), ref)


def test_wis_self_normalizes():
    data = Dataset([[0, 0]], [[1]], [[1.0]], Policy.uniform(1, 2))
    pi = Policy.deterministic([1], 2)
    assert np.array_equal(estimate_wis(data, pi)(T), [0, 0, 0, 1, 1])
    zero = Dataset([[0, 0]], [[0]], [[0.0]], Policy.uniform(1, 2))
    with pytest.raises(AllWeightsZero):
        estimate_wis(zero, pi)


def test_is_clip():
    data = Dataset([[0, 0]], [[1]], [[1.0]], Policy.uniform(1, 2))
    pi = Policy.deterministic([1], 2)
    assert estimate_f_is(data, pi)(1.0) == 2.0
    assert estimate_is_clip(data, pi)(1.0) == 1.0


def test_is_clip_never_exceeds_one(udag):
    for seed in range(20):
        pi, _, data = _udag_setup(udag, 10, seed, lam=0.2)
        assert estimate_is_clip(data, pi).v.max() <= 1.0


def test_is_unbiased_monte_carlo(udag):
    pi, beta, big = _udag_setup(udag, 40000, 8)
    F = true_cdf(udag, pi)
    t = np.array([0.5, 1.25, 2.0])
    c = contributions(big, pi, "f_is", t).reshape(10000, 4, -1).mean(1)
    se = c.std(0, ddof=1) / math.sqrt(c.shape[0])
    assert np.all(np.abs(c.mean(0) - F(t)) < 3 * se)


# -- model-based -----------------------------------------------------------------

def test_dm_with_true_model(chain):
    pi = Policy.uniform(4, 1)
    data = sample_dataset(chain, pi, 5, 0)
    dm = estimate_dm(data, compute_return_model(chain, pi))
    assert dm(0.5) == 0.5
    assert sup_norm_distance(dm, true_cdf(chain, pi)) == 0.0


def test_dm_identical_start_states_gives_model_cdf(udag):
    pi, _, data = _udag_setup(udag, 20, 4)
    other = Policy.uniform(udag.n_states, 2)
    model = compute_return_model(udag, other)
    starts = np.zeros_like(data.states)
    starts[:] = data.states[0]
    same = Dataset(starts, data.actions, data.rewards, Policy.uniform(udag.n_states, 2))
    dm = estimate_dm(same, model)
    assert sup_norm_distance(dm, model.state_cdf(int(data.states[0, 0]))) < 1e-15


def test_dr_bandit_hand_values(bandit):
    pi = Policy.deterministic([1], 2)
    beta = Policy.uniform(1, 2)
    model = compute_return_model(bandit, pi)
    step = np.array([0, 0, 0, 1, 1])
    for a, r in ((0, 0.0), (1, 1.0)):
        data = Dataset([[0, 0]], [[a]], [[r]], beta)
        assert np.allclose(estimate_dr(data, pi, model)(T), step)


def test_dr_with_zero_model_is_f_is(udag):
    pi, _, data = _udag_setup(udag, 30, 6)
    zero = ReturnDistributionModel.zero(udag.n_states, 2, udag.horizon)
    t = np.linspace(-1, 4, 81)
    assert np.allclose(estimate_dr(data, pi, zero)(t), estimate_f_is(data, pi)(t), atol=1e-12)


def test_dr_unrolled_matches_recursion(udag):
    pi, _, data = _udag_setup(udag, 12, 7)
    model = compute_return_model(udag, Policy.uniform(udag.n_states, 2))
    t = np.array([0.0, 0.625, 1.25, 2.5])
    c = contributions(data, pi, "dr", t, model)
    for i in range(data.n):
        for j, x in enumerate(t):
            assert c[i, j] == pytest.approx(dr_recursive(data, pi, model, i, x), abs=1e-12)
    assert np.allclose(estimate_dr(data, pi, model)(t), c.mean(0), atol=1e-12)


def test_wdr_bandit_hand_values(bandit_pair, bandit):
    data, pi = bandit_pair
    model = compute_return_model(bandit, pi)
    assert np.allclose(estimate_wdr(data, pi, model)(T), [0, 0, 0, 1, 1])
    single = Dataset([[0, 0]], [[1]], [[1.0]], data.behavior)
    assert np.allclose(estimate_wdr(single, pi, model)(T), 0.0)


def test_wdr_on_policy_equals_dr(udag):
    pi = Policy.uniform(udag.n_states, 2)
    data = sample_dataset(udag, pi, 25, 1)
    model = compute_return_model(udag, Policy.deterministic([1] * udag.n_states, 2))
    t = np.linspace(-1, 4, 81)
    assert np.allclose(estimate_wdr(data, pi, model)(t), estimate_dr(data, pi, model)(t), atol=1e-12)


def test_wdr_zero_normalizer(bandit):
    pi = Policy.deterministic([1], 2)
    data = Dataset([[0, 0]], [[0]], [[0.0]], Policy.uniform(1, 2))
    with pytest.raises(ZeroStepwiseNormalizer):
        estimate_wdr(data, pi, compute_return_model(bandit, pi))


def test_m_dr_is_valid(udag):
    model = compute_return_model(udag, Policy.uniform(udag.n_states, 2))
    hi = udag.return_bounds[1]
    for seed in range(200):
        pi, _, data = _udag_setup(udag, 3, seed, lam=0.3)
        out = estimate_m_dr(data, pi, model, upper=hi)
        assert isinstance(out, ValidCdf) and out(hi) == 1.0


def test_crossfit_small_and_deterministic(bandit):
    pi = Policy.deterministic([1], 2)
    beta = Policy.uniform(1, 2)
    sk = ModelSkeleton(1, 2, upper=1.0)
    data = Dataset([[0, 0]] * 4, [[0], [0], [1], [1]], [[0.0], [0.0], [1.0], [1.0]], beta)
    single = estimate_dr(data, pi, fit_model(data, pi, sk))
    cross = crossfit_estimate(data, pi, "dr", sk)
    assert np.allclose(cross(T), single(T))
    two = Dataset([[0, 0]] * 2, [[0], [1]], [[0.0], [1.0]], beta)
    crossfit_estimate(two, pi, "m_dr", sk)


def test_crossfit_dr_is_accurate(chain):
    pi = Policy.uniform(4, 1)
    data = sample_dataset(chain, pi, 10 ** 4, 11)
    est = crossfit_estimate(data, pi, "dr", ModelSkeleton(4, 1))
    assert sup_norm_distance(est, true_cdf(chain, pi)) < 0.05


# -- variances, bands and bounds --------------------------------------------------

def test_empirical_variance():
    assert empirical_variance(np.ones(5)) == 0.0
    assert empirical_variance(np.array([0.0, 2.0])) == 2.0
    x = np.random.default_rng(0).normal(size=(50, 3))
    ref = ((x - x.mean(0)) ** 2).sum(0) / 49
    assert np.allclose(empirical_variance(x), ref, atol=1e-12)


def test_bernstein_halfwidth_instantiation():
    L = math.log(40.0)
    assert bernstein_halfwidth(0.0, 2, 1, 0.1, 2.0) == pytest.approx(L * (math.sqrt(8) + 2 / 3), rel=1e-14)
    assert bernstein_halfwidth(0.1, 100, 10, 0.1, 2.0) > bernstein_halfwidth(0.1, 200, 10, 0.1, 2.0)


def test_diagnostic_bounds_on_policy(chain):
    pi = Policy.uniform(4, 1)
    data = sample_dataset(chain, pi, 64, 0)
    b = diagnostic_bounds(data, pi, "is_clip")
    assert b.value == pytest.approx(ISCLIP_BOUND_C1 / 8 + ISCLIP_BOUND_C2 / 64)
    assert b.label == "expectation"
    m = diagnostic_bounds(data, pi, "m_dr", delta=0.1)
    assert m.value == pytest.approx(math.sqrt(72 * math.log(8 * 8 / 0.1) / 64))


def test_m_dr_bound_is_conservative_on_cliffwalk():
    mdp = make_env("cliffwalk", horizon=8)
    pi = optimal_policy(mdp)
    F = true_cdf(mdp, pi)
    beta = mixture_policy(pi, 0.5)
    sk = ModelSkeleton(mdp.n_states, 4, upper=mdp.return_bounds[1])
    for seed in range(100):
        data = sample_dataset(mdp, beta, 100, seed)
        est = estimate_m_dr(data, pi, fit_model(data, pi, sk), upper=sk.upper)
        assert sup_norm_distance(est, F) <= diagnostic_bounds(data, pi, "m_dr", 0.1).value


# -- direct means -----------------------------------------------------------------

def test_direct_means_examples(bandit_pair, bandit, udag):
    data, pi = bandit_pair
    means = direct_mean_estimators(data, pi, compute_return_model(bandit, pi))
    assert means.is_mean == 1.0
    on = Policy.uniform(udag.n_states, 2)
    d2 = sample_dataset(udag, on, 30, 2)
    m2 = direct_mean_estimators(d2, on, compute_return_model(udag, on))
    assert m2.is_mean == pytest.approx(d2.returns.mean(), abs=1e-12)


def test_plug_in_means_vs_direct_means(udag):
    pi, _, data = _udag_setup(udag, 40, 9)
    lo, hi = udag.return_bounds
    model = compute_return_model(udag, Policy.uniform(udag.n_states, 2))
    means = direct_mean_estimators(data, pi, model)
    w_bar = data.cum_weights(pi)[:, -1].mean()
    plug_is = distortion_risk(estimate_f_is(data, pi), identity(), (lo, hi))
    # a CDF ending at mean(w) instead of 1 leaves mass 1 - mean(w) at the upper end
    assert plug_is == pytest.approx(means.is_mean + hi * (1 - w_bar), abs=1e-12)
    plug_dr = distortion_risk(estimate_dr(data, pi, model), identity(), (lo, hi))
    assert plug_dr == pytest.approx(means.dr_mean, abs=1e-12)
    plug_wis = distortion_risk(estimate_wis(data, pi), identity(), (lo, hi))
    assert plug_wis == pytest.approx(means.wis_mean, abs=1e-12)
