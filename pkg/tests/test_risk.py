from __future__ import annotations

import numpy as np
import pytest

from oprisk.errors import AlphaOutOfRange, InvalidDistortion
from oprisk.risk import (
    ccar,
    cpt_risk,
    custom_distortion,
    cvar,
    distortion_risk,
    identity,
    opra,
    parse_risk,
    proportional_hazard,
    variance_risk,
    wang,
)
from oprisk.stepfn import StepFunction

THREE = StepFunction([0, 1, 2], [0.25, 0.5, 1.0])
COIN = StepFunction([0, 1], [0.5, 1.0])


def random_cdf(rng, lo=-2.0, hi=3.0, max_atoms=8):
    k = rng.integers(1, max_atoms + 1)
    x = np.sort(rng.choice(np.linspace(lo, hi, 41), size=k, replace=False))
    p = rng.dirichlet(np.ones(k))
    return StepFunction(x, np.cumsum(p)), x, p


def test_mean_and_cvar_examples():
    assert distortion_risk(THREE, identity()) == pytest.approx(1.25)
    assert distortion_risk(THREE, cvar(0.0)) == distortion_risk(THREE, identity())
    assert distortion_risk(COIN, cvar(0.5)) == pytest.approx(1.0)
    assert distortion_risk(COIN, ccar(0.5)) == pytest.approx(0.0)


def test_variance_examples():
    assert variance_risk(StepFunction([1.5], [1.0])) == 0.0
    assert variance_risk(THREE) == pytest.approx(0.6875)


def test_variance_matches_moments():
    rng = np.random.default_rng(0)
    for _ in range(100):
        F, x, p = random_cdf(rng)
        m1 = p @ x
        assert variance_risk(F, (-2.0, 3.0)) == pytest.approx(p @ x ** 2 - m1 ** 2, abs=1e-12)
        assert distortion_risk(F, identity(), (-2.0, 3.0)) == pytest.approx(m1, abs=1e-12)


def test_cvar_and_ccar_are_tail_means():
    rng = np.random.default_rng(1)
    for _ in range(50):
        x = np.sort(rng.normal(size=8))
        F = StepFunction(x, np.arange(1, 9) / 8)
        # with 8 equal atoms the 0.25 tails are exactly two atoms
        assert distortion_risk(F, cvar(0.75)) == pytest.approx(x[-2:].mean())
        assert distortion_risk(F, ccar(0.25)) == pytest.approx(x[:2].mean())


def test_cpt_examples():
    assert cpt_risk(THREE, identity(), identity(), 0.0) == pytest.approx(1.25)
    assert cpt_risk(StepFunction([0.7], [1.0]), identity(), identity(), 0.7) == 0.0
    sym = StepFunction([-1, 1], [0.5, 1.0])
    assert cpt_risk(sym, identity(), identity(), 0.0) == pytest.approx(0.0)


def test_lipschitz_constants():
    D = 4.0
    assert parse_risk("mean").lipschitz_constant(D) == D
    assert parse_risk("cvar:0.25").lipschitz_constant(D) == pytest.approx(D / 0.75)
    assert parse_risk("variance").lipschitz_constant(D) == 3 * D ** 2


@pytest.mark.parametrize("name", ["mean", "cvar:0.25", "ccar:0.25", "variance", "mean_variance:0.5"])
def test_lipschitz_propagation(name):
    rho = parse_risk(name)
    rng = np.random.default_rng(hash(name) % 2 ** 32)
    lo, hi = -2.0, 3.0
    L = rho.lipschitz_constant(hi - lo)
    for _ in range(1000):
        F, _, _ = random_cdf(rng)
        G, _, _ = random_cdf(rng)
        from oprisk.stepfn import sup_norm_distance
        gap = abs(rho(F, (lo, hi)) - rho(G, (lo, hi)))
        assert gap <= L * sup_norm_distance(F, G) + 1e-12


def test_distortion_validation():
    with pytest.raises(InvalidDistortion):
        custom_distortion(lambda x: 1 - x)
    with pytest.raises(AlphaOutOfRange):
        cvar(1.0)
    with pytest.raises(AlphaOutOfRange):
        wang(0.0)
    g = custom_distortion(lambda x: x ** 2, "square")
    assert g(np.array([2.0])) == 1.0


def test_other_distortions_bracket_the_mean():
    assert distortion_risk(COIN, proportional_hazard(0.5)) == pytest.approx(np.sqrt(0.5))
    assert distortion_risk(COIN, wang(0.5)) == pytest.approx(0.5)


def test_parse_risk_names():
    for name in ("mean", "cvar:0.1", "ccar:0.3", "var:0.2", "variance", "mean_variance:2",
                 "prop_hazard:0.5", "wang:0.3", "cpt:0.5", "cpt:0,cvar:0.2,mean"):
        assert parse_risk(name).name
    with pytest.raises(InvalidDistortion):
        parse_risk("nope:1")


def test_opra_intervals():
    F = StepFunction([0.0, 1.0], [0.5, 1.0])
    rep = opra(F, 0.0, 0.1, [parse_risk("mean"), parse_risk("cvar:0.25")], (0.0, 1.0))
    for e in rep.entries:
        assert e.interval == (e.estimate, e.estimate)
    rep = opra(F, 0.1, 0.1, [parse_risk("mean"), parse_risk("cvar:0.25")], (0.0, 1.0))
    assert rep["mean"].interval == pytest.approx((0.4, 0.6))
    assert rep["mean"].cdf_error == rep["cvar:0.25"].cdf_error == 0.1
    assert rep["mean"].delta == rep["cvar:0.25"].delta == 0.1
