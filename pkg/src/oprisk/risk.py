"""Risk functionals of return distributions, evaluated exactly on step
functions, and simultaneous plug-in intervals."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .errors import AlphaOutOfRange, InvalidDistortion
from .stepfn import StepFunction


# -- distortions ----------------------------------------------------------------

@dataclass(frozen=True)
class Distortion:
    """Nondecreasing ``g`` with ``g(0) = 0`` and ``g(1) = 1``.

    ``fn`` is applied to survival values; named forms are written so that
    they also make sense slightly outside [0, 1], which happens for
    estimates that are not proper CDFs.  ``slope`` is the Lipschitz
    constant of ``g`` (None when unbounded).
    """

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    slope: float | None

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))


def _check_alpha(alpha: float, lo_open: bool = False) -> float:
    alpha = float(alpha)
    ok = (0 < alpha < 1) if lo_open else (0 <= alpha < 1)
    if not ok:
        raise AlphaOutOfRange(f"alpha must lie in {'(0, 1)' if lo_open else '[0, 1)'}, got {alpha}")
    return alpha


def identity() -> Distortion:
    return Distortion("mean", lambda x: x, 1.0)


def cvar(alpha: float) -> Distortion:
    alpha = _check_alpha(alpha)
    return Distortion(f"cvar:{alpha:g}", lambda x: np.minimum(x / (1 - alpha), 1.0), 1 / (1 - alpha))


def ccar(alpha: float) -> Distortion:
    """Mean of the lowest ``alpha`` fraction of returns."""
    alpha = float(alpha)
    if not 0 < alpha <= 1:
        raise AlphaOutOfRange(f"alpha must lie in (0, 1], got {alpha}")
    return Distortion(f"ccar:{alpha:g}", lambda x: np.maximum((x - (1 - alpha)) / alpha, 0.0), 1 / alpha)


def value_at_risk(alpha: float) -> Distortion:
    alpha = _check_alpha(alpha)
    return Distortion(f"var:{alpha:g}", lambda x: (x >= 1 - alpha).astype(float), None)


def proportional_hazard(a: float) -> Distortion:
    a = float(a)
    if not 0 < a <= 1:
        raise AlphaOutOfRange(f"exponent must lie in (0, 1], got {a}")
    return Distortion(f"prop_hazard:{a:g}", lambda x: np.clip(x, 0.0, 1.0) ** a, 1.0 if a == 1 else None)


def wang(alpha: float) -> Distortion:
    """Wang transform with a standard normal base: ``Φ(Φ⁻¹(x) − Φ⁻¹(α))``."""
    alpha = _check_alpha(alpha, lo_open=True)
    shift = special.ndtri(alpha)
    return Distortion(f"wang:{alpha:g}", lambda x: special.ndtr(special.ndtri(np.clip(x, 0.0, 1.0)) - shift), None)


def custom_distortion(fn: Callable, name: str = "custom", slope: float | None = None) -> Distortion:
    """Wrap a user function; inputs are clipped to [0, 1] and the function
    is checked on a 1000-point grid."""
    x = np.linspace(0.0, 1.0, 1001)
    y = np.asarray(fn(x), dtype=float)
    if abs(y[0]) > 1e-12 or abs(y[-1] - 1) > 1e-12 or np.any(np.diff(y) < -1e-12):
        raise InvalidDistortion(f"{name}: need g(0)=0, g(1)=1 and g nondecreasing")
    return Distortion(name, lambda v: np.asarray(fn(np.clip(v, 0.0, 1.0)), dtype=float), slope)


def validate_distortion(g: Distortion) -> None:
    x = np.linspace(0.0, 1.0, 1001)
    y = g(x)
    if abs(y[0]) > 1e-12 or abs(y[-1] - 1) > 1e-12 or np.any(np.diff(y) < -1e-12):
        raise InvalidDistortion(f"{g.name}: need g(0)=0, g(1)=1 and g nondecreasing")


def parse_distortion(name: str) -> Distortion:
    head, _, arg = name.partition(":")
    if head in ("id", "identity", "mean"):
        return identity()
    table = {"cvar": cvar, "ccar": ccar, "var": value_at_risk, "prop_hazard": proportional_hazard,
             "ph": proportional_hazard, "wang": wang}
    if head not in table or not arg:
        raise InvalidDistortion(f"unknown distortion {name!r}")
    return table[head](float(arg))


# -- exact integrals over step functions --------------------------------------

def _segments(F: StepFunction, lo: float, hi: float):
    """Breakpoints ``p_0 = lo < ... < p_k = hi`` and F on each ``[p_j, p_{j+1})``."""
    inner = F.t[(F.t > lo) & (F.t < hi)]
    p = np.concatenate([[lo], inner, [hi]])
    return p, F(p[:-1])


def _support(F: StepFunction, support) -> tuple[float, float]:
    if support is None:
        return float(F.t[0]), float(F.t[-1])
    a, b = float(support[0]), float(support[1])
    return min(a, float(F.t[0])), max(b, float(F.t[-1]))


def distortion_risk(F: StepFunction, g: Distortion, support=None) -> float:
    """``a + ∫_a^b g(1 - F(t)) dt`` evaluated segment by segment."""
    a, b = _support(F, support)
    if b <= a:
        return a
    p, f = _segments(F, a, b)
    return float(a + np.sum(g(1.0 - f) * np.diff(p)))


def variance_risk(F: StepFunction, support=None) -> float:
    """``2∫(t-a) S(t) dt - (∫S(t) dt)^2`` over ``[a, b]``."""
    a, b = _support(F, support)
    if b <= a:
        return 0.0
    p, f = _segments(F, a, b)
    S = 1.0 - f
    q = p - a
    first = np.sum(S * np.diff(q))
    second = np.sum(S * (q[1:] ** 2 - q[:-1] ** 2))
    return float(second - first ** 2)


def cpt_risk(F: StepFunction, g_plus: Distortion, g_minus: Distortion, cut: float, support=None) -> float:
    """Gains above ``cut`` distorted by ``g_plus`` minus losses below it
    distorted by ``g_minus``:

        ∫_c^b g⁺(S(x)) dx - ∫_a^c g⁻(F(x)) dx.
    """
    a, b = _support(F, support)
    c = float(cut)
    gain = loss = 0.0
    if b > c:
        p, f = _segments(F, max(a, c), b)
        gain = float(np.sum(g_plus(1.0 - f) * np.diff(p)))
        if c < a:
            gain += (a - c) * float(g_plus(1.0 - F.left))
    if c > a:
        p, f = _segments(F, a, min(b, c))
        loss = float(np.sum(g_minus(f) * np.diff(p)))
        if c > b:
            loss += (c - b) * float(g_minus(F.final))
    return gain - loss


# -- functionals ----------------------------------------------------------------

@dataclass(frozen=True)
class RiskFunctional:
    """A named risk functional.

    ``kind`` is ``distortion``, ``variance``, ``mean_variance`` or ``cpt``.
    The Lipschitz constant depends on the return width ``D``.
    """

    name: str
    kind: str
    g: Distortion | None = None
    lam: float = 0.0
    g_minus: Distortion | None = None
    cut: float = 0.0

    def __call__(self, F: StepFunction, support=None) -> float:
        if self.kind == "distortion":
            return distortion_risk(F, self.g, support)
        if self.kind == "variance":
            return variance_risk(F, support)
        if self.kind == "mean_variance":
            return distortion_risk(F, identity(), support) + self.lam * variance_risk(F, support)
        if self.kind == "cpt":
            return cpt_risk(F, self.g, self.g_minus, self.cut, support)
        raise ValueError(f"unknown functional kind {self.kind!r}")

    def lipschitz_constant(self, D: float) -> float | None:
        if self.kind == "distortion":
            return None if self.g.slope is None else D * self.g.slope
        if self.kind == "variance":
            return 3 * D ** 2
        if self.kind == "mean_variance":
            return D + 3 * self.lam * D ** 2
        if self.g.slope is None or self.g_minus.slope is None:
            return None
        return D * max(self.g.slope, self.g_minus.slope)


def distortion_functional(g: Distortion) -> RiskFunctional:
    validate_distortion(g)
    return RiskFunctional(g.name, "distortion", g)


def parse_risk(name: str) -> RiskFunctional:
    """Build a functional from its command-line name.

    ``mean``, ``cvar:<a>``, ``ccar:<a>``, ``var:<a>``, ``prop_hazard:<a>``,
    ``wang:<a>``, ``variance``, ``mean_variance:<lambda>`` and
    ``cpt:<cut>[,<g+>[,<g->]]`` where the distortions default to identity.
    """
    name = name.strip()
    head, _, arg = name.partition(":")
    if head == "variance":
        return RiskFunctional("variance", "variance")
    if head == "mean_variance":
        return RiskFunctional(name, "mean_variance", lam=float(arg))
    if head == "cpt":
        parts = arg.split(",")
        gp = parse_distortion(parts[1]) if len(parts) > 1 else identity()
        gm = parse_distortion(parts[2]) if len(parts) > 2 else identity()
        validate_distortion(gp)
        validate_distortion(gm)
        return RiskFunctional(name, "cpt", gp, g_minus=gm, cut=float(parts[0]))
    return distortion_functional(parse_distortion(name))


def named_functionals(alpha: float = 0.25, lam: float = 1.0) -> dict[str, RiskFunctional]:
    """The standard catalogue at level ``alpha``."""
    _check_alpha(alpha)
    items = [
        distortion_functional(identity()),
        distortion_functional(cvar(alpha)),
        distortion_functional(ccar(alpha if alpha > 0 else 1.0)),
        distortion_functional(value_at_risk(alpha)),
        distortion_functional(proportional_hazard(0.5)),
        RiskFunctional("variance", "variance"),
        RiskFunctional(f"mean_variance:{lam:g}", "mean_variance", lam=lam),
    ]
    return {f.name: f for f in items}


@dataclass(frozen=True)
class RiskEntry:
    name: str
    estimate: float
    lipschitz_constant: float | None
    halfwidth: float | None
    cdf_error: float
    delta: float

    @property
    def interval(self) -> tuple[float, float] | None:
        if self.halfwidth is None:
            return None
        return self.estimate - self.halfwidth, self.estimate + self.halfwidth


@dataclass(frozen=True)
class RiskReport:
    entries: list[RiskEntry] = field(default_factory=list)

    def __getitem__(self, name: str) -> RiskEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def to_rows(self) -> list[dict]:
        return [e.__dict__.copy() for e in self.entries]


def opra(F_hat: StepFunction, epsilon: float, delta: float, functionals: Sequence[RiskFunctional],
         support: tuple[float, float]) -> RiskReport:
    """Plug-in estimates with half-widths ``L * epsilon``; one CDF error
    ``epsilon`` (valid with probability ``1 - delta``) serves every
    functional at once."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    D = float(support[1]) - float(support[0])
    entries = []
    for f in functionals:
        L = f.lipschitz_constant(D)
        entries.append(RiskEntry(f.name, f(F_hat, support), L, None if L is None else L * epsilon,
                                 float(epsilon), float(delta)))
    return RiskReport(entries)
