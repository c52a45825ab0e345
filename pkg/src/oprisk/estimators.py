"""Off-policy CDF estimators, per-trajectory contributions, empirical
variances and confidence bands."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    AllWeightsZero,
    DatasetTooSmall,
    ModelStateMissing,
    NeedAtLeastTwoTrajectories,
    ZeroStepwiseNormalizer,
)
from .mdp import Dataset, Policy, max_weight
from .model import ReturnDistributionModel, compute_return_model, learn_mdp
from .stepfn import StepFunction, ValidCdf, from_jumps, from_weighted_samples, monotonize_clip

KINDS = ("f_is", "s_is", "c_is", "wis", "is_clip", "dm", "dr", "wdr", "m_dr")
MODEL_KINDS = frozenset({"dm", "dr", "wdr", "m_dr"})
LINEAR_KINDS = frozenset({"f_is", "s_is", "dr"})
_JUMP_TOL = 1e-12
_TIE_TOL = 1e-12


def _normalize_kind(kind: str) -> str:
    k = kind.lower().replace("-", "_")
    if k not in KINDS:
        raise ValueError(f"unknown estimator {kind!r}; expected one of {', '.join(KINDS)}")
    return k


# -- importance sampling -------------------------------------------------------

def _final_weights(data: Dataset, pi: Policy) -> np.ndarray:
    return data.cum_weights(pi)[:, -1]


def estimate_f_is(data: Dataset, pi: Policy) -> StepFunction:
    """``(1/n) sum_i w_H^i 1{z_H^i <= t}``."""
    return from_weighted_samples(data.returns, _final_weights(data, pi), data.n, "le")


def estimate_s_is(data: Dataset, pi: Policy) -> StepFunction:
    """``1 - (1/n) sum_i w_H^i 1{z_H^i > t}``, the CDF implied by the IS
    estimate of the survival function."""
    return 1.0 - from_weighted_samples(data.returns, _final_weights(data, pi), data.n, "gt")


def estimate_wis(data: Dataset, pi: Policy) -> ValidCdf:
    w = _final_weights(data, pi)
    total = w.sum()
    if not total > 0:
        raise AllWeightsZero("every trajectory has zero importance weight")
    return ValidCdf.snap(from_weighted_samples(data.returns, w, total, "le"))


def estimate_is_clip(data: Dataset, pi: Policy) -> StepFunction:
    return estimate_f_is(data, pi).clip(hi=1.0)


def estimate_c_is(data: Dataset, pi: Policy, grid: Sequence[float]) -> StepFunction:
    """Pick F-IS or S-IS at each grid point by lower sample variance.

    F-IS wins only on a strict inequality.  Between grid points the choice
    of the grid point to the left is kept; left of the grid, the first
    choice applies.
    """
    grid = np.sort(np.asarray(grid, dtype=float))
    if grid.size == 0:
        raise ValueError("grid must be nonempty")
    use_f = c_is_choices(data, pi, grid)
    f = estimate_f_is(data, pi)
    s = estimate_s_is(data, pi)
    t = np.union1d(np.union1d(f.t, s.t), grid)
    j = np.clip(np.searchsorted(grid, t, side="right") - 1, 0, None)
    v = np.where(use_f[j], f(t), s(t))
    left = f.left if use_f[0] else s.left
    return StepFunction(t, v, left)


def c_is_choices(data: Dataset, pi: Policy, grid) -> np.ndarray:
    """Boolean per grid point: True where F-IS is selected.

    Variances within a relative ``1e-12`` count as tied (roundoff makes
    mathematically equal variances differ in the last bits), and ties go
    to S-IS.
    """
    vf = empirical_variance(contributions(data, pi, "f_is", grid))
    vs = empirical_variance(contributions(data, pi, "s_is", grid))
    return vf < vs - _TIE_TOL * np.maximum(1.0, np.maximum(vf, vs))


# -- model-based ---------------------------------------------------------------

def _check_model(data: Dataset, model: ReturnDistributionModel, need_levels: bool = True) -> None:
    if data.n and data.states.max() >= model.n_states:
        raise ModelStateMissing(f"model covers {model.n_states} states, data uses state {data.states.max()}")
    if need_levels and model.horizon < data.horizon:
        raise ModelStateMissing(f"model horizon {model.horizon} is shorter than data horizon {data.horizon}")


def estimate_dm(data: Dataset, model: ReturnDistributionModel) -> ValidCdf:
    """Average of the model's level-1 CDFs at the observed start states."""
    _check_model(data, model, need_levels=False)
    freq = np.bincount(data.states[:, 0], minlength=model.n_states) / data.n
    p = freq @ model.state_pmf[1]
    keep = p > 0
    if not keep.any():
        raise ModelStateMissing("model has no return distribution for the observed start states")
    return ValidCdf.snap(StepFunction(model.atoms[1][keep], np.cumsum(p[keep]), 0.0))


def _grouped(keys: np.ndarray, z: np.ndarray, coef: np.ndarray):
    """Sum ``coef`` over identical (key, z) pairs, dropping zero coefficients."""
    nz = coef != 0
    if not nz.any():
        return None
    pairs = np.column_stack([keys[nz].astype(float), z[nz]])
    uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
    total = np.bincount(inv.reshape(-1), weights=coef[nz], minlength=uniq.shape[0])
    return uniq[:, 0].astype(np.int64), uniq[:, 1], total


def _model_corrected(data: Dataset, model: ReturnDistributionModel, state_coef: np.ndarray,
                     sa_coef: np.ndarray, term_coef: np.ndarray) -> StepFunction:
    """Exact step function of

        sum_i [ term_i 1{z_H <= t} + sum_h state_ih F̄_{s_h}(x) - sa_ih F̄_{s_h,a_h}(x) ],
        x = (t - z_{h-1}) / gamma^{h-1},

    assembled from the jumps of the model distributions.
    """
    _check_model(data, model)
    A = model.n_actions
    z = data.partial_returns
    pos = [data.returns]
    mass = [term_coef]
    for h in range(1, data.horizon + 1):
        scale = model.gamma ** (h - 1)
        atoms = model.atoms[h]
        s, a, zc = data.states[:, h - 1], data.actions[:, h - 1], z[:, h - 1]
        g = _grouped(s, zc, state_coef[:, h - 1])
        if g is not None:
            gs, gz, c = g
            m = model.state_pmf[h][gs] * c[:, None]
            p = gz[:, None] + scale * atoms[None, :]
            keep = m != 0
            pos.append(p[keep])
            mass.append(m[keep])
        g = _grouped(s * A + a, zc, sa_coef[:, h - 1])
        if g is not None:
            gsa, gz, c = g
            m = model.sa_pmf(h)[gsa // A, gsa % A] * -c[:, None]
            p = gz[:, None] + scale * atoms[None, :]
            keep = m != 0
            pos.append(p[keep])
            mass.append(m[keep])
    return from_jumps(np.concatenate(pos), np.concatenate(mass), 0.0, tol=_JUMP_TOL)


def estimate_dr(data: Dataset, pi: Policy, model: ReturnDistributionModel) -> StepFunction:
    """Doubly robust CDF estimate.

    Unrolling the per-step recursion from the terminal ``1{0 <= t}`` gives

        w_H 1{z_H <= t} + sum_h w_{h-1} F̄_{s_h}(x_h) - w_h F̄_{s_h,a_h}(x_h),

    with ``x_h = (t - z_{h-1}) / gamma^{h-1}``, averaged over trajectories.
    """
    cw = data.cum_weights(pi)
    n = data.n
    return _model_corrected(data, model, cw[:, :-1] / n, cw[:, 1:] / n, cw[:, -1] / n)


def estimate_wdr(data: Dataset, pi: Policy, model: ReturnDistributionModel) -> StepFunction:
    """Doubly robust estimate with step-wise self-normalized weights
    ``w_h / sum_j w_h^j`` (``n`` at step 0)."""
    cw = data.cum_weights(pi)
    norm = cw.sum(0)
    norm[0] = data.n
    for h in np.flatnonzero(norm <= 0):
        raise ZeroStepwiseNormalizer(int(h))
    scaled = cw / norm
    step = data.step_weights(pi)
    return _model_corrected(data, model, scaled[:, :-1], scaled[:, :-1] * step, scaled[:, -1])


def estimate_m_dr(data: Dataset, pi: Policy, model: ReturnDistributionModel,
                  upper: float | None = None) -> ValidCdf:
    return monotonize_clip(estimate_dr(data, pi, model), upper)


def dr_recursive(data: Dataset, pi: Policy, model: ReturnDistributionModel, i: int, t: float) -> float:
    """Single-trajectory DR value at ``t`` from the backward recursion

        F̂_h(x) = F̄_{s_h}(x) + w(a_h, s_h) (F̂_{h+1}((x - r_h)/gamma) - F̄_{s_h,a_h}(x)).

    A slow reference used to cross-check the unrolled form.
    """
    _check_model(data, model)
    sw = data.step_weights(pi)[i]
    s, a, r = data.states[i], data.actions[i], data.rewards[i]
    g = model.gamma
    H = data.horizon

    def f(h: int, x: float) -> float:
        if h == H + 1:
            return 1.0 if 0 <= x else 0.0
        base = float(model.state_cdf_at(h, s[h - 1], x))
        corr = f(h + 1, (x - r[h - 1]) / g) - float(model.sa_cdf_at(h, s[h - 1], a[h - 1], x))
        return base + sw[h - 1] * corr

    return f(1, float(t))


@dataclass(frozen=True)
class ModelSkeleton:
    """What a learned model needs beyond the data itself."""

    n_states: int
    n_actions: int
    horizon_override: int | None = None
    mode: str = "auto"
    n_atoms: int = 1024
    upper: float | None = None


def fit_model(data: Dataset, pi: Policy, skeleton: ModelSkeleton) -> ReturnDistributionModel:
    learned = learn_mdp(data, skeleton.n_states, skeleton.n_actions, skeleton.horizon_override)
    return compute_return_model(learned, pi, mode=skeleton.mode, n_atoms=skeleton.n_atoms)


@dataclass(frozen=True, eq=False)
class CrossfitFolds:
    """The two index-parity halves of a dataset and the model fitted on each."""

    halves: tuple
    models: tuple


def crossfit_folds(data: Dataset, pi: Policy, skeleton: ModelSkeleton) -> CrossfitFolds:
    if data.n < 2:
        raise DatasetTooSmall("cross-fitting needs at least two trajectories")
    idx = np.arange(data.n)
    halves = (data.subset(idx[0::2]), data.subset(idx[1::2]))
    return CrossfitFolds(halves, tuple(fit_model(h, pi, skeleton) for h in halves))


def crossfit_estimate(data: Dataset, pi: Policy, kind: str, skeleton: ModelSkeleton,
                      folds: CrossfitFolds | None = None) -> StepFunction:
    """Fit a model on the even-indexed half, estimate on the odd half, swap,
    and average.  ``m_dr`` is monotonized after averaging.  Precomputed
    ``folds`` can be shared between estimators."""
    kind = _normalize_kind(kind)
    if kind not in MODEL_KINDS:
        raise ValueError(f"cross-fitting applies to model-based estimators, not {kind!r}")
    if folds is None:
        folds = crossfit_folds(data, pi, skeleton)
    base = "dr" if kind == "m_dr" else kind
    (a, b), (model_a, model_b) = folds.halves, folds.models
    parts = [_run_single(base, b, pi, model_a), _run_single(base, a, pi, model_b)]
    avg = 0.5 * parts[0] + 0.5 * parts[1]
    if kind == "m_dr":
        return monotonize_clip(avg, skeleton.upper)
    if kind == "dm":
        return ValidCdf.snap(avg)
    return avg


def _run_single(kind: str, data: Dataset, pi: Policy, model: ReturnDistributionModel | None,
                grid=None, upper: float | None = None) -> StepFunction:
    if kind == "f_is":
        return estimate_f_is(data, pi)
    if kind == "s_is":
        return estimate_s_is(data, pi)
    if kind == "c_is":
        return estimate_c_is(data, pi, grid)
    if kind == "wis":
        return estimate_wis(data, pi)
    if kind == "is_clip":
        return estimate_is_clip(data, pi)
    if model is None:
        raise ValueError(f"estimator {kind!r} needs a model")
    if kind == "dm":
        return estimate_dm(data, model)
    if kind == "dr":
        return estimate_dr(data, pi, model)
    if kind == "wdr":
        return estimate_wdr(data, pi, model)
    return estimate_m_dr(data, pi, model, upper)


@dataclass(frozen=True)
class EstimatorSpec:
    kind: str
    model: ReturnDistributionModel | None = None
    crossfit: bool = False
    variance_grid: tuple = ()
    skeleton: ModelSkeleton | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", _normalize_kind(self.kind))
        needs = self.kind in MODEL_KINDS
        if needs and self.model is None and not (self.crossfit and self.skeleton is not None):
            raise ValueError(f"estimator {self.kind!r} needs a model or cross-fitting with a skeleton")
        if not needs and self.model is not None:
            raise ValueError(f"estimator {self.kind!r} does not take a model")
        if self.kind == "c_is" and len(self.variance_grid) == 0:
            raise ValueError("c_is needs a variance grid")
        grid = np.asarray(self.variance_grid, dtype=float)
        if np.any(np.diff(grid) < 0):
            raise ValueError("variance grid must be sorted")

    def run(self, data: Dataset, pi: Policy, folds: CrossfitFolds | None = None) -> StepFunction:
        upper = self.skeleton.upper if self.skeleton is not None else None
        if self.kind in MODEL_KINDS and self.crossfit:
            return crossfit_estimate(data, pi, self.kind, self.skeleton, folds)
        return _run_single(self.kind, data, pi, self.model, self.variance_grid, upper)


# -- contributions, variances and bands ---------------------------------------

def contributions(data: Dataset, pi: Policy, kind: str, points,
                  model: ReturnDistributionModel | None = None) -> np.ndarray:
    """(n, m) matrix of per-trajectory summands at the given points.

    ``f_is``: ``w_H 1{z_H <= t}``; ``s_is``: ``w_H 1{z_H > t}`` (the survival
    summand); ``dr``: the unrolled doubly robust summand.  The estimate is
    the column mean (``1 - mean`` for ``s_is``).
    """
    kind = _normalize_kind(kind)
    t = np.atleast_1d(np.asarray(points, dtype=float))
    cw = data.cum_weights(pi)
    z = data.returns[:, None]
    w = cw[:, -1][:, None]
    if kind == "f_is":
        return w * (z <= t[None, :])
    if kind == "s_is":
        return w * (z > t[None, :])
    if kind != "dr":
        raise ValueError(f"no per-trajectory contributions for nonlinear estimator {kind!r}")
    if model is None:
        raise ValueError("dr contributions need a model")
    _check_model(data, model)
    out = w * (z <= t[None, :])
    zp = data.partial_returns
    for h in range(1, data.horizon + 1):
        x = (t[None, :] - zp[:, h - 1][:, None]) / model.gamma ** (h - 1)
        s = data.states[:, h - 1][:, None]
        a = data.actions[:, h - 1][:, None]
        out = out + cw[:, h - 1][:, None] * model.state_cdf_at(h, s, x) \
            - cw[:, h][:, None] * model.sa_cdf_at(h, s, a, x)
    return out


def empirical_variance(contribs, t: float | None = None) -> np.ndarray | float:
    """Unbiased (divisor n-1) sample variance of per-trajectory contributions.

    ``contribs`` is an (n,) or (n, m) array, or a sequence of step
    functions evaluated at ``t``.
    """
    if t is not None or (len(contribs) and isinstance(contribs[0], StepFunction)):
        vals = np.array([c(t) for c in contribs], dtype=float)
    else:
        vals = np.asarray(contribs, dtype=float)
    if vals.shape[0] < 2:
        raise NeedAtLeastTwoTrajectories("sample variance needs n >= 2")
    out = vals.var(axis=0, ddof=1)
    return float(out) if np.ndim(out) == 0 else out


def contribution_functions(data: Dataset, pi: Policy, kind: str = "f_is") -> list[StepFunction]:
    """Per-trajectory summands of F-IS or S-IS as step functions."""
    kind = _normalize_kind(kind)
    w = _final_weights(data, pi)
    if kind == "f_is":
        return [StepFunction([z], [wi], 0.0) for z, wi in zip(data.returns, w)]
    if kind == "s_is":
        return [StepFunction([z], [0.0], wi) for z, wi in zip(data.returns, w)]
    raise ValueError("step-function contributions are provided for f_is and s_is")


@dataclass(frozen=True)
class ConfidenceBand:
    points: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    halfwidth: np.ndarray
    delta: float
    method: str

    def contains(self, f) -> bool:
        v = f(self.points)
        return bool(np.all((self.lower <= v) & (v <= self.upper)))


def bernstein_halfwidth(var_n, n: int, n_points: int, delta: float, bound: float) -> np.ndarray:
    """Empirical Bernstein half-width for ``n_points`` simultaneous means of
    variables in ``[0, bound]``.

    ``L = ln(4M/delta)``; the sample variance is inflated to
    ``(sqrt(V_n) + bound sqrt(2L/(n-1)))^2`` and plugged into
    ``sqrt(2 V L / n) + 2 bound L / (3n)``.
    """
    if n < 2:
        raise NeedAtLeastTwoTrajectories("bands need n >= 2")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    L = math.log(4 * n_points / delta)
    vbar = (np.sqrt(np.asarray(var_n, dtype=float)) + bound * math.sqrt(2 * L / (n - 1))) ** 2
    return np.sqrt(2 * vbar * L / n) + 2 * bound * L / (3 * n)


def confidence_band(data: Dataset, pi: Policy, kind: str, grid, delta: float) -> ConfidenceBand:
    """Simultaneous empirical Bernstein band for F-IS or S-IS on ``grid``."""
    kind = _normalize_kind(kind)
    if kind not in ("f_is", "s_is"):
        raise ValueError("empirical Bernstein bands are defined for f_is and s_is")
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    c = contributions(data, pi, kind, grid)
    var_n = empirical_variance(c)
    est = c.mean(0) if kind == "f_is" else 1.0 - c.mean(0)
    W = max_weight(pi, data.behavior) ** data.horizon
    hw = bernstein_halfwidth(var_n, data.n, grid.size, delta, W)
    return _band(grid, est, hw, delta, "empirical_bernstein")


def _band(points, est, hw, delta, method) -> ConfidenceBand:
    hw = np.broadcast_to(np.asarray(hw, dtype=float), est.shape).copy()
    shown = np.clip(est, 0.0, 1.0)
    return ConfidenceBand(points, shown, np.clip(est - hw, 0.0, shown), np.clip(est + hw, shown, 1.0),
                          hw, delta, method)


ISCLIP_BOUND_C1 = math.log(4) * math.sqrt(math.log(2)) + 2 / math.sqrt(math.log(2))
ISCLIP_BOUND_C2 = 2 * math.log(4)


@dataclass(frozen=True)
class DiagnosticBound:
    value: float
    kind: str
    label: str


def diagnostic_bounds(data: Dataset, pi: Policy, kind: str, delta: float = 0.1,
                      mean_sq_weight: float | None = None) -> DiagnosticBound:
    """Theoretical sup-norm error bound for IS-clip or M-DR.

    IS-clip: ``c1 sqrt(E[w_H^2]/n) + c2 W / n`` with ``W = w_max^H``; a bound
    on the expected error (no ``delta``).  ``E[w_H^2]`` defaults to its
    sample mean.  M-DR: ``W sqrt(72/n ln(8 sqrt(n)/delta))``, holding with
    probability ``1 - delta``.
    """
    kind = _normalize_kind(kind)
    n = data.n
    W = max_weight(pi, data.behavior) ** data.horizon
    if kind == "is_clip":
        if mean_sq_weight is None:
            mean_sq_weight = float(np.mean(_final_weights(data, pi) ** 2))
        value = ISCLIP_BOUND_C1 * math.sqrt(mean_sq_weight / n) + ISCLIP_BOUND_C2 * W / n
        return DiagnosticBound(value, kind, "expectation")
    if kind == "m_dr":
        value = W * math.sqrt(72.0 / n * math.log(8 * math.sqrt(n) / delta))
        return DiagnosticBound(value, kind, "high_probability")
    raise ValueError("diagnostic bounds exist for is_clip and m_dr")


def diagnostic_band(data: Dataset, pi: Policy, kind: str, grid, delta: float,
                    model: ReturnDistributionModel | None = None) -> ConfidenceBand:
    """Estimate on ``grid`` plus/minus the diagnostic sup-norm bound."""
    kind = _normalize_kind(kind)
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    if kind == "is_clip":
        est = estimate_is_clip(data, pi)(grid)
    else:
        est = estimate_m_dr(data, pi, model)(grid)
    b = diagnostic_bounds(data, pi, kind, delta)
    return _band(grid, est, b.value, delta, "isclip_bound" if kind == "is_clip" else "mdr_bound")


@dataclass(frozen=True)
class DirectMeans:
    is_mean: float
    wis_mean: float
    dr_mean: float


def direct_mean_estimators(data: Dataset, pi: Policy, model: ReturnDistributionModel) -> DirectMeans:
    """Importance-sampling, weighted and doubly robust estimates of the mean
    return, computed without a CDF.

    The doubly robust mean is the per-decision form
    ``sum_h gamma^{h-1} (w_h r_h - w_h Q̄(s_h, a_h) + w_{h-1} V̄(s_h))``.
    """
    _check_model(data, model)
    cw = data.cum_weights(pi)
    w = cw[:, -1]
    z = data.returns
    total = w.sum()
    if not total > 0:
        raise AllWeightsZero("every trajectory has zero importance weight")
    dr = np.zeros(data.n)
    for h in range(1, data.horizon + 1):
        s, a = data.states[:, h - 1], data.actions[:, h - 1]
        V = model.mean_state_values(h)[s]
        Q = model.mean_sa_values(h)[s, a]
        dr += model.gamma ** (h - 1) * (cw[:, h] * data.rewards[:, h - 1] - cw[:, h] * Q + cw[:, h - 1] * V)
    return DirectMeans(float(np.mean(w * z)), float(np.sum(w * z) / total), float(dr.mean()))


def uniform_grid(lo: float, hi: float, m: int) -> np.ndarray:
    """``m`` evenly spaced points on ``[lo, hi]``."""
    return np.linspace(lo, hi, m)
