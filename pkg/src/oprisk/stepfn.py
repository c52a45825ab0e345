"""Right-continuous piecewise-constant functions.

Every CDF estimate in the package is a :class:`StepFunction`: sorted
breakpoints ``t``, the value ``v[j]`` on ``[t[j], t[j+1])`` and a value
``left`` below the first breakpoint.
"""
from __future__ import annotations

import json
from typing import Iterable, Sequence

import numpy as np

from .errors import ConstructionError, NonpositiveNormalizer

_CDF_TOL = 1e-9


class StepFunction:
    __slots__ = ("t", "v", "left")

    def __init__(self, t, v, left: float = 0.0):
        t = np.array(t, dtype=float).reshape(-1)
        v = np.array(v, dtype=float).reshape(-1)
        if t.size < 1:
            raise ConstructionError("a step function needs at least one breakpoint")
        if t.shape != v.shape:
            raise ConstructionError("breakpoints and values must have equal length")
        if np.any(np.diff(t) <= 0):
            raise ConstructionError("breakpoints must be strictly increasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v)) and np.isfinite(left)):
            raise ConstructionError("breakpoints and values must be finite")
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "left", float(left))
        self._check()

    def _check(self) -> None:
        pass

    def __setattr__(self, name, value):
        raise AttributeError("step functions are immutable")

    def __repr__(self) -> str:
        return f"{type(self).__name__}(m={self.t.size}, left={self.left:g}, final={self.v[-1]:g})"

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(self.t, x, side="right") - 1
        out = np.where(idx >= 0, self.v[np.maximum(idx, 0)], self.left)
        return float(out) if out.ndim == 0 else out

    evaluate = __call__

    @property
    def final(self) -> float:
        return float(self.v[-1])

    def as_step(self) -> "StepFunction":
        return StepFunction(self.t, self.v, self.left)

    def simplify(self) -> "StepFunction":
        """Drop breakpoints that do not change the value."""
        prev = np.concatenate([[self.left], self.v[:-1]])
        keep = self.v != prev
        if not keep.any():
            keep[0] = True
        return StepFunction(self.t[keep], self.v[keep], self.left)

    # arithmetic on the union of breakpoints
    def _binary(self, other, op) -> "StepFunction":
        if isinstance(other, StepFunction):
            t = np.union1d(self.t, other.t)
            return StepFunction(t, op(self(t), other(t)), op(self.left, other.left))
        return StepFunction(self.t, op(self.v, other), op(self.left, other))

    def __add__(self, other):
        return self._binary(other, np.add)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __rsub__(self, other):
        return StepFunction(self.t, other - self.v, other - self.left)

    def __mul__(self, c: float):
        return StepFunction(self.t, self.v * c, self.left * c)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def clip(self, lo: float | None = None, hi: float | None = None) -> "StepFunction":
        return StepFunction(self.t, np.clip(self.v, lo, hi), float(np.clip(self.left, lo, hi)))

    def to_dict(self) -> dict:
        return {"t": self.t.tolist(), "v": self.v.tolist(), "left": self.left}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "StepFunction":
        return cls(d["t"], d["v"], d.get("left", 0.0))

    @classmethod
    def from_json(cls, s: str) -> "StepFunction":
        return cls.from_dict(json.loads(s))


class ValidCdf(StepFunction):
    """A step function that is a distribution function: starts at 0,
    nondecreasing, within [0, 1] and ending at exactly 1."""

    __slots__ = ()

    def _check(self) -> None:
        if self.left != 0.0:
            raise ConstructionError("a CDF must vanish to the left of its support")
        v = self.v
        if v.min() < 0 or v.max() > 1 or np.any(np.diff(v) < 0) or v[-1] != 1.0:
            raise ConstructionError("values must be nondecreasing in [0, 1] and end at 1")

    @classmethod
    def snap(cls, f: StepFunction, tol: float = _CDF_TOL) -> "ValidCdf":
        """Remove floating-point noise of size at most ``tol`` from a CDF."""
        v = np.asarray(f.v, dtype=float)
        if abs(f.left) > tol or v.min() < -tol or v.max() > 1 + tol or abs(v[-1] - 1) > tol \
                or np.any(np.diff(v) < -tol):
            raise ConstructionError("function is not a CDF within tolerance")
        v = np.clip(np.maximum.accumulate(v), 0.0, 1.0)
        v[-1] = 1.0
        return cls(f.t, v, 0.0)

    def quantile(self, p) -> np.ndarray:
        """Generalized inverse ``inf{t : F(t) >= p}``."""
        p = np.asarray(p, dtype=float)
        idx = np.searchsorted(self.v, p, side="left")
        return self.t[np.minimum(idx, self.t.size - 1)]


def sup_norm_distance(f: StepFunction, g: StepFunction) -> float:
    """Exact ``sup_t |f(t) - g(t)|``."""
    t = np.union1d(f.t, g.t)
    return float(max(np.max(np.abs(f(t) - g(t))), abs(f.left - g.left)))


def monotonize_clip(f: StepFunction, upper: float | None = None) -> ValidCdf:
    """Running maximum clipped to [0, 1], forced to 1 from ``upper`` onward.

    The output starts at 0 on the left tail.  When the running maximum never
    reaches 1, the value 1 is imposed for ``t >= upper`` (default: the last
    breakpoint), adding a breakpoint if ``upper`` lies beyond the last one.
    """
    t = f.t
    v = np.clip(np.maximum.accumulate(np.maximum(f.v, f.left)), 0.0, 1.0)
    upper = t[-1] if upper is None else float(upper)
    if upper > t[-1]:
        t = np.append(t, upper)
        v = np.append(v, 1.0)
    else:
        v[t >= upper] = 1.0
        # ensure a breakpoint exactly at upper
        if not np.any(t == upper):
            j = np.searchsorted(t, upper)
            t = np.insert(t, j, upper)
            v = np.insert(v, j, 1.0)
    return ValidCdf(t, v, 0.0)


def from_weighted_samples(values, weights, normalizer: float, tail: str = "le") -> StepFunction:
    """``t -> sum_i w_i 1{x_i <= t} / normalizer`` (``tail="le"``) or the
    ``1{x_i > t}`` analogue (``tail="gt"``).  Tied values are merged."""
    if not normalizer > 0:
        raise NonpositiveNormalizer(f"normalizer must be positive, got {normalizer}")
    if tail not in ("le", "gt"):
        raise ValueError("tail must be 'le' or 'gt'")
    x = np.asarray(values, dtype=float).reshape(-1)
    w = np.asarray(weights, dtype=float).reshape(-1)
    t, inv = np.unique(x, return_inverse=True)
    mass = np.bincount(inv.reshape(-1), weights=w, minlength=t.size)
    below = np.cumsum(mass)
    if tail == "le":
        return StepFunction(t, below / normalizer, 0.0)
    total = below[-1]
    return StepFunction(t, (total - below) / normalizer, total / normalizer)


def from_pairs(pairs: Iterable[tuple[float, float]], left: float = 0.0) -> StepFunction:
    """Build from ``[(t_1, v_1), ...]``."""
    t, v = zip(*pairs)
    return StepFunction(t, v, left)


def from_jumps(positions, masses, left: float = 0.0, tol: float = 0.0) -> StepFunction:
    """Step function whose jump at each position is the summed mass there.

    Positions closer than ``tol`` (relative to their magnitude) are merged
    onto the smaller one.
    """
    x = np.asarray(positions, dtype=float).reshape(-1)
    m = np.asarray(masses, dtype=float).reshape(-1)
    if x.size == 0:
        raise ConstructionError("no jumps")
    order = np.argsort(x, kind="stable")
    x, m = x[order], m[order]
    if tol > 0:
        gap = np.diff(x) > tol * np.maximum(1.0, np.abs(x[1:]))
    else:
        gap = np.diff(x) > 0
    start = np.concatenate([[True], gap])
    group = np.cumsum(start) - 1
    t = x[start]
    mass = np.bincount(group, weights=m, minlength=t.size)
    return StepFunction(t, left + np.cumsum(mass), left)


def linear_combination(fs: Sequence[StepFunction], coeffs: Sequence[float]) -> StepFunction:
    t = fs[0].t
    for f in fs[1:]:
        t = np.union1d(t, f.t)
    v = sum(c * f(t) for f, c in zip(fs, coeffs))
    left = sum(c * f.left for f, c in zip(fs, coeffs))
    return StepFunction(t, v, left)
