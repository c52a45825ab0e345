"""Experiment sweeps: sample datasets over (lambda, n, repetition) cells, run
estimators and write per-repetition and aggregate error rows as CSV."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import _rng
from .envs import make_env, optimal_policy
from .errors import OpriskError
from .estimators import (
    MODEL_KINDS,
    EstimatorSpec,
    ModelSkeleton,
    _normalize_kind,
    crossfit_folds,
    direct_mean_estimators,
    fit_model,
)
from .mdp import Policy, TabularMdp, mixture_policy, sample_dataset
from .model import true_cdf
from .risk import RiskFunctional, parse_risk
from .stepfn import sup_norm_distance

CSV_HEADER = ("env", "lambda", "n", "rep", "estimator", "metric", "value", "seed")


@dataclass(frozen=True)
class SweepConfig:
    env_id: str
    lambdas: tuple
    sample_sizes: tuple
    estimators: tuple
    repetitions: int
    risks: tuple = ("mean",)
    env_overrides: dict = field(default_factory=dict)
    target: str = "optimal_dp"
    grid_points: int = 50
    base_seed: int = 0
    crossfit: bool = True
    model_horizon_override: int | None = None
    model_mode: str = "auto"
    n_atoms: int = 1024
    direct_means: bool = False
    record_values: bool = False
    output: str | None = None
    threads: int | None = None

    def __post_init__(self):
        for name in ("lambdas", "sample_sizes", "estimators", "risks"):
            value = tuple(getattr(self, name))
            if not value:
                raise ValueError(f"{name} must be nonempty")
            object.__setattr__(self, name, value)
        if list(self.sample_sizes) != sorted(self.sample_sizes):
            raise ValueError("sample_sizes must be ascending")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        object.__setattr__(self, "estimators", tuple(_normalize_kind(k) for k in self.estimators))
        for r in self.risks:
            parse_risk(r)

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        base = asdict(PRESETS[preset]) if preset else {}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base.update(d)
        return cls(**base)

    @classmethod
    def from_json(cls, path: str | Path) -> "SweepConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


PRESETS: dict[str, SweepConfig] = {
    "desk_cliffwalk": SweepConfig(
        env_id="cliffwalk", env_overrides={"horizon": 50}, lambdas=(0.25, 0.5, 0.75),
        sample_sizes=tuple(2 ** k for k in range(6, 13)),
        estimators=("f_is", "s_is", "wis", "is_clip", "dm", "dr", "wdr", "m_dr"),
        risks=("mean", "cvar:0.25"), repetitions=100, model_horizon_override=51),
    "paper_cliffwalk": SweepConfig(
        env_id="cliffwalk", env_overrides={"horizon": 200}, lambdas=(0.25, 0.5, 0.75),
        sample_sizes=tuple(2 ** k for k in range(6, 13)),
        estimators=("f_is", "s_is", "c_is", "wis", "is_clip", "dm", "dr", "wdr", "m_dr"),
        risks=("mean", "cvar:0.25"), repetitions=1000, model_horizon_override=201),
    "reference": SweepConfig(
        env_id="udag:3:2x2x3x2", lambdas=(0.5, 1.0), sample_sizes=(16, 64),
        estimators=("f_is", "s_is", "c_is", "wis", "is_clip", "dm", "dr", "wdr", "m_dr"),
        risks=("mean", "cvar:0.25", "variance"), repetitions=20, base_seed=7),
}


def load_target(mdp: TabularMdp, source: str) -> Policy:
    """``optimal_dp`` or the path of a JSON file ``{"probs": [[...], ...]}``."""
    if source == "optimal_dp":
        return optimal_policy(mdp)
    with open(source) as fh:
        return Policy(np.asarray(json.load(fh)["probs"], dtype=float))


def resolve_threads(requested: int | None = None) -> int:
    env = os.environ.get("OPRISK_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    n = requested if requested is not None else cap
    return max(1, min(int(n), cap)) if env else max(1, int(n))


@dataclass
class _Context:
    config: SweepConfig
    mdp: TabularMdp
    pi: Policy
    truth: object
    support: tuple
    risks: list
    true_risks: dict
    grid: np.ndarray
    skeleton: ModelSkeleton


def _context(config: SweepConfig) -> _Context:
    mdp = make_env(config.env_id, **config.env_overrides)
    pi = load_target(mdp, config.target)
    F = true_cdf(mdp, pi)
    support = mdp.return_bounds
    risks = [parse_risk(r) for r in config.risks]
    true_risks = {r.name: r(F, support) for r in risks}
    grid = np.linspace(support[0], support[1], config.grid_points)
    skeleton = ModelSkeleton(mdp.n_states, mdp.n_actions, config.model_horizon_override,
                             config.model_mode, config.n_atoms, support[1])
    return _Context(config, mdp, pi, F, support, risks, true_risks, grid, skeleton)


def cell_seed(base_seed: int, lam_index: int, n_index: int, rep: int) -> int:
    return _rng.derive_seed(base_seed, lam_index, n_index, rep)


def _fmt(x: float) -> str:
    return repr(float(x))


def _run_cell(ctx: _Context, li: int, lam: float, ni: int, n: int, rep: int) -> list[tuple]:
    cfg = ctx.config
    seed = cell_seed(cfg.base_seed, li, ni, rep)
    beta = mixture_policy(ctx.pi, lam)
    data = sample_dataset(ctx.mdp, beta, n, seed)
    base = (cfg.env_id, _fmt(lam), str(n), str(rep))
    rows = []
    shared_model = folds = None
    for kind in cfg.estimators:
        try:
            if kind in MODEL_KINDS and not cfg.crossfit:
                if shared_model is None:
                    shared_model = fit_model(data, ctx.pi, ctx.skeleton)
                spec = EstimatorSpec(kind, model=shared_model, skeleton=ctx.skeleton)
            else:
                if kind in MODEL_KINDS and folds is None:
                    folds = crossfit_folds(data, ctx.pi, ctx.skeleton)
                spec = EstimatorSpec(kind, crossfit=cfg.crossfit, skeleton=ctx.skeleton,
                                     variance_grid=tuple(ctx.grid) if kind == "c_is" else ())
            est = spec.run(data, ctx.pi, folds)
            out = [("sup_norm", sup_norm_distance(est, ctx.truth))]
            for r in ctx.risks:
                v = r(est, ctx.support)
                out.append((f"mse:{r.name}", (v - ctx.true_risks[r.name]) ** 2))
                if cfg.record_values:
                    out.append((f"value:{r.name}", v))
        except OpriskError as exc:
            out = [(f"error:{type(exc).__name__}", 1.0)]
        rows.extend(base + (kind, m, _fmt(v), str(seed)) for m, v in out)
    if cfg.direct_means and "mean" in ctx.true_risks:
        rows.extend(_direct_mean_rows(ctx, data, base, seed))
    return rows


def _direct_mean_rows(ctx: _Context, data, base, seed) -> list[tuple]:
    truth = ctx.true_risks["mean"]
    try:
        model = fit_model(data, ctx.pi, ctx.skeleton)
        dm = direct_mean_estimators(data, ctx.pi, model)
        vals = [("is_direct", dm.is_mean), ("wis_direct", dm.wis_mean), ("dr_direct", dm.dr_mean)]
        return [base + (name, "mse:mean", _fmt((v - truth) ** 2), str(seed)) for name, v in vals]
    except OpriskError as exc:
        return [base + ("direct_means", f"error:{type(exc).__name__}", _fmt(1.0), str(seed))]


def aggregate(rows: list[tuple], base_seed: int) -> list[tuple]:
    """Mean and standard error over repetitions for every
    (env, lambda, n, estimator, metric); failure counts for error rows."""
    groups: dict[tuple, list[float]] = {}
    for env, lam, n, rep, est, metric, value, _ in rows:
        groups.setdefault((env, lam, n, est, metric), []).append(float(value))
    out = []
    for (env, lam, n, est, metric), vals in groups.items():
        if metric.startswith("error:"):
            out.append((env, lam, n, "count", est, metric, _fmt(len(vals)), str(base_seed)))
            continue
        v = np.array(vals)
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
        out.append((env, lam, n, "mean", est, metric, _fmt(v.mean()), str(base_seed)))
        out.append((env, lam, n, "stderr", est, metric, _fmt(se), str(base_seed)))
    return out


def run_sweep(config: SweepConfig, threads: int | None = None) -> str:
    """Run every (lambda, n, rep) cell and return the CSV text; also write
    it to ``config.output`` when set.  Output does not depend on the thread
    count."""
    ctx = _context(config)
    cells = [(li, lam, ni, n, rep)
             for li, lam in enumerate(config.lambdas)
             for ni, n in enumerate(config.sample_sizes)
             for rep in range(config.repetitions)]
    workers = resolve_threads(threads if threads is not None else config.threads)
    if workers == 1:
        results = [_run_cell(ctx, *c) for c in cells]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: _run_cell(ctx, *c), cells))
    rows = [r for cell in results for r in cell]
    rows += aggregate(rows, config.base_seed)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(rows)
    text = buf.getvalue()
    if config.output:
        Path(config.output).write_text(text)
    return text


def read_rows(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))
