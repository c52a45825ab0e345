"""Command-line entry point: ``oprisk <command> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .envs import make_env, optimal_policy
from .errors import OpriskError
from .estimators import (
    KINDS,
    MODEL_KINDS,
    EstimatorSpec,
    ModelSkeleton,
    confidence_band,
    diagnostic_band,
    fit_model,
    uniform_grid,
)
from .harness import PRESETS, SweepConfig, load_target, run_sweep
from .mdp import Dataset, Policy, dataset_target, load_dataset, mixture_policy, sample_dataset, save_dataset
from .model import compute_return_model
from .oracle import cramer_rao_bound, enumerate_trajectories, exact_estimator_moments
from .risk import opra, parse_risk
from .stepfn import StepFunction

CDF_SCHEMA = "oprisk-cdf-v1"


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _writer():
    return csv.writer(sys.stdout, lineterminator="\n")


def _env_for(data: Dataset):
    return make_env(data.env_id, horizon=data.horizon)


def _target_for(path: str, data: Dataset, target: str | None) -> Policy:
    if target is not None:
        return load_target(_env_for(data), target)
    pi = dataset_target(path)
    return pi if pi is not None else optimal_policy(_env_for(data))


def _model_for(source: str, data: Dataset, pi: Policy, horizon_override: int | None):
    if source == "truth":
        return compute_return_model(_env_for(data), pi)
    S, A = data.behavior.probs.shape
    return fit_model(data, pi, ModelSkeleton(S, A, horizon_override))


# -- commands -----------------------------------------------------------------

def cmd_sweep(args) -> int:
    if args.config:
        config = SweepConfig.from_json(args.config)
    else:
        config = PRESETS[args.preset]
    if args.output:
        config = replace(config, output=args.output)
    text = run_sweep(config, args.threads)
    if not config.output:
        sys.stdout.write(text)
    return 0


def cmd_generate(args) -> int:
    overrides = {} if args.horizon is None else {"horizon": args.horizon}
    mdp = make_env(args.env, **overrides)
    pi = load_target(mdp, args.target)
    data = sample_dataset(mdp, mixture_policy(pi, args.lam), args.n, args.seed, env_id=args.env)
    save_dataset(data, args.output, target=pi)
    return 0


def cmd_estimate(args, parser) -> int:
    if args.kind in MODEL_KINDS and args.model_from is None:
        parser.error(f"estimator {args.kind!r} needs --model-from data|truth")
    data = load_dataset(args.data)
    pi = _target_for(args.data, data, args.target)
    support = _env_for(data).return_bounds
    S, A = data.behavior.probs.shape
    skeleton = ModelSkeleton(S, A, args.model_horizon, upper=support[1])
    if args.kind in MODEL_KINDS and args.crossfit:
        if args.model_from != "data":
            parser.error("--crossfit fits models on the data; use --model-from data")
        spec = EstimatorSpec(args.kind, crossfit=True, skeleton=skeleton)
    elif args.kind in MODEL_KINDS:
        model = _model_for(args.model_from, data, pi, args.model_horizon)
        spec = EstimatorSpec(args.kind, model=model, skeleton=skeleton)
        if args.dump_model:
            Path(args.dump_model).write_text(json.dumps(model.dump()))
    else:
        grid = tuple(uniform_grid(*support, args.points)) if args.kind == "c_is" else ()
        spec = EstimatorSpec(args.kind, variance_grid=grid)
    F = spec.run(data, pi)
    doc = {"schema": CDF_SCHEMA, "estimator": args.kind, "env_id": data.env_id, "n": data.n,
           "support": list(support), "cdf": F.to_dict()}
    text = json.dumps(doc)
    if args.output:
        Path(args.output).write_text(text + "\n")
    else:
        print(text)
    return 0


def _load_cdf(path: str) -> tuple[StepFunction, list | None]:
    doc = json.loads(Path(path).read_text())
    if "cdf" in doc:
        return StepFunction.from_dict(doc["cdf"]), doc.get("support")
    return StepFunction.from_dict(doc), None


def cmd_risks(args, parser) -> int:
    F, support = _load_cdf(args.cdf)
    if args.support is not None:
        support = args.support
    if support is None:
        parser.error("the CDF file stores no support; pass --support LO HI")
    functionals = [parse_risk(r) for r in (args.risk or ["mean"])]
    report = opra(F, args.epsilon, args.delta, functionals, tuple(support))
    w = _writer()
    w.writerow(("risk", "estimate", "lipschitz", "halfwidth", "lower", "upper"))
    for e in report.entries:
        lo, hi = e.interval if e.interval is not None else (None, None)
        w.writerow((e.name, _fmt(e.estimate), _fmt(e.lipschitz_constant), _fmt(e.halfwidth),
                    _fmt(lo), _fmt(hi)))
    return 0


def cmd_band(args) -> int:
    data = load_dataset(args.data)
    pi = _target_for(args.data, data, args.target)
    grid = uniform_grid(*_env_for(data).return_bounds, args.points)
    if args.method == "eb":
        band = confidence_band(data, pi, args.kind, grid, args.delta)
    elif args.method == "isclip":
        band = diagnostic_band(data, pi, "is_clip", grid, args.delta)
    else:
        model = _model_for(args.model_from, data, pi, args.model_horizon)
        band = diagnostic_band(data, pi, "m_dr", grid, args.delta, model)
    w = _writer()
    w.writerow(("t", "estimate", "lower", "upper", "halfwidth"))
    for row in zip(band.points, band.estimate, band.lower, band.upper, band.halfwidth):
        w.writerow(tuple(_fmt(x) for x in row))
    return 0


def cmd_cr_bound(args) -> int:
    overrides = {} if args.horizon is None else {"horizon": args.horizon}
    mdp = make_env(args.env, **overrides)
    pi = load_target(mdp, args.target)
    atlas = enumerate_trajectories(mdp, mixture_policy(pi, args.lam), pi)
    t = uniform_grid(*mdp.return_bounds, args.points)
    bound = np.atleast_1d(cramer_rao_bound(atlas, pi, t))
    _, is_var = exact_estimator_moments(atlas, pi, "f_is", t)
    _, dr_var = exact_estimator_moments(atlas, pi, "dr", t, compute_return_model(mdp, pi))
    w = _writer()
    w.writerow(("t", "bound", "is_var", "dr_var"))
    for row in zip(t, bound, np.atleast_1d(is_var), np.atleast_1d(dr_var)):
        w.writerow(tuple(_fmt(x) for x in row))
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oprisk", description="Off-policy return-distribution and risk estimation.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sweep", help="run an experiment sweep and write CSV")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--config", help="JSON file mirroring SweepConfig fields")
    g.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--threads", type=int, default=None)
    s.add_argument("-o", "--output", help="CSV path (default: stdout)")

    s = sub.add_parser("generate", help="sample a dataset under a mixture behavior policy")
    s.add_argument("--env", required=True)
    s.add_argument("--lambda", dest="lam", type=float, required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--horizon", type=int, default=None)
    s.add_argument("--target", default="optimal_dp", help="optimal_dp or a JSON policy file")
    s.add_argument("-o", "--output", required=True)

    s = sub.add_parser("estimate", help="estimate the return CDF from a dataset")
    s.add_argument("--kind", choices=KINDS, required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--model-from", choices=("data", "truth"), default=None)
    s.add_argument("--crossfit", action="store_true")
    s.add_argument("--model-horizon", type=int, default=None)
    s.add_argument("--points", type=int, default=50, help="grid size for c_is")
    s.add_argument("--target", default=None, help="override the target stored in the dataset")
    s.add_argument("--dump-model", default=None)
    s.add_argument("-o", "--output", default=None)

    s = sub.add_parser("risks", help="plug-in risks with simultaneous intervals")
    s.add_argument("--cdf", required=True)
    s.add_argument("--risk", action="append")
    s.add_argument("--epsilon", type=float, default=0.0)
    s.add_argument("--delta", type=float, default=0.1)
    s.add_argument("--support", type=float, nargs=2, default=None, metavar=("LO", "HI"))

    s = sub.add_parser("band", help="confidence band on a uniform grid")
    s.add_argument("--data", required=True)
    s.add_argument("--method", choices=("eb", "isclip", "mdr"), default="eb")
    s.add_argument("--kind", choices=("f_is", "s_is"), default="f_is")
    s.add_argument("--points", "-M", type=int, default=10)
    s.add_argument("--delta", type=float, default=0.1)
    s.add_argument("--model-from", choices=("data", "truth"), default="data")
    s.add_argument("--model-horizon", type=int, default=None)
    s.add_argument("--target", default=None)

    s = sub.add_parser("cr-bound", help="exact lower bound and estimator variances")
    s.add_argument("--env", required=True)
    s.add_argument("--lambda", dest="lam", type=float, default=0.5)
    s.add_argument("--points", type=int, default=5)
    s.add_argument("--horizon", type=int, default=None)
    s.add_argument("--target", default="optimal_dp")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "sweep":
            return cmd_sweep(args)
        if args.command == "generate":
            return cmd_generate(args)
        if args.command == "estimate":
            return cmd_estimate(args, parser)
        if args.command == "risks":
            return cmd_risks(args, parser)
        if args.command == "band":
            return cmd_band(args)
        return cmd_cr_bound(args)
    except (OpriskError, OSError, ValueError, KeyError) as exc:
        print(f"oprisk: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
