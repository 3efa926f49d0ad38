"""Batch command-line front end.

Subcommands: ``sample`` (toy samplers to CSV), ``diagnose`` (convergence
statistics to JSON), ``thin`` (greedy or non-myopic selection), ``ksd``
(discrepancy of a support), ``estimate`` (control-variate estimators),
and ``bench`` (regenerates the desk-scale experiments as data files).

Exit codes: 0 success, 2 validation error, 3 numerical failure.  All
inputs are loaded and validated before any computation or output starts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np
import threadpoolctl

from . import chain as chain_mod
from . import cv as cv_mod
from . import model as model_mod
from . import stein as stein_mod
from . import thin as thin_mod
from .errors import NumericalError, SteinPostError, ValidationError

DELTAS = (0.1, 0.01)


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def _parse_list(text: str, kind, what: str):
    try:
        return [kind(v) for v in str(text).split(",") if v != ""]
    except ValueError as exc:
        raise ValidationError(f"could not parse {what} {text!r}: {exc}") from exc


def _write_json(payload: dict, output):
    text = json.dumps(payload, indent=2, sort_keys=True)
    if output is None:
        print(text)
    else:
        Path(output).write_text(text + "\n", encoding="utf-8")


def _write_rows(rows, header, output):
    lines = [",".join(header)]
    lines += [",".join(str(v) for v in row) for row in rows]
    text = "\n".join(lines) + "\n"
    if output is None:
        print(text, end="")
    else:
        Path(output).write_text(text, encoding="utf-8")


def _emit(payload: dict, args, csv_rows=None, csv_header=None):
    if args.format == "json":
        _write_json(payload, args.output)
    else:
        if csv_rows is None:
            csv_header = ("key", "value")
            csv_rows = [(k, json.dumps(v)) for k, v in sorted(payload.items())]
        _write_rows(csv_rows, csv_header, args.output)


def _load_target(path):
    if path is None:
        return None
    if not Path(path).is_file():
        raise ValidationError(f"target file not found: {path}")
    return model_mod.target_from_json(path)


def _load_kernel(path_or_json, points=None) -> stein_mod.BaseKernelConfig:
    if path_or_json is None:
        return stein_mod.BaseKernelConfig()
    if not str(path_or_json).lstrip().startswith("{") and not Path(path_or_json).is_file():
        raise ValidationError(f"kernel file not found: {path_or_json}")
    return stein_mod.kernel_from_json(path_or_json, points=points)


def _load_chains(spec: str):
    paths = [p for p in str(spec).split(",") if p]
    missing = [p for p in paths if not Path(p).is_file()]
    if missing:
        raise ValidationError(f"chain file(s) not found: {', '.join(missing)}")
    return [chain_mod.load_chain_csv(p) for p in paths]


def _stein_config(args, chain):
    target = _load_target(getattr(args, "target", None))
    if chain.grads is None and target is None:
        raise ValidationError(
            "chain CSV has no gradient columns; pass --target so scores can be computed"
        )
    base = _load_kernel(getattr(args, "kernel", None), points=chain.states)
    return stein_mod.SteinKernelConfig(base=base, target=target), target


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------

def cmd_sample(args) -> int:
    target = _load_target(args.target)
    if target is None:
        raise ValidationError("--target is required")
    if args.steps < 1:
        raise ValidationError(f"--steps must be >= 1, got {args.steps}")
    if args.chains < 1:
        raise ValidationError(f"--chains must be >= 1, got {args.chains}")
    if args.sampler not in ("rwmh", "mala"):
        raise ValidationError(f"unknown sampler {args.sampler!r}")
    x0_fixed = None
    if args.x0 is not None:
        x0_fixed = np.asarray(_parse_list(args.x0, float, "--x0"))
        if x0_fixed.shape != (target.dim,):
            raise ValidationError(f"--x0 must have {target.dim} coordinates")
    out_dir = Path(args.output or ".")
    out_dir.mkdir(parents=True, exist_ok=True)

    children = np.random.SeedSequence(args.seed).spawn(2 * args.chains)
    manifest = {"sampler": args.sampler, "steps": args.steps, "seed": args.seed, "chains": []}
    for l in range(args.chains):
        if x0_fixed is not None:
            x0 = x0_fixed
        else:
            x0 = np.random.default_rng(children[2 * l]).normal(0.0, args.x0_scale, target.dim)
        child_seed = int(children[2 * l + 1].generate_state(1, np.uint64)[0])
        if args.sampler == "rwmh":
            out = chain_mod.rwmh_sample(target, x0, args.steps, args.scale, child_seed)
        else:
            out = chain_mod.mala_sample(target, x0, args.steps, args.scale, child_seed)
        path = out_dir / f"chain_{l:02d}.csv"
        chain_mod.save_chain_csv(out, str(path))
        manifest["chains"].append(
            {
                "file": path.name,
                "seed": child_seed,
                "x0": [float(v) for v in x0],
                "acceptance_rate": out.meta["acceptance_rate"],
            }
        )
    _write_json(manifest, out_dir / "manifest.json")
    return 0


# ---------------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------------

def cmd_diagnose(args) -> int:
    chains = _load_chains(args.chains)
    if args.rhat and len(chains) < 2:
        raise ValidationError("--rhat needs at least 2 chains")
    do_rhat = len(chains) >= 2

    ess_total = np.sum([chain_mod.ess(c) for c in chains], axis=0)
    lags = [chain_mod.select_thinning_lag(c, threshold=args.lag_threshold) for c in chains]
    stat = chain_mod.r_hat(chains) if do_rhat else None
    burn_in_by_delta = {
        str(delta): chain_mod.burn_in_from_rhat(chains, delta=delta) for delta in DELTAS
    } if do_rhat else {}
    report = chain_mod.DiagnosticReport(
        r_hat=stat,
        ess=ess_total,
        suggested_burn_in=burn_in_by_delta.get("0.01"),
        thinning_lag=max(sel.lag for sel in lags),
        lag_saturated=any(sel.saturated for sel in lags),
    )

    payload = {
        "ess": [float(v) for v in report.ess],
        "thin_lag": int(report.thinning_lag),
        "lag_saturated": bool(report.lag_saturated),
        "r_hat": None if report.r_hat is None else [float(v) for v in report.r_hat],
        "burn_in": report.suggested_burn_in,
        "burn_in_by_delta": burn_in_by_delta,
    }
    rows = [("ess", j, _fmt(v)) for j, v in enumerate(report.ess)]
    if do_rhat:
        rows += [("r_hat", j, _fmt(v)) for j, v in enumerate(report.r_hat)]
        checkpoints = chain_mod.rhat_checkpoints(len(chains[0]))
        trace = []
        for n in checkpoints:
            prefix = [chain_mod.ChainOutput(states=c.states[:n]) for c in chains]
            try:
                trace.append([float(v) for v in chain_mod.r_hat(prefix)])
            except NumericalError:
                trace.append(None)
        payload["rhat_trace"] = {"checkpoints": [int(n) for n in checkpoints], "r_hat": trace}
    _emit(payload, args, csv_rows=rows, csv_header=("metric", "coordinate", "value"))
    return 0


# ---------------------------------------------------------------------------
# thin / ksd / estimate
# ---------------------------------------------------------------------------

def cmd_thin(args) -> int:
    chains = _load_chains(args.chain)
    chn = chains[0]
    cfg, target = _stein_config(args, chn)
    chn = chain_mod.with_gradients(chn, target)
    if args.mode == "myopic":
        result = thin_mod.stein_thin(chn, cfg, args.m)
    else:
        result = thin_mod.stein_thin_nonmyopic(
            chn,
            cfg,
            n_iters=args.m,
            horizon=args.horizon,
            batch_size=args.batch,
            seed=args.seed,
            solver=args.solver,
        )
    payload = {
        "indices": [int(i) for i in result.selected],
        "ksd_trace": [float(v) for v in result.ksd_trace],
        "config": result.config,
    }
    rows = [
        (int(i), *(_fmt(v) for v in chn.states[i])) for i in result.selected
    ]
    header = ("index", *(f"x{j + 1}" for j in range(chn.dim)))
    _emit(payload, args, csv_rows=rows, csv_header=header)
    if args.points_csv:
        sel = chain_mod.ChainOutput(
            states=chn.states[result.selected], grads=chn.grads[result.selected]
        )
        chain_mod.save_chain_csv(sel, args.points_csv)
    return 0


def cmd_ksd(args) -> int:
    chn = _load_chains(args.chain)[0]
    cfg, _ = _stein_config(args, chn)
    if args.indices:
        idx = np.asarray(_parse_list(args.indices, int, "--indices"), dtype=int)
    else:
        idx = np.arange(len(chn))
    support = chain_mod.WeightedSupport.uniform(idx)
    value = stein_mod.ksd(cfg, support, chn)
    payload = {"ksd": value, "m": int(len(support)), "kernel": stein_mod.kernel_to_json(cfg.base)}
    _emit(payload, args)
    return 0


def _resolve_integrand(spec: str, chn) -> np.ndarray:
    if spec in cv_mod.BUILTIN_INTEGRANDS:
        return np.asarray(cv_mod.BUILTIN_INTEGRANDS[spec](chn.states), dtype=float)
    if ".csv:" in spec:
        path, _, column = spec.rpartition(":")
        if not Path(path).is_file():
            raise ValidationError(f"evaluations file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            names = [h.strip() for h in fh.readline().split(",")]
            body = np.loadtxt(fh, delimiter=",", ndmin=2)
        if column not in names:
            raise ValidationError(f"column {column!r} not in {path} (has {names})")
        vals = body[:, names.index(column)]
        if vals.shape[0] != len(chn):
            raise ValidationError(
                f"{path} has {vals.shape[0]} rows but the chain has {len(chn)} states"
            )
        return vals
    raise ValidationError(
        f"unknown integrand {spec!r}: use one of {sorted(cv_mod.BUILTIN_INTEGRANDS)} "
        "or file.csv:column"
    )


def cmd_estimate(args) -> int:
    chn = _load_chains(args.chain)[0]
    if args.method not in ("vanilla", "zvcv", "cf", "secf"):
        raise ValidationError(f"unknown method {args.method!r}")
    needs_kernel = args.method in ("cf", "secf")
    cfg, target = _stein_config(args, chn) if needs_kernel or chn.grads is None else (None, None)
    if target is None and getattr(args, "target", None):
        target = _load_target(args.target)
    chn = chain_mod.with_gradients(chn, target)
    f_values = _resolve_integrand(args.f, chn)
    support = chain_mod.WeightedSupport.uniform(np.arange(len(chn)))
    evals = cv_mod.IntegrandEvals(
        f_values=f_values, support=support, points=chn.states, grads=chn.grads
    )
    if needs_kernel and args.cv_grid:
        grid = _parse_list(args.cv_grid, float, "--cv-grid")
        lam = cv_mod.cross_validate_kernel(
            evals, cfg, grid=grid, folds=args.folds, method=args.method,
            degree=args.degree, seed=args.seed,
        )
        cfg = stein_mod.SteinKernelConfig(
            base=stein_mod.BaseKernelConfig(
                family=cfg.base.family, lengthscale=lam, c=cfg.base.c, beta=cfg.base.beta
            ),
            target=cfg.target,
        )
    if args.method == "vanilla":
        report = cv_mod.vanilla_estimate(evals)
    elif args.method == "zvcv":
        report = cv_mod.zvcv_estimate(evals, degree=args.degree)
    elif args.method == "cf":
        report = cv_mod.cf_estimate(evals, cfg)
    else:
        report = cv_mod.secf_estimate(evals, cfg, degree=args.degree)
    _emit(report.to_json(), args)
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def _bench_cv(out_dir: Path, seed: int) -> None:
    """Toy-Gaussian comparison: 100 repeats of M=20 draws, four estimators."""
    target = model_mod.gaussian_target([0.0], [[1.0]])
    integrand = cv_mod.BUILTIN_INTEGRANDS["polysin"]
    truth = 2.0
    methods = ("vanilla", "zvcv", "cf", "secf")
    estimates = {m: [] for m in methods}
    rows = []
    for rep in range(100):
        rng = np.random.default_rng(np.random.SeedSequence((seed, rep)))
        pts = rng.standard_normal((20, 1))
        chn = chain_mod.ChainOutput(states=pts, grads=-pts)
        evals = cv_mod.evaluate_integrand(integrand, chn)
        base = stein_mod.BaseKernelConfig(family="gaussian")
        cfg = stein_mod.SteinKernelConfig(base=base, target=target)
        reports = {
            "vanilla": cv_mod.vanilla_estimate(evals),
            "zvcv": cv_mod.zvcv_estimate(evals, degree=2),
        }
        for method in ("cf", "secf"):
            lam = cv_mod.cross_validate_kernel(evals, cfg, method=method, degree=2, seed=rep)
            lam_cfg = stein_mod.SteinKernelConfig(
                base=stein_mod.BaseKernelConfig(family="gaussian", lengthscale=lam), target=target
            )
            reports[method] = (
                cv_mod.cf_estimate(evals, lam_cfg)
                if method == "cf"
                else cv_mod.secf_estimate(evals, lam_cfg, degree=2)
            )
        for method in methods:
            est = reports[method].estimate
            estimates[method].append(est)
            rows.append((rep, method, _fmt(est)))
    _write_rows(rows, ("seed", "method", "estimate"), out_dir / "cv_estimates.csv")
    summary = {
        "truth": truth,
        "n_repeats": 100,
        "n_samples": 20,
        "methods": {
            m: {
                "mean": float(np.mean(estimates[m])),
                "mse": float(np.mean((np.asarray(estimates[m]) - truth) ** 2)),
            }
            for m in methods
        },
    }
    _write_json(summary, out_dir / "cv_summary.json")


def _bench_rhat(out_dir: Path, seed: int) -> None:
    """Six over-dispersed random-walk chains on the benchmark mixture."""
    target = model_mod.benchmark_mixture()
    children = np.random.SeedSequence((seed, 17)).spawn(2 * 6)
    chains = []
    for l in range(6):
        x0 = np.random.default_rng(children[2 * l]).normal(0.0, 5.0, target.dim)
        child_seed = int(children[2 * l + 1].generate_state(1, np.uint64)[0])
        chains.append(chain_mod.rwmh_sample(target, x0, 1000, 0.5, child_seed))
    checkpoints = chain_mod.rhat_checkpoints(1000)
    rows = []
    for n in checkpoints:
        prefix = [chain_mod.ChainOutput(states=c.states[:n]) for c in chains]
        try:
            stat = chain_mod.r_hat(prefix)
        except NumericalError:
            continue
        rows += [(int(n), j, _fmt(v)) for j, v in enumerate(stat)]
    _write_rows(rows, ("checkpoint", "coordinate", "r_hat"), out_dir / "rhat_trace.csv")
    summary = {
        "n_chains": 6,
        "n_steps": 1000,
        "burn_in_by_delta": {
            str(d): chain_mod.burn_in_from_rhat(chains, delta=d) for d in DELTAS
        },
        "final_r_hat": [float(v) for v in chain_mod.r_hat(chains)],
    }
    _write_json(summary, out_dir / "rhat_summary.json")


def _bench_thinning(out_dir: Path, seed: int) -> None:
    """Discrepancy of greedy selections vs random subsets under a shifted chain."""
    target = model_mod.benchmark_mixture()
    cfg = stein_mod.SteinKernelConfig(base=stein_mod.BaseKernelConfig(), target=target)
    rows, summary = [], []
    for rep in range(5):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 23, rep)))
        pts = rng.normal(2.0, 1.0, size=(2000, 2))
        chn = chain_mod.ChainOutput(states=pts, grads=model_mod.eval_gradients(target, pts))
        thinned = thin_mod.stein_thin(chn, cfg, 50)
        ksd_thin = float(thinned.ksd_trace[-1])
        ksd_first = stein_mod.ksd(cfg, chain_mod.WeightedSupport.uniform(np.arange(50)), chn)
        randoms = []
        for k in range(20):
            idx = rng.choice(2000, size=50, replace=False)
            randoms.append(stein_mod.ksd(cfg, chain_mod.WeightedSupport.uniform(idx), chn))
        rows.append((rep, "stein_thin", 0, _fmt(ksd_thin)))
        rows.append((rep, "first_50", 0, _fmt(ksd_first)))
        rows += [(rep, "random_subset", k, _fmt(v)) for k, v in enumerate(randoms)]
        summary.append(
            {
                "seed": rep,
                "stein_thin": ksd_thin,
                "first_50": float(ksd_first),
                "random_median": float(np.median(randoms)),
            }
        )
    _write_rows(rows, ("seed", "method", "rep", "ksd"), out_dir / "thinning_ksd.csv")
    _write_json({"runs": summary}, out_dir / "thinning_summary.json")


def cmd_bench(args) -> int:
    out_dir = Path(args.output or "bench_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    _bench_cv(out_dir, args.seed)
    _bench_rhat(out_dir, args.seed)
    _bench_thinning(out_dir, args.seed)
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="steinpost", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--output", default=None, help="output file (or directory)")
        p.add_argument("--format", choices=("json", "csv"), default="json")
        p.add_argument("--threads", type=int, default=None,
                       help="BLAS thread cap (overrides STEINPOST_THREADS)")

    p = sub.add_parser("sample", help="run a toy sampler and write chain CSVs")
    p.add_argument("--target", required=True, help="target JSON file")
    p.add_argument("--sampler", choices=("rwmh", "mala"), default="rwmh")
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--scale", type=float, default=1.0, help="proposal scale / step size")
    p.add_argument("--x0", default=None, help="comma-separated start point (default: drawn)")
    p.add_argument("--x0-scale", type=float, default=5.0, dest="x0_scale",
                   help="std dev of the over-dispersed start draw")
    common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("diagnose", help="convergence diagnostics for one or more chains")
    p.add_argument("--chains", required=True, help="comma-separated chain CSV files")
    p.add_argument("--rhat", action="store_true", help="require the multi-chain statistic")
    p.add_argument("--lag-threshold", type=float, default=0.1, dest="lag_threshold")
    common(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("thin", help="select representative states")
    p.add_argument("--chain", required=True)
    p.add_argument("--target", default=None)
    p.add_argument("--kernel", default=None, help="kernel JSON file or inline JSON")
    p.add_argument("--m", type=int, required=True, help="selections (iterations when non-myopic)")
    p.add_argument("--mode", choices=("myopic", "nonmyopic"), default="myopic")
    p.add_argument("--horizon", type=int, default=1, help="states per iteration (non-myopic)")
    p.add_argument("--batch", type=int, default=None, help="mini-batch size (non-myopic)")
    p.add_argument("--solver", choices=("auto", "exhaustive", "heuristic"), default="auto")
    p.add_argument("--points-csv", default=None, help="also write selected states to this CSV")
    common(p)
    p.set_defaults(func=cmd_thin)

    p = sub.add_parser("ksd", help="discrepancy of a (sub)set of states")
    p.add_argument("--chain", required=True)
    p.add_argument("--target", default=None)
    p.add_argument("--kernel", default=None)
    p.add_argument("--indices", default=None, help="comma-separated subset (default: all states)")
    common(p)
    p.set_defaults(func=cmd_ksd)

    p = sub.add_parser("estimate", help="estimate an integral with control variates")
    p.add_argument("--chain", required=True)
    p.add_argument("--target", default=None)
    p.add_argument("--kernel", default=None)
    p.add_argument("--method", choices=("vanilla", "zvcv", "cf", "secf"), required=True)
    p.add_argument("--degree", type=int, default=2)
    p.add_argument("--f", required=True, help="built-in integrand name or file.csv:column")
    p.add_argument("--cv-grid", default=None, dest="cv_grid",
                   help="comma-separated lengthscales to cross-validate")
    p.add_argument("--folds", type=int, default=3)
    common(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bench", help="regenerate the desk-scale experiments")
    common(p)
    p.set_defaults(func=cmd_bench)
    return parser


def _thread_context(args):
    n = args.threads
    if n is None:
        env = os.environ.get("STEINPOST_THREADS")
        if env:
            try:
                n = int(env)
            except ValueError as exc:
                raise ValidationError(f"STEINPOST_THREADS={env!r} is not an integer") from exc
    if n is None:
        return nullcontext()
    if n < 1:
        raise ValidationError(f"thread count must be >= 1, got {n}")
    return threadpoolctl.threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_context(args):
            return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except SteinPostError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
