#!/usr/bin/env python3

"""Command-line front end: simulate, fit, bench, stability and compare.

Every command writes a manifest.txt next to its outputs recording the
settings needed to regenerate them.
"""

import argparse
import logging
import sys
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from env_manager import EnvManager
from loss_functions import LossKind
from mm_cd_solver import FitResult, SolverConfig, SolverError, fit_penalized
from model_selection import (SelectionError, compare_supports, cross_validate, hierarchy_refit, prescreen,
                             stability_selection, write_metrics_csv, write_stability_csv)
from penalties import DEFAULT_GAMMA, PenaltyKind, PenaltySpec
from sim_engine import (EvaluationProtocol, ScenarioConfig, ScenarioError, generate_dataset, load_scenarios,
                        run_replicates, summarize_replicates)
from survival_data import (DataError, InteractionDesign, SurvivalDataset, build_design,
                           kaplan_meier_weights, read_csv, sort_by_time, standardize_dataset, write_csv)

logger = logging.getLogger(__name__)

FULL_REPLICATES = 200


@dataclass
class RunManifest:
    """Settings of one command invocation."""
    command: str
    source: str
    out_dir: str
    seed: int
    methods: List[str] = field(default_factory=list)
    K: Optional[int] = None
    grid_size: Optional[int] = None
    ratio: Optional[float] = None
    B: Optional[int] = None
    drop: Optional[int] = None
    options: Dict[str, object] = field(default_factory=dict)
    timestamp: str = field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))

    def write(self, directory: Path) -> Path:
        lines = [
            f"command={self.command}",
            f"source={self.source}",
            f"methods={','.join(self.methods)}",
            f"K={self.K if self.K is not None else ''}",
            f"grid={self.grid_size},{self.ratio}" if self.grid_size else "grid=",
            f"stability={self.B},{self.drop}" if self.B else "stability=",
            f"seed={self.seed}",
            f"out_dir={self.out_dir}",
        ]
        lines += [f"{key}={value}" for key, value in self.options.items()]
        lines.append(f"timestamp={self.timestamp}")
        path = directory / "manifest.txt"
        path.write_text("\n".join(lines) + "\n")
        return path


def _pair(cast_first, cast_second, form: str):
    def parse(text: str) -> Tuple:
        try:
            first, second = text.split(",")
            return cast_first(first), cast_second(second)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {form}, got '{text}'")
    return parse


def _methods(text: str) -> List[LossKind]:
    try:
        return [LossKind.parse(token) for token in text.split(",") if token.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def _method(text: str) -> LossKind:
    try:
        return LossKind.parse(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, help='Random seed (default: RELERR_SEED)')
    common.add_argument('--tol', type=float, help='MM convergence tolerance (default: RELERR_TOL)')
    common.add_argument('--threads', type=int, help='Parallel workers (default: RELERR_THREADS)')
    common.add_argument('--gamma', type=float, default=DEFAULT_GAMMA, help='MCP gamma')
    common.add_argument('--grid', type=_pair(int, float, '<size>,<ratio>'), default=(100, 0.01),
                        help='Lambda grid as <size>,<ratio>')
    common.add_argument('--penalty', choices=[k.value for k in PenaltyKind], default=PenaltyKind.MCP.value)
    common.add_argument('--log-level', help='Logging level (default: RELERR_LOG_LEVEL)')
    common.add_argument('--out', default='.', help='Output directory')

    tuning = argparse.ArgumentParser(add_help=False)
    choice = tuning.add_mutually_exclusive_group(required=True)
    choice.add_argument('--lambda', dest='lam', type=float, help='Fixed tuning parameter')
    choice.add_argument('--cv', type=int, metavar='K', help='Choose lambda by K-fold cross-validation')
    tuning.add_argument('--prescreen', type=float, metavar='P', help='Keep genes with marginal p <= P')
    tuning.add_argument('--standardize', action='store_true', help='Scale X and Z columns to variance 1')

    parser = argparse.ArgumentParser(description="Penalized relative-error estimation for censored G x E data")
    sub = parser.add_subparsers(dest='command', required=True)

    simulate = sub.add_parser('simulate', parents=[common], help='Generate a dataset from a scenario file')
    simulate.add_argument('scenario', help='key=value scenario file')

    fit = sub.add_parser('fit', parents=[common, tuning], help='Fit one method to a CSV dataset')
    fit.add_argument('data', help='CSV with time,status,x1..xq,z1..zp')
    fit.add_argument('--method', type=_method, default=LossKind.LARE)
    fit.add_argument('--hierarchy-refit', action='store_true')
    fit.add_argument('--stability', type=_pair(int, int, '<B>,<drop>'), metavar='B,DROP')

    bench = sub.add_parser('bench', parents=[common], help='Replicated comparison on simulated data')
    bench.add_argument('scenario', help='key=value scenario file')
    bench.add_argument('--methods', type=_methods, default=_methods('lare,lpre,lad,ls'))
    bench.add_argument('--replicates', '-R', type=int, default=20)
    bench.add_argument('--cv', type=int, default=5, metavar='K')
    bench.add_argument('--hierarchy-refit', action='store_true')
    bench.add_argument('--full', action='store_true', help='Full-scale scenario (p=500) with 200 replicates')

    stability = sub.add_parser('stability', parents=[common, tuning], help='Leave-d-out selection frequencies')
    stability.add_argument('data', help='CSV with time,status,x1..xq,z1..zp')
    stability.add_argument('--method', type=_method, default=LossKind.LARE)
    stability.add_argument('--stability', type=_pair(int, int, '<B>,<drop>'), default=(200, 10),
                           metavar='B,DROP')

    compare = sub.add_parser('compare', parents=[common], help='Support overlap between methods')
    compare.add_argument('data', help='CSV with time,status,x1..xq,z1..zp')
    compare.add_argument('--methods', type=_methods, default=_methods('lare,lpre,lad,ls'))
    compare.add_argument('--cv', type=int, default=5, metavar='K')
    compare.add_argument('--prescreen', type=float, metavar='P')
    compare.add_argument('--standardize', action='store_true')
    compare.add_argument('--hierarchy-refit', action='store_true')
    return parser


def _solver_config(args, env: EnvManager) -> SolverConfig:
    return SolverConfig(
        tol=args.tol if args.tol is not None else env.tolerance(),
        seed=args.seed if args.seed is not None else env.seed(),
        threads=args.threads if args.threads is not None else env.threads(),
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _coefficient_frame(theta: np.ndarray, design: InteractionDesign, genes: Optional[np.ndarray],
                       column: str, keep_zeros: bool = False) -> pd.DataFrame:
    rows = []
    for idx, key in enumerate(design.index_map):
        if not keep_zeros and theta[idx] == 0:
            continue
        k = int(genes[key.k - 1]) + 1 if genes is not None and key.k else key.k
        rows.append({"coordinate_kind": key.kind.value, "j": key.j, "k": k, column: theta[idx]})
    return pd.DataFrame(rows, columns=["coordinate_kind", "j", "k", column])


class _Prepared:
    """Sorted (optionally standardized and prescreened) data with its design and weights."""

    def __init__(self, path: str, prescreen_p: Optional[float], standardize: bool):
        dataset = sort_by_time(read_csv(path))
        if dataset.n_events == 0:
            raise DataError("no events; weights identically zero")
        if standardize:
            dataset = standardize_dataset(dataset)
        self.genes = None
        if prescreen_p is not None:
            self.genes = prescreen(dataset, prescreen_p)
            if len(self.genes) == 0:
                raise DataError(f"No gene passes prescreening at p <= {prescreen_p}")
            dataset = dataset.select_genes(self.genes)
        self.dataset: SurvivalDataset = dataset
        self.design = build_design(dataset.env, dataset.genes)
        self.weights = kaplan_meier_weights(dataset.status)


def _tuned_fit(data: _Prepared, kind: LossKind, args, config: SolverConfig,
               lam: Optional[float], K: Optional[int]) -> Tuple[FitResult, Optional[np.ndarray]]:
    penalty_kind = PenaltyKind(args.penalty)
    curve = None
    if K is not None:
        grid_size, ratio = args.grid
        cv = cross_validate(data.design, data.dataset, kind, penalty_kind, K, config=config,
                            gamma=args.gamma, grid_size=grid_size, ratio=ratio)
        lam = cv.lambda_opt
        curve = np.column_stack([cv.grid, cv.cv_curve])
    spec = PenaltySpec(penalty_kind, lam, args.gamma)
    fit = fit_penalized(data.design, data.dataset, data.weights, kind, spec, config)
    if getattr(args, 'hierarchy_refit', False):
        fit = hierarchy_refit(fit, data.design, data.dataset, data.weights, kind, config)
    return fit, curve


def _write_diagnostics(fit: FitResult, path: Path) -> None:
    lines = [
        f"method={fit.kind.value}",
        f"penalty={fit.penalty.kind.value}",
        f"lambda={fit.lam:.10g}",
        f"mm_iterations={fit.mm_iterations}",
        f"init_iterations={fit.init_iterations}",
        f"converged={fit.converged}",
        f"stalled={fit.stalled}",
        f"objective={fit.objective:.12g}",
        f"active={len(fit.active_set)}",
        f"failed_updates={fit.failed_updates}",
        f"refitted={fit.refitted}",
        f"refit_refused={fit.refit_refused}",
    ]
    path.write_text("\n".join(lines) + "\n")


def cmd_simulate(args, env: EnvManager) -> int:
    out = _out_dir(args)
    configs = load_scenarios(args.scenario)
    for config in configs:
        if args.seed is not None:
            config = replace(config, seed=args.seed)
        target = out if len(configs) == 1 else out / config.label.replace(":", "_")
        target.mkdir(parents=True, exist_ok=True)
        dataset, theta_true = generate_dataset(config)
        write_csv(dataset, target / "data.csv")
        design = build_design(dataset.env, dataset.genes)
        truth = _coefficient_frame(theta_true.values, design, None, "value", keep_zeros=True)
        truth.to_csv(target / "truth.csv", index=False, float_format="%.10g")
        RunManifest("simulate", args.scenario, str(target), config.seed,
                    options={"scenario": config.label, "n": config.n, "p": config.p, "q": config.q}).write(target)
        logger.info(f"Wrote {dataset.n} observations ({dataset.n_events} events) to {target}")
    return 0


def cmd_fit(args, env: EnvManager) -> int:
    out = _out_dir(args)
    config = _solver_config(args, env)
    data = _Prepared(args.data, args.prescreen, args.standardize)
    fit, curve = _tuned_fit(data, args.method, args, config, args.lam, args.cv)

    _coefficient_frame(fit.theta_hat.values, data.design, data.genes, "estimate").to_csv(
        out / "coefficients.csv", index=False, float_format="%.10g")
    _write_diagnostics(fit, out / "diagnostics.txt")
    if curve is not None:
        pd.DataFrame(curve, columns=["lambda", "cv_score"]).to_csv(
            out / "cv_curve.csv", index=False, float_format="%.10g")
    B = drop = None
    if args.stability:
        B, drop = args.stability
        report = stability_selection(data.design, data.dataset, args.method, fit.penalty, fit.lam,
                                     B, drop, config)
        write_stability_csv(report, out / "stability.csv")

    grid_size, ratio = args.grid
    RunManifest("fit", args.data, str(out), config.seed, [args.method.value], args.cv, grid_size, ratio, B, drop,
                options={"lambda": args.lam, "gamma": args.gamma, "penalty": args.penalty,
                         "prescreen": args.prescreen, "hierarchy_refit": args.hierarchy_refit,
                         "standardize": args.standardize, "tol": config.tol}).write(out)
    logger.info(f"{args.method.value}: lambda={fit.lam:.4g}, {len(fit.active_set)} active coordinates")
    return 0


def cmd_bench(args, env: EnvManager) -> int:
    out = _out_dir(args)
    config = _solver_config(args, env)
    scenarios = load_scenarios(args.scenario)
    R = args.replicates
    if args.full:
        scenarios = [ScenarioConfig.full_scale(correlation=s.correlation, error_law=s.error_law,
                                                target_censor_rate=s.target_censor_rate,
                                                dichotomize=s.dichotomize, seed=s.seed, name=s.name)
                     for s in scenarios]
        R = FULL_REPLICATES
    if args.seed is not None:
        scenarios = [replace(s, seed=args.seed) for s in scenarios]

    grid_size, ratio = args.grid
    protocol = EvaluationProtocol(penalty_kind=PenaltyKind(args.penalty), gamma=args.gamma,
                                  grid_size=grid_size, ratio=ratio, K=args.cv,
                                  hierarchy_refit=args.hierarchy_refit)
    records = []
    for scenario in scenarios:
        result = run_replicates(scenario, args.methods, R, protocol, config)
        records.extend(result.records)

    write_metrics_csv(records, out / "metrics.csv")
    summarize_replicates(records).to_csv(out / "summary.csv", index=False, float_format="%.6g")
    RunManifest("bench", args.scenario, str(out), config.seed, [m.value for m in args.methods], args.cv,
                grid_size, ratio, options={"replicates": R, "full": args.full,
                                           "hierarchy_refit": args.hierarchy_refit}).write(out)
    return 0


def cmd_stability(args, env: EnvManager) -> int:
    out = _out_dir(args)
    config = _solver_config(args, env)
    data = _Prepared(args.data, args.prescreen, args.standardize)
    B, drop = args.stability
    fit, _ = _tuned_fit(data, args.method, args, config, args.lam, args.cv)
    report = stability_selection(data.design, data.dataset, args.method, fit.penalty, fit.lam, B, drop, config)
    frame = report.to_frame()
    if data.genes is not None:
        frame["k"] = [int(data.genes[k - 1]) + 1 if k else 0 for k in frame["k"]]
    frame.to_csv(out / "stability.csv", index=False, float_format="%.10g")
    grid_size, ratio = args.grid
    RunManifest("stability", args.data, str(out), config.seed, [args.method.value], args.cv, grid_size, ratio,
                B, drop, options={"lambda": fit.lam, "prescreen": args.prescreen}).write(out)
    return 0


def cmd_compare(args, env: EnvManager) -> int:
    out = _out_dir(args)
    config = _solver_config(args, env)
    data = _Prepared(args.data, args.prescreen, args.standardize)
    fits = {}
    for kind in args.methods:
        fits[kind.value], _ = _tuned_fit(data, kind, args, config, None, args.cv)
    compare_supports(fits, data.design).to_csv(out / "comparison.csv")
    grid_size, ratio = args.grid
    RunManifest("compare", args.data, str(out), config.seed, list(fits), args.cv, grid_size, ratio,
                options={"prescreen": args.prescreen, "hierarchy_refit": args.hierarchy_refit}).write(out)
    return 0


COMMANDS = {
    'simulate': cmd_simulate,
    'fit': cmd_fit,
    'bench': cmd_bench,
    'stability': cmd_stability,
    'compare': cmd_compare,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    env = EnvManager()

    try:
        level = (args.log_level or env.log_level()).upper()
        logging.basicConfig(level=getattr(logging, level, logging.INFO),
                            format="%(asctime)s %(name)s %(levelname)s %(message)s")
        return COMMANDS[args.command](args, env)
    except (DataError, SolverError, SelectionError, ScenarioError, ValueError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
