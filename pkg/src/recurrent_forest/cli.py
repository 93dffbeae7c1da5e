"""Command-line interface: ``recurrent-forest <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 configuration or input error, and
one code per stage (see ``pipeline.EXIT_CODES``).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import pipeline as pl
from .events import ParseError, parse_covariates
from .forest import load_forest
from .importance import importance_report
from .pseudo import PseudoDataset, build_pseudo_dataset
from .windows import LongitudinalData, WindowGrid, recommend_spacing


def _grid_args(p):
    p.add_argument("--grid-start", type=float, default=0.0)
    p.add_argument("--grid-step", type=float, required=True)
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--end", type=float, required=True,
                   help="administrative end of follow-up")


def _threads(p):
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads (default: ${pl.THREADS_ENV} or 1)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="recurrent-forest",
                                 description="Random forests for censored recurrent events.")
    ap.add_argument("--version", action="version",
                    version=f"%(prog)s {__version__} (model format {pl.FORMAT_VERSION})")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("transform", help="events -> censored longitudinal rows")
    p.add_argument("--events", required=True)
    p.add_argument("--unit", default="days")
    _grid_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--recommend-spacing", action="store_true",
                   help="print the suggested check-in spacing (mean gap / 3)")

    p = sub.add_parser("pseudo", help="longitudinal rows + covariates -> pseudo-observations")
    p.add_argument("--longitudinal", required=True)
    p.add_argument("--covariates", required=True)
    p.add_argument("--schema", default="", help='e.g. "age:continuous,male:binary"')
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="grow a forest on a pseudo-observation file")
    p.add_argument("--pseudo", required=True)
    p.add_argument("--trees", type=int, default=500)
    p.add_argument("--mtry", type=int, default=None)
    p.add_argument("--min-node", type=int, default=40)
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--seed", type=int, required=True)
    _threads(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("predict", help="score rows with a saved forest")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="CSV with subject_id,t and feature columns")
    p.add_argument("--clip", action="store_true", help="clip predictions to [0, 1]")
    p.add_argument("--oob", action="store_true",
                   help="out-of-bag predictions; --data must be the training pseudo file")
    p.add_argument("--out", required=True)

    p = sub.add_parser("importance", help="out-of-bag permutation importance")
    p.add_argument("--model", required=True)
    p.add_argument("--pseudo", required=True, help="the training pseudo-observation file")
    p.add_argument("--permutations", type=int, default=100)
    p.add_argument("--seed", type=int, required=True)
    _threads(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("glm", help="logit-link regression of pseudo-observations")
    p.add_argument("--pseudo", required=True)
    p.add_argument("--columns", default=None,
                   help="comma-separated covariates (default: all); t is not included")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="C-statistic of predictions on longitudinal rows")
    p.add_argument("--longitudinal", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--bootstrap", type=int, default=100)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--within-t", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", help="run one cell of the simulation study")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--rho", type=float, default=0.0)
    p.add_argument("--censoring", default="none",
                   help="none|light|moderate|heavy or a target fraction")
    p.add_argument("--history", default="none", choices=["none", "full", "partial"])
    p.add_argument("--replicates", type=int, default=30)
    p.add_argument("--imputations", type=int, default=10)
    p.add_argument("--trees", type=int, default=500)
    p.add_argument("--bootstrap", type=int, default=0)
    p.add_argument("--seed", type=int, required=True)
    _threads(p)
    p.add_argument("--out", required=True, help="summary CSV (mean and sd per method)")
    p.add_argument("--emit-raw", default=None, help="per-replicate CSV")

    p = sub.add_parser("pipeline", help="transform, pseudo, fit, predict, evaluate, importance")
    p.add_argument("--config", default=None, help="sectioned key-value config file")
    p.add_argument("--events")
    p.add_argument("--covariates")
    p.add_argument("--schema")
    p.add_argument("--output-dir")
    p.add_argument("--grid-start", type=float)
    p.add_argument("--grid-step", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--end", type=float)
    p.add_argument("--trees", type=int)
    p.add_argument("--mtry", type=int)
    p.add_argument("--min-node", type=int)
    p.add_argument("--bootstrap", type=int)
    p.add_argument("--permutations", type=int)
    p.add_argument("--no-importance", action="store_true")
    p.add_argument("--validation-fraction", type=float)
    p.add_argument("--seed", type=int)
    _threads(p)

    p = sub.add_parser("report", help="merge raw simulation files into tidy and summary CSVs")
    p.add_argument("raw", nargs="+")
    p.add_argument("--out-dir", required=True)
    return ap


def _read(path):
    return Path(path).read_text(encoding="utf-8")


def cmd_transform(a):
    grid = WindowGrid(a.grid_start, a.grid_step, a.tau, a.end)
    records, data = pl.stage_transform(a.events, grid, a.unit)
    pl.write_output(a.out, data.to_csv())
    if a.recommend_spacing:
        print(f"recommended spacing: {recommend_spacing(records):g}")
    print(f"{len(records)} subjects, {len(data)} rows")


def cmd_pseudo(a):
    data = LongitudinalData.from_csv(_read(a.longitudinal))
    panel = parse_covariates(_read(a.covariates), a.schema or None,
                             grid=np.unique(data.t).tolist())
    ds = build_pseudo_dataset(data, a.tau, panel, method="vectorized")
    pl.write_output(a.out, ds.to_csv())
    if ds.flat_windows:
        print("warning: survival curve extended flat at t=" +
              ", ".join(f"{u:g}" for u in ds.flat_windows), file=sys.stderr)
    print(f"{len(ds)} rows")


def cmd_fit(a):
    ds = PseudoDataset.from_csv(_read(a.pseudo))
    _, blob = pl.stage_fit(ds, a.trees, a.mtry, a.min_node, a.max_depth, a.seed,
                           a.threads or pl.default_threads())
    pl.write_output(a.out, blob)


def cmd_predict(a):
    forest, header = load_forest(Path(a.model).read_bytes())
    sid, t, X = pl.read_feature_table(a.data, header["feature_names"])
    if a.oob:
        pred = forest.oob_predict(X, sid.astype(str))
        ok = ~np.isnan(pred)
        sid, t, pred = sid[ok], t[ok], pred[ok]
        if a.clip:
            pred = np.clip(pred, 0.0, 1.0)
    else:
        pred = forest.predict(X, clip=a.clip)
    pl.write_output(a.out, pl.predictions_csv(sid, t, pred))


def cmd_importance(a):
    forest, header = load_forest(Path(a.model).read_bytes())
    ds = PseudoDataset.from_csv(_read(a.pseudo))
    if ds.feature_names != header["feature_names"]:
        raise ValueError("pseudo file columns do not match the model")
    res = importance_report(forest, ds.features(), ds.y, ds.subject_id.astype(str),
                               ds.feature_names, a.permutations, a.seed,
                               threads=a.threads or pl.default_threads())
    pl.write_output(a.out, pl.importance_csv(res))


def cmd_glm(a):
    from .glm import PseudoLogitRegression, wald_table

    ds = PseudoDataset.from_csv(_read(a.pseudo))
    cols = a.columns.split(",") if a.columns else ds.names
    idx = [ds.names.index(c) for c in cols]
    fit = PseudoLogitRegression().fit(ds.Z[:, idx], ds.y, ds.subject_id.astype(str))
    out = {"converged": bool(fit.converged_), "iterations": int(fit.n_iter_),
           "terms": wald_table(fit, cols)}
    pl.write_output(a.out, pl._json(out))


def cmd_evaluate(a):
    data = LongitudinalData.from_csv(_read(a.longitudinal))
    metrics = pl.stage_evaluate(data, pl.read_predictions(a.predictions), a.bootstrap,
                                a.seed, a.within_t)
    pl.write_output(a.out, pl._json(metrics))
    print(f"C = {metrics['c']:.4f}" + (f" (SE {metrics['se']:.4f})" if "se" in metrics else ""))


def _censoring_target(value):
    from .simulation import CENSORING_LEVELS
    return CENSORING_LEVELS[value] if value in CENSORING_LEVELS else float(value)


def cmd_simulate(a):
    from .simulation import SimConfig, run_study

    cfg = SimConfig(n=a.n, rho=a.rho, censoring=_censoring_target(a.censoring),
                    history=a.history, replicates=a.replicates,
                    m_imputations=a.imputations, n_trees=a.trees, bootstrap=a.bootstrap,
                    seed=a.seed, threads=a.threads or pl.default_threads())
    rows = run_study(cfg).raw_rows()
    if a.emit_raw:
        pl.write_output(a.emit_raw, pl.raw_csv(rows))
    pl.write_output(a.out, pl.summary_csv(pl.summarize_raw(rows)))


def cmd_pipeline(a):
    cfg = pl.load_config(
        a.config, events=a.events, covariates=a.covariates, schema=a.schema,
        output_dir=a.output_dir, grid_start=a.grid_start, grid_step=a.grid_step,
        tau=a.tau, end=a.end, trees=a.trees, mtry=a.mtry, min_node=a.min_node,
        bootstrap=a.bootstrap, permutations=a.permutations,
        importance=False if a.no_importance else None,
        validation_fraction=a.validation_fraction, seed=a.seed, threads=a.threads)
    manifest = pl.run_pipeline(cfg)
    print(f"C = {manifest['metrics']['c']:.4f}; artifacts in {cfg.output_dir}")


def cmd_report(a):
    info = pl.report(a.raw, a.out_dir)
    print(f"{info['rows']} rows in {info['groups']} groups")


COMMANDS = {
    "transform": cmd_transform, "pseudo": cmd_pseudo, "fit": cmd_fit,
    "predict": cmd_predict, "importance": cmd_importance, "glm": cmd_glm,
    "evaluate": cmd_evaluate, "simulate": cmd_simulate, "pipeline": cmd_pipeline,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except pl.StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (ParseError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return pl.EXIT_CODES["config"]
    except Exception as e:  # noqa: BLE001
        print(f"error: {args.command}: {e}", file=sys.stderr)
        return pl.EXIT_CODES.get(args.command, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
