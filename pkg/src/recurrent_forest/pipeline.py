"""End-to-end orchestration: transform, pseudo, fit, predict, evaluate, importance.

Every stage reads and writes the documented comma-separated formats, so a
pipeline run reproduces the standalone subcommands file for file. Outputs
are written as ``<name>.partial`` and renamed once the stage succeeds; a
failing stage leaves its ``.partial`` file behind.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import os
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import ScoredRows, bootstrap_se, harrell_c
from .events import _fmt, parse_covariates, parse_events, validate_dataset
from .forest import HistoricalRandomForest, dump_forest
from .forest.io import FORMAT_VERSION
from .importance import importance_report
from .pseudo import PseudoDataset, build_pseudo_dataset
from .windows import LongitudinalData, WindowGrid, transform

THREADS_ENV = "RECURRENT_FOREST_THREADS"

# exit codes by stage; argparse itself exits with 2 on usage errors
EXIT_CODES = {
    "config": 3,
    "transform": 4,
    "pseudo": 5,
    "fit": 6,
    "predict": 7,
    "importance": 8,
    "glm": 9,
    "evaluate": 10,
    "simulate": 11,
    "report": 12,
}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException | str):
        self.stage = stage
        self.cause = cause
        self.exit_code = EXIT_CODES.get(stage, 1)
        super().__init__(f"{stage} failed: {cause}")


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_output(path, data: str | bytes):
    """Write via ``path.partial`` and rename on success."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode, **({} if mode == "wb" else {"newline": "", "encoding": "utf-8"})) as fh:
        fh.write(data)
    os.replace(tmp, path)


@dataclass
class PipelineConfig:
    events: str = ""
    covariates: str = ""
    schema: str = ""
    output_dir: str = "out"
    unit: str = "days"
    grid_start: float = 0.0
    grid_step: float = 1.0
    tau: float = 1.0
    end: float = 1.0
    trees: int = 500
    mtry: int | None = None
    min_node: int = 40
    max_depth: int | None = None
    bootstrap: int = 100
    permutations: int = 100
    importance: bool = True
    within_t: bool = False
    validation_fraction: float = 0.0
    seed: int | None = None
    threads: int = field(default_factory=default_threads)

    @property
    def grid(self) -> WindowGrid:
        return WindowGrid(self.grid_start, self.grid_step, self.tau, self.end)

    def check(self):
        if self.seed is None:
            raise StageError("config", "a seed is required")
        for name in ("events", "covariates"):
            path = getattr(self, name)
            if not path:
                raise StageError("config", f"{name} path not set")
            if not Path(path).is_file():
                raise StageError("config", f"{name} file not found: {path}")
        if not 0 <= self.validation_fraction < 1:
            raise StageError("config", "validation_fraction must be in [0, 1)")


_CONFIG_KEYS = {
    "paths": {"events": str, "covariates": str, "schema": str, "output_dir": str,
              "unit": str},
    "grid": {"start": ("grid_start", float), "step": ("grid_step", float),
             "tau": float, "end": float},
    "forest": {"trees": int, "mtry": int, "min_node": int, "max_depth": int},
    "evaluation": {"bootstrap": int, "permutations": int, "importance": "bool",
                   "within_t": "bool", "validation_fraction": float},
    "run": {"seed": int, "threads": int},
}


def load_config(path, **overrides) -> PipelineConfig:
    """Read a sectioned key-value file; non-None overrides win over file values."""
    parser = configparser.ConfigParser()
    if path is not None:
        if not parser.read(path):
            raise StageError("config", f"config file not found: {path}")
    cfg = PipelineConfig()
    base = Path(path).parent if path is not None else Path(".")
    for section, keys in _CONFIG_KEYS.items():
        if not parser.has_section(section):
            continue
        for key, spec in keys.items():
            if not parser.has_option(section, key):
                continue
            attr, conv = spec if isinstance(spec, tuple) else (key, spec)
            if conv == "bool":
                val = parser.getboolean(section, key)
            else:
                raw = parser.get(section, key).strip()
                val = None if raw.lower() in ("", "none") else conv(raw)
            if section == "paths" and key in ("events", "covariates", "output_dir") and val:
                val = str(base / val) if not os.path.isabs(val) else val
            setattr(cfg, attr, val)
    for key, val in overrides.items():
        if val is not None:
            setattr(cfg, key, val)
    return cfg


# ---- stage functions shared with the CLI -------------------------------------------

def stage_transform(events_path, grid: WindowGrid, unit="days") -> tuple[list, LongitudinalData]:
    with open(events_path, newline="", encoding="utf-8") as fh:
        records = parse_events(fh, unit=unit, end=grid.end)
    return records, transform(records, grid)


def stage_pseudo(longitudinal: LongitudinalData, covariates_path, schema, tau,
                 grid_times=None) -> PseudoDataset:
    with open(covariates_path, newline="", encoding="utf-8") as fh:
        panel = parse_covariates(fh, schema or None, grid=grid_times)
    return build_pseudo_dataset(longitudinal, tau, panel, method="vectorized")


def stage_fit(data: PseudoDataset, trees, mtry, min_node, max_depth, seed, threads):
    forest = HistoricalRandomForest(n_estimators=trees, max_features=mtry,
                                    min_node_size=min_node, max_depth=max_depth,
                                    random_state=seed, n_jobs=threads)
    forest.fit(data.features(), data.y, data.subject_id.astype(str))
    return forest, dump_forest(forest, data.feature_names)


def read_feature_table(path_or_text, names):
    """Rows ``subject_id,t,...`` with the named feature columns (t appended last)."""
    text = Path(path_or_text).read_text(encoding="utf-8") if not isinstance(
        path_or_text, io.StringIO) else path_or_text.getvalue()
    reader = csv.reader(io.StringIO(text))
    header = [h.strip() for h in next(reader)]
    if header[:2] != ["subject_id", "t"]:
        raise ValueError("feature table must start with subject_id,t")
    want = [n for n in names if n != "t"]
    missing = [n for n in want if n not in header]
    if missing:
        raise ValueError(f"feature table lacks columns {missing}")
    cols = [header.index(n) for n in want]
    sid, t, X = [], [], []
    for row in reader:
        if not row:
            continue
        sid.append(row[0])
        tt = float(row[1])
        t.append(tt)
        vals = [float(row[c]) if row[c].strip() else np.nan for c in cols]
        X.append(vals + [tt] if "t" in names else vals)
    return np.array(sid, dtype=object), np.array(t), np.array(X, dtype=float)


def predictions_csv(sid, t, pred) -> str:
    buf = io.StringIO()
    buf.write("subject_id,t,prediction\n")
    for s, tt, p in zip(sid, t, pred):
        buf.write(f"{s},{_fmt(tt)},{float(p)!r}\n")
    return buf.getvalue()


def read_predictions(path) -> dict:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out[(row["subject_id"], float(row["t"]))] = float(row["prediction"])
    return out


def stage_evaluate(longitudinal: LongitudinalData, preds: dict, bootstrap, seed,
                   within_t=False) -> dict:
    keys = list(zip(longitudinal.subject_id.astype(str).tolist(), longitudinal.t.tolist()))
    keep = np.array([k in preds for k in keys])
    if not keep.any():
        raise ValueError("no predictions match the longitudinal rows")
    score = np.array([preds[k] for k, ok in zip(keys, keep) if ok])
    rows = ScoredRows(longitudinal.subject_id[keep], longitudinal.t[keep],
                      longitudinal.x[keep], longitudinal.delta[keep], score)

    def metric(r):
        return harrell_c(r, within_t=within_t)

    out = {"c": metric(rows), "n_rows": int(keep.sum()),
           "n_rows_unscored": int((~keep).sum()), "within_t": bool(within_t)}
    if bootstrap:
        boot = bootstrap_se(metric, rows, bootstrap, np.random.default_rng(seed))
        out.update({"se": boot.se, "bootstrap": bootstrap, "redraws": boot.redraws})
    return out


def importance_csv(results) -> str:
    buf = io.StringIO()
    buf.write("variable,statistic,z,p\n")
    for r in results:
        buf.write(f"{r.variable},{r.statistic!r},{r.z!r},{r.p!r}\n")
    return buf.getvalue()


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _split_subjects(subjects, fraction, seed):
    subjects = np.array(sorted(set(subjects)), dtype=object)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(7,)))
    n_val = int(round(fraction * len(subjects)))
    val = set(rng.choice(subjects, size=n_val, replace=False).tolist()) if n_val else set()
    return val


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Run all stages into ``cfg.output_dir`` and write ``manifest.json``.

    Evaluation uses out-of-bag predictions unless ``validation_fraction`` holds
    out a share of subjects, in which case pseudo-observations and the forest
    use the training subjects only and the C-statistic is computed on the
    held-out rows.
    """
    cfg.check()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / v for k, v in {
        "longitudinal": "longitudinal.csv", "pseudo": "pseudo.csv", "model": "model.bin",
        "predictions": "predictions.csv", "metrics": "metrics.json",
        "importance": "importance.csv"}.items()}
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        manifest_path.unlink()
    try:
        manifest = _execute(cfg, paths)
    except StageError:
        # keep what was produced, marked so it cannot pass for a finished run
        for path in paths.values():
            if path.exists():
                os.replace(path, path.with_name(path.name + ".partial"))
        raise
    write_output(manifest_path, _json(manifest))
    return manifest


def _execute(cfg: PipelineConfig, paths: dict) -> dict:
    grid = cfg.grid

    def run(stage, fn):
        try:
            return fn()
        except StageError:
            raise
        except Exception as e:  # noqa: BLE001 - reported with stage name
            raise StageError(stage, e) from e

    records, longi = run("transform", lambda: stage_transform(cfg.events, grid, cfg.unit))
    run("transform", lambda: write_output(paths["longitudinal"], longi.to_csv()))

    with open(cfg.covariates, newline="", encoding="utf-8") as fh:
        panel = run("pseudo", lambda: parse_covariates(fh, cfg.schema or None,
                                                       grid=grid.times()))
    report = validate_dataset(records, panel, grid)
    if not report.ok:
        raise StageError("pseudo", f"covariate coverage incomplete:\n{report}")

    val = _split_subjects(longi.subject_id.tolist(), cfg.validation_fraction, cfg.seed)
    train_mask = np.array([s not in val for s in longi.subject_id])
    train_rows = LongitudinalData(longi.subject_id[train_mask], longi.t[train_mask],
                                  longi.x[train_mask], longi.delta[train_mask])
    pseudo = run("pseudo", lambda: build_pseudo_dataset(train_rows, cfg.tau, panel,
                                                        method="vectorized"))
    run("pseudo", lambda: write_output(paths["pseudo"], pseudo.to_csv()))

    forest, blob = run("fit", lambda: stage_fit(pseudo, cfg.trees, cfg.mtry, cfg.min_node,
                                                cfg.max_depth, cfg.seed, cfg.threads))
    run("fit", lambda: write_output(paths["model"], blob))

    def predict():
        if val:
            m = ~train_mask
            sid, t = longi.subject_id[m], longi.t[m]
            Z = np.array([panel.lookup(s, tt) for s, tt in zip(sid, t)]).reshape(len(t), -1)
            pred = forest.predict(np.column_stack([Z, t]))
        else:
            sid, t = pseudo.subject_id, pseudo.t
            pred = forest.oob_prediction_
            ok = ~np.isnan(pred)
            sid, t, pred = sid[ok], t[ok], pred[ok]
        return predictions_csv(sid, t, pred)

    run("predict", lambda: write_output(paths["predictions"], predict()))

    eval_rows = longi if not val else LongitudinalData(
        longi.subject_id[~train_mask], longi.t[~train_mask], longi.x[~train_mask],
        longi.delta[~train_mask])
    metrics = run("evaluate", lambda: stage_evaluate(
        eval_rows, read_predictions(paths["predictions"]), cfg.bootstrap, cfg.seed,
        cfg.within_t))
    metrics["evaluation"] = "validation" if val else "out-of-bag"
    run("evaluate", lambda: write_output(paths["metrics"], _json(metrics)))

    artifacts = ["model", "predictions", "metrics"]
    if cfg.importance:
        res = run("importance", lambda: importance_report(
            forest, pseudo.features(), pseudo.y, pseudo.subject_id.astype(str),
            pseudo.feature_names, cfg.permutations, cfg.seed, threads=cfg.threads))
        run("importance", lambda: write_output(paths["importance"], importance_csv(res)))
        artifacts.append("importance")

    manifest = {
        "versions": {"package": __version__, "model_format": FORMAT_VERSION,
                     "python": platform.python_version(), "numpy": np.__version__},
        "seed": cfg.seed,
        "config": {k: v for k, v in asdict(cfg).items() if k != "threads"},
        "inputs": {k: {"path": getattr(cfg, k), "sha256": sha256_file(getattr(cfg, k))}
                   for k in ("events", "covariates")},
        "intermediates": {k: {"path": paths[k].name, "sha256": sha256_file(paths[k])}
                          for k in ("longitudinal", "pseudo")},
        "artifacts": {k: {"path": paths[k].name, "sha256": sha256_file(paths[k]),
                          "bytes": paths[k].stat().st_size} for k in artifacts},
        "metrics": metrics,
    }
    return manifest


def verify_manifest(manifest_path) -> bool:
    """True when every listed artifact exists with the recorded hash."""
    path = Path(manifest_path)
    manifest = json.loads(path.read_text())
    for group in ("intermediates", "artifacts"):
        for entry in manifest[group].values():
            f = path.parent / entry["path"]
            if not f.is_file() or sha256_file(f) != entry["sha256"]:
                return False
    return True


# ---- simulation study reports -------------------------------------------------------

RAW_COLUMNS = ["method", "rho", "censoring", "history", "replicate", "c"]
SUMMARY_COLUMNS = ["method", "rho", "censoring", "history", "mean", "sd", "n"]


def raw_csv(rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(RAW_COLUMNS) + "\n")
    for r in rows:
        buf.write(f"{r['method']},{r['rho']!r},{r['censoring']},{r['history']},"
                  f"{r['replicate']},{r['c']!r}\n")
    return buf.getvalue()


def summarize_raw(rows) -> list[dict]:
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        key = (r["method"], float(r["rho"]), str(r["censoring"]), r["history"])
        groups.setdefault(key, []).append(float(r["c"]))
    out = []
    for (method, rho, cens, hist), vals in groups.items():
        v = np.array(vals)
        out.append({"method": method, "rho": rho, "censoring": cens, "history": hist,
                    "mean": float(v.mean()),
                    "sd": float(v.std(ddof=1)) if len(v) > 1 else None, "n": len(v)})
    return out


def summary_csv(rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(SUMMARY_COLUMNS) + "\n")
    for r in rows:
        sd = "" if r["sd"] is None else repr(r["sd"])
        buf.write(f"{r['method']},{r['rho']!r},{r['censoring']},{r['history']},"
                  f"{r['mean']!r},{sd},{r['n']}\n")
    return buf.getvalue()


def read_raw(paths) -> list[dict]:
    rows = []
    for p in paths:
        with open(p, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != RAW_COLUMNS:
                raise ValueError(f"{p}: expected columns {','.join(RAW_COLUMNS)}")
            for r in reader:
                rows.append({"method": r["method"], "rho": float(r["rho"]),
                             "censoring": r["censoring"], "history": r["history"],
                             "replicate": int(r["replicate"]), "c": float(r["c"])})
    return rows


def report(raw_paths, out_dir) -> dict:
    """Merge raw study files into ``tidy.csv`` plus ``summary.csv`` (mean/sd per group)."""
    rows = read_raw(raw_paths)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_output(out / "tidy.csv", raw_csv(rows))
    summary = summarize_raw(rows)
    write_output(out / "summary.csv", summary_csv(summary))
    return {"rows": len(rows), "groups": len(summary)}
