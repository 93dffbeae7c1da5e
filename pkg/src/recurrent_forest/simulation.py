"""Simulated recurrent-event cohorts and the method-comparison study driver.

Gap times are exponential with a subject-specific hazard that depends on
seven covariates through a deliberately nonlinear formula, and are
correlated within subject by an exchangeable Gaussian copula. The event
process starts one month before the first check-in so a pre-baseline
history window exists.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr

from .evaluation import ScoredRows, bootstrap_se, harrell_c, rubin_combine
from .forest import HistoricalRandomForest
from .glm import PseudoLogitRegression, model_a_design, model_b_design
from .pseudo import window_pseudo
from .windows import LongitudinalData, WindowGrid

HAZARD_RANGE = (8 / 15, 15.0)
MONTH = 1 / 12
CENSORING_LEVELS = {"none": 0.0, "light": 0.23, "moderate": 0.45, "heavy": 0.63}
HISTORY_MODES = ("none", "full", "partial")
METHODS = ("model_a", "rfrepo", "model_b")
Z_NAMES = [f"Z{j}" for j in range(1, 8)]


@dataclass(frozen=True)
class SimConfig:
    """One cell of the simulation study (times in years)."""

    n: int = 500
    rho: float = 0.0
    censoring: float = 0.0
    history: str = "none"
    t0: float = 0.0
    a: float = MONTH
    last_checkin: float = 2.0
    tau: float = 1 / 6
    replicates: int = 30
    m_imputations: int = 10
    imputation_rate: float = 7.5
    n_trees: int = 500
    min_node: int = 40
    mtry: int | None = None
    bootstrap: int = 0
    seed: int = 20240101
    threads: int = 1

    def __post_init__(self):
        if not 0 <= self.rho < 1:
            raise ValueError("rho must be in [0, 1)")
        if not 0 <= self.censoring < 1:
            raise ValueError("censoring target must be in [0, 1)")
        if self.history not in HISTORY_MODES:
            raise ValueError(f"history must be one of {HISTORY_MODES}")
        if self.n < 2:
            raise ValueError("need n >= 2")

    @property
    def end(self) -> float:
        return self.last_checkin + self.tau

    @property
    def grid(self) -> WindowGrid:
        return WindowGrid(self.t0, self.a, self.tau, self.end)


def draw_covariates(rng: np.random.Generator, size: int) -> np.ndarray:
    """Z1..Z7 as columns; normal parameters are (mean, sd)."""
    z = np.empty((size, 7))
    z[:, 0] = rng.normal(0.0, 5.0, size)
    z[:, 1] = rng.normal(2.0, 0.8, size)
    z[:, 2] = rng.poisson(4.0, size) - 2.0
    z[:, 3] = rng.beta(7.0, 1.0, size) + 0.1
    z[:, 4] = rng.choice([0.0, 1.0, 2.0], size, p=[2 / 3, 1 / 6, 1 / 6])
    z[:, 5] = rng.choice([-5.0, -2.0, 2.0, 3.0], size, p=[1 / 10, 1 / 3, 11 / 30, 1 / 5])
    z[:, 6] = rng.integers(0, 4, size).astype(float)
    return z


def hazard(Z) -> np.ndarray:
    """Gap-time hazard (events per year) for covariate rows Z1..Z7."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    z1, z2, z3, z4, z6 = Z[:, 0], Z[:, 1], Z[:, 2], Z[:, 3], Z[:, 5]
    if (z6 == 0).any():
        raise ValueError("Z6 must be non-zero")
    lin = (z2 * np.sin(z1 / z6) - z3 * (z2 > 2) + z3 * (z2 <= 2)
           + z1 * z6 + z2 ** 2 * z4)
    with np.errstate(over="ignore"):
        return np.exp(lin)


def draw_subjects(rng: np.random.Generator, n: int, max_attempts: int = 10**6):
    """Covariates and hazards for n subjects with hazard inside the accepted range.

    Returns ``(Z, lam, rejected)``.
    """
    lo, hi = HAZARD_RANGE
    kept_z, kept_l = [], []
    have = rejected = attempts = 0
    while have < n:
        batch = max(64, 4 * (n - have))
        z = draw_covariates(rng, batch)
        lam = hazard(z)
        ok = (lam >= lo) & (lam <= hi)
        attempts += batch
        need = n - have
        idx = np.flatnonzero(ok)
        if len(idx) > need:
            # only count rejections up to the last kept draw
            cut = idx[need - 1] + 1
            rejected += int(cut - need)
            idx = idx[:need]
        else:
            rejected += int(batch - len(idx))
        kept_z.append(z[idx])
        kept_l.append(lam[idx])
        have += len(idx)
        if attempts > max_attempts and have < n:
            raise RuntimeError("hazard acceptance loop exceeded its attempt guard")
    return np.concatenate(kept_z), np.concatenate(kept_l), rejected


def draw_gap_times(lam, rho: float, k: int, rng: np.random.Generator,
                   shared=None) -> np.ndarray:
    """k exponential gaps per subject, exchangeably correlated through a Gaussian copula.

    ``lam`` may be a scalar or an array of per-subject hazards; the result
    has shape ``(len(lam), k)`` (or ``(k,)`` for a scalar).
    """
    if not 0 <= rho < 1:
        raise ValueError("rho must be in [0, 1)")
    if k < 1:
        raise ValueError("k must be >= 1")
    scalar = np.ndim(lam) == 0
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if shared is None:
        shared = rng.standard_normal(len(lam))
    z = math.sqrt(rho) * shared[:, None] + math.sqrt(1 - rho) * rng.standard_normal((len(lam), k))
    # -log(1 - Phi(z)) computed as -log Phi(-z) to keep the upper tail exact
    gaps = -log_ndtr(-z) / lam[:, None]
    return gaps[0] if scalar else gaps


def calibrate_censoring(target: float, rng: np.random.Generator, end: float = 13 / 6,
                        sampler=None, n_mc: int = 100_000, tol: float = 1e-3,
                        max_iter: int = 200) -> float:
    """Exponential dropout rate giving P(dropout < follow-up end) = target.

    Bisection on a Monte Carlo estimate with common random numbers.
    ``sampler(rng, size)`` returns per-subject follow-up ends; by default
    every subject is followed to ``end``.
    """
    if not 0 <= target < 1:
        raise ValueError("censoring target must be in [0, 1)")
    if target == 0:
        return 0.0
    horizon = sampler(rng, n_mc) if sampler is not None else np.full(n_mc, end)
    unit = rng.exponential(1.0, n_mc)

    def frac(theta):
        return float(np.mean(unit / theta < horizon))

    lo, hi = 0.0, 1.0
    while frac(hi) < target:
        hi *= 2.0
    mid = hi
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f = frac(mid)
        if abs(f - target) < tol and hi - lo < 1e-6 * hi:
            break
        if f < target:
            lo = mid
        else:
            hi = mid
    return mid


@dataclass
class Cohort:
    """Simulated subjects with their censored-longitudinal rows."""

    subject_id: np.ndarray
    Z: np.ndarray
    lam: np.ndarray
    events: list
    censor: np.ndarray
    rows: LongitudinalData
    row_subject: np.ndarray
    burn_in_x: np.ndarray
    rejected: int = 0

    def records(self):
        from .events import SubjectRecord
        return [SubjectRecord(str(s), tuple(float(e) for e in ev[(ev >= 0) & (ev <= c)]),
                              float(c), "years")
                for s, ev, c in zip(self.subject_id, self.events, self.censor)]


def simulate_cohort(config: SimConfig, rng: np.random.Generator,
                    theta: float | None = None) -> Cohort:
    """Generate n subjects, their event streams, censoring and longitudinal rows."""
    n = config.n
    Z, lam, rejected = draw_subjects(rng, n)
    origin = config.t0 - config.a
    horizon = config.end + config.tau + config.a
    shared = rng.standard_normal(n)
    blocks = [[] for _ in range(n)]
    reach = np.full(n, origin)
    active = np.arange(n)
    k = 8
    while len(active):
        g = draw_gap_times(lam[active], config.rho, k, rng, shared=shared[active])
        for row, i in zip(g, active):
            blocks[i].append(row)
        reach[active] += g.sum(axis=1)
        active = active[reach[active] <= origin + horizon]
        # gaps are iid given the shared factor, so growing the batch is harmless
        k = min(2 * k, 1 << 16)
    times = [origin + np.cumsum(np.concatenate(b)) for b in blocks]

    if theta is None:
        theta = calibrate_censoring(config.censoring, rng, config.end)
    if theta > 0:
        dropout = rng.exponential(1.0 / theta, n)
        censor = np.minimum(dropout, config.end)
    else:
        censor = np.full(n, config.end)

    grid_times = config.grid.times()
    width = len(str(n))
    sids = np.array([f"S{i + 1:0{width}d}" for i in range(n)], dtype=object)
    events = []
    sid_col, t_col, x_col, d_col, subj_col = [], [], [], [], []
    burn_x = np.empty(n)
    for i in range(n):
        ev = times[i][times[i] <= censor[i]]
        events.append(ev)
        tt = np.concatenate([[origin], grid_times[grid_times < censor[i]]])
        idx = np.searchsorted(ev, tt, side="left")
        has = idx < len(ev)
        x = censor[i] - tt
        x[has] = ev[idx[has]] - tt[has]
        burn_x[i] = x[0]
        k = len(tt) - 1
        sid_col.extend([sids[i]] * k)
        t_col.append(tt[1:])
        x_col.append(x[1:])
        d_col.append(has[1:].astype(np.int64))
        subj_col.append(np.full(k, i))
    rows = LongitudinalData(np.array(sid_col, dtype=object), np.concatenate(t_col),
                            np.concatenate(x_col), np.concatenate(d_col))
    return Cohort(sids, Z, lam, events, censor, rows, np.concatenate(subj_col),
                  burn_x, rejected)


def history_covariates(x_plus, mode: str = "full", rng=None, cap: float = MONTH,
                       rate: float = 7.5) -> np.ndarray:
    """Running mean of capped residual times over earlier windows.

    ``x_plus`` holds residual times at the pre-baseline window followed by
    each check-in. Returns one value per check-in. In ``partial`` mode the
    pre-baseline term is replaced by ``min(X~, cap)`` with X~ drawn from an
    exponential with the given rate.
    """
    x_plus = np.asarray(x_plus, dtype=float)
    if len(x_plus) < 2:
        raise ValueError("need the pre-baseline window and at least one check-in")
    terms = np.minimum(x_plus, cap)
    if mode == "partial":
        rng = np.random.default_rng(rng)
        terms = terms.copy()
        terms[0] = min(rng.exponential(1.0 / rate), cap)
    elif mode != "full":
        raise ValueError("mode must be 'full' or 'partial'")
    k = len(x_plus) - 1
    # a mean of capped terms cannot exceed the cap; clip the rounding
    return np.minimum(np.cumsum(terms)[:k] / np.arange(1, k + 1), cap)


def cohort_history(cohort: Cohort, mode: str, rng=None, cap: float = MONTH,
                   rate: float = 7.5) -> np.ndarray:
    """History covariate for every row of a cohort (vectorised over subjects)."""
    rows = cohort.rows
    terms = np.minimum(rows.x, cap)
    first = np.minimum(cohort.burn_in_x, cap)
    if mode == "partial":
        rng = np.random.default_rng(rng)
        first = np.minimum(rng.exponential(1.0 / rate, len(first)), cap)
    elif mode != "full":
        raise ValueError("mode must be 'full' or 'partial'")
    out = np.empty(len(rows))
    subj = cohort.row_subject
    starts = np.flatnonzero(np.r_[True, subj[1:] != subj[:-1]])
    ends = np.r_[starts[1:], len(subj)]
    for s, e in zip(starts, ends):
        i = subj[s]
        seq = np.concatenate([[first[i]], terms[s:e - 1]])
        out[s:e] = np.cumsum(seq) / np.arange(1, e - s + 1)
    return np.minimum(out, cap)


@dataclass
class ReplicateResult:
    replicate: int
    c: dict
    variance: dict = field(default_factory=dict)
    rejected: int = 0


def _fit_predict(config, train, test, y, h_train, h_test, seed, threads):
    Zr, Zt = train.Z[train.row_subject], test.Z[test.row_subject]
    cols_r = [Zr] + ([h_train[:, None]] if h_train is not None else []) + [train.rows.t[:, None]]
    cols_t = [Zt] + ([h_test[:, None]] if h_test is not None else []) + [test.rows.t[:, None]]
    groups = train.rows.subject_id
    forest = HistoricalRandomForest(n_estimators=config.n_trees, max_features=config.mtry,
                                    min_node_size=config.min_node, random_state=seed,
                                    n_jobs=threads)
    forest.fit(np.column_stack(cols_r), y, groups)
    scores = {"rfrepo": forest.predict(np.column_stack(cols_t))}
    for name, design in (("model_a", model_a_design), ("model_b", model_b_design)):
        glm = PseudoLogitRegression().fit(design(Zr, h_train), y, groups)
        scores[name] = glm.predict(design(Zt, h_test))
    return scores


def run_replicate(config: SimConfig, replicate: int, theta: float | None = None,
                  threads: int | None = None) -> ReplicateResult:
    """Train on one simulated cohort, score an independent cohort, report C per method."""
    threads = config.threads if threads is None else threads
    ss = np.random.SeedSequence(entropy=config.seed, spawn_key=(replicate,))
    s_train, s_test, s_imp, s_forest = ss.spawn(4)
    if theta is None:
        theta = censoring_rate(config)
    train = simulate_cohort(config, np.random.default_rng(s_train), theta)
    test = simulate_cohort(config, np.random.default_rng(s_test), theta)
    y, _, _ = window_pseudo(train.rows, config.tau, method="vectorized")

    m = config.m_imputations if config.history == "partial" else 1
    imp_seeds = s_imp.spawn(m)
    forest_seed = int(s_forest.generate_state(1, np.uint64)[0] >> np.uint64(1))
    per_method = {k: [] for k in METHODS}
    per_var = {k: [] for k in METHODS}
    for j in range(m):
        if config.history == "none":
            h_train = h_test = None
        else:
            rng = np.random.default_rng(imp_seeds[j])
            h_train = cohort_history(train, config.history, rng, rate=config.imputation_rate)
            h_test = cohort_history(test, config.history, rng, rate=config.imputation_rate)
        scores = _fit_predict(config, train, test, y, h_train, h_test, forest_seed, threads)
        for k in METHODS:
            rows = ScoredRows(test.rows.subject_id, test.rows.t, test.rows.x,
                              test.rows.delta, scores[k])
            per_method[k].append(harrell_c(rows))
            if config.bootstrap:
                boot = bootstrap_se(harrell_c, rows, config.bootstrap,
                                    np.random.default_rng(imp_seeds[j].spawn(1)[0]))
                per_var[k].append(boot.se ** 2)
            else:
                per_var[k].append(0.0)

    c, var = {}, {}
    for k in METHODS:
        if m > 1:
            pooled = rubin_combine(per_method[k], per_var[k])
            c[k], var[k] = pooled.estimate, pooled.total
        else:
            c[k], var[k] = per_method[k][0], per_var[k][0]
    return ReplicateResult(replicate, c, var, train.rejected + test.rejected)


def censoring_rate(config: SimConfig) -> float:
    ss = np.random.SeedSequence(entropy=config.seed, spawn_key=(2**31,))
    return calibrate_censoring(config.censoring, np.random.default_rng(ss), config.end)


def method_label(method: str, history: str) -> str:
    return method if history == "none" else f"{method}+H_{history[0]}"


@dataclass
class StudyResult:
    config: SimConfig
    replicates: list
    theta: float

    def raw_rows(self) -> list[dict]:
        """Long-format rows: method, rho, censoring, history, replicate, c."""
        out = []
        for r in self.replicates:
            for k in METHODS:
                out.append({"method": k, "rho": self.config.rho,
                            "censoring": self.config.censoring,
                            "history": self.config.history,
                            "replicate": r.replicate, "c": r.c[k]})
        return out

    def summary(self) -> dict:
        """Per method: mean C and empirical sd (None when there is one replicate)."""
        out = {}
        for k in METHODS:
            vals = np.array([r.c[k] for r in self.replicates])
            out[k] = {"mean": float(vals.mean()),
                      "sd": float(vals.std(ddof=1)) if len(vals) > 1 else None,
                      "n": len(vals)}
        return out


def run_study(config: SimConfig, threads: int | None = None) -> StudyResult:
    """Run every replicate of a study cell.

    Replicates run in parallel threads when ``threads > 1``; each draws from
    its own seed stream so the result does not depend on scheduling.
    """
    threads = config.threads if threads is None else threads
    theta = censoring_rate(config)
    reps = range(config.replicates)
    if threads > 1 and config.replicates > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda r: run_replicate(config, r, theta, 1), reps))
    else:
        results = [run_replicate(config, r, theta, 1) for r in reps]
    return StudyResult(config, results, theta)


def synthetic_clinical_cohort(n: int = 1035, p: int = 50, seed: int = 0,
                              follow_up: float = 360.0, dropout: float = 0.15):
    """A trial-shaped cohort in days with ``p`` baseline covariates.

    Roughly a third of the covariates are binary, a sixth ordered (codes
    0..4) and the rest continuous; a handful drive a log-linear event rate
    averaging about 1.5 events per year. A ``dropout`` share of subjects is
    censored uniformly over follow-up, the rest at ``follow_up``.

    Returns ``(records, covariate_csv, schema)`` ready for the pipeline.
    """
    from .events import SubjectRecord

    rng = np.random.default_rng(seed)
    n_bin, n_ord = p // 3, p // 6
    kinds = ["binary"] * n_bin + ["ordered"] * n_ord + ["continuous"] * (p - n_bin - n_ord)
    Z = np.empty((n, p))
    for j, kind in enumerate(kinds):
        if kind == "binary":
            Z[:, j] = rng.random(n) < rng.uniform(0.2, 0.6)
        elif kind == "ordered":
            Z[:, j] = rng.integers(0, 5, n)
        else:
            Z[:, j] = np.round(rng.normal(0, 1, n), 3)
    beta = np.zeros(p)
    active = rng.choice(p, size=min(6, p), replace=False)
    beta[active] = rng.choice([-1, 1], len(active)) * rng.uniform(0.3, 0.6, len(active))
    lin = (Z - Z.mean(0)) / np.where(Z.std(0) > 0, Z.std(0), 1) @ beta
    rate = 1.5 / 365.0 * np.exp(lin - np.log(np.mean(np.exp(lin))))
    cens = np.where(rng.random(n) < dropout, np.round(rng.uniform(1, follow_up, n)),
                    follow_up)
    records = []
    width = len(str(n))
    for i in range(n):
        times, t = [], 0.0
        while True:
            t += rng.exponential(1 / rate[i])
            tt = float(np.ceil(t))
            if tt >= cens[i]:
                break
            if not times or tt > times[-1]:
                times.append(tt)
        records.append(SubjectRecord(f"S{i + 1:0{width}d}", tuple(times), float(cens[i])))
    names = [f"v{j + 1:02d}" for j in range(p)]
    lines = ["subject_id," + ",".join(names)]
    for i, rec in enumerate(records):
        lines.append(rec.subject_id + "," + ",".join(
            str(int(v)) if kinds[j] != "continuous" else repr(float(v))
            for j, v in enumerate(Z[i])))
    schema = ",".join(f"{nm}:{k}" for nm, k in zip(names, kinds))
    return records, "\n".join(lines) + "\n", schema
