"""Monte Carlo experiments: replicate, estimate, and summarize with robust metrics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from .dgp import DgpSpec, fixture_theta, generate, oracle_theta
from .estimators import (MQRTuning, OTROptions, QROptions, TROptions,
                         estimate_mqr, estimate_oracle, estimate_otr, estimate_otr_prime,
                         estimate_qr, estimate_tr_discrete, make_report)
from .learners import ForestOptions, LassoTuning, LearnerSpec

FAILURE_LIMIT = 0.2
RMSE_FORMULA = "sqrt(median((theta_hat - theta)^2))"


@dataclass(frozen=True)
class MethodConfig:
    """One estimator in an experiment. ``kind`` selects the implementation.

    ``regression_mtry`` overrides the split-candidate rule of the regression
    forests (outcome and cross-world regressions); ``free_intercept`` leaves
    the intercept of the lasso working models unpenalized.
    """

    label: str
    kind: str
    k_folds: int = 5
    n_trees: Optional[int] = None
    variant: Optional[str] = None
    regression_mtry: Optional[Union[int, str]] = None
    free_intercept: bool = False

    KINDS = ("oracle", "qr", "otr", "mqr", "otr_prime", "tr", "zero")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown method kind {self.kind!r}")
        ForestOptions(mtry=self.regression_mtry)

    def _forest(self, spec):
        if self.n_trees:
            spec = spec.with_trees(self.n_trees)
        return spec

    def _regression(self, spec):
        spec = self._forest(spec)
        return spec.with_mtry(self.regression_mtry) if self.regression_mtry else spec

    def run(self, ds, truth, seed, level):
        if self.kind == "oracle":
            return estimate_oracle(ds, truth, level=level)
        if self.kind in ("qr", "otr"):
            base = QROptions(variant=self.variant or "QR2", level=level)
            opts = replace(base, pi=self._forest(base.pi), p=self._forest(base.p),
                           mu=self._regression(base.mu), tau=self._regression(base.tau))
            if self.kind == "otr":
                return estimate_otr(ds, self.k_folds, opts, seed)
            return estimate_qr(ds, self.k_folds, opts, seed)
        penalize = not self.free_intercept
        if self.kind == "mqr":
            tuning = MQRTuning(variant=self.variant or "MQR2", level=level,
                               penalize_intercept=penalize)
            return estimate_mqr(ds, self.k_folds, tuning, seed)
        if self.kind == "otr_prime":
            opts = OTROptions(LassoTuning(penalize_intercept=penalize), level=level)
            return estimate_otr_prime(ds, self.k_folds, opts, seed)
        if self.kind == "tr":
            spec = LearnerSpec()
            opts = TROptions(self._forest(spec), self._regression(spec), self._forest(spec),
                             level=level)
            return estimate_tr_discrete(ds, self.k_folds, opts, seed)
        # Degenerate reference method: always 0 with zero variance.
        return make_report(np.zeros(ds.n), self.label, level)


@dataclass(frozen=True)
class ExperimentConfig:
    """A grid of sample sizes times replications times methods on one design.

    ``theta_truth`` is ``"fixture"`` (stored Monte Carlo truth), ``"recompute"``
    (fresh Monte Carlo with ``n_mc`` draws) or a number.
    """

    name: str
    dgp: DgpSpec
    n_values: tuple
    methods: tuple
    repetitions: int
    level: float = 0.95
    theta_truth: object = "fixture"
    seed: int = 0
    n_mc: int = 1_000_000

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        if not self.methods:
            raise ValueError("methods must be non-empty")
        labels = [m.label for m in self.methods]
        if len(set(labels)) != len(labels):
            raise ValueError("method labels must be unique")

    def resolve_theta(self) -> float:
        if isinstance(self.theta_truth, (int, float)):
            return float(self.theta_truth)
        if self.theta_truth == "fixture":
            if self.dgp.overrides:
                raise ValueError("fixtures cover the default designs only; use recompute")
            return fixture_theta(self.dgp.setting)
        if self.theta_truth == "recompute":
            return oracle_theta(self.dgp, self.n_mc, self.seed)["theta"]
        raise ValueError(f"cannot resolve theta_truth={self.theta_truth!r}")


@dataclass(frozen=True)
class Replicate:
    method: str
    n: int
    rep: int
    theta_hat: float
    ci_low: float
    ci_high: float
    failed: bool = False
    error: str = ""


@dataclass(frozen=True)
class MetricsRow:
    method: str
    n: int
    bias: float
    rmse: float
    al: float
    ac: float
    n_reps: int
    n_failures: int
    valid: bool


@dataclass
class MetricsTable:
    rows: list
    meta: dict = field(default_factory=dict)
    replicates: list = field(default_factory=list)

    def row(self, method: str, n: int) -> MetricsRow:
        for r in self.rows:
            if r.method == method and r.n == n:
                return r
        raise KeyError((method, n))


def robust_metrics(estimates: Sequence[float], ci_pairs, theta: float) -> dict:
    """Median-based bias, RMSE and interval length; coverage as a plain mean."""
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        raise ValueError("no estimates")
    ci = np.asarray(ci_pairs, dtype=float).reshape(-1, 2)
    err = est - theta
    return {
        "bias": float(np.median(est) - theta),
        "rmse": float(math.sqrt(np.median(err * err))),
        "al": float(np.median(ci[:, 1] - ci[:, 0])),
        "ac": float(np.mean((ci[:, 0] <= theta) & (theta <= ci[:, 1]))),
    }


def replicate_seed(seed: int, n_index: int, rep: int) -> int:
    return int(np.random.SeedSequence([int(seed) & (2**64 - 1), n_index, rep]).generate_state(1)[0])


def _run_replicate(config: ExperimentConfig, n_index: int, n: int, rep: int):
    seed = replicate_seed(config.seed, n_index, rep)
    spec = replace(config.dgp, n=n, seed=seed)
    out = []
    with threadpool_limits(1):
        draw = generate(spec)
        for j, method in enumerate(config.methods):
            try:
                r = method.run(draw.dataset, draw.truth, seed + 7919 * (j + 1), config.level)
                ok = all(map(math.isfinite, (r.theta_hat, r.ci_low, r.ci_high)))
                out.append(Replicate(method.label, n, rep, r.theta_hat, r.ci_low, r.ci_high,
                                     not ok, "" if ok else "non-finite estimate"))
            except Exception as exc:  # counted as a failed replication
                out.append(Replicate(method.label, n, rep, math.nan, math.nan, math.nan, True,
                                     f"{type(exc).__name__}: {exc}"))
    return out


def summarize(replicates, config: ExperimentConfig, theta: float) -> MetricsTable:
    rows = []
    for n in config.n_values:
        for method in config.methods:
            reps = [r for r in replicates if r.method == method.label and r.n == n]
            good = [r for r in reps if not r.failed]
            n_fail = len(reps) - len(good)
            if good:
                m = robust_metrics([r.theta_hat for r in good],
                                   [(r.ci_low, r.ci_high) for r in good], theta)
            else:
                m = dict(bias=math.nan, rmse=math.nan, al=math.nan, ac=math.nan)
            rows.append(MetricsRow(method.label, n, m["bias"], m["rmse"], m["al"], m["ac"],
                                   len(reps), n_fail, n_fail <= FAILURE_LIMIT * len(reps)))
    meta = {
        "name": config.name, "setting": config.dgp.setting, "d1": config.dgp.d1,
        "d2": config.dgp.d2, "n_values": list(config.n_values),
        "repetitions": config.repetitions, "level": config.level, "seed": config.seed,
        "theta": theta, "methods": [m.label for m in config.methods],
        "method_settings": {m.label: {k: v for k, v in asdict(m).items() if k != "label"}
                            for m in config.methods},
        "metrics": {"bias": "median(theta_hat) - theta", "rmse": RMSE_FORMULA,
                    "al": "median(ci_high - ci_low)", "ac": "mean(ci_low <= theta <= ci_high)"},
    }
    return MetricsTable(rows, meta, list(replicates))


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> MetricsTable:
    """Run every (sample size, replication) task and aggregate per method.

    Output is identical for any ``jobs`` value: each task's randomness is
    derived from ``(seed, size index, replication)`` and results are merged
    in task order.
    """
    theta = config.resolve_theta()
    tasks = [(i, n, r) for i, n in enumerate(config.n_values) for r in range(config.repetitions)]
    if jobs == 1:
        results = [_run_replicate(config, *t) for t in tasks]
    else:
        results = Parallel(n_jobs=jobs)(delayed(_run_replicate)(config, *t) for t in tasks)
    return summarize([r for batch in results for r in batch], config, theta)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

COLUMNS = ("Method", "Bias", "RMSE", "AL", "AC")


def _fmt(v: float) -> str:
    return "nan" if not math.isfinite(v) else f"{v:.3f}"


def emit_table(table: MetricsTable, fmt: str = "markdown") -> str:
    if fmt == "markdown":
        return _markdown(table)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "n", "bias", "rmse", "al", "ac", "n_failures", "valid"])
        for r in table.rows:
            w.writerow([r.method, r.n, _fmt(r.bias), _fmt(r.rmse), _fmt(r.al), _fmt(r.ac),
                        r.n_failures, str(r.valid).lower()])
        return buf.getvalue()
    if fmt in ("jsonl", "json-lines"):
        lines = [json.dumps({"type": "meta", **table.meta}, sort_keys=True)]
        lines += [json.dumps({"type": "row", **asdict(r)}, sort_keys=True) for r in table.rows]
        lines += [json.dumps({"type": "replicate", **asdict(r)}, sort_keys=True)
                  for r in table.replicates]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def _markdown(table: MetricsTable) -> str:
    meta = table.meta
    out = []
    sizes = list(dict.fromkeys(r.n for r in table.rows))
    for n in sizes:
        dims = f", (d1,d2)=({meta['d1']},{meta['d2']})" if "d1" in meta else ""
        out.append(f"N={n}{dims}")
        out.append("")
        out.append("| " + " | ".join(COLUMNS) + " |")
        out.append("|" + "---|" * len(COLUMNS))
        for r in table.rows:
            if r.n != n:
                continue
            label = r.method if r.valid else f"{r.method} (invalid: {r.n_failures} failures)"
            out.append(f"| {label} | {_fmt(r.bias)} | {_fmt(r.rmse)} | {_fmt(r.al)} | "
                       f"{_fmt(r.ac)} |")
        out.append("")
    return "\n".join(out)


def parse_jsonl(text: str) -> MetricsTable:
    meta, rows, reps = {}, [], []
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        kind = rec.pop("type")
        if kind == "meta":
            meta = rec
        elif kind == "row":
            rows.append(MetricsRow(**rec))
        elif kind == "replicate":
            reps.append(Replicate(**rec))
        else:
            raise ValueError(f"unknown record type {kind!r}")
    return MetricsTable(rows, meta, reps)


def write_outputs(table: MetricsTable, out_dir, name: str) -> dict:
    from pathlib import Path
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"jsonl": out / f"{name}.metrics.jsonl", "markdown": out / f"{name}.table.md"}
    paths["jsonl"].write_text(emit_table(table, "jsonl"), encoding="utf-8")
    paths["markdown"].write_text(emit_table(table, "markdown"), encoding="utf-8")
    return paths


# ---------------------------------------------------------------------------
# Table reproduction presets
# ---------------------------------------------------------------------------

DESK_TREES = 100
# Presets follow the usual R defaults: regression forests split on ceil(d/3)
# candidates and lasso intercepts are left unpenalized.
PRESET_REGRESSION_MTRY = "third"


def reproduce_config(table: str, scale: str, seed: int = 0) -> ExperimentConfig:
    """Preset experiments for the three simulation tables.

    ``desk`` runs the reduced configurations (N=1000, 50 replications, reduced
    dimensions for the Gaussian-mediator designs); ``paper`` runs the full
    dimensions, four sample sizes and 100 replications.
    """
    if table not in ("t1", "t2", "t3"):
        raise ValueError(f"unknown table {table!r}; choose t1, t2 or t3")
    if scale not in ("desk", "paper"):
        raise ValueError(f"unknown scale {scale!r}; choose desk or paper")
    setting = {"t1": "S1", "t2": "S2", "t3": "S3"}[table]
    desk = scale == "desk"
    trees = DESK_TREES if desk else None
    forest = dict(n_trees=trees, regression_mtry=PRESET_REGRESSION_MTRY)
    lasso = dict(free_intercept=True)
    if table == "t3":
        dims = (50, 1)
        if desk:
            methods = (MethodConfig("Oracle", "oracle"), MethodConfig("TR", "tr", **forest),
                       MethodConfig("O-TR'", "otr_prime", **lasso),
                       MethodConfig("QR2", "qr", variant="QR2", **forest),
                       MethodConfig("MQR2", "mqr", variant="MQR2", **lasso))
        else:
            methods = _paper_methods(True, forest, lasso)
    else:
        dims = (41, 10) if desk else (101, 50)
        if desk:
            methods = (MethodConfig("Oracle", "oracle"),
                       MethodConfig("O-TR'", "otr_prime", **lasso),
                       MethodConfig("QR2", "qr", variant="QR2", **forest),
                       MethodConfig("MQR2", "mqr", variant="MQR2", **lasso))
        else:
            methods = _paper_methods(False, forest, lasso)
    n_values = (1000,) if desk else (600, 1000, 1400, 1800)
    reps = 50 if desk else 100
    return ExperimentConfig(f"{table}-{scale}", DgpSpec(setting, 1, *dims), n_values, methods,
                            reps, seed=seed)


def _paper_methods(include_tr: bool, forest: dict, lasso: dict):
    methods = [MethodConfig("Oracle", "oracle")]
    if include_tr:
        methods.append(MethodConfig("TR", "tr", **forest))
    methods += [MethodConfig("O-TR", "otr", **forest),
                MethodConfig("QR1", "qr", variant="QR1", **forest),
                MethodConfig("QR2", "qr", variant="QR2", **forest),
                MethodConfig("O-TR'", "otr_prime", **lasso),
                MethodConfig("MQR1", "mqr", variant="MQR1", **lasso),
                MethodConfig("MQR2", "mqr", variant="MQR2", **lasso)]
    return tuple(methods)
