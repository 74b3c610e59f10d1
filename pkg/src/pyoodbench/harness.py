"""Experiment runner: data, training, every scoring method, metrics, reports.

:func:`run` evaluates every enabled method point for every run seed and
aggregates the per-seed metrics.  The planner derives the minimal set of
training jobs from the method list: one softmax classifier per seed is
shared by MCP, MCDP, ODIN and Mahalanobis, the first ensemble member *is*
that classifier, and DUQ trains its own model.  The benchmark itself is
fixed by ``benchmark.seed``; run seeds vary model initialisation, data
order and dropout masks.

A failing cell (one seed, one method point) is recorded with its error and
the run continues.  :attr:`RunReport.failed` tells the CLI to exit with 1.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence, Union

import numpy as np

from pyoodbench import data as data_mod
from pyoodbench.bench_util import (
    _package_version,
    config_fingerprint,
    dumps_config,
    format_float,
)
from pyoodbench.data import OodBenchmark
from pyoodbench.errors import OodBenchError, UsageError
from pyoodbench.export import (
    envelope,
    render_markdown_table,
    write_bins_csv,
    write_json,
    write_scores_csv,
)
from pyoodbench.metrics import (
    ORIENTATION,
    EvalReport,
    ReliabilityBins,
    auroc,
    ece,
    evaluate,
)
from pyoodbench.nn import (
    Classifier,
    DuqConfig,
    DuqModel,
    MlpConfig,
    derive_seed,
    duq_train,
    train,
)
from pyoodbench.scores import (
    GaussianStats,
    PoolSpec,
    ScoredSample,
    Scores,
    duq_scores,
    ensemble_score,
    fit_gaussian_stats,
    mahalanobis_score,
    mcdp_score,
    mcp_score,
    odin_score,
    pooled_shape,
)

__all__ = [
    "ROW_ORDER",
    "MethodPoint",
    "TrainingJob",
    "CellResult",
    "RunReport",
    "TemperatureSweep",
    "PoolingSweep",
    "build_benchmark",
    "model_config",
    "duq_config",
    "scored_samples",
    "method_points",
    "plan_jobs",
    "run",
    "write_run",
    "sweep_temperature",
    "write_temperature_sweep",
    "sweep_pooling",
    "write_pooling_sweep",
]

logger = logging.getLogger(__name__)

ROW_ORDER = (
    "mcp",
    "mcdp",
    "ensemble",
    "mahalanobis",
    "ensemble_mahalanobis",
    "odin",
    "odin_pert",
    "odin_temp",
    "duq",
)

# Two keys, so the dropout stream never equals an ensemble member's derive_seed(seed, k).
_MCDP_STREAM = (0, 1)

# Errors a cell may raise without aborting the run.
_CELL_ERRORS = (OodBenchError, ValueError, RuntimeError, FloatingPointError, np.linalg.LinAlgError)


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MethodPoint:
    """One row of the comparison table: a method variant at fixed parameters.

    Attributes:
        method: Method name from :data:`pyoodbench.scores.METHODS`.
        variant: Row kind; differs from *method* only for the ODIN
            ablations (``odin_pert``, ``odin_temp``).
        params: Sorted ``(name, value)`` pairs.

    """

    method: str
    variant: str
    params: tuple[tuple[str, Any], ...] = ()

    @property
    def param_dict(self) -> dict[str, Any]:
        """Parameters as a dict."""
        return dict(self.params)

    @property
    def key(self) -> str:
        """Stable identifier used to group cells across seeds."""
        return f"{self.variant}:{json.dumps(self.param_dict, sort_keys=True)}"

    @property
    def label(self) -> str:
        """Row label in the comparison table."""
        p = self.param_dict
        if self.variant == "odin":
            return f"ODIN (eps={p['epsilon']:g}, tau'={p['tau_prime']:g})"
        if self.variant == "odin_pert":
            return f"ODIN pert. only (eps={p['epsilon']:g})"
        if self.variant == "odin_temp":
            return f"ODIN temp. only (tau'={p['tau_prime']:g})"
        if self.variant == "mahalanobis" and p.get("pool"):
            kh, kw, s = p["pool"]
            return f"Mahalanobis ({kh}x{kw}, stride={s})"
        return {
            "mcp": "MCP",
            "mcdp": "MCDP",
            "ensemble": "Deep Ensemble",
            "mahalanobis": "Mahalanobis",
            "ensemble_mahalanobis": "Mahalanobis Ens.",
            "duq": "DUQ",
        }[self.variant]

    def sort_key(self) -> tuple:
        """Table order: method family first, then parameters."""
        return ROW_ORDER.index(self.variant), json.dumps(self.param_dict, sort_keys=True)


def _point(method: str, variant: Optional[str] = None, **params: Any) -> MethodPoint:
    return MethodPoint(method, variant or method, tuple(sorted(params.items())))


def method_points(config: Mapping[str, Any]) -> list[MethodPoint]:
    """Expand ``methods.enabled`` into table rows, in table order.

    ODIN contributes one row per ``(epsilon, tau_prime)`` pair and, with
    ``ablations = true``, a perturbation-only row per epsilon
    (``tau_prime = 1``) and a temperature-only row per tau_prime
    (``epsilon = 0``).
    """
    m = config["methods"]
    points: dict[str, MethodPoint] = {}

    def add(p: MethodPoint) -> None:
        points.setdefault(p.key, p)

    for name in m["enabled"]:
        if name == "mcp":
            add(_point("mcp"))
        elif name == "mcdp":
            add(_point("mcdp", n_passes=m["mcdp"]["n_passes"]))
        elif name == "ensemble":
            add(_point("ensemble", size=m["ensemble"]["size"]))
        elif name == "mahalanobis":
            add(_point("mahalanobis", pool=list(m["mahalanobis"]["pool"])))
        elif name == "ensemble_mahalanobis":
            add(
                _point(
                    "ensemble_mahalanobis",
                    size=m["ensemble"]["size"],
                    consensus=m["ensemble"]["consensus"],
                    pool=list(m["mahalanobis"]["pool"]),
                )
            )
        elif name == "odin":
            odin = m["odin"]
            for eps in odin["epsilons"]:
                for tau in odin["tau_primes"]:
                    add(_point("odin", epsilon=float(eps), tau_prime=float(tau)))
            if odin["ablations"]:
                for eps in odin["epsilons"]:
                    add(_point("odin", "odin_pert", epsilon=float(eps), tau_prime=1.0))
                for tau in odin["tau_primes"]:
                    add(_point("odin", "odin_temp", epsilon=0.0, tau_prime=float(tau)))
        elif name == "duq":
            add(_point("duq", **m["duq"]))
    return sorted(points.values(), key=MethodPoint.sort_key)


@dataclass(frozen=True)
class TrainingJob:
    """A model to train: ``kind`` is ``"mlp"`` or ``"duq"``; ``seed`` the model seed."""

    kind: str
    seed: int


def _member_seeds(seed: int, size: int) -> list[int]:
    return [derive_seed(seed, k) for k in range(size)]


def _mcdp_seed(seed: int) -> int:
    return derive_seed(seed, *_MCDP_STREAM)


def plan_jobs(config: Mapping[str, Any]) -> list[TrainingJob]:
    """Minimal, de-duplicated list of training jobs for a run.

    Ensemble member 0 uses the run seed itself and therefore shares the
    base classifier's job.
    """
    enabled = set(config["methods"]["enabled"])
    size = config["methods"]["ensemble"]["size"]
    jobs: dict[TrainingJob, None] = {}
    for seed in config["run"]["seeds"]:
        if enabled & {"mcp", "mcdp", "mahalanobis", "odin"}:
            jobs[TrainingJob("mlp", seed)] = None
        if enabled & {"ensemble", "ensemble_mahalanobis"}:
            for member_seed in _member_seeds(seed, size):
                jobs[TrainingJob("mlp", member_seed)] = None
        if "duq" in enabled:
            jobs[TrainingJob("duq", seed)] = None
    return list(jobs)


def build_benchmark(config: Mapping[str, Any]) -> OodBenchmark:
    """Generate or load the benchmark described by ``config["benchmark"]``."""
    b = config["benchmark"]
    common = {"normalize": b["normalize"], "validation_fraction": b["validation_fraction"]}
    if b["generator"] == "gaussian":
        g = b["gaussian"]
        return data_mod.gen_gaussian_benchmark(
            g["d"],
            g["num_classes"],
            g["n_per_class"],
            g["ood_shift"],
            g["spread"],
            b["seed"],
            n_test_per_class=g["n_test_per_class"],
            n_ood=g["n_ood"],
            **common,
        )
    if b["generator"] == "moons":
        g = b["moons"]
        return data_mod.gen_moons_benchmark(
            g["n_per_class"],
            g["noise"],
            g["ood_ring_radius"],
            b["seed"],
            n_test_per_class=g["n_test_per_class"],
            n_ood=g["n_ood"],
            **common,
        )
    c = b["csv"]
    bm = data_mod.load_benchmark(
        {"train": c["train"], "test_id": c["test_id"], "test_ood": c["test_ood"]},
        label_column=c["label_column"],
    )
    if b["validation_fraction"] > 0.0:
        tr, val = data_mod.split_validation(bm.train, b["validation_fraction"], b["seed"])
        bm.train, bm.validation = tr, val
    return bm.normalized() if b["normalize"] else bm


def model_config(config: Mapping[str, Any], benchmark: OodBenchmark, seed: int) -> MlpConfig:
    """:class:`MlpConfig` for *benchmark* from the ``[model]`` section."""
    m = dict(config["model"])
    shape = m.pop("feature_shape")
    return MlpConfig(
        input_dim=benchmark.input_dim,
        num_classes=benchmark.num_classes,
        seed=seed,
        feature_shape=tuple(shape) if shape else None,
        **m,
    )


def duq_config(config: Mapping[str, Any]) -> DuqConfig:
    """:class:`DuqConfig` from ``[methods.duq]``."""
    return DuqConfig(**config["methods"]["duq"])


def _pool(spec: Sequence[int]) -> Optional[PoolSpec]:
    return PoolSpec((spec[0], spec[1]), spec[2]) if spec else None


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass
class CellResult:
    """Outcome of one (seed, method point) cell."""

    seed: int
    point: MethodPoint
    report: Optional[EvalReport] = None
    error: Optional[dict[str, str]] = None
    notes: list[str] = field(default_factory=list)
    details: dict[str, Any] = field(default_factory=dict)
    samples: list[ScoredSample] = field(default_factory=list, repr=False)
    bins: Optional[ReliabilityBins] = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        """True when the cell produced a report."""
        return self.report is not None

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready record."""
        return {
            "seed": self.seed,
            "method": self.point.method,
            "variant": self.point.variant,
            "label": self.point.label,
            "params": self.point.param_dict,
            "status": "ok" if self.ok else "failed",
            "report": None if self.report is None else self.report.to_dict(),
            "error": self.error,
            "notes": list(self.notes),
            "details": dict(self.details),
        }


_METRICS = ("auroc", "aucpr", "id_accuracy", "ece")


def _aggregate(cells: Sequence[CellResult], points: Sequence[MethodPoint]) -> list[dict[str, Any]]:
    rows = []
    for point in points:
        mine = [c for c in cells if c.point.key == point.key]
        good = [c.report for c in mine if c.ok]
        row: dict[str, Any] = {
            "label": point.label,
            "variant": point.variant,
            "params": point.param_dict,
            "n_seeds": len(good),
            "failed_seeds": sorted(c.seed for c in mine if not c.ok),
        }
        for metric in _METRICS:
            values = [getattr(r, metric) for r in good]
            row[metric] = math.fsum(values) / len(values) if values else None
        rows.append(row)
    return rows


@dataclass
class RunReport:
    """Per-cell reports, per-row means over seeds and provenance.

    Attributes:
        cells: One entry per (seed, method point), ordered by seed then row.
        aggregate: One row per method point with the mean metrics over the
            seeds whose cell succeeded.
        provenance: Config fingerprint, library version, metric
            orientation, number of training jobs and wall-clock seconds.

    """

    cells: list[CellResult]
    aggregate: list[dict[str, Any]]
    provenance: dict[str, Any]

    @property
    def failed(self) -> bool:
        """True if any cell failed."""
        return any(not c.ok for c in self.cells)

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready payload (without the envelope)."""
        return {
            "cells": [c.to_dict() for c in self.cells],
            "aggregate": self.aggregate,
            "provenance": self.provenance,
        }

    def to_markdown(self) -> str:
        """Comparison table of the aggregate rows."""
        return render_markdown_table(self.aggregate)


# ---------------------------------------------------------------------------
# Training and scoring
# ---------------------------------------------------------------------------


@dataclass
class _SeedModels:
    models: dict[TrainingJob, Union[Classifier, DuqModel, Exception]]
    stats: dict[tuple[int, str], GaussianStats] = field(default_factory=dict)

    def get(self, job: TrainingJob):
        model = self.models[job]
        if isinstance(model, Exception):
            raise UsageError(f"the {job.kind} model for seed {job.seed} failed to train: {model}")
        return model


def _run_job(job: TrainingJob, config: Mapping[str, Any], bench: OodBenchmark):
    cfg = model_config(config, bench, job.seed)
    logger.info("training %s model (seed %d)", job.kind, job.seed)
    if job.kind == "duq":
        duq_cfg = duq_config(config)
        model, _ = duq_train(DuqModel.initialize(cfg, duq_cfg), bench.train, duq_cfg.epochs or None)
        return model
    return train(Classifier.initialize(cfg), bench.train).classifier


def _train_all(
    jobs: Sequence[TrainingJob], config: Mapping[str, Any], bench: OodBenchmark
) -> dict[TrainingJob, Any]:
    def attempt(job: TrainingJob):
        try:
            return _run_job(job, config, bench)
        except _CELL_ERRORS as exc:
            logger.warning("training job %s failed: %s", job, exc)
            return exc

    workers = int(config["run"]["workers"])
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(attempt, jobs))
    else:
        results = [attempt(job) for job in jobs]
    return dict(zip(jobs, results))


def _stats(models: _SeedModels, clf: Classifier, model_seed: int, pool: Optional[PoolSpec], bench):
    key = (model_seed, "" if pool is None else pool.label)
    if key not in models.stats:
        models.stats[key] = fit_gaussian_stats(clf, bench.train, pool)
    return models.stats[key]


def _score_point(
    point: MethodPoint,
    seed: int,
    models: _SeedModels,
    config: Mapping[str, Any],
    bench: OodBenchmark,
    x: np.ndarray,
) -> tuple[Scores, dict[str, Any]]:
    p = point.param_dict
    details: dict[str, Any] = {}
    if point.method == "duq":
        return duq_scores(models.get(TrainingJob("duq", seed)), x), details
    if point.method in ("ensemble", "ensemble_mahalanobis"):
        member_seeds = _member_seeds(seed, p["size"])
        members = [models.get(TrainingJob("mlp", s)) for s in member_seeds]
        if point.method == "ensemble":
            return ensemble_score(members, x), details
        pool = _pool(p["pool"])
        stats = [_stats(models, m, s, pool, bench) for m, s in zip(members, member_seeds)]
        details["ridges"] = [s.ridge for s in stats]
        return ensemble_score(members, x, "mahalanobis", stats, p["consensus"]), details

    base = models.get(TrainingJob("mlp", seed))
    if point.method == "mcp":
        return mcp_score(base, x), details
    if point.method == "mcdp":
        rng = np.random.default_rng(_mcdp_seed(seed))
        return mcdp_score(base, x, p["n_passes"], rng), details
    if point.method == "mahalanobis":
        stats = _stats(models, base, seed, _pool(p["pool"]), bench)
        details["ridge"] = stats.ridge
        details["feature_dim"] = stats.feature_dim
        return mahalanobis_score(stats, base, x), details
    if point.method == "odin":
        return odin_score(base, x, p["epsilon"], p["tau_prime"]), details
    raise UsageError(f"unknown method {point.method!r}.")


def _eval_cell(
    point: MethodPoint,
    seed: int,
    models: _SeedModels,
    config: Mapping[str, Any],
    bench: OodBenchmark,
    fingerprint: str,
) -> CellResult:
    cell = CellResult(seed, point)
    x = np.vstack([bench.test_id.features, bench.test_ood])
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            scores, cell.details = _score_point(point, seed, models, config, bench, x)
        cell.notes = sorted({str(w.message) for w in caught} | set(scores.notes))
        cell.samples = scored_samples(scores, bench)
        cell.report, cell.bins = evaluate(
            cell.samples, config["evaluation"]["n_bins"], point.variant, fingerprint
        )
    except _CELL_ERRORS as exc:
        logger.warning("cell %s (seed %d) failed: %s", point.label, seed, exc)
        cell.error = {"type": type(exc).__name__, "message": str(exc)}
        cell.samples, cell.bins = [], None
    return cell


def run(config: Mapping[str, Any], benchmark: Optional[OodBenchmark] = None) -> RunReport:
    """Train the planned models and evaluate every method point for every seed.

    Args:
        config: Resolved config (see
            :func:`pyoodbench.bench_util.load_experiment_config`).
        benchmark: Use this benchmark instead of building one from the
            config.

    Returns:
        The run report.  Cells that raised are marked failed; nothing is
        written to disk (see :func:`write_run`).

    """
    started = time.perf_counter()
    fingerprint = config_fingerprint(config)
    bench = benchmark if benchmark is not None else build_benchmark(config)
    points = method_points(config)
    jobs = plan_jobs(config)
    logger.info("%d method points, %d training jobs", len(points), len(jobs))
    trained = _train_all(jobs, config, bench)

    cells = []
    for seed in config["run"]["seeds"]:
        models = _SeedModels(trained)
        for point in points:
            cells.append(_eval_cell(point, seed, models, config, bench, fingerprint))

    provenance = {
        "config_fingerprint": fingerprint,
        "pyoodbench_version": _package_version(),
        "orientation": ORIENTATION,
        "training_jobs": len(jobs),
        "benchmark": {
            "generator": bench.generator,
            "separation": bench.separation,
            "seed": bench.seed,
            "n_train": len(bench.train),
            "n_test_id": len(bench.test_id),
            "n_test_ood": len(bench.test_ood),
        },
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
    }
    report = RunReport(cells, _aggregate(cells, points), provenance)
    n_failed = sum(not c.ok for c in cells)
    if n_failed:
        logger.warning("%d of %d cells failed", n_failed, len(cells))
    return report


def _cell_stem(cell: CellResult) -> str:
    digest = config_fingerprint({"key": cell.point.key})[:8]
    return f"seed{cell.seed}_{cell.point.variant}_{digest}"


def write_run(
    report: RunReport,
    config: Mapping[str, Any],
    out_dir: Union[str, Path],
    formats: Sequence[str] = ("json", "md"),
) -> dict[str, Path]:
    """Write the run's outputs into *out_dir*.

    ``report.json`` (format ``json``), ``table.md`` (``md``) and
    ``aggregate.csv`` (``csv``) follow *formats*; ``resolved_config.toml``
    is always written.  With ``run.write_scores`` every successful cell
    also gets a scores CSV and a reliability-bin CSV under ``cells/``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    config_path = out / "resolved_config.toml"
    config_path.write_text(dumps_config(config), encoding="utf-8")
    written["config"] = config_path
    if "json" in formats:
        doc = envelope(
            "report",
            report.to_dict(),
            config_fingerprint=report.provenance["config_fingerprint"],
            orientation=ORIENTATION,
        )
        written["json"] = write_json(doc, out / "report.json")
    if "md" in formats:
        written["md"] = out / "table.md"
        written["md"].write_text(report.to_markdown(), encoding="utf-8")
    if "csv" in formats:
        written["csv"] = _write_rows_csv(
            report.aggregate, ("label", *_METRICS, "n_seeds"), out / "aggregate.csv"
        )
    if config["run"]["write_scores"]:
        for cell in report.cells:
            if cell.ok:
                write_scores_csv(cell.samples, out / "cells" / f"{_cell_stem(cell)}.scores.csv")
                write_bins_csv(cell.bins, out / "cells" / f"{_cell_stem(cell)}.bins.csv")
    logger.info("run outputs written to %s", out)
    return written


def _write_rows_csv(rows: Sequence[Mapping[str, Any]], columns: Sequence[str], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            cells = []
            for col in columns:
                value = row.get(col)
                if value is None:
                    cells.append("")
                elif isinstance(value, float):
                    cells.append(format_float(value))
                else:
                    cells.append(str(value))
            writer.writerow(cells)
    return path


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass
class TemperatureSweep:
    """Calibration of the baseline and ODIN across temperatures.

    Attributes:
        rows: One row per (seed, method, tau) with ``auroc``, ``ece`` and,
            when a validation split exists, ``validation_ece``.
        bins: Reliability bins keyed like the rows' ``key`` field.
        auroc_invariant: For two-class benchmarks, whether every method's
            AUROC agreed across temperatures to 1e-12 (``None`` otherwise).
            Advisory only: a saturated softmax can tie confidences at small
            temperatures, so a mismatch is logged and listed under
            ``provenance["auroc_variation"]`` rather than raised.
        suggested_tau: Temperature with the lowest mean validation ECE of
            the ODIN rows (``None`` without a validation split).  Reported
            only; nothing is auto-selected.

    """

    rows: list[dict[str, Any]]
    bins: dict[str, ReliabilityBins]
    auroc_invariant: Optional[bool]
    suggested_tau: Optional[float]
    provenance: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready payload."""
        return {
            "rows": self.rows,
            "auroc_invariant": self.auroc_invariant,
            "suggested_tau": self.suggested_tau,
            "provenance": self.provenance,
        }


def _calibration(scores: Scores, labels: np.ndarray, n_bins: int):
    return ece(scores.confidence, scores.predicted_class == labels, n_bins)


def scored_samples(scores: Scores, bench: OodBenchmark) -> list[ScoredSample]:
    """Split a scored ID+OOD stack into labeled ID samples followed by OOD samples."""
    n_id = len(bench.test_id)
    ids = Scores(scores.method, scores.id_score[:n_id], scores.predicted_class[:n_id],
                 scores.confidence[:n_id])
    ood = Scores(scores.method, scores.id_score[n_id:], scores.predicted_class[n_id:],
                 scores.confidence[n_id:])
    return ids.to_samples(False, bench.test_id.labels) + ood.to_samples(True, start_id=n_id)


def sweep_temperature(
    config: Mapping[str, Any],
    taus: Optional[Sequence[float]] = None,
    benchmark: Optional[OodBenchmark] = None,
    trainer: Callable[[Classifier, Any], Any] = train,
) -> TemperatureSweep:
    """ECE and reliability bins of MCP and ODIN for every temperature.

    The baseline at temperature ``tau`` is MCP of ``softmax(logits / tau)``;
    the ODIN rows perturb the inputs with ``sweeps.temperature.epsilon``
    before the same temperature-scaled softmax.  One classifier per run
    seed is trained and shared by all temperatures.
    """
    started = time.perf_counter()
    taus = [float(t) for t in (taus or config["sweeps"]["temperature"]["taus"])]
    if not taus or any(t <= 0.0 for t in taus):
        raise UsageError(f"temperatures must be positive, got {taus}.")
    epsilon = float(config["sweeps"]["temperature"]["epsilon"])
    n_bins = config["evaluation"]["n_bins"]
    bench = benchmark if benchmark is not None else build_benchmark(config)
    x = np.vstack([bench.test_id.features, bench.test_ood])
    n_id = len(bench.test_id)

    rows: list[dict[str, Any]] = []
    bins: dict[str, ReliabilityBins] = {}
    for seed in config["run"]["seeds"]:
        clf = trainer(Classifier.initialize(model_config(config, bench, seed)), bench.train).classifier
        for method, eps in (("baseline", 0.0), ("odin", epsilon)):
            for tau in taus:
                scores = odin_score(clf, x, eps, tau) if method == "odin" else mcp_score(clf, x, tau)
                value, tau_bins = _calibration(
                    Scores(scores.method, scores.id_score[:n_id], scores.predicted_class[:n_id],
                           scores.confidence[:n_id]),
                    bench.test_id.labels,
                    n_bins,
                )
                key = f"seed{seed}_{method}_tau{format_float(tau)}"
                row = {
                    "key": key,
                    "seed": seed,
                    "method": method,
                    "epsilon": eps,
                    "tau": tau,
                    "auroc": auroc(scored_samples(scores, bench)),
                    "ece": value,
                    "validation_ece": None,
                }
                if bench.validation is not None:
                    val = bench.validation
                    vs = (odin_score(clf, val.features, eps, tau) if method == "odin"
                          else mcp_score(clf, val.features, tau))
                    row["validation_ece"] = _calibration(vs, val.labels, n_bins)[0]
                rows.append(row)
                bins[key] = tau_bins

    invariant = None
    variation: list[dict[str, Any]] = []
    if bench.num_classes == 2:
        for seed in config["run"]["seeds"]:
            for method in ("baseline", "odin"):
                values = [r["auroc"] for r in rows if r["seed"] == seed and r["method"] == method]
                if max(values) - min(values) > 1e-12:
                    variation.append({"seed": seed, "method": method, "auroc": values})
                    logger.warning(
                        "AUROC of %s (seed %d) varies across temperatures: %s", method, seed, values
                    )
        invariant = not variation

    suggested = None
    if bench.validation is not None:
        mean_val = {
            tau: float(np.mean([r["validation_ece"] for r in rows
                                if r["method"] == "odin" and r["tau"] == tau]))
            for tau in taus
        }
        suggested = min(taus, key=lambda t: (mean_val[t], t))

    provenance = {
        "config_fingerprint": config_fingerprint(config),
        "pyoodbench_version": _package_version(),
        "orientation": ORIENTATION,
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
        "auroc_variation": variation,
    }
    return TemperatureSweep(rows, bins, invariant, suggested, provenance)


def write_temperature_sweep(sweep: TemperatureSweep, out_dir: Union[str, Path]) -> dict[str, Path]:
    """Write ``temperature.json``, ``temperature.csv`` and one bins CSV per row."""
    out = Path(out_dir)
    written = {
        "json": write_json(envelope("sweep", sweep.to_dict()), out / "temperature.json"),
        "csv": _write_rows_csv(
            sweep.rows,
            ("seed", "method", "epsilon", "tau", "auroc", "ece", "validation_ece"),
            out / "temperature.csv",
        ),
    }
    for key, bins in sweep.bins.items():
        write_bins_csv(bins, out / "bins" / f"{key}.csv")
    return written


@dataclass
class PoolingSweep:
    """Mahalanobis AUROC for each pooling window.

    Each row carries ``label``, ``pooled_shape``, ``feature_dim``, the mean
    ``auroc`` over seeds and a ``status`` of ``ok``, ``not applicable`` or
    ``failed``.  The first row is always the unpooled baseline.
    """

    rows: list[dict[str, Any]]
    provenance: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready payload."""
        return {"rows": self.rows, "provenance": self.provenance}

    def to_markdown(self) -> str:
        """Table with one row per pooling window."""
        rows = [
            {
                "label": r["label"],
                "shape": "-" if r["pooled_shape"] is None else "x".join(map(str, r["pooled_shape"])),
                "dim": "-" if r["feature_dim"] is None else str(r["feature_dim"]),
                "auroc": r["auroc"] if r["status"] == "ok" else r["status"],
            }
            for r in self.rows
        ]
        return render_markdown_table(
            rows, columns=(("shape", "Output"), ("dim", "Dim"), ("auroc", "AUROC")),
            label_header="Pooling",
        )


def sweep_pooling(
    config: Mapping[str, Any],
    pool_specs: Optional[Sequence[Sequence[int]]] = None,
    benchmark: Optional[OodBenchmark] = None,
    trainer: Callable[[Classifier, Any], Any] = train,
) -> PoolingSweep:
    """Mahalanobis ablation over strided max-pooling windows.

    Every spec is ``[kh, kw, stride]``.  Without ``model.feature_shape`` the
    features have no spatial layout and every pooled row is marked
    ``not applicable``.
    """
    started = time.perf_counter()
    specs = [list(s) for s in (pool_specs or config["sweeps"]["pooling"]["specs"])]
    bench = benchmark if benchmark is not None else build_benchmark(config)
    x = np.vstack([bench.test_id.features, bench.test_ood])
    seeds = config["run"]["seeds"]
    models = [
        trainer(Classifier.initialize(model_config(config, bench, s)), bench.train).classifier
        for s in seeds
    ]
    shape = models[0].config.feature_shape

    rows = []
    for spec in [None, *specs]:
        pool = None if spec is None else PoolSpec((spec[0], spec[1]), spec[2])
        row: dict[str, Any] = {
            "label": "none" if pool is None else pool.label,
            "pool": spec,
            "pooled_shape": None if shape is None else list(shape),
            "feature_dim": models[0].config.feature_dim,
            "auroc": None,
            "status": "ok",
            "error": None,
        }
        if pool is not None and shape is None:
            row.update(status="not applicable", pooled_shape=None, feature_dim=None)
            rows.append(row)
            continue
        try:
            if pool is not None:
                out_shape = pooled_shape(shape, pool)
                row["pooled_shape"] = list(out_shape)
                row["feature_dim"] = int(np.prod(out_shape))
            values = []
            for clf in models:
                stats = fit_gaussian_stats(clf, bench.train, pool)
                values.append(auroc(scored_samples(mahalanobis_score(stats, clf, x), bench)))
            row["auroc"] = math.fsum(values) / len(values)
        except _CELL_ERRORS as exc:
            logger.warning("pooling row %s failed: %s", row["label"], exc)
            row.update(status="failed", error={"type": type(exc).__name__, "message": str(exc)})
        rows.append(row)

    provenance = {
        "config_fingerprint": config_fingerprint(config),
        "pyoodbench_version": _package_version(),
        "orientation": ORIENTATION,
        "feature_shape": None if shape is None else list(shape),
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
    }
    return PoolingSweep(rows, provenance)


def write_pooling_sweep(sweep: PoolingSweep, out_dir: Union[str, Path]) -> dict[str, Path]:
    """Write ``pooling.json`` and ``pooling.md``."""
    out = Path(out_dir)
    md = out / "pooling.md"
    written = {"json": write_json(envelope("sweep", sweep.to_dict()), out / "pooling.json")}
    md.write_text(sweep.to_markdown(), encoding="utf-8")
    written["md"] = md
    return written
