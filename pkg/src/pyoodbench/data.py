"""Seeded synthetic benchmarks and tabular (CSV) ingestion.

Two generators give the harness controllable ID/OOD geometry:

* :func:`gen_gaussian_benchmark`: isotropic Gaussian classes plus one OOD
  cluster at a chosen distance from an ID class.  A large shift gives a
  well separated ("far") benchmark, a small one an overlapping benchmark.
* :func:`gen_moons_benchmark`: two interleaved half-moons with OOD points
  on a ring around them.

Both are pure functions of their arguments; the same seed always gives a
bit-identical :class:`OodBenchmark`.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np

from pyoodbench.bench_util import format_float
from pyoodbench.errors import DomainError, ParameterError, ParseError, ShapeError, UsageError
from pyoodbench.export import envelope, read_envelope, write_json

__all__ = [
    "Normalization",
    "LabeledSet",
    "OodBenchmark",
    "CsvSchema",
    "gen_gaussian_benchmark",
    "gen_moons_benchmark",
    "split_validation",
    "ingest_csv",
    "export_csv",
    "write_benchmark",
    "load_benchmark",
]

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_MIN_CENTER_GAP = 6.0  # in units of spread
_MOONS_CENTER = np.array([0.5, 0.25])
_MOONS_EXTENT = 1.6  # radius around the moons' centre that covers both arcs


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Normalization:
    """Per-feature z-score statistics fitted on training data."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> Normalization:
        """Population mean and standard deviation; constant columns get ``std = 1``."""
        features = np.asarray(features, dtype=np.float64)
        std = features.std(axis=0)
        return cls(features.mean(axis=0), np.where(std > 0.0, std, 1.0))

    def apply(self, features: np.ndarray) -> np.ndarray:
        """``(x - mean) / std``."""
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.mean.shape[0]:
            raise ShapeError(
                f"normalization fitted on {self.mean.shape[0]} features, got {features.shape[-1]}."
            )
        return (features - self.mean) / self.std

    def to_dict(self) -> dict[str, list[float]]:
        """JSON-friendly representation."""
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


@dataclass
class LabeledSet:
    """Features with integer class labels.

    Attributes:
        features: ``(N, D)`` float64 matrix without NaN/Inf.
        labels: ``(N,)`` integer labels in ``[0, C)``.
        normalization: Statistics already applied to ``features``, if any.

    """

    features: np.ndarray
    labels: np.ndarray
    normalization: Optional[Normalization] = None

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be (N, D), got {self.features.shape}.")
        if self.labels.shape != (len(self.features),):
            raise ShapeError(
                f"{len(self.labels)} labels for {len(self.features)} feature rows."
            )
        if not np.all(np.isfinite(self.features)):
            raise DomainError("features contain NaN or Inf.")
        if self.labels.size and self.labels.min() < 0:
            raise DomainError("labels must be non-negative class indices.")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        """Feature dimension ``D``."""
        return self.features.shape[1]

    def subset(self, index: np.ndarray) -> LabeledSet:
        """Rows selected by *index* (copied)."""
        return LabeledSet(self.features[index].copy(), self.labels[index].copy(), self.normalization)


@dataclass
class OodBenchmark:
    """Training data, an ID test set and an unlabeled OOD test set.

    Attributes:
        train: Training set.
        test_id: Labeled ID test set.
        test_ood: ``(N_ood, D)`` OOD inputs; never labeled.
        separation: ``"far"`` or ``"overlapping"``.
        seed: Generator seed.
        generator: Name of the generating function (``"csv"`` for ingested data).
        params: Every generator argument, for the manifest.
        num_classes: Number of ID classes.
        validation: Optional hold-out split of the training data.
        geometry: Generator-specific description (centers, OOD center, ...).

    """

    train: LabeledSet
    test_id: LabeledSet
    test_ood: np.ndarray
    separation: str
    seed: int
    generator: str
    params: dict[str, Any]
    num_classes: int
    validation: Optional[LabeledSet] = None
    geometry: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.test_ood = np.asarray(self.test_ood, dtype=np.float64)
        d = self.train.input_dim
        parts = [("test_id", self.test_id.input_dim), ("test_ood", self.test_ood.shape[-1])]
        if self.validation is not None:
            parts.append(("validation", self.validation.input_dim))
        for name, dim in parts:
            if dim != d:
                raise ShapeError(f"{name} has {dim} features but train has {d}.")
        if self.test_ood.ndim != 2 or not np.all(np.isfinite(self.test_ood)):
            raise DomainError("test_ood must be a finite (N, D) matrix.")
        if self.separation not in ("far", "overlapping"):
            raise UsageError(f"separation must be 'far' or 'overlapping', got {self.separation!r}.")

    @property
    def input_dim(self) -> int:
        """Feature dimension ``D``."""
        return self.train.input_dim

    def normalized(self) -> OodBenchmark:
        """Z-score every part with statistics fitted on the training set only."""
        norm = Normalization.fit(self.train.features)

        def scale(part: Optional[LabeledSet]) -> Optional[LabeledSet]:
            if part is None:
                return None
            return LabeledSet(norm.apply(part.features), part.labels.copy(), norm)

        return replace(
            self,
            train=scale(self.train),
            test_id=scale(self.test_id),
            test_ood=norm.apply(self.test_ood),
            validation=scale(self.validation),
        )


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def _check_counts(**counts: int) -> None:
    for name, value in counts.items():
        if value < 1:
            raise UsageError(f"{name} must be at least 1, got {value}.")


def _draw_centers(rng: np.random.Generator, num_classes: int, d: int, spread: float) -> np.ndarray:
    """Class centers at least ``_MIN_CENTER_GAP * spread`` apart (best of 1000 draws)."""
    scale = max(spread, 1e-12) * _MIN_CENTER_GAP
    best, best_gap = None, -1.0
    for _ in range(1000):
        centers = rng.normal(0.0, scale, size=(num_classes, d))
        gaps = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
        gap = gaps[np.triu_indices(num_classes, 1)].min()
        if gap > best_gap:
            best, best_gap = centers, gap
        if gap >= _MIN_CENTER_GAP * spread:
            break
    return best


def _ood_center(
    rng: np.random.Generator, centers: np.ndarray, shift: float
) -> tuple[np.ndarray, int]:
    """A point at distance *shift* from center ``k`` with ``k`` still the nearest center."""
    k = int(rng.integers(len(centers)))
    outward = centers[k] - centers.mean(axis=0)
    candidates = [outward] + [rng.normal(size=centers.shape[1]) for _ in range(256)]
    for direction in candidates:
        norm = np.linalg.norm(direction)
        if norm == 0.0:
            continue
        point = centers[k] + shift * direction / norm
        if np.argmin(np.linalg.norm(centers - point, axis=1)) == k:
            return point, k
    logger.warning("no direction keeps class %d nearest to the OOD center; using outward", k)
    return centers[k] + shift * outward / (np.linalg.norm(outward) or 1.0), k


def _finish(
    bm: OodBenchmark,
    normalize: bool,
    validation_fraction: float,
) -> OodBenchmark:
    if validation_fraction > 0.0:
        train, validation = split_validation(bm.train, validation_fraction, bm.seed)
        bm = replace(bm, train=train, validation=validation)
    return bm.normalized() if normalize else bm


def gen_gaussian_benchmark(
    d: int = 2,
    num_classes: int = 2,
    n_per_class: int = 500,
    ood_shift: float = 10.0,
    spread: float = 1.0,
    seed: int = 0,
    *,
    n_test_per_class: int = 200,
    n_ood: int = 400,
    normalize: bool = False,
    validation_fraction: float = 0.0,
) -> OodBenchmark:
    """Gaussian ID classes and one Gaussian OOD cluster.

    Class centers are drawn at random (at least six spreads apart when a
    draw allows it); the OOD center sits at distance *ood_shift* from a
    randomly chosen class center, which stays its nearest ID center.  All
    clusters share the isotropic standard deviation *spread*.
    ``ood_shift > 4 * spread`` is labelled ``"far"``, anything closer
    ``"overlapping"``.

    Args:
        d: Feature dimension.
        num_classes: Number of ID classes (at least 2).
        n_per_class: Training samples per class.
        ood_shift: Distance of the OOD center from its nearest ID center.
        spread: Standard deviation of every cluster.
        seed: Seed; same arguments give bit-identical output.
        n_test_per_class: ID test samples per class.
        n_ood: OOD test samples.
        normalize: Z-score all parts with training statistics.
        validation_fraction: Stratified share of the training set held
            out as ``validation``.

    Raises:
        UsageError: If a count is below 1.
        ParameterError: If *ood_shift* is negative or *spread* not positive.

    """
    _check_counts(d=d, n_per_class=n_per_class, n_test_per_class=n_test_per_class, n_ood=n_ood)
    if num_classes < 2:
        raise UsageError(f"num_classes must be at least 2, got {num_classes}.")
    if ood_shift < 0.0:
        raise ParameterError(f"ood_shift must be >= 0, got {ood_shift}.")
    if not spread > 0.0:
        raise ParameterError(f"spread must be positive, got {spread}.")

    rng = np.random.default_rng(seed)
    centers = _draw_centers(rng, num_classes, d, spread)
    ood_center, anchor = _ood_center(rng, centers, ood_shift)

    def sample(n: int) -> LabeledSet:
        feats = np.concatenate([rng.normal(c, spread, size=(n, d)) for c in centers])
        return LabeledSet(feats, np.repeat(np.arange(num_classes), n))

    train = sample(n_per_class)
    test_id = sample(n_test_per_class)
    test_ood = rng.normal(ood_center, spread, size=(n_ood, d))

    params = {
        "d": d,
        "num_classes": num_classes,
        "n_per_class": n_per_class,
        "ood_shift": ood_shift,
        "spread": spread,
        "seed": seed,
        "n_test_per_class": n_test_per_class,
        "n_ood": n_ood,
        "normalize": normalize,
        "validation_fraction": validation_fraction,
    }
    bm = OodBenchmark(
        train=train,
        test_id=test_id,
        test_ood=test_ood,
        separation="far" if ood_shift > 4.0 * spread else "overlapping",
        seed=seed,
        generator="gaussian",
        params=params,
        num_classes=num_classes,
        geometry={
            "centers": centers.tolist(),
            "ood_center": ood_center.tolist(),
            "ood_anchor_class": anchor,
        },
    )
    return _finish(bm, normalize, validation_fraction)


def _moons(rng: np.random.Generator, n: int, noise: float) -> LabeledSet:
    t0 = rng.uniform(0.0, np.pi, n)
    t1 = rng.uniform(0.0, np.pi, n)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    feats = np.concatenate([upper, lower])
    if noise > 0.0:
        feats = feats + rng.normal(0.0, noise, size=feats.shape)
    return LabeledSet(feats, np.repeat([0, 1], n))


def gen_moons_benchmark(
    n_per_class: int = 500,
    noise: float = 0.1,
    ood_ring_radius: float = 3.0,
    seed: int = 0,
    *,
    n_test_per_class: int = 200,
    n_ood: int = 400,
    normalize: bool = False,
    validation_fraction: float = 0.0,
) -> OodBenchmark:
    """Two interleaved half-moons with OOD samples on a surrounding ring.

    Class 0 lies on ``(cos t, sin t)`` and class 1 on
    ``(1 - cos t, 0.5 - sin t)`` for ``t`` in ``[0, pi]``; Gaussian *noise*
    is added to both.  OOD points lie on a circle of radius
    *ood_ring_radius* around ``(0.5, 0.25)``, radially jittered by the
    same noise.  With ``noise=0`` every ID point lies exactly on its curve.

    Raises:
        UsageError: If *noise* is negative or a count is below 1.
        ParameterError: If *ood_ring_radius* is negative.

    """
    _check_counts(n_per_class=n_per_class, n_test_per_class=n_test_per_class, n_ood=n_ood)
    if noise < 0.0:
        raise UsageError(f"noise must be >= 0, got {noise}.")
    if ood_ring_radius < 0.0:
        raise ParameterError(f"ood_ring_radius must be >= 0, got {ood_ring_radius}.")

    rng = np.random.default_rng(seed)
    train = _moons(rng, n_per_class, noise)
    test_id = _moons(rng, n_test_per_class, noise)
    angle = rng.uniform(0.0, 2.0 * np.pi, n_ood)
    radius = ood_ring_radius + (rng.normal(0.0, noise, n_ood) if noise > 0.0 else 0.0)
    test_ood = _MOONS_CENTER + np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])

    params = {
        "n_per_class": n_per_class,
        "noise": noise,
        "ood_ring_radius": ood_ring_radius,
        "seed": seed,
        "n_test_per_class": n_test_per_class,
        "n_ood": n_ood,
        "normalize": normalize,
        "validation_fraction": validation_fraction,
    }
    far = ood_ring_radius > _MOONS_EXTENT + 4.0 * noise
    bm = OodBenchmark(
        train=train,
        test_id=test_id,
        test_ood=test_ood,
        separation="far" if far else "overlapping",
        seed=seed,
        generator="moons",
        params=params,
        num_classes=2,
        geometry={"ring_center": _MOONS_CENTER.tolist(), "ring_radius": ood_ring_radius},
    )
    return _finish(bm, normalize, validation_fraction)


def split_validation(
    labeled: LabeledSet, fraction: float, seed: int
) -> tuple[LabeledSet, LabeledSet]:
    """Stratified hold-out split.

    Each class gives ``round(fraction * n_c)`` samples to the validation
    set, capped so that at least one stays in training.  Row order within
    both parts follows the original order.

    Raises:
        ParameterError: If *fraction* is outside ``(0, 1)``.

    """
    if not 0.0 < fraction < 1.0:
        raise ParameterError(f"validation fraction must lie in (0, 1), got {fraction}.")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    held = np.zeros(len(labeled), dtype=bool)
    for c in np.unique(labeled.labels):
        members = np.flatnonzero(labeled.labels == c)
        n_val = min(int(round(fraction * len(members))), len(members) - 1)
        held[rng.permutation(members)[:n_val]] = True
    return labeled.subset(~held), labeled.subset(held)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    """Column layout of a feature CSV.

    Attributes:
        feature_columns: Feature column names in order; empty means "every
            column except the label column".
        label_column: Name of the integer label column.
        require_labels: Whether the label column must be present.  Without
            labels, :func:`ingest_csv` returns a bare feature matrix.

    """

    feature_columns: tuple[str, ...] = ()
    label_column: str = "label"
    require_labels: bool = True


def _parse_cell(text: str, column: str, row: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"column '{column}' is not numeric: '{text}'.", row) from None
    if not math.isfinite(value):
        raise ParseError(f"column '{column}' is not finite: '{text}'.", row)
    return value


def ingest_csv(
    path: PathLike,
    schema: CsvSchema = CsvSchema(),
    normalization: Optional[Normalization] = None,
) -> Union[LabeledSet, np.ndarray]:
    """Read a feature CSV with a header row.

    Args:
        path: CSV file.
        schema: Expected columns.
        normalization: Training statistics to apply (fit them on the
            training file with :meth:`Normalization.fit`).

    Returns:
        A :class:`LabeledSet` when the label column is present and
        required, otherwise the ``(N, D)`` feature matrix.

    Raises:
        ParseError: On unknown or missing columns, ragged rows, non-numeric
            or non-finite cells, or bad labels; the error names the row.

    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise ParseError(f"{path} has no header row.", 1)
        has_label = schema.label_column in header
        if schema.require_labels and not has_label:
            raise ParseError(f"missing label column '{schema.label_column}'.", 1)
        if schema.feature_columns:
            expected = set(schema.feature_columns) | {schema.label_column}
            unknown = [c for c in header if c not in expected]
            if unknown:
                raise ParseError(f"unknown columns {unknown}.", 1)
            missing = [c for c in schema.feature_columns if c not in header]
            if missing:
                raise ParseError(f"missing feature columns {missing}.", 1)
            feature_cols = list(schema.feature_columns)
        else:
            feature_cols = [c for c in header if c != schema.label_column]
        if not feature_cols:
            raise ParseError("no feature columns.", 1)
        positions = [header.index(c) for c in feature_cols]
        label_pos = header.index(schema.label_column) if has_label else None

        rows, labels = [], []
        for row_no, cells in enumerate(reader, start=2):
            if len(cells) != len(header):
                raise ParseError(f"expected {len(header)} cells, got {len(cells)}.", row_no)
            rows.append([_parse_cell(cells[p], feature_cols[i], row_no) for i, p in enumerate(positions)])
            if label_pos is not None:
                text = cells[label_pos]
                try:
                    label = int(text)
                except ValueError:
                    raise ParseError(
                        f"label '{text}' in column '{schema.label_column}' is not an integer.",
                        row_no,
                    ) from None
                if label < 0:
                    raise ParseError(f"label {label} is negative.", row_no)
                labels.append(label)

    feats = np.array(rows, dtype=np.float64).reshape(len(rows), len(feature_cols))
    if normalization is not None:
        feats = normalization.apply(feats)
    if label_pos is None or not schema.require_labels:
        return feats
    return LabeledSet(feats, np.array(labels, dtype=np.int64), normalization)


def export_csv(
    data: Union[LabeledSet, np.ndarray],
    path: PathLike,
    schema: Optional[CsvSchema] = None,
) -> Path:
    """Write features (and labels for a :class:`LabeledSet`) with 17 significant digits.

    Feature columns default to ``x0, x1, ...``.
    """
    feats = data.features if isinstance(data, LabeledSet) else np.asarray(data, dtype=np.float64)
    labels = data.labels if isinstance(data, LabeledSet) else None
    schema = schema or CsvSchema()
    names: Sequence[str] = schema.feature_columns or [f"x{i}" for i in range(feats.shape[1])]
    if len(names) != feats.shape[1]:
        raise ShapeError(f"{len(names)} column names for {feats.shape[1]} features.")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*names, schema.label_column] if labels is not None else list(names))
        for i, row in enumerate(feats):
            cells = [format_float(v) for v in row]
            if labels is not None:
                cells.append(str(int(labels[i])))
            writer.writerow(cells)
    return path


def write_benchmark(benchmark: OodBenchmark, out_dir: PathLike) -> Path:
    """Write ``train.csv``, ``test_id.csv``, ``test_ood.csv`` (and ``validation.csv``) plus a manifest.

    Returns:
        Path of ``manifest.json``, which records the generator name, every
        argument, the seed, the geometry and the file names.

    """
    out = Path(out_dir)
    files = {
        "train": export_csv(benchmark.train, out / "train.csv").name,
        "test_id": export_csv(benchmark.test_id, out / "test_id.csv").name,
        "test_ood": export_csv(benchmark.test_ood, out / "test_ood.csv").name,
    }
    if benchmark.validation is not None:
        files["validation"] = export_csv(benchmark.validation, out / "validation.csv").name
    manifest = {
        "generator": benchmark.generator,
        "arguments": benchmark.params,
        "seed": benchmark.seed,
        "separation": benchmark.separation,
        "num_classes": benchmark.num_classes,
        "input_dim": benchmark.input_dim,
        "geometry": benchmark.geometry,
        "files": files,
    }
    if benchmark.train.normalization is not None:
        manifest["normalization"] = benchmark.train.normalization.to_dict()
    path = write_json(envelope("benchmark", manifest), out / "manifest.json")
    logger.info("benchmark written to %s", out)
    return path


def load_benchmark(
    manifest_or_paths: Union[PathLike, dict[str, PathLike]],
    label_column: str = "label",
    normalize: bool = False,
) -> OodBenchmark:
    """Load a benchmark from a ``manifest.json`` or from explicit CSV paths.

    Args:
        manifest_or_paths: A manifest written by :func:`write_benchmark`,
            or a mapping with ``train``, ``test_id`` and ``test_ood`` (and
            optionally ``validation``) CSV paths.
        label_column: Label column name in the ID files.
        normalize: Fit z-scoring on the training file and apply it to
            every part.

    """
    schema = CsvSchema(label_column=label_column)
    if isinstance(manifest_or_paths, dict):
        paths = {k: Path(v) for k, v in manifest_or_paths.items()}
        meta: dict[str, Any] = {"generator": "csv", "arguments": {}, "seed": 0}
    else:
        manifest_path = Path(manifest_or_paths)
        _, meta = read_envelope(manifest_path, "benchmark")
        paths = {k: manifest_path.parent / v for k, v in meta["files"].items()}
    for key in ("train", "test_id", "test_ood"):
        if key not in paths:
            raise UsageError(f"benchmark needs a '{key}' CSV.")

    train = ingest_csv(paths["train"], schema)
    test_id = ingest_csv(paths["test_id"], schema)
    test_ood = ingest_csv(paths["test_ood"], CsvSchema(label_column=label_column, require_labels=False))
    validation = ingest_csv(paths["validation"], schema) if "validation" in paths else None
    num_classes = int(meta.get("num_classes", train.labels.max() + 1))
    if len(np.unique(train.labels)) < 2:
        raise UsageError("the training CSV must contain at least two classes.")
    bm = OodBenchmark(
        train=train,
        test_id=test_id,
        test_ood=test_ood,
        separation=meta.get("separation", "overlapping"),
        seed=int(meta.get("seed", 0)),
        generator=meta["generator"],
        params=dict(meta.get("arguments", {})),
        num_classes=num_classes,
        validation=validation,
        geometry=dict(meta.get("geometry", {})),
    )
    return bm.normalized() if normalize else bm
