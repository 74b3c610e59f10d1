"""Writers and readers for reports, scores and calibration bins.

JSON documents that describe a run (run reports, benchmark manifests) are
wrapped in an envelope whose ``_meta`` block records the pyoodbench
version and export time::

    {
      "_meta": {
        "pyoodbench_version": "0.1.0",
        "exported_at": "2026-01-01T12:00:00+00:00",
        ...
      },
      "report": {...}
    }

An :class:`~pyoodbench.metrics.EvalReport` on its own is written as a plain
JSON object with exactly its fields.  CSV files print every float with 17
significant digits, so reading them back reproduces the values bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

from pyoodbench.bench_util import _package_version, format_float
from pyoodbench.errors import ParseError
from pyoodbench.metrics import EvalReport, ReliabilityBins
from pyoodbench.scores import ScoredSample

__all__ = [
    "SCORES_HEADER",
    "BINS_HEADER",
    "envelope",
    "dumps_json",
    "write_json",
    "read_envelope",
    "write_scores_csv",
    "read_scores_csv",
    "write_bins_csv",
    "dumps_eval_report",
    "write_eval_report",
    "read_eval_report",
    "render_markdown_table",
]

SCORES_HEADER = ("sample_id", "method", "id_score", "is_ood", "predicted_class", "true_class")
BINS_HEADER = ("bin_lower", "bin_upper", "mean_conf", "accuracy", "count")

PathLike = Union[str, Path]


class _DataJSONEncoder(json.JSONEncoder):
    """Tolerant JSON encoder for report data.

    Falls back to ``.item()`` for numpy scalars, ``.tolist()`` for arrays
    and ``str()`` for :class:`pathlib.Path`.
    """

    def default(self, obj: Any) -> Any:
        if isinstance(obj, Path):
            return str(obj)
        tolist = getattr(obj, "tolist", None)
        if callable(tolist):
            return tolist()
        item = getattr(obj, "item", None)
        if callable(item):
            try:
                return item()
            except (TypeError, ValueError):
                pass
        return super().default(obj)


def envelope(key: str, payload: Any, **meta: Any) -> dict[str, Any]:
    """Wrap *payload* under *key* next to a ``_meta`` block.

    ``exported_at`` is the only field that changes between identical runs.
    """
    return {
        "_meta": {
            "pyoodbench_version": _package_version(),
            "exported_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            **meta,
        },
        key: payload,
    }


def dumps_json(obj: Any) -> str:
    """Deterministic JSON: sorted keys, two-space indent, no NaN literals."""
    return json.dumps(
        obj, indent=2, sort_keys=True, ensure_ascii=False, allow_nan=False, cls=_DataJSONEncoder
    )


def write_json(obj: Any, path: PathLike) -> Path:
    """Write :func:`dumps_json` output (plus a trailing newline) to *path*."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(obj) + "\n", encoding="utf-8")
    return path


def read_envelope(path: PathLike, key: str) -> tuple[dict[str, Any], Any]:
    """Read an enveloped JSON file; returns ``(meta, payload)``.

    Raises:
        ParseError: If the file is not valid JSON or lacks ``_meta``/*key*.

    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path} is not valid JSON: {exc}", exc.lineno) from exc
    if not isinstance(doc, dict) or "_meta" not in doc or key not in doc:
        raise ParseError(f"{path} has no '_meta' block and '{key}' entry.")
    return doc["_meta"], doc[key]


# ---------------------------------------------------------------------------
# Scores CSV
# ---------------------------------------------------------------------------


def write_scores_csv(samples: Iterable[ScoredSample], path: PathLike) -> Path:
    """Write scored samples; a trailing ``confidence`` column follows the standard header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*SCORES_HEADER, "confidence"])
        for s in samples:
            writer.writerow(
                [
                    s.sample_id,
                    s.method,
                    format_float(s.id_score),
                    "true" if s.is_ood else "false",
                    s.predicted_class,
                    "" if s.true_class is None else s.true_class,
                    "" if math.isnan(s.confidence) else format_float(s.confidence),
                ]
            )
    return path


def _parse_bool(text: str, row: int) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1"):
        return True
    if lowered in ("false", "0"):
        return False
    raise ParseError(f"is_ood must be true/false, got '{text}'.", row)


def _parse_int(text: str, column: str, row: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"column '{column}' must be an integer, got '{text}'.", row) from None


def _parse_float(text: str, column: str, row: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"column '{column}' must be numeric, got '{text}'.", row) from None
    if not math.isfinite(value):
        raise ParseError(f"column '{column}' must be finite, got '{text}'.", row)
    return value


def read_scores_csv(path: PathLike) -> list[ScoredSample]:
    """Read a scores CSV written by :func:`write_scores_csv` (or without ``confidence``).

    Without a ``confidence`` column the ``id_score`` is used as confidence
    when it lies in ``[0, 1]``.

    Raises:
        ParseError: On a wrong header, ragged rows or malformed cells; the
            error carries the 1-based row number.

    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path} is empty.", 1)
        has_conf = tuple(header) == (*SCORES_HEADER, "confidence")
        if tuple(header) != SCORES_HEADER and not has_conf:
            raise ParseError(
                f"expected header {','.join(SCORES_HEADER)}[,confidence], got {','.join(header)}.",
                1,
            )
        samples = []
        for row_no, cells in enumerate(reader, start=2):
            if len(cells) != len(header):
                raise ParseError(f"expected {len(header)} cells, got {len(cells)}.", row_no)
            id_score = _parse_float(cells[2], "id_score", row_no)
            if has_conf and cells[6] != "":
                confidence = _parse_float(cells[6], "confidence", row_no)
            else:
                confidence = id_score if 0.0 <= id_score <= 1.0 else float("nan")
            samples.append(
                ScoredSample(
                    sample_id=_parse_int(cells[0], "sample_id", row_no),
                    method=cells[1],
                    id_score=id_score,
                    is_ood=_parse_bool(cells[3], row_no),
                    predicted_class=_parse_int(cells[4], "predicted_class", row_no),
                    true_class=None if cells[5] == "" else _parse_int(cells[5], "true_class", row_no),
                    confidence=confidence,
                )
            )
    return samples


# ---------------------------------------------------------------------------
# Calibration bins and eval reports
# ---------------------------------------------------------------------------


def write_bins_csv(bins: ReliabilityBins, path: PathLike) -> Path:
    """Write reliability bins for external plotting; empty bins leave the means blank."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BINS_HEADER)
        for row in bins.to_rows():
            writer.writerow(
                [
                    format_float(row["bin_lower"]),
                    format_float(row["bin_upper"]),
                    "" if row["mean_conf"] is None else format_float(row["mean_conf"]),
                    "" if row["accuracy"] is None else format_float(row["accuracy"]),
                    row["count"],
                ]
            )
    return path


def dumps_eval_report(report: EvalReport) -> str:
    """JSON object with exactly the :class:`EvalReport` fields."""
    return dumps_json(report.to_dict())


def write_eval_report(report: EvalReport, path: PathLike) -> Path:
    """Write :func:`dumps_eval_report` output to *path*."""
    return write_json(report.to_dict(), path)


def read_eval_report(path: PathLike) -> EvalReport:
    """Read a file written by :func:`write_eval_report`."""
    try:
        return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (json.JSONDecodeError, TypeError) as exc:
        raise ParseError(f"{path} is not an EvalReport JSON object: {exc}") from exc


# ---------------------------------------------------------------------------
# Markdown
# ---------------------------------------------------------------------------


def _cell(value: Optional[float]) -> str:
    return "failed" if value is None else f"{value:.3f}"


def render_markdown_table(
    rows: Sequence[Mapping[str, Any]],
    columns: Sequence[tuple[str, str]] = (
        ("auroc", "AUROC"),
        ("aucpr", "AUCPR"),
        ("id_accuracy", "ID Acc"),
        ("ece", "ECE"),
    ),
    label_header: str = "Method",
) -> str:
    """Render rows (``label`` plus metric keys) as a GitHub-flavoured Markdown table.

    Missing or ``None`` metric values are shown as ``failed``.
    """
    head = [label_header, *(title for _, title in columns)]
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join("---" for _ in head) + "|"]
    for row in rows:
        cells = [str(row["label"])]
        for key, _ in columns:
            value = row.get(key)
            cells.append(value if isinstance(value, str) else _cell(value))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
