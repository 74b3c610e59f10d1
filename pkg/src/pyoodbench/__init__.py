"""pyoodbench: a desk-scale test-bed for confidence-based OOD detection.

The package trains small MLP classifiers with a from-scratch reverse-mode
autodiff engine, scores in-distribution and out-of-distribution inputs
with six detectors (MCP, Mahalanobis, ODIN, MC dropout, deep ensembles
and DUQ) and reports AUROC, AUCPR, ID accuracy and ECE.  Experiments are
declared in TOML.

Typical usage::

    from pyoodbench import load_experiment_config, run

    config = load_experiment_config("overlapping", overrides={"run": {"seeds": [0]}})
    report = run(config)
    print(report.to_markdown())

To also write the JSON report, Markdown table and resolved config in one
call, use :func:`run_and_write`.
"""

from __future__ import annotations

from importlib.metadata import PackageNotFoundError
from importlib.metadata import metadata as _metadata
from pathlib import Path
from typing import Any, Optional, Union

from pyoodbench.bench_util import _package_version, load_experiment_config
from pyoodbench.data import gen_gaussian_benchmark, gen_moons_benchmark, ingest_csv
from pyoodbench.harness import RunReport, run, sweep_pooling, sweep_temperature, write_run
from pyoodbench.metrics import aucpr, auroc, ece, evaluate, id_accuracy

# Version goes through the shared helper so the reports' _meta block and
# __version__ here can never drift.
__version__ = _package_version()
try:
    __author__ = _metadata("pyoodbench").get("Author", "")
except PackageNotFoundError:
    __author__ = ""


def run_and_write(
    preset: str = "default",
    config_path: Union[str, Path, None] = None,
    out_dir: Union[str, Path, None] = None,
    **overrides: Any,
) -> tuple[RunReport, dict[str, Path]]:
    """Load a config, run it and write its outputs in one call.

    Args:
        preset: Bundled preset used as the base (``"default"``, ``"far"``,
            ``"overlapping"``).
        config_path: Optional user TOML file merged on top.
        out_dir: Output directory; defaults to ``run.output_dir``.
        **overrides: Section tables merged last, e.g.
            ``run={"seeds": [0]}``.

    Returns:
        ``(report, written)`` where *written* maps output kinds (``json``,
        ``md``, ``config``) to file paths.

    Example:
        >>> report, files = run_and_write("far", run={"seeds": [0]})  # doctest: +SKIP
        >>> files["md"].name  # doctest: +SKIP
        'table.md'

    """
    config = load_experiment_config(preset, config_path, overrides or None)
    report = run(config)
    target: Optional[Union[str, Path]] = out_dir or config["run"]["output_dir"]
    return report, write_run(report, config, target)


__all__ = [
    "load_experiment_config",
    "run",
    "run_and_write",
    "write_run",
    "sweep_temperature",
    "sweep_pooling",
    "gen_gaussian_benchmark",
    "gen_moons_benchmark",
    "ingest_csv",
    "auroc",
    "aucpr",
    "ece",
    "id_accuracy",
    "evaluate",
]
