"""Command-line interface: ``pyoodbench <subcommand> [options]``.

Subcommands::
    gen         write benchmark CSVs and a manifest
    train       train one classifier (or DUQ model) and save a checkpoint
    score       score the test sets with one method and write a scores CSV
    eval        turn a scores CSV into an EvalReport
    bench       run the full configured comparison
    sweep-temp  calibration across softmax temperatures
    sweep-pool  Mahalanobis ablation over pooling windows

Exit codes: 0 success, 1 a failed cell or runtime error, 2 a config,
parse or usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from pyoodbench import harness
from pyoodbench.bench_util import BUILTIN_PRESETS, _package_version, load_experiment_config
from pyoodbench.data import load_benchmark, write_benchmark
from pyoodbench.errors import (
    ConfigError,
    OodBenchError,
    ParseError,
    ShapeError,
    UsageError,
)
from pyoodbench.export import (
    dumps_eval_report,
    read_scores_csv,
    render_markdown_table,
    write_bins_csv,
    write_eval_report,
    write_scores_csv,
)
from pyoodbench.metrics import evaluate
from pyoodbench.nn import (
    Classifier,
    DuqModel,
    duq_train,
    load_checkpoint,
    save_checkpoint,
    train,
)
from pyoodbench.scores import (
    duq_scores,
    ensemble_score,
    fit_gaussian_stats,
    mahalanobis_score,
    mcdp_score,
    mcp_score,
    odin_score,
)

logger = logging.getLogger("pyoodbench")

FORMATS = ("json", "csv", "md")
SCORE_METHODS = ("mcp", "mcdp", "ensemble", "mahalanobis", "ensemble_mahalanobis", "odin", "duq")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pyoodbench",
        description="Desk-scale benchmark for confidence-based OOD detection.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {_package_version()}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML experiment config merged over the preset")
    common.add_argument(
        "--preset", choices=sorted(BUILTIN_PRESETS), default="default",
        help="bundled base config (default: %(default)s)",
    )
    common.add_argument("--seed", type=int, help="override the seed for this command")
    common.add_argument("--out", type=Path, help="output directory (or file for score/eval)")
    common.add_argument(
        "--format", choices=FORMATS, action="append", dest="formats",
        help="output format; may be repeated",
    )
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only")

    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="write benchmark CSVs and a manifest")
    gen.set_defaults(handler=_cmd_gen)

    tr = sub.add_parser("train", parents=[common], help="train one model, save a checkpoint")
    tr.add_argument("--kind", choices=("mlp", "duq"), default="mlp")
    tr.add_argument("--data", type=Path, help="benchmark manifest.json (default: from config)")
    tr.set_defaults(handler=_cmd_train)

    sc = sub.add_parser("score", parents=[common], help="score test sets with one method")
    sc.add_argument("--checkpoint", type=Path, nargs="+", required=True,
                    help="checkpoint(s); ensembles take several")
    sc.add_argument("--method", choices=SCORE_METHODS, required=True)
    sc.add_argument("--data", type=Path, help="benchmark manifest.json (default: from config)")
    sc.add_argument("--epsilon", type=float, help="ODIN perturbation size")
    sc.add_argument("--tau", type=float, help="softmax temperature (MCP) or tau' (ODIN)")
    sc.add_argument("--n-passes", type=int, help="MC dropout passes")
    sc.add_argument("--consensus", choices=("mean", "min", "median"))
    sc.set_defaults(handler=_cmd_score)

    ev = sub.add_parser("eval", parents=[common], help="scores CSV -> EvalReport")
    ev.add_argument("--scores", type=Path, required=True)
    ev.set_defaults(handler=_cmd_eval)

    bench = sub.add_parser("bench", parents=[common], help="run the full configured comparison")
    bench.set_defaults(handler=_cmd_bench)

    st = sub.add_parser("sweep-temp", parents=[common], help="calibration across temperatures")
    st.add_argument("--taus", type=float, nargs="+")
    st.set_defaults(handler=_cmd_sweep_temp)

    sp = sub.add_parser("sweep-pool", parents=[common], help="Mahalanobis pooling ablation")
    sp.set_defaults(handler=_cmd_sweep_pool)
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _config(args: argparse.Namespace, **overrides: Any) -> dict[str, Any]:
    extra: dict[str, Any] = {}
    if args.out is not None and args.command in ("bench", "sweep-temp", "sweep-pool"):
        extra.setdefault("run", {})["output_dir"] = str(args.out)
    for section, values in overrides.items():
        extra.setdefault(section, {}).update(values)
    return load_experiment_config(args.preset, args.config, extra or None)


def _benchmark(args: argparse.Namespace, config: dict[str, Any]):
    if getattr(args, "data", None) is not None:
        try:
            return load_benchmark(args.data, normalize=False)
        except OSError as exc:
            raise UsageError(f"cannot read benchmark {args.data}: {exc.strerror or exc}") from exc
    return harness.build_benchmark(config)


def _out_dir(args: argparse.Namespace, config: dict[str, Any]) -> Path:
    return Path(args.out) if args.out is not None else Path(config["run"]["output_dir"])


# ---------------------------------------------------------------------------
# Handlers
# ---------------------------------------------------------------------------


def _cmd_gen(args: argparse.Namespace) -> int:
    overrides = {"benchmark": {"seed": args.seed}} if args.seed is not None else {}
    config = _config(args, **overrides)
    manifest = write_benchmark(harness.build_benchmark(config), _out_dir(args, config))
    print(manifest)
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    config = _config(args)
    bench = _benchmark(args, config)
    seed = args.seed if args.seed is not None else config["run"]["seeds"][0]
    cfg = harness.model_config(config, bench, seed)
    if args.kind == "duq":
        duq_cfg = harness.duq_config(config)
        model, trace = duq_train(DuqModel.initialize(cfg, duq_cfg), bench.train,
                                 duq_cfg.epochs or None)
    else:
        result = train(Classifier.initialize(cfg), bench.train)
        model, trace = result.classifier, result.loss_trace
    logger.info("final epoch loss %.6f", trace[-1])
    path = save_checkpoint(model, _out_dir(args, config) / f"{args.kind}_seed{seed}.npz")
    print(path)
    return 0


def _score(args: argparse.Namespace, config: dict[str, Any], bench, x):
    models = [load_checkpoint(p) for p in args.checkpoint]
    methods = config["methods"]
    if args.method == "duq":
        if not isinstance(models[0], DuqModel):
            raise UsageError("--method duq needs a DUQ checkpoint (train --kind duq).")
        return duq_scores(models[0], x)
    if any(isinstance(m, DuqModel) for m in models):
        raise UsageError(f"--method {args.method} needs softmax classifier checkpoints.")
    if args.method in ("ensemble", "ensemble_mahalanobis"):
        if args.method == "ensemble":
            return ensemble_score(models, x)
        stats = [fit_gaussian_stats(m, bench.train) for m in models]
        consensus = args.consensus or methods["ensemble"]["consensus"]
        return ensemble_score(models, x, "mahalanobis", stats, consensus)
    if len(models) != 1:
        raise UsageError(f"--method {args.method} takes exactly one checkpoint.")
    clf = models[0]
    if args.method == "mcp":
        return mcp_score(clf, x, args.tau or 1.0)
    if args.method == "mcdp":
        n = args.n_passes or methods["mcdp"]["n_passes"]
        return mcdp_score(clf, x, n, np.random.default_rng(args.seed or 0))
    if args.method == "mahalanobis":
        return mahalanobis_score(fit_gaussian_stats(clf, bench.train), clf, x)
    eps = methods["odin"]["epsilons"][0] if args.epsilon is None else args.epsilon
    tau = methods["odin"]["tau_primes"][0] if args.tau is None else args.tau
    return odin_score(clf, x, eps, tau)


def _cmd_score(args: argparse.Namespace) -> int:
    config = _config(args)
    bench = _benchmark(args, config)
    x = np.vstack([bench.test_id.features, bench.test_ood])
    scores = _score(args, config, bench, x)
    n_id = len(bench.test_id)
    samples = harness.scored_samples(scores, bench)
    out = args.out if args.out is not None else Path(f"{args.method}.scores.csv")
    if out.suffix != ".csv":
        out = out / f"{args.method}.scores.csv"
    write_scores_csv(samples, out)
    logger.info("scored %d ID and %d OOD samples", n_id, len(samples) - n_id)
    print(out)
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    config = _config(args)
    samples = read_scores_csv(args.scores)
    report, bins = evaluate(samples, config["evaluation"]["n_bins"])
    formats = args.formats or ["json"]
    stem = args.scores.name.replace(".scores.csv", "").replace(".csv", "")
    out = args.out
    if "json" in formats:
        if out is None:
            print(dumps_eval_report(report))
        else:
            print(write_eval_report(report, out / f"{stem}.eval.json"))
    if "csv" in formats:
        print(write_bins_csv(bins, (out or Path(".")) / f"{stem}.bins.csv"))
    if "md" in formats:
        row = {"label": report.method, **report.to_dict()}
        print(render_markdown_table([row]), end="")
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    overrides = {"run": {"seeds": [args.seed]}} if args.seed is not None else {}
    config = _config(args, **overrides)
    report = harness.run(config)
    written = harness.write_run(report, config, _out_dir(args, config),
                                args.formats or ("json", "md"))
    for path in written.values():
        print(path)
    if report.failed:
        logger.error("at least one cell failed; see report.json")
        return 1
    return 0


def _cmd_sweep_temp(args: argparse.Namespace) -> int:
    overrides = {"run": {"seeds": [args.seed]}} if args.seed is not None else {}
    config = _config(args, **overrides)
    sweep = harness.sweep_temperature(config, args.taus)
    for path in harness.write_temperature_sweep(sweep, _out_dir(args, config)).values():
        print(path)
    if sweep.suggested_tau is not None:
        logger.info("lowest validation ECE at tau=%g", sweep.suggested_tau)
    return 0


def _cmd_sweep_pool(args: argparse.Namespace) -> int:
    overrides = {"run": {"seeds": [args.seed]}} if args.seed is not None else {}
    config = _config(args, **overrides)
    sweep = harness.sweep_pooling(config)
    for path in harness.write_pooling_sweep(sweep, _out_dir(args, config)).values():
        print(path)
    return 1 if any(r["status"] == "failed" for r in sweep.rows) else 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    args = _build_parser().parse_args(argv)
    _configure_logging(args)
    try:
        return args.handler(args)
    except (ConfigError, ParseError, UsageError, ShapeError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return 2
    except OodBenchError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
