"""Tests for pyoodbench.harness — planning, runs, reports and sweeps."""

import json
import logging

import numpy as np
import pytest

from pyoodbench import harness
from pyoodbench.bench_util import _recursive_update, load_experiment_config
from pyoodbench.data import export_csv
from pyoodbench.errors import FitError, TrainingError, UsageError
from pyoodbench.harness import (
    ROW_ORDER,
    TrainingJob,
    build_benchmark,
    method_points,
    plan_jobs,
    run,
    sweep_pooling,
    sweep_temperature,
    write_pooling_sweep,
    write_run,
    write_temperature_sweep,
)
from pyoodbench.nn import derive_seed, train
from tests.conftest import SMALL_OVERRIDES

_METRIC_FIELDS = ("auroc", "aucpr", "id_accuracy", "ece", "n_id", "n_ood")


def _config(preset="default", **sections):
    return load_experiment_config(preset, overrides=_recursive_update(SMALL_OVERRIDES, sections))


def _only(*methods, **sections):
    sections["methods"] = {**sections.get("methods", {}), "enabled": list(methods)}
    return _config(**sections)


def _cell(report, variant, seed=0):
    return next(c for c in report.cells if c.point.variant == variant and c.seed == seed)


def _same_metrics(a, b):
    return all(getattr(a, f) == getattr(b, f) for f in _METRIC_FIELDS)


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------


class TestMethodPoints:
    """Tests for method_points."""

    def test_default_rows_in_table_order(self):
        """Verify every enabled method yields its rows in table order."""
        points = method_points(load_experiment_config())
        assert [p.variant for p in points] == list(ROW_ORDER)
        odin = {p.variant: p.param_dict for p in points if p.method == "odin"}
        assert odin["odin"] == {"epsilon": 0.01, "tau_prime": 1000.0}
        assert odin["odin_pert"] == {"epsilon": 0.01, "tau_prime": 1.0}
        assert odin["odin_temp"] == {"epsilon": 0.0, "tau_prime": 1000.0}

    def test_odin_grid_without_ablations(self):
        """Verify one ODIN row per (epsilon, tau') pair when ablations are off."""
        cfg = _only("odin", methods={"odin": {"epsilons": [0.0, 0.01], "tau_primes": [1.0, 10.0],
                                              "ablations": False}})
        points = method_points(cfg)
        assert len(points) == 4
        assert {p.variant for p in points} == {"odin"}

    def test_labels(self):
        """Verify row labels carry their parameters."""
        cfg = _only("mcp", "odin", "mahalanobis", methods={"mahalanobis": {"pool": [2, 2, 4]}})
        labels = [p.label for p in method_points(cfg)]
        assert labels == [
            "MCP",
            "Mahalanobis (2x2, stride=4)",
            "ODIN (eps=0.01, tau'=1000)",
            "ODIN pert. only (eps=0.01)",
            "ODIN temp. only (tau'=1000)",
        ]


class TestPlanJobs:
    """Tests for plan_jobs."""

    def test_shared_base_classifier(self):
        """Verify post-hoc methods share one classifier and ensemble member 0 reuses it."""
        cfg = _only("mcp", "mcdp", "mahalanobis", "odin", "ensemble", "ensemble_mahalanobis",
                    methods={"ensemble": {"size": 3}}, run={"seeds": [0, 1]})
        jobs = plan_jobs(cfg)
        assert len(jobs) == 6
        assert TrainingJob("mlp", 1) in jobs
        assert TrainingJob("mlp", derive_seed(1, 2)) in jobs

    def test_duq_has_its_own_job(self):
        """Verify DUQ trains separately from the softmax classifier."""
        jobs = plan_jobs(_only("duq", "mcp"))
        assert jobs == [TrainingJob("mlp", 0), TrainingJob("duq", 0)]

    def test_ensemble_alone(self):
        """Verify an ensemble without the base methods still trains every member."""
        jobs = plan_jobs(_only("ensemble", methods={"ensemble": {"size": 2}}))
        assert jobs == [TrainingJob("mlp", 0), TrainingJob("mlp", derive_seed(0, 1))]

    @pytest.mark.parametrize("seed", [0, 1, 7, 123456])
    def test_dropout_stream_is_not_a_member_seed(self, seed):
        """Verify the MC dropout masks never reuse an ensemble member's init seed."""
        members = {job.seed for job in plan_jobs(
            _only("mcdp", "ensemble", methods={"ensemble": {"size": 50}}, run={"seeds": [seed]})
        )}
        assert len(members) == 50
        assert harness._mcdp_seed(seed) not in members


class TestBuildBenchmark:
    """Tests for build_benchmark."""

    def test_moons(self):
        """Verify the moons generator is selected from the config."""
        bm = build_benchmark(_config(benchmark={"generator": "moons"}))
        assert bm.generator == "moons"
        assert bm.validation is not None

    def test_csv(self, tmp_path):
        """Verify CSV paths in the config load a benchmark."""
        source = build_benchmark(_config(benchmark={"normalize": False, "validation_fraction": 0.0}))
        paths = {
            "train": str(export_csv(source.train, tmp_path / "train.csv")),
            "test_id": str(export_csv(source.test_id, tmp_path / "test_id.csv")),
            "test_ood": str(export_csv(source.test_ood, tmp_path / "test_ood.csv")),
        }
        bm = build_benchmark(_config(benchmark={"generator": "csv", "csv": paths}))
        assert bm.generator == "csv"
        assert len(bm.train) + len(bm.validation) == len(source.train)


# ---------------------------------------------------------------------------
# run()
# ---------------------------------------------------------------------------


class TestRun:
    """Tests for run() and its reports."""

    def test_single_method_single_seed(self):
        """Verify MCP on one seed gives one successful cell and one aggregate row."""
        report = run(_only("mcp"))
        assert len(report.cells) == 1
        cell = report.cells[0]
        assert cell.ok and cell.report.method == "mcp"
        assert cell.report.n_id == 80 and cell.report.n_ood == 60
        assert report.aggregate[0]["auroc"] == cell.report.auroc
        assert report.aggregate[0]["n_seeds"] == 1
        assert not report.failed
        assert report.provenance["training_jobs"] == 1

    def test_cells_per_seed_and_point(self):
        """Verify one cell per (seed, method point)."""
        report = run(_only("mcp", "odin", run={"seeds": [0, 1]}))
        assert len(report.cells) == 2 * 4
        assert [c.seed for c in report.cells] == [0] * 4 + [1] * 4
        assert all(row["n_seeds"] == 2 for row in report.aggregate)

    def test_odin_reduces_to_mcp(self):
        """Verify ODIN at epsilon=0, tau'=1 reproduces MCP through the harness."""
        cfg = _only("mcp", "odin", methods={"odin": {"epsilons": [0.0], "tau_primes": [1.0],
                                                      "ablations": False}})
        report = run(cfg)
        assert _same_metrics(_cell(report, "mcp").report, _cell(report, "odin").report)

    def test_single_member_ensemble_is_member(self):
        """Verify a one-member ensemble reproduces MCP of the shared classifier."""
        report = run(_only("mcp", "ensemble", methods={"ensemble": {"size": 1}}))
        assert _same_metrics(_cell(report, "mcp").report, _cell(report, "ensemble").report)
        assert report.provenance["training_jobs"] == 1

    def test_mcdp_without_dropout_is_mcp(self):
        """Verify MCDP on a model without dropout matches MCP and records a note."""
        report = run(_only("mcp", "mcdp", model={"dropout_p": 0.0}))
        mcdp = _cell(report, "mcdp")
        assert _same_metrics(_cell(report, "mcp").report, mcdp.report)
        assert any("equal MCP" in note for note in mcdp.notes)

    def test_each_model_trained_once(self, monkeypatch):
        """Verify shared models are trained exactly once per seed."""
        calls = []

        def counting(clf, data, *args, **kwargs):
            calls.append(clf.config.seed)
            return train(clf, data, *args, **kwargs)

        monkeypatch.setattr(harness, "train", counting)
        cfg = _only("mcp", "mcdp", "mahalanobis", "odin", "ensemble", "ensemble_mahalanobis",
                    methods={"ensemble": {"size": 3}})
        report = run(cfg)
        assert sorted(calls) == sorted([0, derive_seed(0, 1), derive_seed(0, 2)])
        assert not report.failed

    def test_failed_cell_is_recorded(self, monkeypatch):
        """Verify a failing method is recorded and the other rows still run."""

        def broken(*args, **kwargs):
            raise FitError("covariance exploded")

        monkeypatch.setattr(harness, "fit_gaussian_stats", broken)
        report = run(_only("mcp", "mahalanobis"))
        bad = _cell(report, "mahalanobis")
        assert not bad.ok
        assert bad.error == {"type": "FitError", "message": "covariance exploded"}
        assert _cell(report, "mcp").ok
        assert report.failed
        row = next(r for r in report.aggregate if r["variant"] == "mahalanobis")
        assert row["auroc"] is None and row["failed_seeds"] == [0]
        assert "failed" in report.to_markdown()

    def test_failed_training_fails_dependent_cells(self, monkeypatch):
        """Verify a model that fails to train marks its cells failed, not the run."""
        def diverging(*args, **kwargs):
            raise TrainingError("training diverged in epoch 2", 2)

        monkeypatch.setattr(harness, "train", diverging)
        report = run(_only("mcp"))
        assert report.cells[0].error["type"] == "UsageError"
        assert "failed to train" in report.cells[0].error["message"]

    def test_mahalanobis_details(self):
        """Verify the ridge and feature dimension are reported per cell."""
        report = run(_only("mahalanobis"))
        details = report.cells[0].details
        assert details["ridge"] > 0.0
        assert details["feature_dim"] == 16

    def test_deterministic_outputs(self, tmp_path):
        """Verify two runs write identical outputs apart from timestamps and timings."""
        cfg = _only("mcp", "mcdp", "ensemble", "mahalanobis", "odin", "duq",
                    run={"write_scores": True})
        first = write_run(run(cfg), cfg, tmp_path / "a", formats=("json", "md", "csv"))
        second = write_run(run(cfg), cfg, tmp_path / "b", formats=("json", "md", "csv"))

        def stripped(path):
            doc = json.loads(path.read_text())
            doc["_meta"].pop("exported_at")
            doc["report"]["provenance"].pop("wall_clock_seconds")
            return doc

        assert stripped(first["json"]) == stripped(second["json"])
        for key in ("md", "csv", "config"):
            assert first[key].read_bytes() == second[key].read_bytes()
        cells_a = sorted(p.name for p in (tmp_path / "a" / "cells").iterdir())
        assert cells_a == sorted(p.name for p in (tmp_path / "b" / "cells").iterdir())
        for name in cells_a:
            assert (tmp_path / "a" / "cells" / name).read_bytes() == (
                tmp_path / "b" / "cells" / name
            ).read_bytes()

    def test_write_run_files(self, tmp_path):
        """Verify the report envelope, the table and the resolved config."""
        cfg = _only("mcp")
        written = write_run(run(cfg), cfg, tmp_path)
        doc = json.loads(written["json"].read_text())
        assert doc["_meta"]["orientation"].startswith("positive class = OOD")
        assert doc["report"]["cells"][0]["status"] == "ok"
        assert written["md"].read_text().startswith("| Method |")
        assert "[model]" in written["config"].read_text()
        assert not (tmp_path / "cells").exists()


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


class TestTemperatureSweep:
    """Tests for sweep_temperature."""

    def test_binary_auroc_invariant(self):
        """Verify a two-class sweep keeps AUROC fixed across temperatures while ECE moves."""
        cfg = _config("overlapping")
        sweep = sweep_temperature(cfg, [1.0, 5.0, 1000.0])
        assert sweep.auroc_invariant is True
        assert sweep.provenance["auroc_variation"] == []
        for method in ("baseline", "odin"):
            rows = [r for r in sweep.rows if r["method"] == method]
            assert max(r["auroc"] for r in rows) - min(r["auroc"] for r in rows) <= 1e-12
            assert len({r["ece"] for r in rows}) > 1

    def test_large_temperature_is_underconfident(self):
        """Verify ECE at tau=1000 exceeds ECE at tau=1 on an accurate model."""
        sweep = sweep_temperature(_config("overlapping"), [1.0, 1000.0])
        ece = {r["tau"]: r["ece"] for r in sweep.rows if r["method"] == "baseline"}
        assert ece[1000.0] > ece[1.0]

    def test_tau_one_matches_run(self):
        """Verify the tau=1 baseline ECE equals the run's MCP ECE."""
        cfg = _only("mcp")
        sweep = sweep_temperature(cfg, [1.0])
        baseline = next(r for r in sweep.rows if r["method"] == "baseline")
        assert baseline["ece"] == run(cfg).cells[0].report.ece

    def test_suggested_tau_from_validation(self):
        """Verify a temperature is suggested only when a validation split exists."""
        assert sweep_temperature(_config(), [1.0, 2.0]).suggested_tau in (1.0, 2.0)
        no_val = _config(benchmark={"validation_fraction": 0.0})
        sweep = sweep_temperature(no_val, [1.0, 2.0])
        assert sweep.suggested_tau is None
        assert all(r["validation_ece"] is None for r in sweep.rows)

    def test_auroc_variation_is_reported_not_raised(self, monkeypatch, caplog):
        """Verify varying AUROC clears the flag, logs a warning and is listed in provenance."""
        values = iter(np.linspace(0.5, 0.9, 4))
        monkeypatch.setattr(harness, "auroc", lambda samples: float(next(values)))
        with caplog.at_level(logging.WARNING, logger="pyoodbench.harness"):
            sweep = sweep_temperature(_config("overlapping", run={"seeds": [0]}), [1.0, 5.0])
        assert sweep.auroc_invariant is False
        assert [v["method"] for v in sweep.provenance["auroc_variation"]] == ["baseline", "odin"]
        assert "varies across temperatures" in caplog.text

    def test_multiclass_has_no_invariance_flag(self):
        """Verify the AUROC check only applies to two classes."""
        cfg = _config(benchmark={"gaussian": {"num_classes": 3}})
        assert sweep_temperature(cfg, [1.0, 5.0]).auroc_invariant is None

    def test_bad_temperatures(self):
        """Verify non-positive temperatures are rejected."""
        with pytest.raises(UsageError, match="positive"):
            sweep_temperature(_config(), [1.0, 0.0])

    def test_write(self, tmp_path):
        """Verify the JSON, CSV and one bins file per row."""
        sweep = sweep_temperature(_config(), [1.0, 5.0])
        written = write_temperature_sweep(sweep, tmp_path)
        assert written["csv"].read_text().splitlines()[0] == (
            "seed,method,epsilon,tau,auroc,ece,validation_ece"
        )
        assert len(list((tmp_path / "bins").iterdir())) == len(sweep.rows) == 4
        assert "auroc_invariant" in json.loads(written["json"].read_text())["sweep"]


class TestPoolingSweep:
    """Tests for sweep_pooling."""

    def test_flat_features_not_applicable(self):
        """Verify only the unpooled row runs when features have no spatial shape."""
        sweep = sweep_pooling(_config(), [[2, 2, 2], [1, 1, 1]])
        assert [r["label"] for r in sweep.rows] == ["none", "2x2, stride=2", "1x1, stride=1"]
        assert sweep.rows[0]["status"] == "ok" and 0.0 <= sweep.rows[0]["auroc"] <= 1.0
        assert [r["status"] for r in sweep.rows[1:]] == ["not applicable"] * 2

    def test_spatial_features(self, tmp_path):
        """Verify pooled shapes and that the identity window matches no pooling."""
        cfg = _config(model={"hidden_dims": [48], "feature_shape": [3, 4, 4]})
        sweep = sweep_pooling(cfg, [[1, 1, 1], [2, 2, 2], [5, 5, 1]])
        none, identity, pooled, too_big = sweep.rows
        assert identity["auroc"] == none["auroc"]
        assert pooled["pooled_shape"] == [3, 2, 2] and pooled["feature_dim"] == 12
        assert too_big["status"] == "failed" and too_big["error"]["type"] == "ShapeError"
        written = write_pooling_sweep(sweep, tmp_path)
        assert "| 2x2, stride=2 | 3x2x2 | 12 |" in written["md"].read_text()


# ---------------------------------------------------------------------------
# Acceptance runs
# ---------------------------------------------------------------------------


@pytest.mark.slow
class TestAcceptance:
    """Full three-seed runs on the bundled presets."""

    def test_far_benchmark(self):
        """Verify Mahalanobis separates far OOD and no post-hoc method costs accuracy."""
        report = run(load_experiment_config("far"))
        rows = {r["variant"]: r for r in report.aggregate}
        assert rows["mahalanobis"]["auroc"] >= 0.95
        assert rows["mcp"]["id_accuracy"] >= 0.95
        for variant, row in rows.items():
            assert row["auroc"] >= rows["mcp"]["auroc"] - 0.02, variant
            assert row["id_accuracy"] >= 0.95, variant

    def test_overlapping_benchmark(self):
        """Verify the perturbation, not the temperature, drives ODIN on overlapping OOD."""
        cfg = load_experiment_config("overlapping", overrides={"methods": {"enabled": ["mcp", "odin"]}})
        rows = {r["variant"]: r for r in run(cfg).aggregate}
        assert rows["odin_pert"]["auroc"] >= rows["mcp"]["auroc"]
        assert abs(rows["odin"]["auroc"] - rows["odin_pert"]["auroc"]) <= 0.01
        assert np.isfinite(rows["odin_temp"]["auroc"])
