"""Utility helpers for the pyoodbench package.

This module provides experiment-config loading, merging and validation,
the config fingerprint, float formatting and version lookup used by
:mod:`pyoodbench.harness`, :mod:`pyoodbench.data` and the CLI.
"""

from __future__ import annotations

import copy
import hashlib
import json
import warnings
from importlib import resources
from importlib.metadata import PackageNotFoundError
from importlib.metadata import metadata as _metadata
from pathlib import Path
from typing import Any, Mapping, Optional, Union

try:
    import tomllib  # Python 3.11+
except ImportError:
    import tomli as tomllib  # Python < 3.11

import tomli_w

from pyoodbench.errors import ConfigError
from pyoodbench.scores import CONSENSUS, METHODS

__all__ = [
    "BUILTIN_PRESETS",
    "GENERATORS",
    "load_experiment_config",
    "validate_config",
    "config_fingerprint",
    "dumps_config",
    "format_float",
]

# Mapping of preset short-names to TOML files inside the ``configs/``
# sub-package.  Every preset is merged on top of ``default``.
BUILTIN_PRESETS = {
    "default": "default.toml",
    "far": "far.toml",
    "overlapping": "overlapping.toml",
}

GENERATORS = ("gaussian", "moons", "csv")


def _package_version() -> str:
    """Best-effort lookup of the installed pyoodbench version.

    Returns ``"unknown"`` when the package is not installed (e.g.,
    running tests directly from a source checkout without ``pip
    install -e .``).
    """
    try:
        return _metadata("pyoodbench")["Version"]
    except PackageNotFoundError:
        return "unknown"


def format_float(value: float) -> str:
    """Render *value* with 17 significant digits, enough for an exact round trip."""
    return format(float(value), ".17g")


# ---------------------------------------------------------------------------
# Config loading
# ---------------------------------------------------------------------------

# Used only when the bundled TOML files cannot be read; mirrors default.toml.
_FALLBACK_CONFIG: dict[str, Any] = {
    "benchmark": {
        "generator": "gaussian",
        "seed": 0,
        "validation_fraction": 0.1,
        "normalize": True,
        "gaussian": {
            "d": 2,
            "num_classes": 2,
            "n_per_class": 500,
            "n_test_per_class": 200,
            "n_ood": 400,
            "ood_shift": 10.0,
            "spread": 1.0,
        },
        "moons": {
            "n_per_class": 500,
            "n_test_per_class": 200,
            "n_ood": 400,
            "noise": 0.1,
            "ood_ring_radius": 3.0,
        },
        "csv": {"train": "", "test_id": "", "test_ood": "", "label_column": "label"},
    },
    "model": {
        "hidden_dims": [64, 64],
        "dropout_p": 0.3,
        "weight_decay": 0.0005,
        "momentum": 0.9,
        "lr": 0.05,
        "epochs": 30,
        "batch_size": 64,
        "feature_shape": [],
    },
    "methods": {
        "enabled": list(METHODS),
        "odin": {"epsilons": [0.01], "tau_primes": [1000.0], "ablations": True},
        "mahalanobis": {"pool": []},
        "mcdp": {"n_passes": 32},
        "ensemble": {"size": 5, "consensus": "mean"},
        "duq": {
            "embedding_dim": 16,
            "length_scale": 0.0,
            "centroid_momentum": 0.999,
            "penalty_weight": 0.5,
            "fd_epsilon": 0.001,
            "epochs": 0,
        },
    },
    "sweeps": {
        "temperature": {"taus": [1.0, 5.0, 1000.0], "epsilon": 0.01},
        "pooling": {"specs": [[1, 1, 1], [2, 2, 1], [2, 2, 2], [4, 4, 2]]},
    },
    "evaluation": {"n_bins": 15},
    "run": {"seeds": [0, 1, 2], "output_dir": "runs", "workers": 1, "write_scores": False},
}


def _recursive_update(default: dict, override: Mapping) -> dict:
    """Recursively merge *override* into *default*, returning a new dict.

    Nested dictionaries are merged key-by-key; all other value types in
    *override* simply replace those in *default*.  The original *default*
    dictionary is **not** modified.
    """
    result = {**default}
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(result.get(key), dict):
            result[key] = _recursive_update(result[key], value)
        else:
            result[key] = copy.deepcopy(value)
    return result


def _read_bundled(name: str) -> dict[str, Any]:
    toml_file = resources.files("pyoodbench").joinpath("configs").joinpath(BUILTIN_PRESETS[name])
    return tomllib.loads(toml_file.read_text(encoding="utf-8"))


def load_experiment_config(
    preset: str = "default",
    custom_config_path: Union[str, Path, None] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> dict[str, Any]:
    """Load and validate an experiment configuration.

    The bundled ``default.toml`` is the base; the chosen *preset*, the
    user's TOML file and finally *overrides* are deep-merged on top in that
    order.  The result is validated with :func:`validate_config`.

    Args:
        preset: Name of a bundled preset: ``"default"``, ``"far"`` or
            ``"overlapping"``.
        custom_config_path: Optional path to a user TOML file.
        overrides: Optional nested mapping applied last (used by the CLI
            for ``--seed`` and ``--out``).

    Returns:
        The resolved nested config dict.

    Raises:
        ConfigError: If the preset is unknown, the user file is missing or
            malformed, or validation fails.

    Example:
        >>> cfg = load_experiment_config("overlapping")
        >>> cfg["benchmark"]["gaussian"]["ood_shift"]
        1.0

    """
    # 1. Resolve the bundled base and preset
    if preset not in BUILTIN_PRESETS:
        raise ConfigError(
            f"Unknown built-in preset '{preset}'. Available presets: {sorted(BUILTIN_PRESETS)}"
        )
    try:
        config = _read_bundled("default")
        if preset != "default":
            config = _recursive_update(config, _read_bundled(preset))
    except (FileNotFoundError, OSError, tomllib.TOMLDecodeError) as exc:
        warnings.warn(
            f"Could not load built-in preset '{preset}' from package data: {exc}. "
            "Falling back to hard-coded defaults.",
            stacklevel=2,
        )
        config = copy.deepcopy(_FALLBACK_CONFIG)

    # 2. Merge the user file; a missing file is an error, not a warning
    if custom_config_path:
        custom_path = Path(custom_config_path)
        if not custom_path.is_file():
            raise ConfigError(f"Config file '{custom_config_path}' does not exist.")
        try:
            with open(custom_path, "rb") as f:
                user_config = tomllib.load(f)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"Config file '{custom_config_path}' is not valid TOML: {exc}") from exc
        _check_keys(user_config, config, "")
        config = _recursive_update(config, user_config)

    # 3. Programmatic overrides
    if overrides:
        _check_keys(overrides, config, "")
        config = _recursive_update(config, overrides)

    validate_config(config)
    return config


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _check_keys(candidate: Mapping[str, Any], schema: Mapping[str, Any], prefix: str) -> None:
    """Reject keys of *candidate* that the schema does not know, at any depth."""
    for key, value in candidate.items():
        path = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(
                f"Unknown config key '{path}'. Known keys here: {sorted(schema)}"
            )
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"Config key '{path}' must be a table.")
            _check_keys(value, expected, f"{path}.")
        elif isinstance(value, Mapping):
            raise ConfigError(f"Config key '{path}' must not be a table.")
        elif not _same_kind(value, expected):
            raise ConfigError(
                f"Config key '{path}' expects a {type(expected).__name__}, "
                f"got {value!r}."
            )


def _same_kind(value: Any, expected: Any) -> bool:
    if isinstance(expected, bool) or isinstance(value, bool):
        return isinstance(value, bool) and isinstance(expected, bool)
    if isinstance(expected, float):
        return isinstance(value, (int, float))
    return isinstance(value, type(expected))


def validate_config(config: Mapping[str, Any]) -> None:
    """Check cross-field rules of a resolved config.

    Raises:
        ConfigError: With a message naming the offending key.

    """
    _check_keys(config, _FALLBACK_CONFIG, "")
    bench, methods, run = config["benchmark"], config["methods"], config["run"]

    if bench["generator"] not in GENERATORS:
        raise ConfigError(
            f"benchmark.generator must be one of {GENERATORS}, got '{bench['generator']}'."
        )
    if bench["generator"] == "csv" and not all(
        bench["csv"][k] for k in ("train", "test_id", "test_ood")
    ):
        raise ConfigError("benchmark.csv needs train, test_id and test_ood paths.")
    if not 0.0 <= bench["validation_fraction"] < 1.0:
        raise ConfigError("benchmark.validation_fraction must lie in [0, 1).")

    enabled = methods["enabled"]
    if not enabled:
        raise ConfigError("methods.enabled must name at least one method.")
    unknown = sorted(set(enabled) - set(METHODS))
    if unknown:
        raise ConfigError(f"Unknown methods {unknown} in methods.enabled. Known: {list(METHODS)}")
    if methods["ensemble"]["consensus"] not in CONSENSUS:
        raise ConfigError(f"methods.ensemble.consensus must be one of {CONSENSUS}.")
    if methods["ensemble"]["size"] < 1:
        raise ConfigError("methods.ensemble.size must be at least 1.")
    if not methods["odin"]["epsilons"] or not methods["odin"]["tau_primes"]:
        raise ConfigError("methods.odin needs at least one epsilon and one tau_prime.")
    for key in ("pool",):
        if methods["mahalanobis"][key] and len(methods["mahalanobis"][key]) != 3:
            raise ConfigError("methods.mahalanobis.pool must be [kh, kw, stride] or empty.")
    if any(len(spec) != 3 for spec in config["sweeps"]["pooling"]["specs"]):
        raise ConfigError("every sweeps.pooling.specs entry must be [kh, kw, stride].")
    if config["model"]["feature_shape"] and len(config["model"]["feature_shape"]) != 3:
        raise ConfigError("model.feature_shape must be [channels, height, width] or empty.")

    seeds = run["seeds"]
    if not seeds:
        raise ConfigError("run.seeds must list at least one seed.")
    if any(not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in seeds):
        raise ConfigError("run.seeds must be non-negative integers.")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("run.seeds must not repeat a seed.")
    if run["workers"] < 1:
        raise ConfigError("run.workers must be at least 1.")


def config_fingerprint(config: Mapping[str, Any]) -> str:
    """SHA-256 of the canonical JSON rendering of *config*."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def dumps_config(config: Mapping[str, Any]) -> str:
    """Render a resolved config as TOML."""
    return tomli_w.dumps(dict(config))
