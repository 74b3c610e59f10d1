"""OOD scoring methods.

Every scorer maps a trained model (or several) and an input batch to a
:class:`Scores` batch whose ``id_score`` is *higher for inputs the
detector considers in-distribution*.  Use :meth:`Scores.to_samples` to get
one :class:`ScoredSample` per input for the metrics.

Methods
-------
``mcp``
    Maximum class probability of the temperature-scaled softmax.
``mahalanobis``
    Negated distance to the closest class-conditional Gaussian with a
    tied covariance, fitted on the last hidden layer.
``odin``
    MCP at temperature ``tau_prime`` of a sign-gradient perturbed input.
``mcdp``
    MCP of the posterior averaged over dropout-active forward passes.
``ensemble`` / ``ensemble_mahalanobis``
    Averaged member posteriors, or a consensus of member Mahalanobis scores.
``duq``
    Kernel value of the closest DUQ centroid.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import linalg

from pyoodbench import autodiff as ad
from pyoodbench.autodiff import Tensor
from pyoodbench.errors import (
    FitError,
    ParameterError,
    ScoringError,
    ShapeError,
    UsageError,
)
from pyoodbench.nn import Classifier, DuqModel, duq_score, features, forward

__all__ = [
    "METHODS",
    "CONSENSUS",
    "PoolSpec",
    "ScoredSample",
    "Scores",
    "GaussianStats",
    "pooled_shape",
    "strided_max_pool",
    "mcp_score",
    "fit_gaussian_stats",
    "mahalanobis_distances",
    "mahalanobis_score",
    "odin_perturb",
    "odin_score",
    "mcdp_score",
    "ensemble_score",
    "duq_scores",
]

logger = logging.getLogger(__name__)

METHODS = ("mcp", "mcdp", "ensemble", "mahalanobis", "ensemble_mahalanobis", "odin", "duq")
CONSENSUS = ("mean", "min", "median")

_MAX_RIDGE_STEPS = 40


# ---------------------------------------------------------------------------
# Result types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScoredSample:
    """One scored input.

    Attributes:
        sample_id: Position of the sample in the evaluated set (ID samples
            first, then OOD samples).
        method: Method tag, e.g. ``"mcp"`` or ``"odin"``.
        id_score: Higher means more in-distribution.
        is_ood: Ground-truth OOD flag.
        predicted_class: Class the model assigns.
        true_class: Label of an ID sample; ``None`` for OOD samples.
        confidence: Probability attached to ``predicted_class``, used for
            calibration metrics.

    """

    sample_id: int
    method: str
    id_score: float
    is_ood: bool
    predicted_class: int
    true_class: Optional[int] = None
    confidence: float = float("nan")

    def __post_init__(self) -> None:
        if not math.isfinite(self.id_score):
            raise ScoringError(
                f"sample {self.sample_id} ({self.method}) has a non-finite id_score."
            )
        if self.is_ood and self.true_class is not None:
            raise UsageError(f"OOD sample {self.sample_id} must not carry a class label.")


@dataclass
class Scores:
    """Batch result of one scorer.

    Attributes:
        method: Method tag.
        id_score: ``(B,)`` ID scores.
        predicted_class: ``(B,)`` predicted classes.
        confidence: ``(B,)`` probability of the predicted class.
        notes: Soft conditions met while scoring (e.g. skipped pooling).

    """

    method: str
    id_score: np.ndarray
    predicted_class: np.ndarray
    confidence: np.ndarray
    notes: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.id_score)):
            bad = int(np.flatnonzero(~np.isfinite(self.id_score))[0])
            raise ScoringError(f"{self.method} produced a non-finite id_score at row {bad}.")

    def __len__(self) -> int:
        return len(self.id_score)

    def to_samples(
        self,
        is_ood: bool,
        true_class: Optional[Sequence[int]] = None,
        start_id: int = 0,
    ) -> list[ScoredSample]:
        """Expand into :class:`ScoredSample` entries.

        Args:
            is_ood: Whether this whole batch is OOD.
            true_class: Labels of an ID batch; must be omitted for OOD.
            start_id: ``sample_id`` of the first row.

        """
        if is_ood and true_class is not None:
            raise UsageError("OOD batches never carry class labels.")
        if true_class is not None and len(true_class) != len(self):
            raise ShapeError(f"{len(true_class)} labels for {len(self)} scores.")
        return [
            ScoredSample(
                sample_id=start_id + i,
                method=self.method,
                id_score=float(self.id_score[i]),
                is_ood=is_ood,
                predicted_class=int(self.predicted_class[i]),
                true_class=None if true_class is None else int(true_class[i]),
                confidence=float(self.confidence[i]),
            )
            for i in range(len(self))
        ]


def _from_posteriors(method: str, posteriors: np.ndarray) -> Scores:
    top = posteriors.max(axis=1)
    return Scores(method, top, posteriors.argmax(axis=1), top.copy())


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PoolSpec:
    """Strided max pooling window over a ``(channels, height, width)`` feature map."""

    kernel: tuple[int, int]
    stride: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if len(self.kernel) != 2 or min(self.kernel) < 1 or self.stride < 1:
            raise ParameterError(
                f"PoolSpec needs a positive (kh, kw) kernel and stride, got "
                f"kernel={self.kernel}, stride={self.stride}."
            )

    @property
    def label(self) -> str:
        """Human-readable form, e.g. ``2x2, stride=4``."""
        return f"{self.kernel[0]}x{self.kernel[1]}, stride={self.stride}"

    @property
    def is_identity(self) -> bool:
        """True for a 1x1 window with stride 1."""
        return self.kernel == (1, 1) and self.stride == 1


def pooled_shape(feature_shape: Sequence[int], pool: PoolSpec) -> tuple[int, int, int]:
    """Output ``(channels, H', W')`` with ``H' = floor((H - kh) / s) + 1``.

    Raises:
        ShapeError: If the kernel does not fit the feature map.

    Example:
        >>> pooled_shape((128, 56, 56), PoolSpec((2, 2), 4))
        (128, 14, 14)

    """
    c, h, w = (int(s) for s in feature_shape)
    kh, kw = pool.kernel
    if kh > h or kw > w:
        raise ShapeError(f"pooling kernel {kh}x{kw} does not fit a {h}x{w} feature map.")
    return c, (h - kh) // pool.stride + 1, (w - kw) // pool.stride + 1


def strided_max_pool(z: np.ndarray, feature_shape: Sequence[int], pool: PoolSpec) -> np.ndarray:
    """Max-pool flat ``(B, C*H*W)`` features laid out channel-major; returns flat output."""
    c, h, w = (int(s) for s in feature_shape)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != c * h * w:
        raise ShapeError(f"features of shape {z.shape} do not match feature_shape {(c, h, w)}.")
    pooled_shape((c, h, w), pool)
    maps = z.reshape(len(z), c, h, w)
    windows = sliding_window_view(maps, pool.kernel, axis=(2, 3))
    windows = windows[:, :, :: pool.stride, :: pool.stride]
    return windows.max(axis=(-2, -1)).reshape(len(z), -1)


# ---------------------------------------------------------------------------
# MCP
# ---------------------------------------------------------------------------


def mcp_score(clf: Classifier, x: np.ndarray, tau: float = 1.0) -> Scores:
    """Maximum class probability at softmax temperature *tau*."""
    return _from_posteriors("mcp", forward(clf, x, tau).posteriors.data)


# ---------------------------------------------------------------------------
# Mahalanobis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianStats:
    """Class-conditional Gaussians with one shared covariance.

    Attributes:
        class_means: ``(C, Z)`` class means.
        tied_covariance: ``(Z, Z)`` pooled within-class covariance (1/N).
        ridge: Multiple of the identity added before factorising.
        factorization: Lower Cholesky factor of
            ``tied_covariance + ridge * I``.
        pool: Pooling applied to the features before fitting, if any.
        feature_shape: ``(channels, H, W)`` view used for pooling.
        notes: Soft conditions met while fitting.

    """

    class_means: np.ndarray
    tied_covariance: np.ndarray
    ridge: float
    factorization: np.ndarray
    pool: Optional[PoolSpec] = None
    feature_shape: Optional[tuple[int, int, int]] = None
    notes: tuple[str, ...] = ()

    @property
    def feature_dim(self) -> int:
        """Dimension ``Z`` of the fitted features."""
        return self.class_means.shape[1]

    @property
    def num_classes(self) -> int:
        """Number of classes ``C``."""
        return self.class_means.shape[0]

    @classmethod
    def from_features(
        cls,
        z: np.ndarray,
        labels: np.ndarray,
        num_classes: int,
        **extra,
    ) -> GaussianStats:
        """Fit means, tied covariance and a ridge-regularised Cholesky factor.

        The ridge starts at ``1e-6 * trace / Z`` (``1e-6`` for a zero
        covariance) and is multiplied by 10 until the factorisation succeeds.

        Raises:
            FitError: If a class has no samples or no ridge makes the
                matrix positive definite.

        """
        z = np.asarray(z, dtype=np.float64)
        labels = np.asarray(labels)
        if z.ndim != 2 or len(z) != len(labels):
            raise ShapeError(f"need (N, Z) features and N labels, got {z.shape} and {labels.shape}.")
        means = np.empty((num_classes, z.shape[1]))
        centred = np.empty_like(z)
        for c in range(num_classes):
            members = labels == c
            if not members.any():
                raise FitError(
                    f"class {c} has no training samples; every class needs at least one "
                    "to fit its mean."
                )
            means[c] = z[members].mean(axis=0)
            centred[members] = z[members] - means[c]
        cov = centred.T @ centred / len(z)
        cov = 0.5 * (cov + cov.T)
        return cls.from_parts(means, cov, **extra)

    @classmethod
    def from_parts(
        cls,
        class_means: np.ndarray,
        covariance: np.ndarray,
        ridge: Optional[float] = None,
        **extra,
    ) -> GaussianStats:
        """Build stats from given moments.

        With ``ridge=None`` the ridge search of :meth:`from_features` runs;
        a given ridge is used as is.
        """
        cov = np.asarray(covariance, dtype=np.float64)
        z_dim = cov.shape[0]
        eye = np.eye(z_dim)
        if ridge is not None:
            try:
                factor = linalg.cholesky(cov + ridge * eye, lower=True)
            except linalg.LinAlgError as exc:
                raise FitError(f"covariance + {ridge} * I is not positive definite.") from exc
            return cls(np.asarray(class_means, dtype=np.float64), cov, float(ridge), factor, **extra)

        trace = float(np.trace(cov))
        lam = 1e-6 * (trace / z_dim if trace > 0.0 else 1.0)
        for _ in range(_MAX_RIDGE_STEPS):
            try:
                factor = linalg.cholesky(cov + lam * eye, lower=True)
            except linalg.LinAlgError:
                lam *= 10.0
                continue
            logger.debug("tied covariance factorised with ridge %.3g", lam)
            return cls(np.asarray(class_means, dtype=np.float64), cov, lam, factor, **extra)
        raise FitError(f"tied covariance stayed singular up to ridge {lam:.3g}.")


def fit_gaussian_stats(
    clf: Classifier,
    train_data,
    pool: Optional[PoolSpec] = None,
) -> GaussianStats:
    """Fit class means and tied covariance of ``z(x)`` on the training set.

    Args:
        clf: Trained classifier; its last hidden layer provides ``z``.
        train_data: :class:`~pyoodbench.data.LabeledSet` with every class
            present.
        pool: Optional strided max pooling applied to ``z`` first.  Needs
            ``clf.config.feature_shape``; on flat features pooling is
            skipped with a warning that is also kept in ``notes``.

    Raises:
        FitError: If a class has no training samples.

    """
    z = features(clf, np.asarray(train_data.features, dtype=np.float64)).data
    notes: list[str] = []
    shape = clf.config.feature_shape
    if pool is not None and shape is None:
        note = f"pooling {pool.label} skipped: the model's features have no spatial shape."
        warnings.warn(note, stacklevel=2)
        notes.append(note)
        pool = None
    if pool is not None:
        z = strided_max_pool(z, shape, pool)
    return GaussianStats.from_features(
        z,
        train_data.labels,
        clf.config.num_classes,
        pool=pool,
        feature_shape=shape,
        notes=tuple(notes),
    )


def mahalanobis_distances(stats: GaussianStats, z: np.ndarray) -> np.ndarray:
    """Squared Mahalanobis distances ``(B, C)`` via triangular solves."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != stats.feature_dim:
        raise ShapeError(
            f"features have shape {z.shape}; the fitted stats expect (B, {stats.feature_dim})."
        )
    diffs = z[None, :, :] - stats.class_means[:, None, :]
    flat = diffs.reshape(-1, stats.feature_dim).T
    solved = linalg.solve_triangular(stats.factorization, flat, lower=True, check_finite=False)
    return np.sum(solved * solved, axis=0).reshape(stats.num_classes, len(z)).T


def _stats_features(stats: GaussianStats, clf: Classifier, x: np.ndarray) -> np.ndarray:
    z = features(clf, x).data
    if stats.pool is not None:
        z = strided_max_pool(z, stats.feature_shape, stats.pool)
    return z


def mahalanobis_score(stats: GaussianStats, clf: Classifier, x: np.ndarray) -> Scores:
    """``max_c -(z - mu_c)^T (Sigma + ridge I)^-1 (z - mu_c)``; always ``<= 0``.

    Predictions and confidences come from the classifier's softmax, which
    the post-hoc detector leaves unchanged.
    """
    dist = mahalanobis_distances(stats, _stats_features(stats, clf, x))
    base = mcp_score(clf, x)
    return Scores(
        "mahalanobis",
        0.0 - dist.min(axis=1),
        base.predicted_class,
        base.confidence,
        list(stats.notes),
    )


# ---------------------------------------------------------------------------
# ODIN
# ---------------------------------------------------------------------------


def odin_perturb(
    clf: Classifier,
    x: np.ndarray,
    epsilon: float,
    tau_train: float = 1.0,
) -> np.ndarray:
    """``x - epsilon * sign(-grad_x log max_c S(x; tau_train)_c)``.

    The step moves every input towards higher confidence of its predicted
    class.  ``epsilon == 0`` returns an exact copy of *x*.

    Raises:
        ParameterError: If *epsilon* is negative.
        ScoringError: If the input gradient is not finite.

    """
    if epsilon < 0.0:
        raise ParameterError(f"ODIN epsilon must be >= 0, got {epsilon}.")
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0.0:
        return x.copy()
    xt = Tensor(x, requires_grad=True)
    logits = forward(clf, xt).logits
    top = np.eye(logits.shape[1])[logits.data.argmax(axis=1)]
    # Rows are independent, so the batch sum yields every row's own gradient.
    objective = ad.tsum(ad.log_softmax_temp(logits, tau_train) * Tensor(top))
    ad.backward(objective)
    grad = xt.grad
    if grad is None or not np.all(np.isfinite(grad)):
        raise ScoringError("ODIN input gradient is not finite.")
    return x - epsilon * np.sign(-grad)


def odin_score(
    clf: Classifier,
    x: np.ndarray,
    epsilon: float = 0.01,
    tau_prime: float = 1000.0,
) -> Scores:
    """MCP at temperature *tau_prime* of the ODIN-perturbed input.

    ``tau_prime=1`` gives the perturbation-only ablation and
    ``epsilon=0`` the temperature-only one; both together reduce to
    :func:`mcp_score`.
    """
    if not tau_prime > 0.0:
        raise ParameterError(f"ODIN tau_prime must be positive, got {tau_prime}.")
    x_tilde = odin_perturb(clf, x, epsilon)
    return _from_posteriors("odin", forward(clf, x_tilde, tau_prime).posteriors.data)


# ---------------------------------------------------------------------------
# MC dropout
# ---------------------------------------------------------------------------


def mcdp_score(
    clf: Classifier,
    x: np.ndarray,
    n_passes: int = 32,
    rng: Optional[np.random.Generator] = None,
) -> Scores:
    """MCP of the posterior averaged over *n_passes* dropout-active passes.

    On a model with ``dropout_p == 0`` every pass is deterministic; the
    result then equals :func:`mcp_score` and a warning is issued.

    Args:
        clf: Classifier trained with dropout.
        x: Input batch.
        n_passes: Number of stochastic forward passes.
        rng: Generator for dropout masks; defaults to one seeded from the
            model's seed.

    """
    if n_passes < 1:
        raise ParameterError(f"n_passes must be >= 1, got {n_passes}.")
    if clf.config.dropout_p == 0.0:
        note = "MC dropout on a model without dropout: scores equal MCP."
        warnings.warn(note, stacklevel=2)
        result = mcp_score(clf, x)
        result.method = "mcdp"
        result.notes.append(note)
        return result
    rng = rng if rng is not None else np.random.default_rng(clf.config.seed)
    total = np.zeros((len(x), clf.config.num_classes))
    for _ in range(n_passes):
        total += forward(clf, x, 1.0, dropout_active=True, rng=rng).posteriors.data
    return _from_posteriors("mcdp", total / n_passes)


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------


def _check_members(members: Sequence[Classifier]) -> None:
    if not members:
        raise UsageError("an ensemble needs at least one member.")
    dims = {(m.config.input_dim, m.config.num_classes) for m in members}
    if len(dims) > 1:
        raise UsageError(
            f"ensemble members disagree on (input_dim, num_classes): {sorted(dims)}."
        )


def ensemble_score(
    members: Sequence[Classifier],
    x: np.ndarray,
    variant: str = "mcp",
    stats: Optional[Sequence[GaussianStats]] = None,
    consensus: str = "mean",
) -> Scores:
    """Deep-ensemble scores.

    Args:
        members: Independently trained classifiers.
        x: Input batch.
        variant: ``"mcp"`` for the max of the mean posterior, or
            ``"mahalanobis"`` for a consensus of member Mahalanobis scores.
        stats: Fitted :class:`GaussianStats` per member (Mahalanobis only).
        consensus: ``"mean"``, ``"min"`` or ``"median"`` over members.

    Raises:
        UsageError: On an empty or heterogeneous ensemble, an unknown
            variant or consensus, or missing stats.

    """
    _check_members(members)
    mean_post = np.mean([forward(m, x).posteriors.data for m in members], axis=0)
    base = _from_posteriors("ensemble", mean_post)
    if variant == "mcp":
        return base
    if variant != "mahalanobis":
        raise UsageError(f"unknown ensemble variant {variant!r}; use 'mcp' or 'mahalanobis'.")
    if consensus not in CONSENSUS:
        raise UsageError(f"unknown consensus {consensus!r}; choose from {CONSENSUS}.")
    if stats is None or len(stats) != len(members):
        raise UsageError("the Mahalanobis ensemble needs one GaussianStats per member.")
    per_member = np.stack(
        [mahalanobis_score(s, m, x).id_score for s, m in zip(stats, members)]
    )
    reduce = {"mean": np.mean, "min": np.min, "median": np.median}[consensus]
    notes = sorted({n for s in stats for n in s.notes})
    return Scores(
        "ensemble_mahalanobis",
        reduce(per_member, axis=0),
        base.predicted_class,
        base.confidence,
        notes,
    )


# ---------------------------------------------------------------------------
# DUQ
# ---------------------------------------------------------------------------


def duq_scores(model: DuqModel, x: Union[np.ndarray, Tensor]) -> Scores:
    """Closest-centroid kernel value; the kernel value doubles as confidence."""
    id_score, prediction = duq_score(model, x)
    return Scores("duq", id_score, prediction, id_score.copy())
