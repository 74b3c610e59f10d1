"""MLP classifiers, SGD training and the DUQ head.

A :class:`Classifier` is a plain bundle of NumPy parameter arrays plus the
:class:`MlpConfig` that shaped them.  :func:`forward` wraps those arrays as
constant tensors (or uses caller-supplied trainable ones), so a trained
classifier is never mutated by scoring and can be shared freely.

The DUQ variant replaces the softmax layer with per-class linear maps
into an embedding space and an RBF kernel around learned class
centroids.  Its gradient penalty uses central finite differences of the
kernel sum, so it stays an ordinary first-order differentiable function
of the parameters.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence, Union

import numpy as np

from pyoodbench import autodiff as ad
from pyoodbench.autodiff import Tensor
from pyoodbench.errors import (
    DomainError,
    ParameterError,
    ShapeError,
    TrainingError,
    UsageError,
)

__all__ = [
    "MlpConfig",
    "DuqConfig",
    "Classifier",
    "ForwardOutput",
    "TrainResult",
    "SGDMomentum",
    "DuqHead",
    "DuqModel",
    "DuqStepResult",
    "forward",
    "features",
    "cross_entropy",
    "train",
    "duq_forward",
    "fd_input_gradient",
    "duq_train_step",
    "duq_train",
    "duq_score",
    "save_checkpoint",
    "load_checkpoint",
    "derive_seed",
]

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pyoodbench-checkpoint"
CHECKPOINT_VERSION = 1


def derive_seed(seed: int, *keys: int) -> int:
    """Derive an independent 63-bit seed from *seed* and integer *keys*.

    ``derive_seed(s)`` with no keys returns ``s`` unchanged, which lets the
    first ensemble member share its checkpoint with the base model.
    """
    if not keys or all(k == 0 for k in keys):
        return int(seed)
    state = np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(2, np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def _streams(seed: int) -> dict[str, np.random.Generator]:
    init, shuffle, dropout, head = np.random.SeedSequence(int(seed)).spawn(4)
    return {
        "init": np.random.default_rng(init),
        "shuffle": np.random.default_rng(shuffle),
        "dropout": np.random.default_rng(dropout),
        "head": np.random.default_rng(head),
    }


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpConfig:
    """Architecture and optimisation settings for one classifier.

    Defaults follow the study's training recipe where it states one
    (momentum 0.9, weight decay 5e-4, dropout 0.3); the rest are sized for
    desk-scale tabular data.

    Attributes:
        input_dim: Number of input features.
        num_classes: Number of ID classes, at least 2.
        hidden_dims: Width of each hidden layer; may be empty (softmax
            regression, in which case the "hidden" features are the inputs).
        dropout_p: Drop probability after every hidden activation.
        weight_decay: L2 coefficient added to every gradient.
        momentum: Heavy-ball momentum coefficient.
        lr: Learning rate.
        epochs: Fixed number of passes over the training set.
        batch_size: Mini-batch size.
        seed: Seed for initialisation, shuffling and dropout masks.
        feature_shape: Optional ``(channels, height, width)`` view of the
            last hidden layer, enabling strided max pooling before the
            Mahalanobis fit.

    """

    input_dim: int
    num_classes: int = 2
    hidden_dims: tuple[int, ...] = (64, 64)
    dropout_p: float = 0.3
    weight_decay: float = 5e-4
    momentum: float = 0.9
    lr: float = 0.05
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    feature_shape: tuple[int, int, int] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.feature_shape is not None:
            object.__setattr__(self, "feature_shape", tuple(int(s) for s in self.feature_shape))
        checks = [
            (self.input_dim >= 1, "input_dim must be a positive integer"),
            (self.num_classes >= 2, "num_classes must be at least 2"),
            (all(h >= 1 for h in self.hidden_dims), "hidden_dims must be positive integers"),
            (0.0 <= self.dropout_p < 1.0, "dropout_p must lie in [0, 1)"),
            (self.weight_decay >= 0.0, "weight_decay must be non-negative"),
            (0.0 <= self.momentum < 1.0, "momentum must lie in [0, 1)"),
            (self.lr > 0.0, "lr must be positive"),
            (self.epochs >= 1, "epochs must be a positive integer"),
            (self.batch_size >= 1, "batch_size must be a positive integer"),
            (self.seed >= 0, "seed must be a non-negative integer"),
        ]
        for ok, message in checks:
            if not ok:
                raise ParameterError(f"{message} (MlpConfig: {self}).")
        if self.feature_shape is not None:
            if len(self.feature_shape) != 3 or min(self.feature_shape) < 1:
                raise ParameterError(
                    f"feature_shape must be three positive ints, got {self.feature_shape}."
                )
            if int(np.prod(self.feature_shape)) != self.feature_dim:
                raise ParameterError(
                    f"feature_shape {self.feature_shape} has {int(np.prod(self.feature_shape))} "
                    f"elements but the last hidden layer has {self.feature_dim}."
                )

    @property
    def feature_dim(self) -> int:
        """Width of ``z(x)``: the last hidden layer, or the input if there is none."""
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim

    def replace(self, **changes: Any) -> MlpConfig:
        """Return a copy with *changes* applied (validated again)."""
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        """JSON-friendly representation."""
        out = asdict(self)
        out["hidden_dims"] = list(self.hidden_dims)
        out["feature_shape"] = None if self.feature_shape is None else list(self.feature_shape)
        return out

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> MlpConfig:
        """Inverse of :meth:`to_dict`."""
        return cls(**dict(values))


@dataclass(frozen=True)
class DuqConfig:
    """Settings for the DUQ head and its training run.

    ``length_scale`` and ``epochs`` accept ``0`` to mean "derive from the
    model": ``0.1 * sqrt(F)`` for the kernel width and the classifier's
    epoch budget for training.
    """

    embedding_dim: int = 16
    length_scale: float = 0.0
    centroid_momentum: float = 0.999
    penalty_weight: float = 0.5
    fd_epsilon: float = 1e-3
    epochs: int = 0

    def __post_init__(self) -> None:
        if self.embedding_dim < 1:
            raise ParameterError("DUQ embedding_dim must be a positive integer.")
        if self.length_scale < 0.0:
            raise ParameterError("DUQ length_scale must be positive (or 0 for the default).")
        if not 0.0 <= self.centroid_momentum <= 1.0:
            raise ParameterError("DUQ centroid_momentum must lie in [0, 1].")
        if self.penalty_weight < 0.0:
            raise ParameterError("DUQ penalty_weight must be non-negative.")
        if not self.fd_epsilon > 0.0:
            raise ParameterError("DUQ fd_epsilon must be positive.")
        if self.epochs < 0:
            raise ParameterError("DUQ epochs must be non-negative (0 uses the model budget).")

    def to_dict(self) -> dict[str, Any]:
        """JSON-friendly representation."""
        return asdict(self)


# ---------------------------------------------------------------------------
# Classifier
# ---------------------------------------------------------------------------


def _layer_dims(config: MlpConfig) -> list[tuple[int, int]]:
    widths = [config.input_dim, *config.hidden_dims, config.num_classes]
    return list(zip(widths[:-1], widths[1:]))


@dataclass
class Classifier:
    """An MLP with a softmax head.

    Parameters are stored as ``W0, b0, ..., WL, bL`` where ``WL``/``bL`` is
    the output layer and ``L == len(config.hidden_dims)``; ``Wi`` has shape
    ``(fan_in, fan_out)``.
    """

    config: MlpConfig
    params: dict[str, np.ndarray]
    mode: str = "eval"

    def __post_init__(self) -> None:
        for i, (fan_in, fan_out) in enumerate(_layer_dims(self.config)):
            w, b = self.params.get(f"W{i}"), self.params.get(f"b{i}")
            if w is None or b is None:
                raise ShapeError(f"Classifier is missing parameters for layer {i}.")
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ShapeError(
                    f"Layer {i} has shapes W{w.shape}, b{b.shape}; the config expects "
                    f"W({fan_in}, {fan_out}), b({fan_out},)."
                )
        if self.mode not in ("train", "eval"):
            raise UsageError(f"mode must be 'train' or 'eval', got {self.mode!r}.")

    @classmethod
    def initialize(cls, config: MlpConfig) -> Classifier:
        """Seeded fan-in scaled uniform weights, zero biases."""
        rng = _streams(config.seed)["init"]
        params: dict[str, np.ndarray] = {}
        for i, (fan_in, fan_out) in enumerate(_layer_dims(config)):
            bound = 1.0 / np.sqrt(fan_in)
            params[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            params[f"b{i}"] = np.zeros(fan_out)
        return cls(config, params)

    @property
    def n_hidden(self) -> int:
        """Number of hidden layers."""
        return len(self.config.hidden_dims)

    def copy(self) -> Classifier:
        """Deep copy of the parameters."""
        return Classifier(self.config, {k: v.copy() for k, v in self.params.items()}, self.mode)

    def constant_params(self) -> dict[str, Tensor]:
        """Parameters wrapped as tensors that do not collect gradients."""
        return {k: Tensor(v) for k, v in self.params.items()}


@dataclass(frozen=True)
class ForwardOutput:
    """Result of :func:`forward` for a batch of ``B`` inputs."""

    logits: Tensor
    posteriors: Tensor
    hidden: Tensor


def _as_batch(x: Union[Tensor, np.ndarray, Sequence], input_dim: int) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"inputs must be a (B, D) batch, got shape {x.shape}.")
    if x.shape[1] != input_dim:
        raise ShapeError(f"inputs have {x.shape[1]} features; the model expects {input_dim}.")
    return x


def features(
    clf: Classifier,
    x: Union[Tensor, np.ndarray],
    *,
    dropout_active: bool = False,
    rng: np.random.Generator | None = None,
    params: Mapping[str, Tensor] | None = None,
) -> Tensor:
    """Last hidden post-activation ``z(x)`` (the inputs if there are no hidden layers).

    With dropout active the returned features are the masked values that
    feed the output layer.
    """
    p = clf.constant_params() if params is None else params
    h = _as_batch(x, clf.config.input_dim)
    drop = dropout_active and clf.config.dropout_p > 0.0
    if drop and rng is None:
        raise UsageError("dropout_active=True needs a seeded numpy Generator via rng=.")
    keep = 1.0 - clf.config.dropout_p
    for i in range(clf.n_hidden):
        h = ad.relu(ad.matmul(h, p[f"W{i}"]) + ad.repeat_rows(p[f"b{i}"], h.shape[0]))
        if drop:
            mask = (rng.random(h.shape) >= clf.config.dropout_p) / keep
            h = h * Tensor(mask)
    return h


def forward(
    clf: Classifier,
    x: Union[Tensor, np.ndarray],
    tau: float = 1.0,
    dropout_active: bool = False,
    rng: np.random.Generator | None = None,
    params: Mapping[str, Tensor] | None = None,
) -> ForwardOutput:
    """Run the classifier on a ``(B, D)`` batch.

    Args:
        clf: The classifier.
        x: Input batch, as a tensor (to differentiate with respect to the
            inputs) or an array.
        tau: Softmax temperature for :attr:`ForwardOutput.posteriors`.
        dropout_active: Apply dropout masks drawn from *rng*.  Has no
            effect (and draws nothing) when ``dropout_p == 0``.
        rng: Generator for dropout masks.
        params: Trainable parameter tensors; defaults to constants built
            from ``clf.params``.

    Returns:
        Logits, temperature-scaled posteriors and the last hidden
        activation.

    Raises:
        ShapeError: If *x* is not ``(B, input_dim)``.

    """
    p = clf.constant_params() if params is None else params
    hidden = features(clf, x, dropout_active=dropout_active, rng=rng, params=p)
    out = clf.n_hidden
    logits = ad.matmul(hidden, p[f"W{out}"]) + ad.repeat_rows(p[f"b{out}"], hidden.shape[0])
    return ForwardOutput(logits, ad.softmax_temp(logits, tau), hidden)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of a ``(B, C)`` logit batch."""
    onehot = np.eye(logits.shape[1])[labels]
    return ad.neg(ad.mean(ad.tsum(ad.log_softmax_temp(logits, 1.0) * Tensor(onehot), axis=1)))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class SGDMomentum:
    """Heavy-ball SGD with coupled L2 weight decay.

    ``v <- momentum * v + (grad + weight_decay * w)``;
    ``w <- w - lr * v``.  On the first step ``v`` is the decayed gradient.
    """

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        """Update *params* in place from *grads*."""
        for name, g in grads.items():
            d = g + self.weight_decay * params[name] if self.weight_decay else g
            if name in self.velocity and self.momentum:
                d = self.momentum * self.velocity[name] + d
            self.velocity[name] = d
            params[name] = params[name] - self.lr * d


@dataclass
class TrainResult:
    """A trained classifier with its loss history.

    Attributes:
        classifier: The trained model (eval mode).
        loss_trace: Mean mini-batch cross-entropy of every epoch.
        initial_loss: Full-data cross-entropy before the first update.
        final_loss: Full-data cross-entropy after the last update.

    """

    classifier: Classifier
    loss_trace: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")


def _check_labeled(data: Any, input_dim: int, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(data.features, dtype=np.float64)
    y = np.asarray(data.labels)
    if x.shape[0] == 0:
        raise UsageError("cannot train on an empty dataset.")
    if x.ndim != 2 or x.shape[1] != input_dim:
        raise ShapeError(f"training features have shape {x.shape}; expected (N, {input_dim}).")
    if y.shape != (x.shape[0],):
        raise ShapeError(f"labels have shape {y.shape}; expected ({x.shape[0]},).")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise UsageError(f"labels must lie in [0, {num_classes}); got [{y.min()}, {y.max()}].")
    return x, y.astype(np.int64)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _full_loss(clf: Classifier, x: np.ndarray, y: np.ndarray) -> float:
    return cross_entropy(forward(clf, x).logits, y).item()


def train(clf: Classifier, data: Any) -> TrainResult:
    """Train *clf* with mini-batch SGD and momentum for a fixed epoch budget.

    *clf* itself is left untouched; the result holds a trained copy.

    Args:
        clf: Initial classifier (see :meth:`Classifier.initialize`).
        data: A :class:`~pyoodbench.data.LabeledSet` (anything with
            ``features`` and ``labels`` arrays works).

    Returns:
        The trained classifier with its loss trace.

    Raises:
        UsageError: If *data* is empty or has labels outside ``[0, C)``.
        TrainingError: If the loss becomes non-finite; the message and
            ``epoch`` attribute name the epoch.

    """
    cfg = clf.config
    x, y = _check_labeled(data, cfg.input_dim, cfg.num_classes)
    streams = _streams(cfg.seed)
    model = clf.copy()
    model.mode = "train"
    optimizer = SGDMomentum(cfg.lr, cfg.momentum, cfg.weight_decay)
    result = TrainResult(classifier=model, initial_loss=_full_loss(model, x, y))

    for epoch in range(1, cfg.epochs + 1):
        batch_losses = []
        for idx in _batches(len(x), cfg.batch_size, streams["shuffle"]):
            try:
                params = {k: Tensor(v, requires_grad=True) for k, v in model.params.items()}
                out = forward(model, x[idx], 1.0, True, streams["dropout"], params)
                loss = cross_entropy(out.logits, y[idx])
                ad.backward(loss)
            except DomainError as exc:
                raise TrainingError(f"training diverged in epoch {epoch}: {exc}", epoch) from exc
            value = loss.item()
            grads = {k: t.grad for k, t in params.items() if t.grad is not None}
            if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(f"training diverged in epoch {epoch}: non-finite loss.", epoch)
            optimizer.step(model.params, grads)
            batch_losses.append(value)
        epoch_loss = float(np.mean(batch_losses))
        result.loss_trace.append(epoch_loss)
        logger.debug("epoch %d/%d  loss=%.6f", epoch, cfg.epochs, epoch_loss)

    if not all(np.all(np.isfinite(v)) for v in model.params.values()):
        raise TrainingError("training produced non-finite parameters.", cfg.epochs)
    model.mode = "eval"
    result.final_loss = _full_loss(model, x, y)
    return result


# ---------------------------------------------------------------------------
# DUQ
# ---------------------------------------------------------------------------


@dataclass
class DuqHead:
    """Per-class linear maps into an embedding space plus RBF centroids.

    Attributes:
        weights: ``(C, E, F)``; ``weights[c]`` maps features to class *c*'s
            embedding.
        centroids: ``(C, E)`` class centroids.
        length_scale: Kernel width ``sigma``.
        centroid_momentum: EMA factor ``gamma`` for centroid updates.
        penalty_weight: Gradient penalty coefficient ``lambda``.
        fd_epsilon: Step for the finite-difference input gradient.

    """

    weights: np.ndarray
    centroids: np.ndarray
    length_scale: float
    centroid_momentum: float = 0.999
    penalty_weight: float = 0.5
    fd_epsilon: float = 1e-3

    def __post_init__(self) -> None:
        if self.weights.ndim != 3:
            raise ShapeError(f"DUQ weights must be (C, E, F), got {self.weights.shape}.")
        c, e, _ = self.weights.shape
        if self.centroids.shape != (c, e):
            raise ShapeError(
                f"DUQ centroids have shape {self.centroids.shape}; expected ({c}, {e})."
            )
        _check_length_scale(self.length_scale)

    @property
    def num_classes(self) -> int:
        """Number of classes ``C``."""
        return self.weights.shape[0]

    @property
    def embedding_dim(self) -> int:
        """Embedding width ``E``."""
        return self.weights.shape[1]

    @property
    def feature_dim(self) -> int:
        """Feature width ``F``."""
        return self.weights.shape[2]

    def stacked_weights(self) -> np.ndarray:
        """All class maps side by side as one ``(F, C * E)`` matrix."""
        return self.weights.transpose(2, 0, 1).reshape(self.feature_dim, -1)

    def with_stacked_weights(self, stacked: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`stacked_weights`."""
        c, e, f = self.weights.shape
        return stacked.reshape(f, c, e).transpose(1, 2, 0).copy()

    def copy(self, **changes: Any) -> DuqHead:
        """Copy with array fields duplicated and *changes* applied."""
        values = {
            "weights": self.weights.copy(),
            "centroids": self.centroids.copy(),
            "length_scale": self.length_scale,
            "centroid_momentum": self.centroid_momentum,
            "penalty_weight": self.penalty_weight,
            "fd_epsilon": self.fd_epsilon,
        }
        values.update(changes)
        return DuqHead(**values)


def _check_length_scale(sigma: float) -> None:
    if not sigma > 0.0:
        raise ParameterError(f"DUQ length_scale must be positive, got {sigma!r}.")


@dataclass
class DuqModel:
    """Feature extractor (the hidden layers of a :class:`Classifier`) plus a DUQ head.

    The extractor's softmax output layer is never used or trained.
    """

    extractor: Classifier
    head: DuqHead

    @classmethod
    def initialize(cls, config: MlpConfig, duq: DuqConfig | None = None) -> DuqModel:
        """Seeded extractor and head; centroids start at zero until :func:`duq_train`."""
        duq = duq or DuqConfig()
        extractor = Classifier.initialize(config)
        f = config.feature_dim
        rng = _streams(config.seed)["head"]
        weights = rng.normal(0.0, 1.0 / np.sqrt(f), size=(config.num_classes, duq.embedding_dim, f))
        head = DuqHead(
            weights=weights,
            centroids=np.zeros((config.num_classes, duq.embedding_dim)),
            length_scale=duq.length_scale or 0.1 * float(np.sqrt(f)),
            centroid_momentum=duq.centroid_momentum,
            penalty_weight=duq.penalty_weight,
            fd_epsilon=duq.fd_epsilon,
        )
        return cls(extractor, head)

    @property
    def config(self) -> MlpConfig:
        """The extractor's configuration."""
        return self.extractor.config

    def copy(self) -> DuqModel:
        """Deep copy."""
        return DuqModel(self.extractor.copy(), self.head.copy())


def _block_sum(num_classes: int, embedding_dim: int) -> np.ndarray:
    """``(C * E, C)`` indicator that sums each class's embedding block."""
    return np.kron(np.eye(num_classes), np.ones((embedding_dim, 1)))


def _kernel(
    head: DuqHead,
    feats: Tensor,
    stacked: Tensor,
) -> Tensor:
    _check_length_scale(head.length_scale)
    if feats.shape[1] != head.feature_dim:
        raise ShapeError(
            f"features have {feats.shape[1]} columns; the DUQ head expects {head.feature_dim}."
        )
    emb = ad.matmul(feats, stacked)
    diff = emb - ad.repeat_rows(head.centroids.reshape(-1), feats.shape[0])
    dist2 = ad.matmul(diff * diff, _block_sum(head.num_classes, head.embedding_dim))
    k = ad.exp(ad.scale(dist2, -1.0 / (2.0 * head.length_scale**2)))
    # exp underflows to 0 beyond ~745 squared length scales; keep K in (0, 1].
    return ad.clip(k, np.finfo(np.float64).tiny, 1.0)


def duq_forward(head: DuqHead, feats: Union[Tensor, np.ndarray]) -> Tensor:
    """RBF kernel values ``K[b, c] = exp(-||W_c f_b - mu_c||^2 / (2 sigma^2))``.

    Raises:
        ParameterError: If the head's length scale is not positive.
        ShapeError: If the feature width does not match the head.

    """
    feats = feats if isinstance(feats, Tensor) else Tensor(feats)
    return _kernel(head, feats, Tensor(head.stacked_weights()))


def fd_input_gradient(
    fn: Callable[[Tensor], Tensor], x: np.ndarray, epsilon: float
) -> list[Tensor]:
    """Central finite-difference input gradient of a per-sample scalar function.

    Args:
        fn: Maps a ``(B, D)`` batch to a ``(B, 1)`` tensor; may depend on
            trainable tensors, which then receive gradients through the
            returned columns.
        x: ``(B, D)`` inputs.
        epsilon: Step size.

    Returns:
        ``D`` tensors of shape ``(B, 1)``; column ``i`` approximates
        ``d fn / d x_i`` with error ``O(epsilon^2)``.

    """
    if not epsilon > 0.0:
        raise ParameterError(f"fd_epsilon must be positive, got {epsilon!r}.")
    x = np.asarray(x, dtype=np.float64)
    columns = []
    for i in range(x.shape[1]):
        step = np.zeros_like(x)
        step[:, i] = epsilon
        columns.append(ad.scale(fn(Tensor(x + step)) - fn(Tensor(x - step)), 0.5 / epsilon))
    return columns


@dataclass(frozen=True)
class DuqStepResult:
    """Outcome of one DUQ optimisation step."""

    model: DuqModel
    loss: float
    bce: float
    penalty: float


def _duq_loss(
    model: DuqModel,
    params: Mapping[str, Tensor],
    stacked: Tensor,
    x: np.ndarray,
    y: np.ndarray,
) -> tuple[Tensor, Tensor, Tensor | None]:
    head = model.head

    def kernels(batch: Tensor) -> Tensor:
        return _kernel(head, features(model.extractor, batch, params=params), stacked)

    k = kernels(Tensor(x))
    onehot = Tensor(np.eye(head.num_classes)[y])
    log_k = ad.log(k)
    log_1mk = ad.log(1.0 - ad.clip(k, 0.0, 1.0 - 1e-12))
    bce = ad.neg(ad.mean(onehot * log_k + (1.0 - onehot) * log_1mk))
    if head.penalty_weight == 0.0:
        return bce, bce, None

    def kernel_sum(batch: Tensor) -> Tensor:
        return ad.tsum(kernels(batch), axis=1, keepdims=True)

    columns = fd_input_gradient(kernel_sum, x, head.fd_epsilon)
    sq_norm = columns[0] * columns[0]
    for col in columns[1:]:
        sq_norm = sq_norm + col * col
    gap = sq_norm - 1.0
    penalty = ad.mean(gap * gap)
    return bce + ad.scale(penalty, head.penalty_weight), bce, penalty


def _embeddings(model: DuqModel, x: np.ndarray) -> np.ndarray:
    """``(B, C, E)`` class embeddings with the current parameters."""
    feats = features(model.extractor, x).data
    return np.einsum("cef,bf->bce", model.head.weights, feats)


def duq_train_step(
    model: DuqModel,
    x: np.ndarray,
    y: np.ndarray,
    optimizer: SGDMomentum | None = None,
) -> DuqStepResult:
    """One DUQ update: gradient step on BCE + penalty, then centroid EMA.

    The loss is the mean binary cross-entropy between the kernel values
    and one-hot labels plus ``lambda * mean((||g(x)||^2 - 1)^2)``, where
    ``g(x)`` is the finite-difference input gradient of ``sum_c K_c(x)``.
    After the parameter update every class present in the batch moves its
    centroid to ``gamma * mu_c + (1 - gamma) * mean(W_c f(x))`` over that
    class's samples; absent classes keep their centroid.

    Args:
        model: Current model (not mutated).
        x: ``(B, D)`` batch.
        y: ``(B,)`` integer labels.
        optimizer: Carries momentum state across steps; a fresh plain SGD
            step with the extractor's settings is used when omitted.

    Returns:
        The updated model and the loss components before the update.

    """
    cfg = model.config
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    optimizer = optimizer or SGDMomentum(cfg.lr, cfg.momentum, cfg.weight_decay)
    new = model.copy()

    trainable = {
        k: Tensor(v, requires_grad=True)
        for k, v in new.extractor.params.items()
        if int(k[1:]) < new.extractor.n_hidden
    }
    params = {**new.extractor.constant_params(), **trainable}
    stacked = Tensor(new.head.stacked_weights(), requires_grad=True)
    loss, bce, penalty = _duq_loss(new, params, stacked, x, y)
    ad.backward(loss)

    state = {**{k: new.extractor.params[k] for k in trainable}, "duq.W": stacked.data.copy()}
    grads = {k: t.grad for k, t in trainable.items() if t.grad is not None}
    grads["duq.W"] = stacked.grad
    optimizer.step(state, grads)
    for k in trainable:
        new.extractor.params[k] = state[k]
    new.head.weights = new.head.with_stacked_weights(state["duq.W"])

    gamma = new.head.centroid_momentum
    emb = _embeddings(new, x)
    for c in range(new.head.num_classes):
        members = y == c
        if members.any():
            batch_mean = emb[members, c, :].mean(axis=0)
            new.head.centroids[c] = gamma * new.head.centroids[c] + (1.0 - gamma) * batch_mean

    return DuqStepResult(
        model=new,
        loss=loss.item(),
        bce=bce.item(),
        penalty=0.0 if penalty is None else penalty.item(),
    )


def duq_train(model: DuqModel, data: Any, epochs: int | None = None) -> tuple[DuqModel, list[float]]:
    """Train a DUQ model; centroids start at the class means of the initial embeddings.

    Returns:
        The trained model and the mean step loss of every epoch.

    Raises:
        UsageError: On empty data, out-of-range labels, or a class with no
            training samples.
        TrainingError: If the loss becomes non-finite.

    """
    cfg = model.config
    x, y = _check_labeled(data, cfg.input_dim, cfg.num_classes)
    missing = sorted(set(range(cfg.num_classes)) - set(np.unique(y).tolist()))
    if missing:
        raise UsageError(f"DUQ training needs samples of every class; missing {missing}.")
    streams = _streams(cfg.seed)
    current = model.copy()
    emb = _embeddings(current, x)
    for c in range(cfg.num_classes):
        current.head.centroids[c] = emb[y == c, c, :].mean(axis=0)

    optimizer = SGDMomentum(cfg.lr, cfg.momentum, cfg.weight_decay)
    trace: list[float] = []
    for epoch in range(1, (epochs or cfg.epochs) + 1):
        losses = []
        for idx in _batches(len(x), cfg.batch_size, streams["shuffle"]):
            try:
                step = duq_train_step(current, x[idx], y[idx], optimizer)
            except DomainError as exc:
                raise TrainingError(f"DUQ training diverged in epoch {epoch}: {exc}", epoch) from exc
            if not np.isfinite(step.loss):
                raise TrainingError(f"DUQ training diverged in epoch {epoch}.", epoch)
            current = step.model
            losses.append(step.loss)
        trace.append(float(np.mean(losses)))
        logger.debug("DUQ epoch %d  loss=%.6f", epoch, trace[-1])
    return current, trace


def duq_score(model: DuqModel, x: Union[Tensor, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Closest-centroid kernel value and the class it belongs to.

    Returns:
        ``(id_score, prediction)``: ``max_c K_c(x)`` in ``(0, 1]`` and
        ``argmax_c K_c(x)`` for every row of *x*.

    """
    k = duq_forward(model.head, features(model.extractor, x)).data
    return k.max(axis=1), k.argmax(axis=1)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: Union[Classifier, DuqModel], path: Union[str, Path]) -> Path:
    """Write *model* to a single self-describing ``.npz`` file.

    The archive holds every parameter array (``param.<name>``; DUQ adds
    ``duq.weights`` and ``duq.centroids``) and a JSON ``header`` entry with
    the format tag, format version, model kind, config and DUQ
    hyperparameters.  Loading restores bit-identical arrays.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    clf = model.extractor if isinstance(model, DuqModel) else model
    header: dict[str, Any] = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "kind": "duq" if isinstance(model, DuqModel) else "mlp",
        "config": clf.config.to_dict(),
        "seed": clf.config.seed,
    }
    arrays = {f"param.{k}": v for k, v in clf.params.items()}
    if isinstance(model, DuqModel):
        header["duq"] = {
            "length_scale": model.head.length_scale,
            "centroid_momentum": model.head.centroid_momentum,
            "penalty_weight": model.head.penalty_weight,
            "fd_epsilon": model.head.fd_epsilon,
        }
        arrays["duq.weights"] = model.head.weights
        arrays["duq.centroids"] = model.head.centroids
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path: Union[str, Path]) -> Union[Classifier, DuqModel]:
    """Read a file written by :func:`save_checkpoint`.

    Raises:
        UsageError: If the file is not a pyoodbench checkpoint or has an
            unsupported format version.

    """
    with np.load(Path(path), allow_pickle=False) as archive:
        if "header" not in archive.files:
            raise UsageError(f"{path} is not a pyoodbench checkpoint (no header entry).")
        header = json.loads(str(archive["header"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise UsageError(f"{path} is not a pyoodbench checkpoint.")
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise UsageError(
                f"{path} uses checkpoint format version {header.get('format_version')}; "
                f"this pyoodbench reads version {CHECKPOINT_VERSION}."
            )
        params = {k[len("param.") :]: archive[k] for k in archive.files if k.startswith("param.")}
        clf = Classifier(MlpConfig.from_dict(header["config"]), params)
        if header["kind"] == "mlp":
            return clf
        head = DuqHead(
            weights=archive["duq.weights"],
            centroids=archive["duq.centroids"],
            **header["duq"],
        )
        return DuqModel(clf, head)
