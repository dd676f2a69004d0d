"""Bayesian softmax classification model.

Defines the parameter container, the categorical likelihood with a Gaussian
prior, full-data and mini-batch (rescaled) energies, their analytic
gradients, and the dropout / dropconnect input transforms.

All functions are pure: randomness enters only through an explicitly passed
``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp


@dataclass(frozen=True)
class Theta:
    """Softmax classifier parameters: a (K, D) weight matrix and K biases."""

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.biases, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError(f"weights must be 2-D (K, D), got shape {w.shape}")
        if b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise ValueError(
                f"biases must have length K={w.shape[0]}, got shape {b.shape}"
            )
        if w.shape[0] < 2:
            raise ValueError("need at least 2 classes")
        if w.shape[1] < 1:
            raise ValueError("need at least 1 feature")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValueError("non-finite entry in parameters")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    @property
    def class_count(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_count(self) -> int:
        return self.weights.shape[1]

    @property
    def size(self) -> int:
        """Total parameter count K*D + K."""
        return self.weights.size + self.biases.size

    @property
    def flat(self) -> np.ndarray:
        """Row-major flattening, weights first then biases."""
        return np.concatenate([self.weights.ravel(), self.biases])

    @classmethod
    def zeros(cls, class_count: int, feature_count: int) -> "Theta":
        return cls(
            np.zeros((class_count, feature_count)), np.zeros(class_count)
        )

    @classmethod
    def from_flat(cls, vec: np.ndarray, class_count: int, feature_count: int) -> "Theta":
        vec = np.asarray(vec, dtype=np.float64)
        expected = class_count * feature_count + class_count
        if vec.shape != (expected,):
            raise ValueError(f"expected flat vector of length {expected}, got {vec.shape}")
        split = class_count * feature_count
        return cls(
            vec[:split].reshape(class_count, feature_count).copy(),
            vec[split:].copy(),
        )


@dataclass(frozen=True)
class Momentum:
    """Auxiliary momentum, same shape as its Theta, with a diagonal mass.

    ``mass`` is either a positive scalar (isotropic) or a positive vector of
    length K*D + K matching the flattened parameter order.
    """

    weights: np.ndarray
    biases: np.ndarray
    mass: float | np.ndarray = 1.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.biases, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise ValueError("momentum shape must match a (K, D) / (K,) parameter pair")
        m = np.asarray(self.mass, dtype=np.float64)
        if m.ndim not in (0, 1):
            raise ValueError("mass must be a scalar or a diagonal vector")
        if m.ndim == 1 and m.shape[0] != w.size + b.size:
            raise ValueError(f"diagonal mass must have length {w.size + b.size}")
        if not (m > 0).all():
            raise ValueError("mass entries must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)
        object.__setattr__(self, "mass", m if m.ndim else float(m))

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.biases])

    @classmethod
    def sample(cls, class_count: int, feature_count: int,
               mass: float | np.ndarray, rng: np.random.Generator) -> "Momentum":
        """Draw r ~ N(0, M) in flat order (weight block, then bias block)."""
        split = class_count * feature_count
        vec = rng.standard_normal(split + class_count) * np.sqrt(
            np.asarray(mass, dtype=np.float64)
        )
        return cls(vec[:split].reshape(class_count, feature_count), vec[split:], mass)


@dataclass(frozen=True)
class LabeledExample:
    """One (feature vector, class label) pair."""

    features: np.ndarray
    label: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("features must be a 1-D vector")
        if self.label < 0:
            raise ValueError("label must be non-negative")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "label", int(self.label))


class Batch:
    """A mini-batch plus the full-dataset size used for gradient rescaling.

    Stores the examples as an (n, D) feature matrix and an (n,) label vector;
    ``dataset_size`` is the N of the dataset the batch was drawn from, so the
    likelihood term can be scaled by N/n.
    """

    __slots__ = ("features", "labels", "dataset_size")

    def __init__(self, features: np.ndarray, labels: np.ndarray, dataset_size: int):
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels)
        if features.ndim != 2 or features.shape[0] == 0:
            raise ValueError("batch features must be a non-empty (n, D) matrix")
        if labels.shape != (features.shape[0],):
            raise ValueError("labels must be a vector matching the batch size")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("labels must be integers")
        if (labels < 0).any():
            raise ValueError("labels must be non-negative")
        if dataset_size < features.shape[0]:
            raise ValueError("dataset_size smaller than the batch itself")
        self.features = features
        self.labels = labels
        self.dataset_size = int(dataset_size)

    @classmethod
    def from_examples(cls, examples: list[LabeledExample], dataset_size: int) -> "Batch":
        if not examples:
            raise ValueError("batch must be non-empty")
        lengths = {e.features.shape[0] for e in examples}
        if len(lengths) != 1:
            raise ValueError("all examples in a batch must share one feature length")
        return cls(
            np.stack([e.features for e in examples]),
            np.array([e.label for e in examples], dtype=np.int64),
            dataset_size,
        )

    @property
    def examples(self) -> list[LabeledExample]:
        return [LabeledExample(self.features[i], int(self.labels[i]))
                for i in range(len(self))]

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class PriorConfig:
    """Scale of the zero-mean Gaussian prior over all parameters.

    Named ``variance`` (not the ambient symbol) to keep it distinct from the
    friction constant used by the stochastic samplers.
    """

    variance: float = 1.0

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("prior variance must be positive")


@dataclass(frozen=True)
class DropMask:
    """Binary mask with its keep probability.

    Length D masks apply to inputs (dropout); length K*D masks apply to the
    weight matrix (dropconnect).
    """

    mask: np.ndarray
    keep_prob: float

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=np.float64)
        if m.ndim != 1:
            raise ValueError("mask must be a 1-D vector")
        if not np.isin(m, (0.0, 1.0)).all():
            raise ValueError("mask entries must be 0 or 1")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError("keep_prob must be in (0, 1]")
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "keep_prob", float(self.keep_prob))

    def __len__(self) -> int:
        return self.mask.shape[0]


def _logits(theta: Theta, features: np.ndarray) -> np.ndarray:
    return features @ theta.weights.T + theta.biases


def batch_class_probs(theta: Theta, features: np.ndarray) -> np.ndarray:
    """Softmax class probabilities for an (n, D) feature matrix -> (n, K).

    Computed with per-row max-logit subtraction so large logits cannot
    overflow.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != theta.feature_count:
        raise ValueError(
            f"features must be (n, {theta.feature_count}), got {features.shape}"
        )
    z = _logits(theta, features)
    z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def softmax_probs(theta: Theta, x: np.ndarray) -> np.ndarray:
    """Class-probability vector for one feature vector (length K)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != theta.feature_count:
        raise ValueError(f"x must have length {theta.feature_count}, got {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("non-finite entry in x")
    return batch_class_probs(theta, x[None, :])[0]


def log_likelihood(theta: Theta, example: LabeledExample) -> float:
    """log p(y | x, theta), evaluated via log-sum-exp."""
    if example.label >= theta.class_count:
        raise ValueError(
            f"label {example.label} out of range for K={theta.class_count}"
        )
    if example.features.shape[0] != theta.feature_count:
        raise ValueError("feature length does not match theta")
    z = _logits(theta, example.features[None, :])[0]
    return float(z[example.label] - logsumexp(z))


def _sum_log_likelihood(theta: Theta, features: np.ndarray, labels: np.ndarray) -> float:
    z = _logits(theta, features)
    picked = z[np.arange(z.shape[0]), labels]
    return float(picked.sum() - logsumexp(z, axis=1).sum())


def _log_prior(theta: Theta, prior: PriorConfig) -> float:
    # Additive normalization constants are dropped throughout.
    quad = float(np.dot(theta.flat, theta.flat))
    return -quad / (2.0 * prior.variance)


def potential_energy(theta: Theta, dataset, prior: PriorConfig) -> float:
    """Negative log posterior (up to constants) over a full dataset.

    ``dataset`` is anything with an (N, D) ``features`` matrix and an (N,)
    integer ``labels`` vector.
    """
    features = np.asarray(dataset.features, dtype=np.float64)
    labels = np.asarray(dataset.labels)
    if features.shape[0] == 0:
        raise ValueError("dataset is empty")
    if labels.max() >= theta.class_count:
        raise ValueError("label out of range for theta")
    return -_sum_log_likelihood(theta, features, labels) - _log_prior(theta, prior)


def _resolve_mask(batch: Batch, mask: DropMask | None, class_count: int,
                  feature_count: int):
    """Resolve a mask against a batch.

    Returns (features, weight_scale): length-D masks transform the features,
    length-K*D masks become the (K, D) chain-rule factor mask/keep_prob
    applied to the weights.
    """
    if mask is None:
        return batch.features, None
    if len(mask) == feature_count:
        return apply_dropout_matrix(batch.features, mask), None
    if len(mask) == class_count * feature_count:
        scale = mask.mask.reshape(class_count, feature_count) / mask.keep_prob
        return batch.features, scale
    raise ValueError(
        f"mask length {len(mask)} matches neither D={feature_count} "
        f"nor K*D={class_count * feature_count}"
    )


def _energy_arrays(weights, biases, features, labels, scale, prior_variance,
                   weight_scale=None) -> float:
    """Rescaled negative log posterior from raw arrays; no validation."""
    eff = weights if weight_scale is None else weights * weight_scale
    z = features @ eff.T + biases
    picked = z[np.arange(z.shape[0]), labels]
    log_lik = picked.sum() - logsumexp(z, axis=1).sum()
    quad = np.dot(weights.ravel(), weights.ravel()) + np.dot(biases, biases)
    return float(-scale * log_lik + quad / (2.0 * prior_variance))


def _grad_arrays(weights, biases, features, labels, scale, prior_variance,
                 weight_scale=None):
    """Gradient of ``_energy_arrays`` w.r.t. (weights, biases); no validation."""
    eff = weights if weight_scale is None else weights * weight_scale
    z = features @ eff.T + biases
    z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    z[np.arange(z.shape[0]), labels] -= 1.0

    grad_w = scale * (z.T @ features)
    if weight_scale is not None:
        grad_w *= weight_scale  # chain rule through the dropconnect transform
    grad_w += weights / prior_variance
    grad_b = scale * z.sum(axis=0) + biases / prior_variance
    return grad_w, grad_b


def _check_batch(theta: Theta, batch: Batch):
    if batch.labels.max() >= theta.class_count:
        raise ValueError("label out of range for theta")
    if batch.features.shape[1] != theta.feature_count:
        raise ValueError("batch feature length does not match theta")


def stochastic_energy(theta: Theta, batch: Batch, prior: PriorConfig,
                      mask: DropMask | None = None) -> float:
    """Mini-batch estimate of the potential energy.

    The batch log likelihood is rescaled by N/n; if ``mask`` is given the
    batch inputs (length-D mask) or the weights (length-K*D mask) are
    dropout-transformed first. The prior always acts on the raw parameters.
    """
    _check_batch(theta, batch)
    features, weight_scale = _resolve_mask(batch, mask, theta.class_count,
                                           theta.feature_count)
    scale = batch.dataset_size / len(batch)
    return _energy_arrays(theta.weights, theta.biases, features, batch.labels,
                          scale, prior.variance, weight_scale)


def grad_stochastic_energy(theta: Theta, batch: Batch, prior: PriorConfig,
                           mask: DropMask | None = None) -> Theta:
    """Analytic gradient of ``stochastic_energy`` with respect to theta.

    Returned as a Theta-shaped container (it is not a parameter vector, just
    the same (K, D) / (K,) layout).
    """
    _check_batch(theta, batch)
    features, weight_scale = _resolve_mask(batch, mask, theta.class_count,
                                           theta.feature_count)
    scale = batch.dataset_size / len(batch)
    grad_w, grad_b = _grad_arrays(theta.weights, theta.biases, features,
                                  batch.labels, scale, prior.variance,
                                  weight_scale)
    return Theta(grad_w, grad_b)


def sample_mask(length: int, keep_prob: float, rng: np.random.Generator) -> DropMask:
    """Draw a Bernoulli(keep_prob) mask of the given length.

    keep_prob == 1 returns the all-ones mask without consuming generator
    state, so a degenerate-dropout chain is bit-identical to its undropped
    counterpart.
    """
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError("keep_prob must be in (0, 1]")
    if keep_prob == 1.0:
        return DropMask(np.ones(length), 1.0)
    bits = (rng.random(length) < keep_prob).astype(np.float64)
    return DropMask(bits, keep_prob)


def apply_dropout(x: np.ndarray, mask: DropMask) -> np.ndarray:
    """Mask a feature vector and rescale survivors by 1/keep_prob.

    The rescaling makes the transform unbiased: E[output] = x.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != mask.mask.shape:
        raise ValueError(f"mask length {len(mask)} does not match x {x.shape}")
    return x * (mask.mask / mask.keep_prob)


def apply_dropout_matrix(features: np.ndarray, mask: DropMask) -> np.ndarray:
    """Apply one input mask to every row of an (n, D) feature matrix."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != len(mask):
        raise ValueError("mask length does not match feature columns")
    return features * (mask.mask / mask.keep_prob)


def apply_dropconnect(theta: Theta, mask: DropMask) -> Theta:
    """Mask the weight matrix entrywise (row-major mask of length K*D).

    Surviving weights are rescaled by 1/keep_prob; biases pass through.
    """
    K, D = theta.class_count, theta.feature_count
    if len(mask) != K * D:
        raise ValueError(f"dropconnect mask must have length K*D={K * D}")
    scaled = theta.weights * (mask.mask.reshape(K, D) / mask.keep_prob)
    return Theta(scaled, theta.biases)
