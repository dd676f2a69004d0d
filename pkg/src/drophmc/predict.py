"""Posterior-predictive distributions and evaluation artifacts.

Turns stored parameter draws into Monte Carlo class-probability estimates
and the derived reports: accuracy totals, per-class accuracy, confusion
matrices, predictive entropy, per-example records, multi-chain aggregates
and keep-probability sensitivity sweeps.

Feature preprocessing is the caller's job: hand these functions a test
dataset that went through the same whitening rule as the training batches
(see ``data.whiten_dataset``).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .data import Dataset
from .model import PriorConfig, batch_class_probs
from .samplers import (
    ChainConfig,
    ChainDivergence,
    PosteriorSamples,
    SgConfig,
    run_chains,
)


@dataclass(frozen=True)
class PredictiveDistribution:
    """Per-example mean (and spread) of class probabilities over S draws."""

    mean_probs: np.ndarray  # (N, K)
    std_probs: np.ndarray   # (N, K), population std across draws
    draw_count: int

    def __len__(self) -> int:
        return self.mean_probs.shape[0]


@dataclass(frozen=True)
class EvalReport:
    """Evaluation of one predictive distribution against true labels.

    ``confusion`` is the row-normalized count matrix (row = true class);
    ``prob_by_true_class`` averages the predicted probability vectors within
    each true class, the soft analogue of the confusion matrix. Classes
    absent from the test set get NaN accuracy and an all-zero row.
    """

    total_accuracy: float
    per_class_accuracy: np.ndarray       # (K,)
    confusion: np.ndarray                # (K, K)
    prob_by_true_class: np.ndarray       # (K, K)
    mean_entropy: float
    true_labels: np.ndarray              # (N,)
    predicted_labels: np.ndarray         # (N,)
    probs: np.ndarray                    # (N, K) mean predictive probabilities
    entropies: np.ndarray                # (N,) in nats

    @property
    def correct(self) -> np.ndarray:
        return self.predicted_labels == self.true_labels

    @property
    def max_probs(self) -> np.ndarray:
        return self.probs.max(axis=1)


@dataclass(frozen=True)
class ChainAggregate:
    """Mean and population spread of total accuracy across chains."""

    accuracies: tuple[float, ...]
    mean: float
    std: float

    @property
    def chain_count(self) -> int:
        return len(self.accuracies)


@dataclass(frozen=True)
class SweepPoint:
    """One keep-probability setting of a sensitivity sweep."""

    keep_prob: float
    mean_accuracy: float
    std: float
    chain_count: int
    error: str | None = None


@dataclass(frozen=True)
class ExampleRow:
    """Per-example probability record for bar-plot style inspection."""

    index: int
    true_label: int
    probs: np.ndarray
    draw_count: int
    std: np.ndarray


def predictive_distribution(samples: PosteriorSamples, draws: int,
                            test: Dataset) -> PredictiveDistribution:
    """Average softmax outputs of the last ``draws`` retained parameters.

    No dropout masks are applied here: predictive spread comes from the
    posterior draws themselves.
    """
    if draws < 1:
        raise ValueError("draws must be at least 1")
    if draws > len(samples):
        raise ValueError(
            f"requested {draws} draws but only {len(samples)} are stored"
        )
    if test.feature_count != samples.meta.feature_count:
        raise ValueError("test features do not match the sampled model")
    if test.class_count != samples.meta.class_count:
        raise ValueError("test class count does not match the sampled model")

    total = np.zeros((len(test), test.class_count))
    total_sq = np.zeros_like(total)
    for i in range(len(samples) - draws, len(samples)):
        probs = batch_class_probs(samples.theta_at(i), test.features)
        total += probs
        total_sq += probs * probs
    mean = total / draws
    var = np.maximum(total_sq / draws - mean * mean, 0.0)
    return PredictiveDistribution(mean, np.sqrt(var), draws)


def predictive_entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats of each probability row, with 0 log 0 = 0."""
    return -xlogy(probs, probs).sum(axis=1)


def evaluate(pred: PredictiveDistribution, test: Dataset) -> EvalReport:
    """Score a predictive distribution; argmax ties go to the lowest class."""
    if len(pred) != len(test):
        raise ValueError("prediction and test set sizes differ")
    K = test.class_count
    mean = pred.mean_probs
    predicted = mean.argmax(axis=1)
    correct = predicted == test.labels

    confusion = np.zeros((K, K))
    prob_by_class = np.zeros((K, K))
    per_class = np.full(K, np.nan)
    for k in range(K):
        members = test.labels == k
        count = int(members.sum())
        if count == 0:
            continue
        confusion[k] = np.bincount(predicted[members], minlength=K) / count
        prob_by_class[k] = mean[members].mean(axis=0)
        per_class[k] = correct[members].mean()

    entropies = predictive_entropy(mean)
    return EvalReport(
        total_accuracy=float(correct.mean()),
        per_class_accuracy=per_class,
        confusion=confusion,
        prob_by_true_class=prob_by_class,
        mean_entropy=float(entropies.mean()),
        true_labels=test.labels.copy(),
        predicted_labels=predicted,
        probs=mean,
        entropies=entropies,
    )


def aggregate_chains(reports: list[EvalReport]) -> ChainAggregate:
    """Mean and population std of total accuracy over per-chain reports.

    Uses exactly rounded summation, so the result does not depend on the
    order the reports are passed in.
    """
    if not reports:
        raise ValueError("need at least one report")
    acc = [r.total_accuracy for r in reports]
    if min(acc) == max(acc):  # exact zero spread for identical accuracies
        return ChainAggregate(tuple(acc), acc[0], 0.0)
    mean = math.fsum(acc) / len(acc)
    var = math.fsum((a - mean) ** 2 for a in acc) / len(acc)
    return ChainAggregate(tuple(acc), mean, math.sqrt(var))


def per_example_report(pred: PredictiveDistribution, test: Dataset,
                       indices) -> list[ExampleRow]:
    """Probability rows (with across-draw spread) for selected test examples."""
    rows = []
    for idx in indices:
        idx = int(idx)
        if not 0 <= idx < len(test):
            raise IndexError(f"example index {idx} out of range")
        rows.append(ExampleRow(
            index=idx,
            true_label=int(test.labels[idx]),
            probs=pred.mean_probs[idx].copy(),
            draw_count=pred.draw_count,
            std=pred.std_probs[idx].copy(),
        ))
    return rows


def sensitivity_sweep(train: Dataset, test: Dataset, template: SgConfig,
                      prior: PriorConfig, chain_template: ChainConfig,
                      keep_probs, chains_per_point: int, draws: int,
                      jobs: int = 1, whiten: bool = True) -> list[SweepPoint]:
    """Accuracy of the masked sampler across a grid of keep probabilities.

    Each grid point runs ``chains_per_point`` dropout-SGHMC chains (seeded
    from the chain template's seed plus a per-point offset, so the whole
    sweep is reproducible) and aggregates their test accuracy. A diverged
    point is recorded with its error and the sweep continues.
    """
    points = []
    for j, q in enumerate(keep_probs):
        if not 0.0 < q <= 1.0:
            raise ValueError(f"keep_prob {q} outside (0, 1]")
        cfg = dataclasses.replace(template, keep_prob=float(q))
        chain_cfg = dataclasses.replace(
            chain_template, seed=chain_template.seed + j * chains_per_point
        )
        try:
            chains = run_chains("dsghmc", train, cfg, prior, chain_cfg,
                                chains_per_point, jobs=jobs, whiten=whiten)
            reports = [
                evaluate(predictive_distribution(c, draws, test), test)
                for c in chains
            ]
            agg = aggregate_chains(reports)
            points.append(SweepPoint(float(q), agg.mean, agg.std,
                                     chains_per_point))
        except ChainDivergence as exc:
            points.append(SweepPoint(float(q), float("nan"), float("nan"),
                                     chains_per_point, error=str(exc)))
    return points
