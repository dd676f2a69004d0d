"""Bayesian softmax classification with Hamiltonian and stochastic
gradient samplers, dropout-masked variants, and posterior-predictive
uncertainty reports."""

from .data import (
    BatchPlan,
    Dataset,
    load_feature_table,
    load_idx_dataset,
    load_idx_images,
    load_idx_labels,
    make_batches,
    whiten_batch,
    whiten_dataset,
)
from .model import (
    Batch,
    DropMask,
    LabeledExample,
    Momentum,
    PriorConfig,
    Theta,
    apply_dropconnect,
    apply_dropout,
    batch_class_probs,
    grad_stochastic_energy,
    log_likelihood,
    potential_energy,
    sample_mask,
    softmax_probs,
    stochastic_energy,
)
from .predict import (
    ChainAggregate,
    EvalReport,
    PredictiveDistribution,
    aggregate_chains,
    evaluate,
    per_example_report,
    predictive_distribution,
    predictive_entropy,
    sensitivity_sweep,
)
from .samplers import (
    ChainConfig,
    ChainDivergence,
    ChainMeta,
    HmcConfig,
    PosteriorSamples,
    SgConfig,
    dsghmc_step,
    hmc_step,
    hmc_update,
    langevin_update,
    leapfrog,
    run_chain,
    run_chains,
    sghmc_step,
    sghmc_update,
    sgld_step,
)

__version__ = "0.1.0"
