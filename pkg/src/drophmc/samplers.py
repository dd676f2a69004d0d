"""Sampling algorithms and the chain runner.

Four samplers are provided:

* ``hmc``    -- full-data Hamiltonian Monte Carlo with leapfrog integration
  and a Metropolis accept/reject step.
* ``sgld``   -- stochastic gradient Langevin dynamics on mini-batches.
* ``sghmc``  -- stochastic gradient Hamiltonian Monte Carlo with friction
  and calibrated injected noise.
* ``dsghmc`` -- SGHMC where every iteration draws a Bernoulli mask, applies
  inverted-dropout scaling to the mini-batch inputs (or to the weights), and
  runs a block of inner updates against the masked energy.

The low-level kernels (:func:`leapfrog`, :func:`hmc_update`,
:func:`langevin_update`, :func:`sghmc_update`) operate on flat float arrays
and a gradient callable, so they can be pointed at any target; the
``*_step`` functions bind them to the softmax model, and :func:`run_chain`
drives a whole chain with seeded, reproducible randomness.

Velocity vectors for the momentum-based samplers use the same flat layout
as ``Theta.flat`` (weights row-major, then biases).
"""

from __future__ import annotations

import math
import multiprocessing
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Callable, Literal

import numpy as np

from .data import Dataset, make_batches, iter_batches, whiten_batch
from .model import (
    Batch,
    DropMask,
    Momentum,
    PriorConfig,
    Theta,
    sample_mask,
    _energy_arrays,
    _grad_arrays,
    _resolve_mask,
)

ALGORITHMS = ("hmc", "sgld", "sghmc", "dsghmc")


class ChainDivergence(RuntimeError):
    """A trajectory or chain produced a non-finite state.

    When raised by :func:`run_chain`, ``partial`` holds the samples collected
    before the blow-up, with ``meta.diverged`` set so they are never mistaken
    for a valid posterior.
    """

    def __init__(self, message: str, partial: "PosteriorSamples | None" = None,
                 iteration: int | None = None):
        super().__init__(message)
        self.partial = partial
        self.iteration = iteration


@dataclass(frozen=True)
class HmcConfig:
    """Settings for the Metropolis-corrected full-data sampler."""

    step_size: float
    leapfrog_steps: int
    mass: float | np.ndarray = 1.0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.leapfrog_steps < 1:
            raise ValueError("leapfrog_steps must be at least 1")
        m = np.asarray(self.mass)
        if not (m > 0).all():
            raise ValueError("mass entries must be positive")


@dataclass(frozen=True)
class SgConfig:
    """Settings shared by the stochastic gradient samplers.

    ``friction`` and ``noise_discount`` control the velocity update
    ``v' = (1 - friction) v - step_size * grad + noise`` with noise variance
    ``2 * (friction - noise_discount) * step_size``; that variance must be
    positive. ``keep_prob`` and ``mask_target`` only matter for ``dsghmc``.

    ``step_decay`` is the exponent g of the per-iteration step schedule
    ``eps_t = step_size / (t + 1)^g`` applied by the chain runner; unset or
    0 keeps the step constant. Langevin chains are often annealed with
    g = 0.55; note that shrinking steps freeze the chain near a mode, so
    the late draws under-represent posterior spread.
    """

    step_size: float
    friction: float = 1.0
    noise_discount: float = 0.0
    inner_steps: int = 1
    batch_size: int = 100
    keep_prob: float | None = None
    mask_target: Literal["inputs", "weights", "none"] = "none"
    step_decay: float | None = None

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not 0.0 < self.friction <= 1.0:
            raise ValueError("friction must be in (0, 1]")
        if not 0.0 <= self.noise_discount < self.friction:
            raise ValueError("need 0 <= noise_discount < friction")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.keep_prob is not None and not 0.0 < self.keep_prob <= 1.0:
            raise ValueError("keep_prob must be in (0, 1]")
        if self.mask_target not in ("inputs", "weights", "none"):
            raise ValueError("mask_target must be inputs, weights or none")
        if self.step_decay is not None and self.step_decay < 0.0:
            raise ValueError("step_decay must be non-negative")


@dataclass(frozen=True)
class ChainConfig:
    """Chain length, warmup and reproducibility settings.

    A chain runs ``epochs * batches_per_epoch + warmup`` iterations; the
    first ``warmup`` are discarded and one draw per ``thinning`` iterations
    is retained afterwards. ``keep_last`` bounds how many retained draws stay
    in memory (oldest evicted first); None keeps everything.
    """

    warmup: int
    epochs: int
    seed: int
    thinning: int = 1
    keep_last: int | None = None

    def __post_init__(self):
        if self.warmup < 0:
            raise ValueError("warmup must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.thinning < 1:
            raise ValueError("thinning must be at least 1")
        if self.keep_last is not None and self.keep_last < 1:
            raise ValueError("keep_last must be at least 1 when set")


@dataclass
class ChainMeta:
    """Provenance and health record carried with every sample set."""

    algorithm: str
    class_count: int
    feature_count: int
    seed: int
    prior_variance: float
    sampler: dict
    chain: dict
    dataset_name: str = ""
    whiten: bool = True
    iterations_run: int = 0
    warmup: int = 0
    retained_count: int = 0
    stored_count: int = 0
    accepted: int | None = None
    proposals: int | None = None
    diverged: bool = False
    diverged_at: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ChainMeta":
        return cls(**d)


class PosteriorSamples:
    """Ordered post-warmup parameter draws from one chain.

    ``draws`` is an (S, K*D + K) array of flattened parameters;
    ``draw_indices`` gives the chain iteration each row was recorded at.
    """

    def __init__(self, draws: np.ndarray, draw_indices: np.ndarray, meta: ChainMeta):
        draws = np.asarray(draws, dtype=np.float64)
        if draws.ndim != 2:
            raise ValueError("draws must be a 2-D (S, dim) array")
        dim = meta.class_count * meta.feature_count + meta.class_count
        if draws.shape[0] and draws.shape[1] != dim:
            raise ValueError(f"draw width {draws.shape[1]} != K*D+K = {dim}")
        if draw_indices.shape != (draws.shape[0],):
            raise ValueError("draw_indices must match the number of draws")
        self.draws = draws
        self.draw_indices = np.asarray(draw_indices, dtype=np.int64)
        self.meta = meta

    def __len__(self) -> int:
        return self.draws.shape[0]

    def theta_at(self, i: int) -> Theta:
        return Theta.from_flat(self.draws[i], self.meta.class_count,
                               self.meta.feature_count)

    def thetas(self) -> list[Theta]:
        return [self.theta_at(i) for i in range(len(self))]


def _inverse_mass(mass) -> float | np.ndarray:
    m = np.asarray(mass, dtype=np.float64)
    return 1.0 / (m if m.ndim else float(m))


def kinetic_energy(momentum: np.ndarray, mass: float | np.ndarray = 1.0) -> float:
    """Quadratic form r^T M^-1 r / 2 for a diagonal (or scalar) mass."""
    momentum = np.asarray(momentum, dtype=np.float64)
    return 0.5 * float(np.dot(momentum, _inverse_mass(mass) * momentum))


def leapfrog(position: np.ndarray, momentum: np.ndarray, step_size: float,
             steps: int, grad: Callable[[np.ndarray], np.ndarray],
             mass: float | np.ndarray = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Integrate Hamiltonian dynamics: half kick, drift, half kick, repeated.

    Adjacent half kicks are merged, so ``steps`` steps cost ``steps + 1``
    gradient evaluations. Raises :class:`ChainDivergence` if the final state
    is non-finite.
    """
    if not step_size > 0:
        raise ValueError("step_size must be positive")
    if steps < 1:
        raise ValueError("steps must be at least 1")
    inv_mass = _inverse_mass(mass)
    pos = np.asarray(position, dtype=np.float64).copy()
    mom = np.asarray(momentum, dtype=np.float64).copy()

    # Overflow here is not an error condition: it is detected below and
    # reported as a divergence.
    with np.errstate(over="ignore", invalid="ignore"):
        mom -= 0.5 * step_size * grad(pos)
        for _ in range(steps - 1):
            pos += step_size * inv_mass * mom
            mom -= step_size * grad(pos)
        pos += step_size * inv_mass * mom
        mom -= 0.5 * step_size * grad(pos)

    if not (np.isfinite(pos).all() and np.isfinite(mom).all()):
        raise ChainDivergence("non-finite state during leapfrog integration")
    return pos, mom


def hmc_update(position: np.ndarray, potential: Callable[[np.ndarray], float],
               grad: Callable[[np.ndarray], np.ndarray], step_size: float,
               steps: int, mass: float | np.ndarray,
               rng: np.random.Generator) -> tuple[np.ndarray, bool, float]:
    """One Metropolis-corrected Hamiltonian proposal on a flat state.

    Draws momentum from N(0, M), integrates, and accepts with probability
    min(1, exp(-dH)). A non-finite trajectory or energy difference counts as
    a rejection. Returns (state, accepted, dH).
    """
    position = np.asarray(position, dtype=np.float64)
    std = np.sqrt(np.asarray(mass, dtype=np.float64))
    momentum = rng.standard_normal(position.shape[0]) * std

    h0 = potential(position) + kinetic_energy(momentum, mass)
    try:
        prop_pos, prop_mom = leapfrog(position, momentum, step_size, steps, grad, mass)
    except ChainDivergence:
        rng.random()  # keep the accept-draw schedule aligned across proposals
        return position, False, math.inf
    h1 = potential(prop_pos) + kinetic_energy(prop_mom, mass)
    delta_h = h1 - h0

    accept_draw = rng.random()
    if not math.isfinite(delta_h):
        return position, False, math.inf
    if accept_draw < math.exp(min(0.0, -delta_h)):
        return prop_pos, True, delta_h
    return position, False, delta_h


def langevin_update(position: np.ndarray, grad: Callable[[np.ndarray], np.ndarray],
                    step_size: float, rng: np.random.Generator) -> np.ndarray:
    """One Langevin step: drift by half a gradient step, add N(0, eps) noise."""
    position = np.asarray(position, dtype=np.float64)
    noise = rng.standard_normal(position.shape[0]) * math.sqrt(step_size)
    with np.errstate(over="ignore", invalid="ignore"):
        return position - 0.5 * step_size * grad(position) + noise


def sghmc_update(position: np.ndarray, velocity: np.ndarray,
                 grad: Callable[[np.ndarray], np.ndarray], step_size: float,
                 friction: float, noise_discount: float,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One position-then-velocity update of the friction sampler.

    The position moves by the current velocity; the velocity is damped,
    pushed down the energy gradient evaluated at the new position, and
    refreshed with N(0, 2*(friction - noise_discount)*step_size) noise.
    """
    position = np.asarray(position, dtype=np.float64)
    velocity = np.asarray(velocity, dtype=np.float64)
    noise_std = math.sqrt(2.0 * (friction - noise_discount) * step_size)
    noise = rng.standard_normal(position.shape[0]) * noise_std
    with np.errstate(over="ignore", invalid="ignore"):
        new_pos = position + velocity
        new_vel = (1.0 - friction) * velocity - step_size * grad(new_pos) + noise
    return new_pos, new_vel


def _full_batch(dataset, whiten: bool) -> Batch:
    features = whiten_batch(dataset.features) if whiten else dataset.features
    return Batch(features, dataset.labels, len(dataset))


def _flat_energy_fns(batch: Batch, prior: PriorConfig, class_count: int,
                     feature_count: int, mask: DropMask | None = None):
    """Potential and gradient closures over the flat parameter layout."""
    split = class_count * feature_count
    features, weight_scale = _resolve_mask(batch, mask, class_count, feature_count)
    labels = batch.labels
    scale = batch.dataset_size / len(batch)
    variance = prior.variance

    def potential(flat: np.ndarray) -> float:
        w = flat[:split].reshape(class_count, feature_count)
        b = flat[split:]
        return _energy_arrays(w, b, features, labels, scale, variance, weight_scale)

    def gradient(flat: np.ndarray) -> np.ndarray:
        w = flat[:split].reshape(class_count, feature_count)
        b = flat[split:]
        gw, gb = _grad_arrays(w, b, features, labels, scale, variance, weight_scale)
        return np.concatenate([gw.ravel(), gb])

    return potential, gradient


def hmc_step(theta: Theta, dataset, cfg: HmcConfig, prior: PriorConfig,
             rng: np.random.Generator) -> tuple[Theta, bool, float]:
    """One full-data HMC transition on the softmax posterior.

    Returns the (possibly unchanged) parameters, the accept flag, and the
    proposal's energy difference.
    """
    batch = Batch(dataset.features, dataset.labels, len(dataset.labels))
    potential, gradient = _flat_energy_fns(batch, prior, theta.class_count,
                                           theta.feature_count)
    pos, accepted, delta_h = hmc_update(theta.flat, potential, gradient,
                                        cfg.step_size, cfg.leapfrog_steps,
                                        cfg.mass, rng)
    if accepted:
        theta = Theta.from_flat(pos, theta.class_count, theta.feature_count)
    return theta, accepted, delta_h


def sgld_step(theta: Theta, batch: Batch, step_size: float, prior: PriorConfig,
              rng: np.random.Generator) -> Theta:
    """One Langevin step against the rescaled mini-batch energy."""
    _, gradient = _flat_energy_fns(batch, prior, theta.class_count,
                                   theta.feature_count)
    pos = langevin_update(theta.flat, gradient, step_size, rng)
    if not np.isfinite(pos).all():
        raise ChainDivergence("non-finite parameters after Langevin update")
    return Theta.from_flat(pos, theta.class_count, theta.feature_count)


def sghmc_step(theta: Theta, nu: np.ndarray, batch: Batch, cfg: SgConfig,
               prior: PriorConfig, rng: np.random.Generator) -> tuple[Theta, np.ndarray]:
    """One friction-sampler update; ``nu`` is the flat velocity vector."""
    _, gradient = _flat_energy_fns(batch, prior, theta.class_count,
                                   theta.feature_count)
    pos, vel = sghmc_update(theta.flat, nu, gradient, cfg.step_size,
                            cfg.friction, cfg.noise_discount, rng)
    if not (np.isfinite(pos).all() and np.isfinite(vel).all()):
        raise ChainDivergence("non-finite state after friction update")
    return Theta.from_flat(pos, theta.class_count, theta.feature_count), vel


def _mask_length(cfg: SgConfig, class_count: int, feature_count: int) -> int:
    if cfg.mask_target == "inputs":
        return feature_count
    if cfg.mask_target == "weights":
        return class_count * feature_count
    raise ValueError("dsghmc requires mask_target 'inputs' or 'weights'")


def dsghmc_step(theta: Theta, nu: np.ndarray, batch: Batch, cfg: SgConfig,
                prior: PriorConfig, rng: np.random.Generator,
                mask_rng: np.random.Generator | None = None) -> tuple[Theta, np.ndarray]:
    """One dropout-masked outer iteration: fresh mask, then ``inner_steps``
    friction updates against the masked energy.

    The mask is drawn once and reused across the whole inner block. With
    ``mask_rng`` unset the mask comes from ``rng``; keep_prob == 1 consumes
    no generator state, making the q=1 chain identical to plain sghmc.
    """
    if cfg.keep_prob is None:
        raise ValueError("dsghmc requires keep_prob")
    length = _mask_length(cfg, theta.class_count, theta.feature_count)
    mask = sample_mask(length, cfg.keep_prob, mask_rng if mask_rng is not None else rng)

    _, gradient = _flat_energy_fns(batch, prior, theta.class_count,
                                   theta.feature_count, mask)
    pos, vel = theta.flat, np.asarray(nu, dtype=np.float64)
    for _ in range(cfg.inner_steps):
        pos, vel = sghmc_update(pos, vel, gradient, cfg.step_size,
                                cfg.friction, cfg.noise_discount, rng)
    if not (np.isfinite(pos).all() and np.isfinite(vel).all()):
        raise ChainDivergence("non-finite state after masked friction update")
    return Theta.from_flat(pos, theta.class_count, theta.feature_count), vel


def _batch_stream(dataset: Dataset, batch_size: int, whiten: bool,
                  rng: np.random.Generator):
    while True:
        plan = make_batches(dataset, batch_size, rng)
        yield from iter_batches(dataset, plan, whiten=whiten)


def resolved_step_decay(cfg: SgConfig) -> float:
    return cfg.step_decay if cfg.step_decay is not None else 0.0


def batches_per_epoch(dataset_size: int, batch_size: int) -> int:
    return -(-dataset_size // batch_size)


def run_chain(algorithm: str, dataset: Dataset,
              sampler_cfg: HmcConfig | SgConfig, prior: PriorConfig,
              chain_cfg: ChainConfig, whiten: bool = True) -> PosteriorSamples:
    """Run one seeded chain and return its post-warmup draws.

    The chain performs ``epochs * batches_per_epoch + warmup`` iterations
    (``batches_per_epoch`` is 1 for hmc, which sees the full dataset every
    iteration). Mini-batch assignment is reshuffled every epoch and each
    batch is whitened in place unless ``whiten`` is off. Randomness is split
    into separate noise / mask / shuffle streams derived from the chain
    seed, so the three concerns never perturb one another.

    Raises :class:`ChainDivergence` (carrying the partial, invalidated
    samples) if any parameter or velocity coordinate becomes non-finite.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}, expected one of {ALGORITHMS}")
    if algorithm == "hmc":
        if not isinstance(sampler_cfg, HmcConfig):
            raise ValueError("hmc requires an HmcConfig")
    elif not isinstance(sampler_cfg, SgConfig):
        raise ValueError(f"{algorithm} requires an SgConfig")
    if algorithm == "dsghmc":
        if sampler_cfg.keep_prob is None:
            raise ValueError("dsghmc requires keep_prob")
        _mask_length(sampler_cfg, 2, 2)  # validates mask_target

    K, D = dataset.class_count, dataset.feature_count
    dim = K * D + K
    noise_ss, mask_ss, shuffle_ss = np.random.SeedSequence(chain_cfg.seed).spawn(3)
    noise_rng = np.random.default_rng(noise_ss)
    mask_rng = np.random.default_rng(mask_ss)
    shuffle_rng = np.random.default_rng(shuffle_ss)

    if algorithm == "hmc":
        per_epoch = 1
    else:
        per_epoch = batches_per_epoch(len(dataset), sampler_cfg.batch_size)
    total = chain_cfg.epochs * per_epoch + chain_cfg.warmup

    cfg_echo = dict(asdict(sampler_cfg))
    if isinstance(cfg_echo.get("mass"), np.ndarray):
        cfg_echo["mass"] = cfg_echo["mass"].tolist()
    meta = ChainMeta(
        algorithm=algorithm,
        class_count=K,
        feature_count=D,
        seed=chain_cfg.seed,
        prior_variance=prior.variance,
        sampler=cfg_echo,
        chain=asdict(chain_cfg),
        dataset_name=dataset.name,
        whiten=whiten,
        warmup=chain_cfg.warmup,
    )

    stored: deque = deque(maxlen=chain_cfg.keep_last)
    retained = 0
    pos = np.zeros(dim)

    def record(t: int):
        nonlocal retained
        if t >= chain_cfg.warmup and (t - chain_cfg.warmup) % chain_cfg.thinning == 0:
            stored.append((t, pos.copy()))
            retained += 1

    def collect() -> PosteriorSamples:
        meta.retained_count = retained
        meta.stored_count = len(stored)
        if stored:
            indices, rows = zip(*stored)
            draws = np.stack(rows)
            idx = np.asarray(indices, dtype=np.int64)
        else:
            draws = np.empty((0, dim))
            idx = np.empty(0, dtype=np.int64)
        return PosteriorSamples(draws, idx, meta)

    if algorithm == "hmc":
        full = _full_batch(dataset, whiten)
        potential, gradient = _flat_energy_fns(full, prior, K, D)
        accepted = 0
        for t in range(total):
            pos, ok, _ = hmc_update(pos, potential, gradient,
                                    sampler_cfg.step_size,
                                    sampler_cfg.leapfrog_steps,
                                    sampler_cfg.mass, noise_rng)
            accepted += ok
            record(t)
        meta.accepted = accepted
        meta.proposals = total
        meta.iterations_run = total
        return collect()

    stream = _batch_stream(dataset, sampler_cfg.batch_size, whiten, shuffle_rng)
    vel = noise_rng.standard_normal(dim) if algorithm in ("sghmc", "dsghmc") else None
    decay = resolved_step_decay(sampler_cfg)

    for t in range(total):
        batch = next(stream)
        step = sampler_cfg.step_size
        if decay:
            step /= float(t + 1) ** decay
        # A blowing-up chain overflows before the finiteness check below
        # catches it; those IEEE warnings are expected, not actionable.
        with np.errstate(over="ignore", invalid="ignore"):
            if algorithm == "sgld":
                _, gradient = _flat_energy_fns(batch, prior, K, D)
                pos = langevin_update(pos, gradient, step, noise_rng)
            else:
                mask = None
                if algorithm == "dsghmc":
                    length = _mask_length(sampler_cfg, K, D)
                    mask = sample_mask(length, sampler_cfg.keep_prob, mask_rng)
                _, gradient = _flat_energy_fns(batch, prior, K, D, mask)
                inner = sampler_cfg.inner_steps if algorithm == "dsghmc" else 1
                for _ in range(inner):
                    pos, vel = sghmc_update(pos, vel, gradient, step,
                                            sampler_cfg.friction,
                                            sampler_cfg.noise_discount,
                                            noise_rng)
        finite = np.isfinite(pos).all() and (vel is None or np.isfinite(vel).all())
        if not finite:
            meta.iterations_run = t + 1
            meta.diverged = True
            meta.diverged_at = t
            raise ChainDivergence(
                f"chain diverged at iteration {t}", partial=collect(), iteration=t
            )
        record(t)

    meta.iterations_run = total
    return collect()


_WORKER_DATASET: Dataset | None = None


def _init_worker(dataset: Dataset):
    global _WORKER_DATASET
    _WORKER_DATASET = dataset


def _run_chain_worker(args):
    algorithm, sampler_cfg, prior, chain_cfg, whiten = args
    return run_chain(algorithm, _WORKER_DATASET, sampler_cfg, prior, chain_cfg,
                     whiten=whiten)


def run_chains(algorithm: str, dataset: Dataset,
               sampler_cfg: HmcConfig | SgConfig, prior: PriorConfig,
               chain_cfg: ChainConfig, n_chains: int, jobs: int = 1,
               whiten: bool = True) -> list[PosteriorSamples]:
    """Run ``n_chains`` independent chains; chain i is seeded seed + i.

    With ``jobs`` > 1 chains execute in parallel worker processes (the
    dataset is shared with workers at fork time, not pickled per task).
    Results are returned in chain order either way.
    """
    if n_chains < 1:
        raise ValueError("n_chains must be at least 1")
    seeds = [chain_cfg.seed + i for i in range(n_chains)]
    configs = [
        ChainConfig(warmup=chain_cfg.warmup, epochs=chain_cfg.epochs, seed=s,
                    thinning=chain_cfg.thinning, keep_last=chain_cfg.keep_last)
        for s in seeds
    ]
    if jobs <= 1 or n_chains == 1:
        return [run_chain(algorithm, dataset, sampler_cfg, prior, cfg, whiten=whiten)
                for cfg in configs]

    ctx = multiprocessing.get_context("fork")
    tasks = [(algorithm, sampler_cfg, prior, cfg, whiten) for cfg in configs]
    with ProcessPoolExecutor(max_workers=min(jobs, n_chains), mp_context=ctx,
                             initializer=_init_worker, initargs=(dataset,)) as pool:
        return list(pool.map(_run_chain_worker, tasks))
