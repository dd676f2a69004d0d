"""Integrator property checks and chain health summaries.

The leapfrog integrator is expected to be time-reversible, volume
preserving, and to conserve energy up to O(step_size^2). These checks
verify all three numerically on smooth targets. A dropout-masked energy
with a frozen mask is still smooth, so the same checks can be *measured*
on it, but resampling masks between iterations breaks the smoothness
assumption; masked results are therefore reported as informational, never
asserted against tolerances.

A deliberately non-symplectic explicit Euler step is included for
contrast: its one-step map does not preserve phase-space volume, which is
exactly why the samplers use leapfrog.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import Dataset
from .model import Batch, DropMask, PriorConfig
from .samplers import PosteriorSamples, _flat_energy_fns, leapfrog

VOLUME_DIM_LIMIT = 4
JACOBIAN_FD_STEP = 1e-6


@dataclass(frozen=True)
class Target:
    """A differentiable potential energy over flat states."""

    potential: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    dim: int
    name: str = ""


@dataclass(frozen=True)
class IntegratorReport:
    """Results of the three integrator checks at one step size."""

    step_size: float
    reversibility_residual: float
    volume_determinant: float
    max_energy_error: float


def quadratic_target(dim: int = 1) -> Target:
    """Isotropic quadratic bowl U(z) = |z|^2 / 2."""
    return Target(
        potential=lambda z: 0.5 * float(np.dot(z, z)),
        grad=lambda z: np.asarray(z, dtype=np.float64),
        dim=dim,
        name=f"quadratic-{dim}d",
    )


def gaussian_target(cov: np.ndarray) -> Target:
    """Gaussian potential U(z) = z^T C^-1 z / 2 for a full covariance C."""
    cov = np.asarray(cov, dtype=np.float64)
    precision = np.linalg.inv(cov)
    return Target(
        potential=lambda z: 0.5 * float(z @ precision @ z),
        grad=lambda z: precision @ z,
        dim=cov.shape[0],
        name=f"gaussian-{cov.shape[0]}d",
    )


def softmax_target(dataset: Dataset, prior: PriorConfig,
                   mask: DropMask | None = None) -> Target:
    """The classifier's full-data energy as a flat-state target.

    With ``mask`` the energy is evaluated under that frozen mask; the mask
    is never resampled, keeping the target smooth.
    """
    batch = Batch(dataset.features, dataset.labels, len(dataset))
    K, D = dataset.class_count, dataset.feature_count
    potential, grad = _flat_energy_fns(batch, prior, K, D, mask)
    suffix = "-masked" if mask is not None else ""
    return Target(potential, grad, K * D + K, name=f"softmax{suffix}")


def check_reversibility(target: Target, position: np.ndarray,
                        momentum: np.ndarray, step_size: float,
                        steps: int) -> float:
    """Integrate forward, flip the momentum, integrate back.

    Returns the max-norm distance between the round trip and the start
    (momentum compared up to the flip).
    """
    fwd_pos, fwd_mom = leapfrog(position, momentum, step_size, steps, target.grad)
    back_pos, back_mom = leapfrog(fwd_pos, -fwd_mom, step_size, steps, target.grad)
    pos_err = np.abs(back_pos - position).max()
    mom_err = np.abs(-back_mom - momentum).max()
    return float(max(pos_err, mom_err))


def _phase_map_determinant(target: Target, step, position, momentum,
                           fd_step: float) -> float:
    """Central-difference Jacobian determinant of a phase-space map."""
    if target.dim > VOLUME_DIM_LIMIT:
        raise ValueError(
            f"volume check supports dim <= {VOLUME_DIM_LIMIT}, got {target.dim}"
        )
    state = np.concatenate([position, momentum]).astype(np.float64)
    n = state.shape[0]
    jac = np.empty((n, n))
    for j in range(n):
        bump = np.zeros(n)
        bump[j] = fd_step
        jac[:, j] = (step(state + bump) - step(state - bump)) / (2.0 * fd_step)
    return float(np.linalg.det(jac))


def check_volume(target: Target, position: np.ndarray, momentum: np.ndarray,
                 step_size: float, fd_step: float = JACOBIAN_FD_STEP) -> float:
    """Determinant of the one-step leapfrog map's Jacobian.

    The Jacobian over the 2*dim phase space is estimated with central
    differences, so the target dimension is capped at
    ``VOLUME_DIM_LIMIT``.
    """

    def step(s: np.ndarray) -> np.ndarray:
        pos, mom = leapfrog(s[: target.dim], s[target.dim :], step_size, 1,
                            target.grad)
        return np.concatenate([pos, mom])

    return _phase_map_determinant(target, step, position, momentum, fd_step)


def check_energy_drift(target: Target, position: np.ndarray,
                       momentum: np.ndarray, step_size: float,
                       steps: int) -> float:
    """Max |H(t) - H(0)| along a leapfrog trajectory."""
    pos = np.asarray(position, dtype=np.float64)
    mom = np.asarray(momentum, dtype=np.float64)
    h0 = target.potential(pos) + 0.5 * float(np.dot(mom, mom))
    worst = 0.0
    for _ in range(steps):
        pos, mom = leapfrog(pos, mom, step_size, 1, target.grad)
        h = target.potential(pos) + 0.5 * float(np.dot(mom, mom))
        worst = max(worst, abs(h - h0))
    return float(worst)


def integrator_report(target: Target, position: np.ndarray,
                      momentum: np.ndarray, step_size: float,
                      steps: int = 100) -> IntegratorReport:
    """Run all three checks from one start state."""
    return IntegratorReport(
        step_size=step_size,
        reversibility_residual=check_reversibility(
            target, position, momentum, step_size, steps
        ),
        volume_determinant=check_volume(target, position, momentum, step_size)
        if target.dim <= VOLUME_DIM_LIMIT
        else float("nan"),
        max_energy_error=check_energy_drift(
            target, position, momentum, step_size, steps
        ),
    )


def euler_step(target: Target, position: np.ndarray, momentum: np.ndarray,
               step_size: float) -> tuple[np.ndarray, np.ndarray]:
    """Explicit (non-symplectic) Euler reference step.

    Unlike leapfrog, its Jacobian determinant drifts away from 1, so it is
    unsuitable for Metropolis-corrected Hamiltonian proposals.
    """
    position = np.asarray(position, dtype=np.float64)
    momentum = np.asarray(momentum, dtype=np.float64)
    return (
        position + step_size * momentum,
        momentum - step_size * target.grad(position),
    )


def euler_volume(target: Target, position: np.ndarray, momentum: np.ndarray,
                 step_size: float, fd_step: float = JACOBIAN_FD_STEP) -> float:
    """Jacobian determinant of one explicit Euler step (contrast check)."""

    def step(s: np.ndarray) -> np.ndarray:
        pos, mom = euler_step(target, s[: target.dim], s[target.dim :], step_size)
        return np.concatenate([pos, mom])

    return _phase_map_determinant(target, step, position, momentum, fd_step)


@dataclass(frozen=True)
class ChainHealth:
    """Compact health summary of a completed or aborted chain."""

    algorithm: str
    iterations_run: int
    retained: int
    stored: int
    acceptance_rate: float | None
    diverged: bool
    diverged_at: int | None

    def lines(self) -> list[str]:
        out = [
            f"algorithm:        {self.algorithm}",
            f"iterations run:   {self.iterations_run}",
            f"retained draws:   {self.retained}",
            f"stored draws:     {self.stored}",
        ]
        if self.acceptance_rate is not None:
            out.append(f"acceptance rate:  {self.acceptance_rate:.4f}")
        if self.diverged:
            out.append(f"DIVERGED at iteration {self.diverged_at}; "
                       "samples are not usable")
        else:
            out.append("status:           ok")
        return out

    def __str__(self) -> str:
        return "\n".join(self.lines())


def chain_health(samples: PosteriorSamples) -> ChainHealth:
    """Summarize acceptance, retention and divergence state of a chain."""
    meta = samples.meta
    rate = None
    if meta.proposals:
        rate = meta.accepted / meta.proposals
    return ChainHealth(
        algorithm=meta.algorithm,
        iterations_run=meta.iterations_run,
        retained=meta.retained_count,
        stored=meta.stored_count,
        acceptance_rate=rate,
        diverged=meta.diverged,
        diverged_at=meta.diverged_at,
    )
