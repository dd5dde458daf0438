"""
Fixed-K MCMC sweep for the bloc mixture.

One sweep refreshes the Stein-Meng augmentation r, updates every alpha cell
with one of the two Metropolis-Hastings samplers, then draws eta and z from
their Gibbs conditionals. The alpha updates for different (k, q) cells are
independent given (z, r) and are carried out together as array operations.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from scipy import stats
from scipy.special import gammaln, logsumexp

from model_core import (
    AugmentedCounts,
    DomainError,
    Hyperparams,
    LikelihoodCache,
    ModelState,
    VoteTable,
    bloc_log_likelihoods,
    renormalize,
    sample_dirichlet,
)

logger = logging.getLogger('bloc_infer.samplers')

# Bernoulli draws materialized at once by the augmentation step
AUGMENTATION_CHUNK = 1 << 22

# Keeps p = alpha_0 / alpha_total away from exactly 0 or 1
_P_EPSILON = 1e-12


class SamplerSchedule(str, Enum):
    SAMPLER1 = "sampler1"
    SAMPLER2 = "sampler2"
    ALTERNATE = "alternate"


@dataclass(frozen=True)
class SweepConfig:
    """
    Proposal settings for the alpha samplers.

    Args:
        alpha_total_proposal: (shape, scale) of the Gamma step size of the
            sampler-1 random walk on log(alpha_0 + alpha_1)
        alpha_component_proposal: (shape, scale) of the sampler-2
            independence proposal for a single alpha component
        schedule: which sampler each sweep uses
    """

    alpha_total_proposal: Tuple[float, float] = (1.0, 1.0 / 20.0)
    alpha_component_proposal: Tuple[float, float] = (1.0, 20.0)
    schedule: SamplerSchedule = SamplerSchedule.ALTERNATE

    def __post_init__(self):
        object.__setattr__(self, 'schedule', SamplerSchedule(self.schedule))
        for name in ('alpha_total_proposal', 'alpha_component_proposal'):
            pair = tuple(float(v) for v in getattr(self, name))
            if len(pair) != 2 or min(pair) <= 0:
                raise DomainError(f"{name} must be a positive (shape, scale) pair, got {pair}")
            object.__setattr__(self, name, pair)

    def sampler_for(self, iteration: int) -> int:
        if self.schedule == SamplerSchedule.SAMPLER1:
            return 1
        if self.schedule == SamplerSchedule.SAMPLER2:
            return 2
        return 1 if iteration % 2 == 0 else 2


@dataclass(frozen=True)
class BlocStatistics:
    """Sufficient statistics of (z, r) shared by every alpha update in a sweep."""

    z: np.ndarray
    onehot: np.ndarray      # (N, K) membership indicators
    members: np.ndarray     # (K,) municipalities per bloc
    r_sums: np.ndarray      # (K, Q, 2) augmented counts summed over members
    totals: np.ndarray      # (N, Q) votes per cell

    @classmethod
    def collect(cls, data: VoteTable, z: np.ndarray, r: np.ndarray, K: int) -> 'BlocStatistics':
        z = np.asarray(z, dtype=np.int64)
        onehot = np.zeros((data.n_municipalities, K))
        onehot[np.arange(data.n_municipalities), z] = 1.0
        r_sums = np.einsum('nk,nqs->kqs', onehot, np.asarray(r, dtype=float))
        return cls(
            z=z,
            onehot=onehot,
            members=onehot.sum(axis=0),
            r_sums=r_sums,
            totals=data.totals.astype(float),
        )

    def member_log_gamma(self, ks: np.ndarray, qs: np.ndarray, base: np.ndarray) -> np.ndarray:
        """sum over i with z_i = k of log Gamma(base + c_iq0 + c_iq1), per (k, q) cell."""
        K, Q = self.onehot.shape[1], self.totals.shape[1]
        grid = np.ones((K, Q))
        grid[ks, qs] = base
        shifted = gammaln(grid[self.z] + self.totals)
        return (self.onehot.T @ shifted)[ks, qs]


def update_eta(z: np.ndarray, K: int, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """Draw mixture weights from Dirichlet(d + gamma), d_k being the bloc sizes."""
    if K == 1:
        return np.ones(1)
    z = np.asarray(z, dtype=np.int64)
    counts = np.bincount(z, minlength=K) if z.size else np.zeros(K, dtype=np.int64)
    return renormalize(sample_dirichlet(counts + gamma, rng))


def update_z(
    data: VoteTable,
    alpha: np.ndarray,
    eta: np.ndarray,
    rng: np.random.Generator,
    loglik: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Draw each assignment from its categorical conditional given alpha and eta."""
    K = eta.shape[0]
    if K == 1:
        return np.zeros(data.n_municipalities, dtype=np.int64)
    if loglik is None:
        loglik = bloc_log_likelihoods(data, alpha)
    log_weights = np.log(eta)[None, :] + loglik
    probabilities = np.exp(log_weights - logsumexp(log_weights, axis=1, keepdims=True))
    cumulative = np.cumsum(probabilities, axis=1)
    u = rng.random(data.n_municipalities)[:, None]
    return (cumulative[:, :-1] < u).sum(axis=1).astype(np.int64)


def _sum_of_bernoullis(counts: np.ndarray, alpha: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """For each cell, sum over m = 1..c of Bernoulli(alpha / (alpha + m - 1))."""
    out = np.zeros(counts.shape, dtype=np.int64)
    nonzero = np.flatnonzero(counts)
    if nonzero.size == 0:
        return out
    cumulative = np.cumsum(counts[nonzero])
    start = 0
    while start < nonzero.size:
        done = cumulative[start - 1] if start else 0
        stop = int(np.searchsorted(cumulative, done + AUGMENTATION_CHUNK, side='right'))
        stop = max(stop, start + 1)
        cells = nonzero[start:stop]
        c = counts[cells]
        owner = np.repeat(np.arange(cells.size), c)
        offset = np.arange(c.sum()) - np.repeat(np.cumsum(c) - c, c)
        a = alpha[cells][owner]
        hits = rng.random(owner.size) < a / (a + offset)
        out[cells] = np.bincount(owner, weights=hits, minlength=cells.size).astype(np.int64)
        start = stop
    return out


def update_augmentation(
    data: VoteTable, z: np.ndarray, alpha: np.ndarray, rng: np.random.Generator
) -> AugmentedCounts:
    """Draw the Stein-Meng latent counts r given the assignments and alpha."""
    per_cell_alpha = np.asarray(alpha, dtype=float)[np.asarray(z, dtype=np.int64)]
    r = _sum_of_bernoullis(data.counts.ravel(), per_cell_alpha.ravel(), rng)
    return AugmentedCounts(r=r.reshape(data.counts.shape))


def alpha_total_log_target(
    total: np.ndarray,
    r_total: np.ndarray,
    members: np.ndarray,
    member_log_gamma: np.ndarray,
    hyper: Hyperparams,
) -> np.ndarray:
    """
    Unnormalized log density of alpha_0 + alpha_1 under the augmented posterior.

    Gamma(2 kappa, theta) prior, times total^(sum r), times
    Gamma(total)^N_k / prod_i Gamma(total + n_iq).
    """
    return (
        stats.gamma.logpdf(total, 2.0 * hyper.kappa, scale=hyper.theta)
        + r_total * np.log(total)
        + members * gammaln(total)
        - member_log_gamma
    )


def alpha_component_log_target(
    value: np.ndarray,
    other: np.ndarray,
    r_component: np.ndarray,
    members: np.ndarray,
    member_log_gamma: np.ndarray,
    hyper: Hyperparams,
) -> np.ndarray:
    """
    Unnormalized log density of one alpha component given the other.

    Gamma(kappa + sum r_s, theta) times
    Gamma(value + other)^N_k / prod_i Gamma(value + other + n_iq).
    """
    return (
        stats.gamma.logpdf(value, hyper.kappa + r_component, scale=hyper.theta)
        + members * gammaln(value + other)
        - member_log_gamma
    )


def _sampler1_log_acceptance(ks, qs, current, proposal, bloc_stats, hyper):
    r_total = bloc_stats.r_sums[ks, qs].sum(axis=-1)
    members = bloc_stats.members[ks]
    target_current = alpha_total_log_target(
        current, r_total, members, bloc_stats.member_log_gamma(ks, qs, current), hyper
    )
    target_proposal = alpha_total_log_target(
        proposal, r_total, members, bloc_stats.member_log_gamma(ks, qs, proposal), hyper
    )
    # symmetric walk on the log scale; the Jacobian enters the ratio
    return target_proposal - target_current + np.log(proposal) - np.log(current)


def _sampler2_log_acceptance(ks, qs, s, current, proposal, other, bloc_stats, hyper, config):
    r_component = bloc_stats.r_sums[ks, qs, s]
    members = bloc_stats.members[ks]
    target_current = alpha_component_log_target(
        current, other, r_component, members,
        bloc_stats.member_log_gamma(ks, qs, current + other), hyper,
    )
    target_proposal = alpha_component_log_target(
        proposal, other, r_component, members,
        bloc_stats.member_log_gamma(ks, qs, proposal + other), hyper,
    )
    shape, scale = config.alpha_component_proposal
    return (
        target_proposal - target_current
        + stats.gamma.logpdf(current, shape, scale=scale)
        - stats.gamma.logpdf(proposal, shape, scale=scale)
    )


def _sampler1_cells(ks, qs, alpha, bloc_stats, hyper, config, rng):
    current = alpha[ks, qs].sum(axis=-1)
    shape, scale = config.alpha_total_proposal
    step = rng.gamma(shape, scale, size=ks.size)
    step = np.where(rng.random(ks.size) < 0.5, -step, step)
    proposal = current * np.exp(step)
    log_ratio = _sampler1_log_acceptance(ks, qs, current, proposal, bloc_stats, hyper)
    accepted = np.log(rng.random(ks.size)) < log_ratio
    total = np.where(accepted, proposal, current)
    p = rng.beta(
        hyper.kappa + bloc_stats.r_sums[ks, qs, 0],
        hyper.kappa + bloc_stats.r_sums[ks, qs, 1],
    )
    p = np.clip(p, _P_EPSILON, 1.0 - _P_EPSILON)
    return np.stack([total * p, total * (1.0 - p)], axis=-1), accepted


def _sampler2_cells(ks, qs, s, alpha, bloc_stats, hyper, config, rng):
    current = alpha[ks, qs, s]
    other = alpha[ks, qs, 1 - s]
    shape, scale = config.alpha_component_proposal
    proposal = rng.gamma(shape, scale, size=ks.size)
    log_ratio = _sampler2_log_acceptance(ks, qs, s, current, proposal, other, bloc_stats, hyper, config)
    accepted = np.log(rng.random(ks.size)) < log_ratio
    return np.where(accepted, proposal, current), accepted


def sampler1_log_acceptance(k, q, current_total, proposed_total, data, z, r, alpha, hyper) -> float:
    """Log MH ratio of moving alpha_kq0 + alpha_kq1 from current_total to proposed_total."""
    bloc_stats = BlocStatistics.collect(data, z, r, alpha.shape[0])
    ks, qs = np.array([k]), np.array([q])
    value = _sampler1_log_acceptance(
        ks, qs, np.array([float(current_total)]), np.array([float(proposed_total)]), bloc_stats, hyper
    )
    return float(value[0])


def sampler2_log_acceptance(k, q, s, current, proposed, data, z, r, alpha, hyper, config) -> float:
    """Log MH ratio of moving alpha_kqs from current to proposed, the other component fixed."""
    bloc_stats = BlocStatistics.collect(data, z, r, alpha.shape[0])
    ks, qs = np.array([k]), np.array([q])
    value = _sampler2_log_acceptance(
        ks, qs, s, np.array([float(current)]), np.array([float(proposed)]),
        alpha[ks, qs, 1 - s], bloc_stats, hyper, config,
    )
    return float(value[0])


def _check_cell(k: int, q: int, alpha: np.ndarray) -> None:
    if not (0 <= k < alpha.shape[0] and 0 <= q < alpha.shape[1]):
        raise DomainError(f"Cell ({k}, {q}) lies outside alpha of shape {alpha.shape[:2]}")


def update_alpha_sampler1(k, q, data, z, r, alpha, hyper, config, rng) -> np.ndarray:
    """
    Sampler 1 for cell (k, q): random-walk MH on alpha_total, exact Beta draw for p.

    Returns the new (alpha_kq0, alpha_kq1) pair. An empty bloc samples from the prior.
    """
    _check_cell(k, q, alpha)
    bloc_stats = BlocStatistics.collect(data, z, r, alpha.shape[0])
    pairs, _ = _sampler1_cells(np.array([k]), np.array([q]), alpha, bloc_stats, hyper, config, rng)
    return pairs[0]


def update_alpha_sampler2(k, q, s, data, z, r, alpha, hyper, config, rng) -> float:
    """Sampler 2 for component s of cell (k, q): independence MH with a Gamma proposal."""
    _check_cell(k, q, alpha)
    if s not in (0, 1):
        raise DomainError(f"Component index must be 0 or 1, got {s}")
    bloc_stats = BlocStatistics.collect(data, z, r, alpha.shape[0])
    values, _ = _sampler2_cells(np.array([k]), np.array([q]), s, alpha, bloc_stats, hyper, config, rng)
    return float(values[0])


def update_alpha(
    data: VoteTable,
    z: np.ndarray,
    r: np.ndarray,
    alpha: np.ndarray,
    hyper: Hyperparams,
    config: SweepConfig,
    rng: np.random.Generator,
    sampler: int = 1,
) -> Tuple[np.ndarray, float]:
    """
    Update every (k, q) cell with the chosen sampler.

    Returns:
        tuple: (new alpha, acceptance rate of the MH proposals)
    """
    K, Q = alpha.shape[0], alpha.shape[1]
    new_alpha = np.array(alpha, dtype=float, copy=True)
    if K * Q == 0:
        return new_alpha, 1.0
    cells = np.arange(K * Q)
    ks, qs = cells // Q, cells % Q
    bloc_stats = BlocStatistics.collect(data, z, r, K)
    if sampler == 1:
        pairs, accepted = _sampler1_cells(ks, qs, new_alpha, bloc_stats, hyper, config, rng)
        new_alpha[ks, qs] = pairs
        return new_alpha, float(accepted.mean())
    rates = []
    for s in (0, 1):
        values, accepted = _sampler2_cells(ks, qs, s, new_alpha, bloc_stats, hyper, config, rng)
        new_alpha[ks, qs, s] = values
        rates.append(accepted.mean())
    return new_alpha, float(np.mean(rates))


def sweep(
    data: VoteTable,
    state: ModelState,
    r: Optional[AugmentedCounts],
    hyper: Hyperparams,
    config: SweepConfig,
    rng: np.random.Generator,
    iteration: int = 0,
    cache: Optional[LikelihoodCache] = None,
) -> Tuple[ModelState, AugmentedCounts]:
    """
    One fixed-K iteration: augmentation, alpha for all cells, eta, then z.

    The incoming augmentation is superseded by a fresh draw. When a cache is
    passed it is refreshed to the new alpha and reused for the z update.
    """
    augmented = update_augmentation(data, state.z, state.alpha, rng)
    sampler = config.sampler_for(iteration)
    alpha, acceptance = update_alpha(
        data, state.z, augmented.r, state.alpha, hyper, config, rng, sampler=sampler
    )
    eta = update_eta(state.z, state.K, hyper.gamma, rng)
    loglik = cache.refresh(alpha) if cache is not None else bloc_log_likelihoods(data, alpha)
    z = update_z(data, alpha, eta, rng, loglik=loglik)
    logger.debug(f"Sweep {iteration}: sampler {sampler}, K={state.K}, acceptance {acceptance:.3f}")
    return ModelState(eta=eta, z=z, alpha=alpha), augmented
