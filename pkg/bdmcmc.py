"""
Birth-death MCMC over the number of blocs.

A continuous-time birth-death process moves between K and K +/- 1; between
two stretches of it the fixed-K sweep from ``samplers`` refreshes every
parameter. Births either draw the newcomer from the prior or anchor it on the
observed support of a random municipality; deaths are balanced against
whichever birth is in use.
"""

import logging
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import arviz as az
import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import betaln, expit, gammaln, logsumexp

from model_core import (
    DomainError,
    Hyperparams,
    LikelihoodCache,
    ModelState,
    VoteTable,
    bloc_log_likelihoods,
    renormalize,
    sample_alpha_prior,
    sample_dirichlet,
)
from samplers import SweepConfig, sweep, update_z

logger = logging.getLogger('bloc_infer.bdmcmc')

# exp() of anything above this overflows a double
MAX_LOG_RATE = 700.0
# A single wait never exceeds this multiple of its mean
WAIT_CAP_FACTOR = 1e6
# Bounds on the moment-matched alpha totals of the starting blocs
START_TOTAL_BOUNDS = (0.5, 1e4)
SUPPORT_CLIP = (0.01, 0.99)
MEAN_CLIP = 1e-12


class DeathRateBalance(str, Enum):
    """
    UNIFORM evaluates the death rate with uniform reassignment of the
    dying bloc's members. EXACT adds the proposal terms of the birth move and
    reassigns members in proportion to eta_j times their likelihood under bloc j,
    which makes every death the exact reverse of a birth.
    """

    UNIFORM = "uniform"
    EXACT = "exact"


class BirthProposal(str, Enum):
    """
    PRIOR draws a newborn's alpha from the prior and moves each municipality
    to it with probability 1 / (K + 1). DATA centres the newborn on one
    municipality's observed support and moves municipalities by their
    responsibility under the newborn; it needs the EXACT balance.
    """

    PRIOR = "prior"
    DATA = "data"


class EventKind(str, Enum):
    BIRTH = "birth"
    DEATH = "death"
    REJECTED_BIRTH = "rejected_birth"
    END = "end"


@dataclass(frozen=True)
class BDEvent:
    """One jump of the birth-death process; ``wait`` is the time spent at ``k_before``."""

    time: float
    kind: EventKind
    k_before: int
    k_after: int
    wait: float


@dataclass(eq=False)
class PosteriorSample:
    state: ModelState
    wait_time: float
    iteration: int
    log_likelihood: float = float('nan')

    def __post_init__(self):
        if not self.wait_time > 0:
            raise DomainError(f"Sample wait time must be positive, got {self.wait_time}")


@dataclass(frozen=True)
class RunConfig:
    """
    Chain settings. ``birth_proposal`` defaults to DATA under the EXACT
    balance and to PRIOR under UNIFORM.
    """

    iterations: int = 20000
    burn_in: int = 5000
    thin: int = 10
    bd_time_per_iteration: float = 1.0
    seed: int = 0
    chains: int = 1
    initial_blocs: Optional[int] = None
    death_rate_balance: DeathRateBalance = DeathRateBalance.EXACT
    birth_proposal: Optional[BirthProposal] = None

    def __post_init__(self):
        balance = DeathRateBalance(self.death_rate_balance)
        object.__setattr__(self, 'death_rate_balance', balance)
        if self.birth_proposal is None:
            proposal = BirthProposal.DATA if balance == DeathRateBalance.EXACT else BirthProposal.PRIOR
        else:
            proposal = BirthProposal(self.birth_proposal)
        if proposal == BirthProposal.DATA and balance != DeathRateBalance.EXACT:
            raise DomainError("Data-anchored births need the exact death-rate balance")
        object.__setattr__(self, 'birth_proposal', proposal)
        if not 0 <= self.burn_in < self.iterations:
            raise DomainError(
                f"Need iterations > burn_in >= 0, got iterations={self.iterations}, burn_in={self.burn_in}"
            )
        if self.thin < 1:
            raise DomainError(f"thin must be at least 1, got {self.thin}")
        if self.chains < 1:
            raise DomainError(f"chains must be at least 1, got {self.chains}")
        if not self.bd_time_per_iteration > 0:
            raise DomainError(f"BD time per iteration must be positive, got {self.bd_time_per_iteration}")
        if self.initial_blocs is not None and self.initial_blocs < 1:
            raise DomainError(f"initial_blocs must be at least 1, got {self.initial_blocs}")

    @property
    def sample_wait_time(self) -> float:
        return self.bd_time_per_iteration * self.thin

    def is_retained(self, iteration: int) -> bool:
        return iteration >= self.burn_in and (iteration - self.burn_in) % self.thin == 0


@dataclass
class ChainTrace:
    """
    Per-chain diagnostics collected alongside the samples.

    Event counts cover the whole run; ``time_at_k`` only accumulates while
    ``tally_time`` is set, which ``run_chain`` clears during burn-in.
    """

    chain: int = 0
    time_at_k: Counter = field(default_factory=Counter)
    births: int = 0
    deaths: int = 0
    rejected_births: int = 0
    capped_waits: int = 0
    log_likelihood: List[float] = field(default_factory=list)
    tally_time: bool = True

    def record(self, events: Sequence[BDEvent]) -> None:
        for event in events:
            if self.tally_time:
                self.time_at_k[event.k_before] += event.wait
            if event.kind == EventKind.BIRTH:
                self.births += 1
            elif event.kind == EventKind.DEATH:
                self.deaths += 1
            elif event.kind == EventKind.REJECTED_BIRTH:
                self.rejected_births += 1


class AnchoredAlphaProposal:
    """
    Birth proposal for alpha centred on the data.

    With probability ``prior_weight`` alpha comes from the prior. Otherwise a
    municipality i is picked uniformly, each question's mean
    m_q = alpha_q0 / (alpha_q0 + alpha_q1) is drawn from
    Beta(c * p_iq, c * (1 - p_iq)) around its smoothed support p_iq, and each
    total alpha_q0 + alpha_q1 from its prior Gamma(2 kappa, theta). Under the
    prior the mean is Beta(kappa, kappa) and independent of the total, so the
    density ratio against the prior only involves the means.
    """

    def __init__(
        self,
        data: VoteTable,
        hyper: Hyperparams,
        concentration: float = 20.0,
        prior_weight: float = 0.05,
    ):
        if not concentration > 0:
            raise DomainError(f"Proposal concentration must be positive, got {concentration}")
        if not 0 < prior_weight <= 1:
            raise DomainError(f"Prior weight must lie in (0, 1], got {prior_weight}")
        self.data = data
        self.hyper = hyper
        self.concentration = concentration
        self.prior_weight = prior_weight
        support = np.clip((data.yes + 0.5) / (data.totals + 1.0), *SUPPORT_CLIP)
        self.a = concentration * support
        self.b = concentration * (1.0 - support)
        self._log_norm = betaln(self.a, self.b).sum(axis=1)
        self._prior_log_norm = betaln(hyper.kappa, hyper.kappa)

    @property
    def n_questions(self) -> int:
        return int(self.a.shape[1])

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """One (Q, 2) alpha column."""
        if rng.random() < self.prior_weight:
            return sample_alpha_prior(self.hyper, rng, n_questions=self.n_questions)
        i = rng.integers(self.a.shape[0])
        mean = np.clip(rng.beta(self.a[i], self.b[i]), MEAN_CLIP, 1.0 - MEAN_CLIP)
        total = rng.gamma(2.0 * self.hyper.kappa, self.hyper.theta, size=self.n_questions)
        return np.stack([total * mean, total * (1.0 - mean)], axis=-1)

    def log_ratio(self, alpha: np.ndarray) -> np.ndarray:
        """log(proposal density / prior density) for each bloc of a (K, Q, 2) alpha array."""
        alpha = np.asarray(alpha, dtype=float)
        K = alpha.shape[0]
        if self.n_questions == 0:
            return np.zeros(K)
        mean = np.clip(alpha[..., 0] / alpha.sum(axis=-1), MEAN_CLIP, 1.0 - MEAN_CLIP)
        log_m = np.log(mean)
        log_1m = np.log1p(-mean)
        anchored = log_m @ (self.a - 1.0).T + log_1m @ (self.b - 1.0).T - self._log_norm[None, :]
        mixture = logsumexp(anchored, axis=1) - math.log(self.a.shape[0])
        kappa = self.hyper.kappa
        prior = ((kappa - 1.0) * (log_m + log_1m) - self._prior_log_norm).sum(axis=1)
        return np.logaddexp(math.log(self.prior_weight), math.log1p(-self.prior_weight) + mixture - prior)


def _default_cache(data: VoteTable, state: ModelState, cache: Optional[LikelihoodCache]) -> LikelihoodCache:
    if cache is None or cache.n_blocs != state.K:
        return LikelihoodCache(data, state.alpha)
    return cache


def _reassignment_log_weights(state: ModelState, k: int, loglik: np.ndarray) -> np.ndarray:
    """Log weights (N, K-1) over the surviving blocs: rescaled eta_j times the likelihood under bloc j."""
    survivors = np.delete(np.arange(state.K), k)
    log_eta_star = np.log(state.eta[survivors]) - np.log1p(-state.eta[k])
    return log_eta_star[None, :] + loglik[:, survivors]


def _leave_one_out(weighted: np.ndarray) -> np.ndarray:
    """(K, N) array whose entry (k, i) is logsumexp over j != k of weighted[i, j]."""
    K = weighted.shape[1]
    tiled = np.broadcast_to(weighted, (K,) + weighted.shape).copy()
    tiled[np.arange(K), :, np.arange(K)] = -np.inf
    return logsumexp(tiled, axis=2)


def log_death_rates(
    data: VoteTable,
    state: ModelState,
    hyper: Hyperparams,
    cache: Optional[LikelihoodCache] = None,
    balance: DeathRateBalance = DeathRateBalance.EXACT,
    proposal: Optional[AnchoredAlphaProposal] = None,
    alpha_log_ratio: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Log death rate of every bloc, shape (K,); all -inf when K = 1.

    Passing a ``proposal`` balances the deaths against data-anchored births.
    ``alpha_log_ratio`` may carry ``proposal.log_ratio(state.alpha)`` when the
    caller keeps it up to date.

    Raises:
        DomainError: for a data-anchored proposal under the UNIFORM balance
    """
    K = state.K
    if proposal is not None and balance != DeathRateBalance.EXACT:
        raise DomainError("Data-anchored births need the exact death-rate balance")
    if K == 1 or hyper.beta_birth == 0:
        return np.full(K, -np.inf)
    loglik = _default_cache(data, state, cache).matrix
    n = state.z.shape[0]
    log_eta = np.log(state.eta)
    log_rest = np.log1p(-state.eta)
    sizes = np.bincount(state.z, minlength=K)
    weighted = log_eta[None, :] + loglik

    # Poisson(K - 1) / (K Poisson(K)) reduces to 1 / lambda
    log_rates = np.full(K, math.log(hyper.beta_birth) - math.log(hyper.lam))

    if proposal is None:
        rows = np.arange(n)
        masked = weighted.copy()
        masked[rows, state.z] = -np.inf
        marginal = logsumexp(masked, axis=1) - log_rest[state.z]
        if balance == DeathRateBalance.UNIFORM:
            marginal -= math.log(K - 1)
        own = weighted[rows, state.z]
        log_rates += np.bincount(state.z, weights=marginal - own, minlength=K)
        log_rates -= (n - sizes) * log_rest
    else:
        total = logsumexp(weighted, axis=1)
        log_rates += (_leave_one_out(weighted) - total[None, :]).sum(axis=1) - n * log_rest
        if alpha_log_ratio is None:
            alpha_log_ratio = proposal.log_ratio(state.alpha)
        log_rates += alpha_log_ratio

    if balance == DeathRateBalance.EXACT:
        g = hyper.gamma
        # Dirichlet normalizer ratio and the (gamma - 1) powers of the rescaled weights
        log_rates += gammaln((K - 1) * g) + gammaln(g) - gammaln(K * g)
        log_rates -= (K - 1) * (g - 1.0) * log_rest + (g - 1.0) * log_eta
        # inverse Jacobian of eta_j -> eta_j (1 - eta_k)
        log_rates -= (K - 2) * log_rest
        if proposal is None:
            # probability that the reverse birth moves exactly these municipalities
            log_rates += -sizes * math.log(K) + (n - sizes) * (math.log(K - 1) - math.log(K))
    return log_rates


def log_death_rate(
    data: VoteTable,
    state: ModelState,
    k: int,
    hyper: Hyperparams,
    cache: Optional[LikelihoodCache] = None,
    balance: DeathRateBalance = DeathRateBalance.EXACT,
    proposal: Optional[AnchoredAlphaProposal] = None,
) -> float:
    """Log of the death rate of bloc k; -inf when K = 1."""
    if not 0 <= k < state.K:
        raise DomainError(f"Bloc index {k} outside 0..{state.K - 1}")
    return float(log_death_rates(data, state, hyper, cache=cache, balance=balance, proposal=proposal)[k])


def death_rate(
    data: VoteTable,
    state: ModelState,
    k: int,
    hyper: Hyperparams,
    cache: Optional[LikelihoodCache] = None,
    balance: DeathRateBalance = DeathRateBalance.EXACT,
    proposal: Optional[AnchoredAlphaProposal] = None,
) -> float:
    """
    Rate at which bloc k dies, with the log rate clamped before exponentiation.

    Raises:
        DomainError: if k is not a bloc of the state
    """
    log_rate = log_death_rate(data, state, k, hyper, cache=cache, balance=balance, proposal=proposal)
    if log_rate == -math.inf:
        return 0.0
    return math.exp(min(log_rate, MAX_LOG_RATE))


def birth_move(
    state: ModelState,
    hyper: Hyperparams,
    rng: np.random.Generator,
    proposal: Optional[AnchoredAlphaProposal] = None,
    loglik: Optional[np.ndarray] = None,
) -> Optional[ModelState]:
    """
    Add one bloc with weight eta' ~ U(0, 1), scaling the old weights by (1 - eta').

    Without a proposal alpha comes from the prior and each municipality moves
    to the newcomer with probability 1 / (K + 1). With one, alpha comes from
    the proposal and municipality i moves with its posterior probability of
    belonging to the newcomer; ``loglik`` is the (N, K) likelihood matrix of
    the current blocs. Returns None when K is already at k_max.
    """
    K = state.K
    if K >= hyper.k_max:
        logger.debug(f"Birth rejected at k_max={hyper.k_max}")
        return None
    if proposal is None:
        new_alpha = sample_alpha_prior(hyper, rng, n_questions=state.alpha.shape[1])
    else:
        new_alpha = proposal.sample(rng)
    new_weight = rng.random()
    while new_weight <= 0.0:
        new_weight = rng.random()
    eta = np.append(state.eta * (1.0 - new_weight), new_weight)
    if proposal is None:
        move_probability = np.full(state.z.shape[0], 1.0 / (K + 1))
    else:
        if loglik is None:
            loglik = bloc_log_likelihoods(proposal.data, state.alpha)
        newcomer = bloc_log_likelihoods(proposal.data, new_alpha[None])[:, 0]
        incumbents = math.log1p(-new_weight) + logsumexp(np.log(state.eta)[None, :] + loglik, axis=1)
        move_probability = expit(math.log(new_weight) + newcomer - incumbents)
    moved = rng.random(state.z.shape[0]) < move_probability
    z = np.where(moved, K, state.z)
    alpha = np.concatenate([state.alpha, new_alpha[None, :, :]], axis=0)
    return ModelState(eta=renormalize(eta), z=z, alpha=alpha)


def death_move(
    state: ModelState,
    k: int,
    rng: np.random.Generator,
    log_weights: Optional[np.ndarray] = None,
) -> ModelState:
    """
    Remove bloc k, rescale the survivors' weights by 1 / (1 - eta_k) and
    compact the indices. Members of bloc k move uniformly over the survivors
    unless ``log_weights`` (N, K-1) gives per-municipality log weights.
    """
    K = state.K
    if K < 2:
        raise DomainError("The last bloc cannot die")
    if not 0 <= k < K:
        raise DomainError(f"Bloc index {k} outside 0..{K - 1}")
    eta = renormalize(np.delete(state.eta, k) / (1.0 - state.eta[k]))
    alpha = np.delete(state.alpha, k, axis=0)
    z = state.z.copy()
    affected = np.flatnonzero(z == k)
    z[z > k] -= 1
    if affected.size:
        if log_weights is None:
            z[affected] = rng.integers(0, K - 1, size=affected.size)
        else:
            rows = np.asarray(log_weights)[affected]
            probabilities = np.exp(rows - logsumexp(rows, axis=1, keepdims=True))
            cumulative = np.cumsum(probabilities, axis=1)
            u = rng.random(affected.size)[:, None]
            z[affected] = (cumulative[:, :-1] < u).sum(axis=1)
    return ModelState(eta=eta, z=z, alpha=alpha)


def _draw_wait(total_rate: float, rng: np.random.Generator, trace: Optional[ChainTrace]) -> float:
    mean = 1.0 / total_rate
    wait = rng.exponential(mean)
    cap = WAIT_CAP_FACTOR * mean
    if wait > cap:
        logger.warning(f"Capping BD wait {wait:.3e} at {cap:.3e}")
        if trace is not None:
            trace.capped_waits += 1
        wait = cap
    return wait


def bd_process(
    data: VoteTable,
    state: ModelState,
    hyper: Hyperparams,
    duration: float,
    rng: np.random.Generator,
    cache: Optional[LikelihoodCache] = None,
    balance: DeathRateBalance = DeathRateBalance.EXACT,
    trace: Optional[ChainTrace] = None,
    proposal: Optional[AnchoredAlphaProposal] = None,
) -> Tuple[ModelState, List[BDEvent]]:
    """
    Run the birth-death process for ``duration`` units of virtual time.

    Returns the final state and its event log. The log ends with an END event
    whose wait is the time spent in the final state, so the waits always sum
    to ``duration``. A passed cache is kept in step with every move. Births
    come from the prior unless a ``proposal`` is given.
    """
    if not duration > 0:
        raise DomainError(f"BD duration must be positive, got {duration}")
    if proposal is not None and balance != DeathRateBalance.EXACT:
        raise DomainError("Data-anchored births need the exact death-rate balance")
    cache = _default_cache(data, state, cache)
    alpha_log_ratio = proposal.log_ratio(state.alpha) if proposal is not None else None
    events: List[BDEvent] = []
    elapsed = 0.0
    while True:
        K = state.K
        log_rates = log_death_rates(
            data, state, hyper, cache=cache, balance=balance,
            proposal=proposal, alpha_log_ratio=alpha_log_ratio,
        )
        death_rates = np.exp(np.minimum(log_rates, MAX_LOG_RATE))
        cumulative = np.cumsum(death_rates)
        total_death = float(cumulative[-1])
        total_rate = hyper.beta_birth + total_death
        if total_rate <= 0:
            break
        wait = _draw_wait(total_rate, rng, trace)
        if elapsed + wait >= duration:
            break
        elapsed += wait
        u = rng.random() * total_rate
        if u < hyper.beta_birth:
            born = birth_move(state, hyper, rng, proposal=proposal, loglik=cache.matrix)
            if born is None:
                events.append(BDEvent(elapsed, EventKind.REJECTED_BIRTH, K, K, wait))
                continue
            cache.append_bloc(born.alpha[-1])
            if proposal is not None:
                alpha_log_ratio = np.append(alpha_log_ratio, proposal.log_ratio(born.alpha[-1:]))
            state = born
            events.append(BDEvent(elapsed, EventKind.BIRTH, K, K + 1, wait))
        else:
            k = min(int(np.searchsorted(cumulative, u - hyper.beta_birth, side='right')), K - 1)
            log_weights = None
            if balance == DeathRateBalance.EXACT:
                log_weights = _reassignment_log_weights(state, k, cache.matrix)
            state = death_move(state, k, rng, log_weights=log_weights)
            cache.remove_bloc(k)
            if proposal is not None:
                alpha_log_ratio = np.delete(alpha_log_ratio, k)
            events.append(BDEvent(elapsed, EventKind.DEATH, K, K - 1, wait))
    events.append(BDEvent(duration, EventKind.END, state.K, state.K, duration - elapsed))
    if trace is not None:
        trace.record(events)
    return state, events


def time_at_k(events: Sequence[BDEvent]) -> Dict[int, float]:
    """Virtual time spent at each K over an event log."""
    tally: Counter = Counter()
    for event in events:
        tally[event.k_before] += event.wait
    return dict(sorted(tally.items()))


def _moment_matched_alpha(support: np.ndarray, hyper: Hyperparams) -> np.ndarray:
    """(Q, 2) alpha whose Beta mean and variance match a cluster's observed supports."""
    mean = np.clip(support.mean(axis=0), *SUPPORT_CLIP)
    total = np.full(support.shape[1], 2.0 * hyper.kappa * hyper.theta)
    if support.shape[0] > 1:
        variance = support.var(axis=0)
        spread = variance > 0
        total[spread] = mean[spread] * (1.0 - mean[spread]) / variance[spread] - 1.0
    total = np.clip(total, *START_TOTAL_BOUNDS)
    return np.stack([total * mean, total * (1.0 - mean)], axis=-1)


def initial_state(data: VoteTable, hyper: Hyperparams, rng: np.random.Generator, blocs: Optional[int] = None) -> ModelState:
    """
    Starting point of a chain.

    With questions, the observed supports are split into K clusters by
    k-means and each bloc's alpha matches its cluster's mean and spread;
    eta follows the cluster sizes and z its conditional. K is ``blocs`` or
    ceil(lambda), capped by k_max and the number of distinct support rows.
    Without questions alpha comes from the prior and eta from Dirichlet(gamma).
    """
    K = blocs if blocs is not None else math.ceil(hyper.lam)
    K = int(min(max(K, 1), hyper.k_max))
    if data.n_questions == 0:
        alpha = np.stack([sample_alpha_prior(hyper, rng, n_questions=0) for _ in range(K)])
        eta = sample_dirichlet(np.full(K, hyper.gamma), rng) if K > 1 else np.ones(1)
        return ModelState(eta=eta, z=update_z(data, alpha, eta, rng), alpha=alpha)

    support = data.observed_support
    K = min(K, len(np.unique(support, axis=0)))
    if K == 1:
        labels = np.zeros(data.n_municipalities, dtype=np.int64)
    else:
        with warnings.catch_warnings():
            warnings.simplefilter('ignore')
            _, labels = kmeans2(support, K, minit='++', seed=rng)
    alpha = np.empty((K, data.n_questions, 2))
    for k in range(K):
        members = support[labels == k]
        if members.shape[0] == 0:
            logger.debug(f"Empty starting cluster {k}; drawing its alpha from the prior")
            alpha[k] = sample_alpha_prior(hyper, rng, n_questions=data.n_questions)
        else:
            alpha[k] = _moment_matched_alpha(members, hyper)
    sizes = np.bincount(labels, minlength=K)
    eta = renormalize((sizes + hyper.gamma) / (data.n_municipalities + K * hyper.gamma))
    z = update_z(data, alpha, eta, rng)
    logger.debug(f"Data-driven start with K={K}, cluster sizes {sizes.tolist()}")
    return ModelState(eta=eta, z=z, alpha=alpha)


def _cached_log_likelihood(state: ModelState, cache: LikelihoodCache) -> float:
    rows = np.arange(state.z.shape[0])
    return float(np.sum(np.log(state.eta[state.z]) + cache.matrix[rows, state.z]))


def run_chain(
    data: VoteTable,
    hyper: Hyperparams,
    sweep_config: SweepConfig,
    run_config: RunConfig,
    rng: np.random.Generator,
    progress: Optional[Callable[[int, ModelState], None]] = None,
    trace: Optional[ChainTrace] = None,
) -> List[PosteriorSample]:
    """
    Alternate a BD stretch of ``bd_time_per_iteration`` with one fixed-K sweep.

    Keeps deep-copied snapshots at iterations burn_in, burn_in + thin, ...
    Deterministic given the generator's state.
    """
    state = initial_state(data, hyper, rng, blocs=run_config.initial_blocs)
    cache = LikelihoodCache(data, state.alpha)
    proposal = None
    if run_config.birth_proposal == BirthProposal.DATA:
        proposal = AnchoredAlphaProposal(data, hyper)
    samples: List[PosteriorSample] = []
    report_every = max(run_config.iterations // 10, 1)
    chain_label = trace.chain if trace is not None else 0

    for iteration in range(run_config.iterations):
        if trace is not None:
            trace.tally_time = iteration >= run_config.burn_in
        state, _ = bd_process(
            data, state, hyper, run_config.bd_time_per_iteration, rng,
            cache=cache, balance=run_config.death_rate_balance, trace=trace, proposal=proposal,
        )
        state, _ = sweep(data, state, None, hyper, sweep_config, rng, iteration=iteration, cache=cache)
        log_likelihood = _cached_log_likelihood(state, cache)
        if trace is not None:
            trace.log_likelihood.append(log_likelihood)
        if run_config.is_retained(iteration):
            samples.append(PosteriorSample(
                state=state.copy(),
                wait_time=run_config.sample_wait_time,
                iteration=iteration,
                log_likelihood=log_likelihood,
            ))
        if (iteration + 1) % report_every == 0:
            logger.info(
                f"Chain {chain_label}: iteration {iteration + 1}/{run_config.iterations}, "
                f"K={state.K}, log-likelihood {log_likelihood:.2f}"
            )
            if progress is not None:
                progress(iteration + 1, state)
    return samples


def effective_k(state: ModelState, min_bloc_size: int) -> int:
    """Blocs holding at least ``min_bloc_size`` municipalities, never below 1."""
    return max(int((state.bloc_sizes() >= min_bloc_size).sum()), 1)


def posterior_K(samples: Sequence[PosteriorSample], min_bloc_size: int = 0) -> Dict[int, float]:
    """
    Wait-weighted posterior over the effective number of blocs.

    Samples from ``run_chain`` all carry the same wait, bd_time * thin, so
    for them this is a plain tally of retained states; the exact
    birth-death sojourn times per K are in ``ChainTrace.time_at_k``.

    Raises:
        DomainError: on an empty sample list or negative min_bloc_size
    """
    if not samples:
        raise DomainError("posterior_K needs at least one sample")
    if min_bloc_size < 0:
        raise DomainError(f"min_bloc_size must be non-negative, got {min_bloc_size}")
    mass: Counter = Counter()
    for sample in samples:
        mass[effective_k(sample.state, min_bloc_size)] += sample.wait_time
    total = sum(mass.values())
    return {k: mass[k] / total for k in sorted(mass)}


def posterior_mode(distribution: Dict[int, float]) -> int:
    """Most probable K; ties go to the smaller K."""
    return min(distribution, key=lambda k: (-distribution[k], k))


def chain_generators(seed: int, chains: int) -> List[np.random.Generator]:
    """Independent generators per chain derived from one root seed."""
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(chains)]


def gelman_rubin(traces: Sequence[Sequence[float]]) -> float:
    """
    Rank-normalized split R-hat over per-chain traces, trimmed to a common length.

    Returns NaN for fewer than two chains or fewer than four draws per chain,
    1.0 for identical constant chains and inf for distinct constant chains.
    """
    if len(traces) < 2:
        return float('nan')
    length = min(len(t) for t in traces)
    if length < 4:
        return float('nan')
    draws = np.array([np.asarray(t, dtype=float)[-length:] for t in traces])
    if np.all(draws.var(axis=1) == 0):
        return 1.0 if np.ptp(draws) == 0 else float('inf')
    return float(az.rhat(draws, method="rank"))
