"""
Core model types and probability kernels for the Beta-binomial bloc mixture.

Every sampler, the birth-death process and the analysis layer consume the
types and kernels defined here. All kernels work in log space through
log-Gamma so that realistic municipal vote counts never overflow.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import stats
from scipy.special import gammaln, logsumexp

logger = logging.getLogger('bloc_infer.model_core')

# Simplex drift tolerated before weights are renormalized
SIMPLEX_TOLERANCE = 1e-10


class DomainError(ValueError):
    """Raised when an operation is called outside its domain."""


@dataclass(frozen=True)
class Municipality:
    id: str
    name: str
    latitude: Optional[float] = None
    longitude: Optional[float] = None

    @property
    def has_coordinates(self) -> bool:
        return self.latitude is not None and self.longitude is not None


@dataclass(frozen=True)
class Question:
    id: str
    year: int
    ballot_label: str = ""
    content_tag: str = ""


@dataclass(eq=False)
class VoteTable:
    """
    Dense yes/no counts per (municipality, question).

    ``counts`` has shape (N, Q, 2): index 0 holds yes votes, index 1 no votes.
    A table with Q = 0 is allowed and represents a prior-only dataset.
    """

    municipalities: List[Municipality]
    questions: List[Question]
    counts: np.ndarray
    _log_binomial: Optional[np.ndarray] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        n, q = len(self.municipalities), len(self.questions)
        if n < 1:
            raise DomainError("A vote table needs at least one municipality")
        if self.counts.shape != (n, q, 2):
            raise DomainError(f"Counts have shape {self.counts.shape}, expected ({n}, {q}, 2)")
        if (self.counts < 0).any():
            raise DomainError("Vote counts must be non-negative")
        if q and (self.counts.sum(axis=2) < 1).any():
            bad = np.argwhere(self.counts.sum(axis=2) < 1)[0]
            raise DomainError(
                f"Cell ({self.municipalities[bad[0]].id}, {self.questions[bad[1]].id}) has no votes"
            )

    @property
    def n_municipalities(self) -> int:
        return len(self.municipalities)

    @property
    def n_questions(self) -> int:
        return len(self.questions)

    @property
    def yes(self) -> np.ndarray:
        return self.counts[..., 0]

    @property
    def no(self) -> np.ndarray:
        return self.counts[..., 1]

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=2)

    @property
    def observed_support(self) -> np.ndarray:
        """Observed proportion of yes votes, shape (N, Q)."""
        return self.yes / self.totals

    @property
    def log_binomial_coefficients(self) -> np.ndarray:
        """log C(yes + no, yes) per cell; cached since counts never change."""
        if self._log_binomial is None:
            self._log_binomial = (
                gammaln(self.totals + 1.0) - gammaln(self.yes + 1.0) - gammaln(self.no + 1.0)
            )
        return self._log_binomial

    @property
    def has_coordinates(self) -> bool:
        return all(m.has_coordinates for m in self.municipalities)


@dataclass(frozen=True)
class Hyperparams:
    """
    Prior hyperparameters.

    Args:
        kappa: Gamma shape of every alpha component
        theta: Gamma scale of every alpha component (prior mean kappa * theta)
        lam: Poisson mean of the number of blocs
        gamma: symmetric Dirichlet concentration of the mixture weights
        beta_birth: birth rate of the birth-death process; defaults to lam
        k_max: cap on the number of blocs
    """

    kappa: float = 1.0
    theta: float = 10.0
    lam: float = 10.0
    gamma: float = 1.0
    beta_birth: Optional[float] = None
    k_max: int = 30

    def __post_init__(self):
        if self.beta_birth is None:
            object.__setattr__(self, 'beta_birth', float(self.lam))
        for name in ('kappa', 'theta', 'lam', 'gamma'):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise DomainError(f"Hyperparameter {name} must be positive, got {value}")
        # zero disables births; used to freeze K
        if not np.isfinite(self.beta_birth) or self.beta_birth < 0:
            raise DomainError(f"Birth rate must be non-negative, got {self.beta_birth}")
        if int(self.k_max) != self.k_max or self.k_max < 1:
            raise DomainError(f"k_max must be a positive integer, got {self.k_max}")


@dataclass(eq=False)
class ModelState:
    """
    One point of the mixture posterior.

    Args:
        eta: mixture weights, shape (K,)
        z: bloc index of each municipality, shape (N,), values in 0..K-1
        alpha: Beta-binomial parameters, shape (K, Q, 2)
    """

    eta: np.ndarray
    z: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=float)
        self.z = np.asarray(self.z, dtype=np.int64)
        self.alpha = np.asarray(self.alpha, dtype=float)

    @property
    def K(self) -> int:
        return int(self.eta.shape[0])

    def bloc_sizes(self) -> np.ndarray:
        return np.bincount(self.z, minlength=self.K)

    def copy(self) -> 'ModelState':
        return ModelState(eta=self.eta.copy(), z=self.z.copy(), alpha=self.alpha.copy())

    def validate(self, data: Optional[VoteTable] = None) -> None:
        """Check the state's invariants, raising DomainError on the first violation."""
        if self.K < 1:
            raise DomainError("A state needs at least one bloc")
        if self.alpha.ndim != 3 or self.alpha.shape[0] != self.K or self.alpha.shape[2] != 2:
            raise DomainError(f"alpha has shape {self.alpha.shape}, expected ({self.K}, Q, 2)")
        if (self.eta <= 0).any() or abs(self.eta.sum() - 1.0) > 1e-12:
            raise DomainError("eta must be a strictly positive simplex vector")
        if self.z.size and (self.z.min() < 0 or self.z.max() >= self.K):
            raise DomainError(f"Bloc assignments must lie in 0..{self.K - 1}")
        if (self.alpha <= 0).any():
            raise DomainError("Every alpha component must be positive")
        if data is not None:
            if self.z.shape[0] != data.n_municipalities or self.alpha.shape[1] != data.n_questions:
                raise DomainError(
                    f"State covers {self.z.shape[0]} municipalities and {self.alpha.shape[1]} questions; "
                    f"data has {data.n_municipalities} and {data.n_questions}"
                )


@dataclass(eq=False)
class AugmentedCounts:
    """Latent success counts r, shape (N, Q, 2), bounded by the observed counts."""

    r: np.ndarray

    def check_bounds(self, data: VoteTable) -> bool:
        c = data.counts
        return bool(
            (self.r >= 0).all()
            and (self.r <= c).all()
            and ((self.r >= 1) == (c >= 1)).all()
        )


def renormalize(eta: np.ndarray) -> np.ndarray:
    """Project weights back onto the simplex, flooring underflowed entries."""
    eta = np.maximum(np.asarray(eta, dtype=float), np.finfo(float).tiny)
    total = eta.sum()
    if abs(total - 1.0) > SIMPLEX_TOLERANCE:
        logger.debug(f"Renormalizing mixture weights with drift {total - 1.0:.3e}")
    return eta / total


def sample_dirichlet(concentration: np.ndarray, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """
    Dirichlet draw computed through log-Gamma variates.

    Small concentrations make plain Gamma draws underflow to zero; drawing
    log G = log Gamma(a + 1) + log(U) / a and normalizing in log space keeps
    every weight strictly positive.
    """
    a = np.asarray(concentration, dtype=float)
    shape = a.shape if size is None else (size,) + a.shape
    log_g = np.log(rng.gamma(a + 1.0, 1.0, size=shape)) + np.log(rng.random(shape)) / a
    weights = np.exp(log_g - logsumexp(log_g, axis=-1, keepdims=True))
    weights = np.maximum(weights, np.finfo(float).tiny)
    return weights / weights.sum(axis=-1, keepdims=True)


def _log_beta_binomial(yes, no, a0, a1, log_binomial=None):
    if log_binomial is None:
        log_binomial = gammaln(yes + no + 1.0) - gammaln(yes + 1.0) - gammaln(no + 1.0)
    return (
        log_binomial
        + gammaln(yes + a0) + gammaln(no + a1) - gammaln(yes + no + a0 + a1)
        - gammaln(a0) - gammaln(a1) + gammaln(a0 + a1)
    )


def log_beta_binomial(yes, no, a0, a1):
    """
    Log Beta-binomial probability of (yes, no) given (a0, a1).

    log C(n, yes) + log B(yes + a0, no + a1) - log B(a0, a1), evaluated with
    log-Gamma only. Broadcasts over array arguments.

    Raises:
        DomainError: on negative counts or non-positive alpha
    """
    yes = np.asarray(yes, dtype=float)
    no = np.asarray(no, dtype=float)
    a0 = np.asarray(a0, dtype=float)
    a1 = np.asarray(a1, dtype=float)
    if (yes < 0).any() or (no < 0).any():
        raise DomainError("Counts must be non-negative")
    if not ((a0 > 0).all() and (a1 > 0).all()):
        raise DomainError("Beta-binomial parameters must be positive")
    result = _log_beta_binomial(yes, no, a0, a1)
    return float(result) if result.ndim == 0 else result


def bloc_log_likelihoods(data: VoteTable, alpha: np.ndarray) -> np.ndarray:
    """
    Per-municipality, per-bloc log likelihood, shape (N, K).

    Entry (i, k) is the sum over questions of log BB(c_iq | alpha_kq).
    """
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim != 3 or alpha.shape[1] != data.n_questions or alpha.shape[2] != 2:
        raise DomainError(f"alpha has shape {alpha.shape}, expected (K, {data.n_questions}, 2)")
    if data.n_questions == 0:
        return np.zeros((data.n_municipalities, alpha.shape[0]))
    yes = data.yes[:, None, :].astype(float)
    no = data.no[:, None, :].astype(float)
    cell = _log_beta_binomial(
        yes, no, alpha[None, :, :, 0], alpha[None, :, :, 1],
        log_binomial=data.log_binomial_coefficients[:, None, :],
    )
    return cell.sum(axis=2)


def _check_dimensions(data: VoteTable, eta: np.ndarray, alpha: np.ndarray) -> None:
    if alpha.ndim != 3 or alpha.shape[0] != eta.shape[0]:
        raise DomainError(f"eta has {eta.shape[0]} blocs but alpha has shape {alpha.shape}")
    if alpha.shape[1] != data.n_questions:
        raise DomainError(f"alpha covers {alpha.shape[1]} questions; data has {data.n_questions}")


def log_complete_likelihood(data: VoteTable, state: ModelState) -> float:
    """Sum over municipalities of log eta_{z_i} + sum_q log BB(c_iq | alpha_{z_i q})."""
    _check_dimensions(data, state.eta, state.alpha)
    if state.z.shape[0] != data.n_municipalities:
        raise DomainError(f"z covers {state.z.shape[0]} municipalities; data has {data.n_municipalities}")
    loglik = bloc_log_likelihoods(data, state.alpha)
    rows = np.arange(data.n_municipalities)
    return float(np.sum(np.log(state.eta[state.z]) + loglik[rows, state.z]))


def log_marginal_mixture(data: VoteTable, alpha: np.ndarray, eta: np.ndarray) -> float:
    """Log of prod_i sum_k eta_k prod_q BB(c_iq | alpha_kq), with z summed out."""
    alpha = np.asarray(alpha, dtype=float)
    eta = np.asarray(eta, dtype=float)
    _check_dimensions(data, eta, alpha)
    loglik = bloc_log_likelihoods(data, alpha)
    return float(logsumexp(np.log(eta)[None, :] + loglik, axis=1).sum())


def sample_alpha_prior(hyper: Hyperparams, rng: np.random.Generator, n_questions: Optional[int] = None) -> np.ndarray:
    """
    Draw Beta-binomial parameters from their Gamma(kappa, scale theta) prior.

    Returns a (2,) pair, or a (n_questions, 2) column for a whole bloc.
    """
    shape: Tuple[int, ...] = (2,) if n_questions is None else (n_questions, 2)
    return rng.gamma(hyper.kappa, hyper.theta, size=shape)


def log_alpha_prior(alpha: np.ndarray, hyper: Hyperparams) -> float:
    """Log prior density of an alpha array under independent Gamma(kappa, theta)."""
    return float(stats.gamma.logpdf(alpha, hyper.kappa, scale=hyper.theta).sum())


class LikelihoodCache:
    """
    Per-(municipality, bloc) log likelihood sums kept in step with alpha.

    Assignments never enter the sums, so only alpha changes invalidate
    entries: a birth appends one column, a death drops one, a sweep refreshes
    the whole matrix.
    """

    def __init__(self, data: VoteTable, alpha: np.ndarray):
        self.data = data
        self.matrix = bloc_log_likelihoods(data, alpha)

    @property
    def n_blocs(self) -> int:
        return int(self.matrix.shape[1])

    def refresh(self, alpha: np.ndarray) -> np.ndarray:
        self.matrix = bloc_log_likelihoods(self.data, alpha)
        return self.matrix

    def append_bloc(self, alpha_column: np.ndarray) -> None:
        column = bloc_log_likelihoods(self.data, np.asarray(alpha_column)[None, :, :])
        self.matrix = np.hstack([self.matrix, column])

    def remove_bloc(self, k: int) -> None:
        self.matrix = np.delete(self.matrix, k, axis=1)
