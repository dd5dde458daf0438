"""
Posterior summaries of a bloc-mixture run.

Everything here is computed from the retained samples and the raw vote
table: wait-weighted co-occupancy, a representative k-medoids clustering of
it, map-ready bloc proportions, the question-fit diagnostic, Jensen-Shannon
and CLR distance matrices, polarization series and per-bloc support.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats
from scipy.spatial.distance import pdist, squareform
from scipy.special import entr

from bdmcmc import PosteriorSample
from model_core import DomainError, Municipality, VoteTable

logger = logging.getLogger('bloc_infer.posterior_analysis')

# Beta draws held in memory at once by question_fit
DRAW_CHUNK = 1 << 21
SYMMETRY_TOLERANCE = 1e-9


@dataclass(eq=False)
class CooccupancyMatrix:
    """Wait-weighted fraction of samples in which two municipalities share a bloc."""

    values: np.ndarray

    @property
    def distance(self) -> np.ndarray:
        return 1.0 - self.values


@dataclass(eq=False)
class RepresentativeClustering:
    """
    A single clustering standing in for the posterior.

    ``labels`` and ``medoids`` use 0-based bloc indices. ``bloc_order[r]`` is
    the bloc shown at rank r; it starts as the identity and is replaced by
    the south-to-north order once coordinates are known.
    """

    K_star: int
    labels: np.ndarray
    medoids: np.ndarray
    cost: float
    bloc_order: np.ndarray = None
    cost_history: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.bloc_order is None:
            self.bloc_order = np.arange(self.K_star)

    @property
    def ranks(self) -> np.ndarray:
        """rank of each bloc under bloc_order."""
        ranks = np.empty(self.K_star, dtype=np.int64)
        ranks[self.bloc_order] = np.arange(self.K_star)
        return ranks

    @property
    def ranked_labels(self) -> np.ndarray:
        return self.ranks[self.labels]

    def municipality_order(self) -> np.ndarray:
        """Municipality indices grouped by ranked bloc, stable within a bloc."""
        return np.lexsort((np.arange(self.labels.size), self.ranked_labels))


@dataclass(eq=False)
class QuestionFitTable:
    predicted: np.ndarray         # (N, Q) pooled median of the Beta draws
    observed: np.ndarray          # (N, Q)
    fit: np.ndarray               # predicted minus observed
    question_ids: List[str]
    median: np.ndarray            # (Q,)
    sd: np.ndarray                # (Q,)
    threshold: float
    flagged: List[str]

    def per_question(self) -> pd.DataFrame:
        return pd.DataFrame({
            'question_id': self.question_ids,
            'median_fit': self.median,
            'sd_fit': self.sd,
            'flagged': [q in self.flagged for q in self.question_ids],
        })

    def per_cell(self, municipality_ids: Sequence[str]) -> pd.DataFrame:
        n, n_questions = self.fit.shape
        return pd.DataFrame({
            'municipality_id': np.repeat(list(municipality_ids), n_questions),
            'question_id': np.tile(self.question_ids, n),
            'predicted': self.predicted.ravel(),
            'observed': self.observed.ravel(),
            'fit': self.fit.ravel(),
        })


def _require_samples(samples: Sequence[PosteriorSample]) -> None:
    if not samples:
        raise DomainError("At least one posterior sample is required")


def _wait_weights(samples: Sequence[PosteriorSample]) -> np.ndarray:
    waits = np.array([s.wait_time for s in samples], dtype=float)
    return waits / waits.sum()


def cooccupancy(samples: Sequence[PosteriorSample]) -> CooccupancyMatrix:
    """
    Entry (i, j) is sum of wait * [z_i == z_j] over samples, divided by the total wait.

    Label switching cannot affect it since only equality of labels enters.
    """
    _require_samples(samples)
    n = samples[0].state.z.shape[0]
    weights = _wait_weights(samples)
    values = np.zeros((n, n))
    for sample, weight in zip(samples, weights):
        z = sample.state.z
        if z.shape[0] != n:
            raise DomainError(f"Sample at iteration {sample.iteration} covers {z.shape[0]} municipalities, expected {n}")
        onehot = np.zeros((n, sample.state.K))
        onehot[np.arange(n), z] = 1.0
        values += weight * (onehot @ onehot.T)
    values = np.clip(values / weights.sum(), 0.0, 1.0)
    values = 0.5 * (values + values.T)
    np.fill_diagonal(values, 1.0)
    return CooccupancyMatrix(values=values)


def _check_distance(distance: np.ndarray) -> np.ndarray:
    distance = np.asarray(distance, dtype=float)
    if distance.ndim != 2 or distance.shape[0] != distance.shape[1]:
        raise DomainError(f"Distance matrix must be square, got shape {distance.shape}")
    if not np.allclose(distance, distance.T, atol=SYMMETRY_TOLERANCE):
        raise DomainError("Distance matrix must be symmetric")
    if np.abs(np.diag(distance)).max(initial=0.0) > SYMMETRY_TOLERANCE:
        raise DomainError("Distance matrix must have a zero diagonal")
    return distance


def _seed_medoids(distance: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ style seeding: each new medoid drawn with probability proportional to D^2."""
    n = distance.shape[0]
    chosen = [int(rng.integers(n))]
    for _ in range(1, k):
        nearest = distance[:, chosen].min(axis=1) ** 2
        nearest[chosen] = 0.0
        total = nearest.sum()
        if total > 0:
            chosen.append(int(rng.choice(n, p=nearest / total)))
        else:
            remaining = np.setdiff1d(np.arange(n), chosen)
            chosen.append(int(rng.choice(remaining)))
    return np.array(chosen, dtype=np.int64)


def _assign(distance: np.ndarray, medoids: np.ndarray) -> np.ndarray:
    labels = np.argmin(distance[:, medoids], axis=1)
    labels[medoids] = np.arange(medoids.size)
    return labels


def _cost(distance: np.ndarray, medoids: np.ndarray, labels: np.ndarray) -> float:
    return float(distance[np.arange(labels.size), medoids[labels]].sum())


def _alternate(distance: np.ndarray, medoids: np.ndarray, max_iter: int, history: List[float]) -> np.ndarray:
    for _ in range(max_iter):
        labels = _assign(distance, medoids)
        history.append(_cost(distance, medoids, labels))
        updated = medoids.copy()
        for c in range(medoids.size):
            members = np.flatnonzero(labels == c)
            within = distance[np.ix_(members, members)].sum(axis=1)
            best = members[np.argmin(within)]
            current = within[members == medoids[c]][0]
            if within.min() < current:
                updated[c] = best
        if np.array_equal(updated, medoids):
            break
        medoids = updated
    return medoids


def _swap(distance: np.ndarray, medoids: np.ndarray, history: List[float]) -> np.ndarray:
    """Greedy PAM swap phase: take the best improving (medoid, non-medoid) exchange until none remain."""
    cost = float(distance[:, medoids].min(axis=1).sum())
    while True:
        best_cost, best_move = cost, None
        for position in range(medoids.size):
            others = np.delete(medoids, position)
            nearest_other = distance[:, others].min(axis=1) if others.size else np.full(distance.shape[0], np.inf)
            candidate_costs = np.minimum(nearest_other[:, None], distance).sum(axis=0)
            candidate_costs[medoids] = np.inf
            h = int(np.argmin(candidate_costs))
            if candidate_costs[h] < best_cost - 1e-12:
                best_cost, best_move = float(candidate_costs[h]), (position, h)
        if best_move is None:
            return medoids
        medoids = medoids.copy()
        medoids[best_move[0]] = best_move[1]
        cost = best_cost
        history.append(cost)


def k_medoids(
    distance: np.ndarray,
    K_star: int,
    seed: int = 0,
    n_restarts: int = 20,
    max_iter: int = 100,
) -> RepresentativeClustering:
    """
    PAM-style k-medoids on a precomputed distance matrix.

    Each restart seeds medoids k-means++ style, alternates assignment and
    medoid updates, then runs the swap phase. The cheapest restart wins;
    blocs are numbered by medoid index so the result is deterministic given
    the seed.

    Raises:
        DomainError: on a malformed matrix or K_star outside 1..N
    """
    distance = _check_distance(distance)
    n = distance.shape[0]
    if not 1 <= K_star <= n:
        raise DomainError(f"K_star must lie in 1..{n}, got {K_star}")
    rng = np.random.default_rng(seed)
    best: Optional[Tuple[float, np.ndarray, List[float]]] = None
    for _ in range(max(n_restarts, 1)):
        history: List[float] = []
        medoids = _seed_medoids(distance, K_star, rng)
        medoids = _alternate(distance, medoids, max_iter, history)
        medoids = _swap(distance, medoids, history)
        labels = _assign(distance, medoids)
        cost = _cost(distance, medoids, labels)
        history.append(cost)
        if best is None or cost < best[0] - 1e-12:
            best = (cost, medoids, history)
    cost, medoids, history = best
    medoids = np.sort(medoids)
    labels = _assign(distance, medoids)
    return RepresentativeClustering(
        K_star=K_star,
        labels=labels,
        medoids=medoids,
        cost=_cost(distance, medoids, labels),
        cost_history=history,
    )


def bloc_proportions(cooc: CooccupancyMatrix, clustering: RepresentativeClustering) -> np.ndarray:
    """
    Map-ready mixture proportions, shape (N, K_star), rows summing to 1.

    Entry (i, k) is the median co-occupancy of i with the other members of
    bloc k; a sole member falls back to its own diagonal entry.

    Raises:
        DomainError: on dimension mismatch or an empty bloc
    """
    values = np.asarray(cooc.values, dtype=float)
    n = values.shape[0]
    if clustering.labels.shape[0] != n:
        raise DomainError(f"Clustering covers {clustering.labels.shape[0]} municipalities, matrix has {n}")
    proportions = np.zeros((n, clustering.K_star))
    for k in range(clustering.K_star):
        members = np.flatnonzero(clustering.labels == k)
        if members.size == 0:
            raise DomainError(f"Bloc {k} has no members")
        block = values[:, members].copy()
        if members.size > 1:
            block[members, np.arange(members.size)] = np.nan
        proportions[:, k] = np.nanmedian(block, axis=1)
    totals = proportions.sum(axis=1)
    empty = totals <= 0
    proportions[empty] = 0.0
    proportions[empty, clustering.labels[empty]] = 1.0
    return proportions / proportions.sum(axis=1, keepdims=True)


def bloc_ordering(
    clustering: RepresentativeClustering,
    municipalities: Sequence[Municipality],
    proportions: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    South-to-north bloc order.

    Blocs are sorted by the lowest latitude among municipalities whose
    majority bloc it is; ties keep the lower bloc index first and blocs that
    are nobody's majority go last. Without coordinates the identity is returned.
    """
    if not all(m.has_coordinates for m in municipalities):
        logger.warning("Municipality coordinates missing; keeping bloc order as clustered")
        return np.arange(clustering.K_star)
    latitudes = np.array([m.latitude for m in municipalities], dtype=float)
    majority = clustering.labels if proportions is None else np.argmax(proportions, axis=1)
    southernmost = np.full(clustering.K_star, np.inf)
    np.minimum.at(southernmost, majority, latitudes)
    return np.lexsort((np.arange(clustering.K_star), southernmost))


def apply_bloc_order(clustering: RepresentativeClustering, order: np.ndarray) -> RepresentativeClustering:
    order = np.asarray(order, dtype=np.int64)
    if not np.array_equal(np.sort(order), np.arange(clustering.K_star)):
        raise DomainError(f"Bloc order {order.tolist()} is not a permutation of 0..{clustering.K_star - 1}")
    return replace(clustering, bloc_order=order)


def _systematic_resample(weights: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    positions = (rng.random() + np.arange(count)) / count
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    return np.searchsorted(cumulative, positions, side='right')


def question_fit(
    data: VoteTable,
    samples: Sequence[PosteriorSample],
    draws_per_sample: int = 100,
    rng: Optional[np.random.Generator] = None,
    max_samples: int = 100,
) -> QuestionFitTable:
    """
    Estimated question fit: pooled median of Beta(alpha_{z_i q}) draws minus observed support.

    At most ``max_samples`` samples enter, picked by wait-weighted systematic
    resampling. A question is flagged as local when the spread of its fit
    across municipalities exceeds median(SD) + 3 * MAD(SD).
    """
    _require_samples(samples)
    if draws_per_sample < 1:
        raise DomainError(f"draws_per_sample must be at least 1, got {draws_per_sample}")
    rng = rng if rng is not None else np.random.default_rng(0)
    count = min(len(samples), max(max_samples, 1))
    chosen = [samples[i] for i in _systematic_resample(_wait_weights(samples), count, rng)]

    n, n_questions = data.n_municipalities, data.n_questions
    predicted = np.zeros((n, n_questions))
    block = max(DRAW_CHUNK // (count * draws_per_sample), 1)
    for q in range(n_questions):
        per_sample = np.stack([s.state.alpha[s.state.z, q] for s in chosen])  # (M, N, 2)
        for start in range(0, n, block):
            a = per_sample[:, start:start + block]
            draws = rng.beta(a[..., 0], a[..., 1], size=(draws_per_sample,) + a.shape[:2])
            predicted[start:start + block, q] = np.median(draws.reshape(-1, a.shape[1]), axis=0)

    fit = predicted - data.observed_support
    median = np.median(fit, axis=0) if n_questions else np.zeros(0)
    sd = fit.std(axis=0) if n_questions else np.zeros(0)
    threshold = float(np.median(sd) + 3.0 * stats.median_abs_deviation(sd)) if n_questions else float('nan')
    question_ids = [question.id for question in data.questions]
    flagged = [question_ids[q] for q in np.flatnonzero(sd > threshold)]
    if flagged:
        logger.info(f"Questions flagged as local: {', '.join(flagged)}")
    return QuestionFitTable(
        predicted=predicted,
        observed=data.observed_support,
        fit=fit,
        question_ids=question_ids,
        median=median,
        sd=sd,
        threshold=threshold,
        flagged=flagged,
    )


def js_matrix(
    data: VoteTable,
    q: int,
    order: Optional[np.ndarray] = None,
    base: Optional[float] = None,
) -> np.ndarray:
    """
    Jensen-Shannon distance between municipalities' observed support on question q.

    Natural log unless ``base`` is given; rows and columns follow ``order`` when passed.
    """
    if not 0 <= q < data.n_questions:
        raise DomainError(f"Question index {q} outside 0..{data.n_questions - 1}")
    p = data.observed_support[:, q]
    if order is not None:
        p = p[np.asarray(order, dtype=np.int64)]
    dist = np.stack([p, 1.0 - p], axis=-1)
    mixture = 0.5 * (dist[:, None, :] + dist[None, :, :])
    own_entropy = entr(dist).sum(axis=-1)
    divergence = entr(mixture).sum(axis=-1) - 0.5 * (own_entropy[:, None] + own_entropy[None, :])
    if base is not None:
        divergence = divergence / np.log(base)
    distance = np.sqrt(np.clip(divergence, 0.0, None))
    distance = 0.5 * (distance + distance.T)
    np.fill_diagonal(distance, 0.0)
    return distance


def _bloc_support_per_question(data: VoteTable, members: np.ndarray, vote_weighted: bool) -> np.ndarray:
    if vote_weighted:
        return data.yes[members].sum(axis=0) / data.totals[members].sum(axis=0)
    return data.observed_support[members].mean(axis=0)


def polarization_series(
    data: VoteTable,
    clustering: RepresentativeClustering,
    bloc_pairs: Sequence[Tuple[int, int]],
    vote_weighted: bool = True,
) -> pd.DataFrame:
    """
    Per-year mean and SD of the support difference between pairs of blocs.

    Support of a bloc on a question pools the votes of its municipalities, or
    averages their proportions when ``vote_weighted`` is False.
    """
    supports = {}
    for pair in bloc_pairs:
        for k in pair:
            if not 0 <= k < clustering.K_star:
                raise DomainError(f"Bloc {k} outside 0..{clustering.K_star - 1}")
            if k not in supports:
                members = np.flatnonzero(clustering.labels == k)
                if members.size == 0:
                    raise DomainError(f"Bloc {k} has no members")
                supports[k] = _bloc_support_per_question(data, members, vote_weighted)
    years = [question.year for question in data.questions]
    frames = []
    for a, b in bloc_pairs:
        frames.append(pd.DataFrame({
            'year': years, 'bloc_a': a, 'bloc_b': b, 'difference': supports[a] - supports[b],
        }))
    columns = ['year', 'bloc_a', 'bloc_b', 'mean_difference', 'sd', 'n_questions']
    if not frames or not years:
        return pd.DataFrame(columns=columns)
    grouped = pd.concat(frames).groupby(['bloc_a', 'bloc_b', 'year'], sort=True)['difference']
    series = grouped.agg(
        mean_difference='mean',
        sd=lambda values: float(np.std(values)),
        n_questions='size',
    ).reset_index()
    return series[columns]


def clr_distance_export(data: VoteTable, pseudocount: float = 0.5) -> np.ndarray:
    """
    Aitchison distances between municipalities over all questions.

    Each (municipality, question) cell becomes the composition
    ((yes + pc) / (total + 2 pc), (no + pc) / (total + 2 pc)); the squared
    Euclidean distances of their CLR transforms are summed over questions.
    """
    if not pseudocount > 0:
        raise DomainError(f"Pseudocount must be positive, got {pseudocount}")
    n = data.n_municipalities
    if data.n_questions == 0:
        return np.zeros((n, n))
    counts = data.counts.astype(float) + pseudocount
    compositions = counts / counts.sum(axis=2, keepdims=True)
    logs = np.log(compositions)
    clr = logs - logs.mean(axis=2, keepdims=True)
    return squareform(pdist(clr.reshape(n, -1), metric='euclidean'))


def bloc_support(
    samples: Sequence[PosteriorSample],
    clustering: RepresentativeClustering,
    data: VoteTable,
) -> np.ndarray:
    """
    Mean alpha_0 / (alpha_0 + alpha_1) per (representative bloc, question).

    Averages each member's support under its sampled bloc, over the members
    and over samples by wait time, so no sampled labels are ever matched.
    """
    _require_samples(samples)
    if clustering.labels.shape[0] != data.n_municipalities:
        raise DomainError("Clustering and data cover different municipalities")
    weights = _wait_weights(samples)
    onehot = np.zeros((clustering.K_star, data.n_municipalities))
    onehot[clustering.labels, np.arange(data.n_municipalities)] = 1.0
    sizes = onehot.sum(axis=1, keepdims=True)
    if (sizes == 0).any():
        raise DomainError("Every representative bloc needs at least one member")
    onehot /= sizes
    support = np.zeros((clustering.K_star, data.n_questions))
    for sample, weight in zip(samples, weights):
        alpha = sample.state.alpha
        per_bloc = alpha[..., 0] / alpha.sum(axis=-1)
        support += weight * (onehot @ per_bloc[sample.state.z])
    return support
