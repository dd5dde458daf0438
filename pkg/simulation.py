"""
Synthetic referendum data with a known bloc structure, and the recovery
experiment that checks whether the sampler finds the true number of blocs.
"""

import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from bdmcmc import RunConfig, posterior_K, posterior_mode, run_chain
from model_core import DomainError, Hyperparams, Municipality, Question, VoteTable, sample_dirichlet
from samplers import SweepConfig

logger = logging.getLogger('bloc_infer.simulation')

FIRST_YEAR = 2000


@dataclass(frozen=True)
class SimSpec:
    """
    Args:
        K_true: number of generating blocs
        N: municipalities
        Q: questions
        C: voters per municipality
        delta: symmetric Dirichlet concentration of each municipality's bloc mix
        alpha_gen: (shape, scale) of the Gamma the generating alpha pairs come from
        seed: root seed used when no generator is passed
    """

    K_true: int
    N: int
    Q: int
    C: int
    delta: float
    alpha_gen: Tuple[float, float] = (1.0, 20.0)
    seed: int = 0

    def __post_init__(self):
        for name in ('K_true', 'N', 'Q', 'C'):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise DomainError(f"{name} must be a positive integer, got {value}")
        if not self.delta > 0:
            raise DomainError(f"delta must be positive, got {self.delta}")
        if len(self.alpha_gen) != 2 or min(self.alpha_gen) <= 0:
            raise DomainError(f"alpha_gen must be a positive (shape, scale) pair, got {self.alpha_gen}")


class GroundTruth(NamedTuple):
    mixture: np.ndarray   # (N, K_true) bloc proportions per municipality
    alpha: np.ndarray     # (K_true, Q, 2)


def simulate_dataset(spec: SimSpec, rng: Optional[np.random.Generator] = None) -> Tuple[VoteTable, GroundTruth]:
    """
    Draw one synthetic dataset.

    Every municipality mixes the blocs with lambda_i ~ Dirichlet(delta);
    round(C * lambda_ik) of its voters belong to bloc k and vote yes with a
    support drawn once per (municipality, question, bloc) from Beta(alpha_kq).
    When rounding leaves a municipality without voters, all C go to its largest bloc.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    K, N, Q = spec.K_true, spec.N, spec.Q
    if K > 1:
        mixture = sample_dirichlet(np.full(K, spec.delta), rng, size=N)
    else:
        mixture = np.ones((N, 1))
    shape, scale = spec.alpha_gen
    alpha = rng.gamma(shape, scale, size=(K, Q, 2))
    alpha = np.maximum(alpha, np.finfo(float).tiny)

    voters = np.rint(spec.C * mixture).astype(np.int64)
    silent = voters.sum(axis=1) == 0
    if silent.any():
        voters[silent] = 0
        voters[silent, np.argmax(mixture[silent], axis=1)] = spec.C

    support = rng.beta(alpha[None, :, :, 0], alpha[None, :, :, 1], size=(N, K, Q))
    per_bloc_voters = np.broadcast_to(voters[:, :, None], (N, K, Q))
    yes_per_bloc = rng.binomial(per_bloc_voters, support)
    yes = yes_per_bloc.sum(axis=1)
    totals = voters.sum(axis=1)[:, None]
    counts = np.stack([yes, totals - yes], axis=-1)

    width = max(len(str(N)), 4)
    municipalities = [Municipality(id=f"m{i + 1:0{width}d}", name=f"Municipality {i + 1}") for i in range(N)]
    q_width = max(len(str(Q)), 2)
    questions = [Question(id=f"q{q + 1:0{q_width}d}", year=FIRST_YEAR + q) for q in range(Q)]
    table = VoteTable(municipalities=municipalities, questions=questions, counts=counts)
    return table, GroundTruth(mixture=mixture, alpha=alpha)


def replicate_generator(seed: int, cell: int, replicate: int) -> np.random.Generator:
    """Generator owned by one (grid cell, replicate) pair."""
    return np.random.default_rng(np.random.SeedSequence([seed, cell, replicate]))


def run_replicate(
    spec: SimSpec,
    cell: int,
    replicate: int,
    hyper: Hyperparams,
    sweep_config: SweepConfig,
    run_config: RunConfig,
    min_bloc_size: int,
    seed: int,
) -> dict:
    """Simulate one dataset, run one chain on it and score the posterior on K."""
    rng = replicate_generator(seed, cell, replicate)
    table, _ = simulate_dataset(spec, rng)
    samples = run_chain(table, hyper, sweep_config, run_config, rng)
    distribution = posterior_K(samples, min_bloc_size)
    mode = posterior_mode(distribution)
    return {
        'cell': cell,
        'replicate': replicate,
        'K_true': spec.K_true,
        'N': spec.N,
        'Q': spec.Q,
        'C': spec.C,
        'delta': spec.delta,
        'posterior_mode': mode,
        'mode_match': mode == spec.K_true,
        'mass_at_truth': distribution.get(spec.K_true, 0.0),
    }


def recovery_grid(
    cells: Sequence[SimSpec],
    replicates: int,
    hyper: Hyperparams,
    sweep_config: SweepConfig,
    run_config: RunConfig,
    min_bloc_size: int = 5,
    seed: int = 0,
) -> pd.DataFrame:
    """
    Recovery experiment over a grid of simulation settings, run sequentially.

    One row per (cell, replicate) with the posterior mode of K, whether it
    matches K_true, and the posterior mass at K_true.
    """
    if replicates < 1:
        raise DomainError(f"replicates must be at least 1, got {replicates}")
    rows: List[dict] = []
    for cell, spec in enumerate(cells):
        for replicate in range(replicates):
            rows.append(run_replicate(spec, cell, replicate, hyper, sweep_config, run_config, min_bloc_size, seed))
        logger.info(f"Recovery cell {cell} (K={spec.K_true}, N={spec.N}, Q={spec.Q}, delta={spec.delta}) done")
    return pd.DataFrame(rows)


def summarize_recovery(report: pd.DataFrame) -> pd.DataFrame:
    """Mode-match rate and mean posterior mass at K_true per grid cell."""
    keys = ['cell', 'K_true', 'N', 'Q', 'C', 'delta']
    return (
        report.groupby(keys, sort=True)
        .agg(replicates=('replicate', 'size'), mode_match_rate=('mode_match', 'mean'),
             mean_mass_at_truth=('mass_at_truth', 'mean'))
        .reset_index()
    )
