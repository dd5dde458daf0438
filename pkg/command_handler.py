"""
Core logic of the infer, analyze, simulate and recover commands.

Each handler takes the parsed command-line options plus a sink for
user-facing text and returns a process exit code; the argparse front end
lives in bloc_infer.py.
"""

import os
import re
from dataclasses import dataclass
from functools import partial
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tabulate import tabulate

import config
from bdmcmc import (
    BirthProposal,
    ChainTrace,
    DeathRateBalance,
    PosteriorSample,
    RunConfig,
    chain_generators,
    effective_k,
    gelman_rubin,
    posterior_K,
    posterior_mode,
    run_chain,
)
from logging_config import logger
from model_core import DomainError, Hyperparams, VoteTable
from posterior_analysis import (
    apply_bloc_order,
    bloc_ordering,
    bloc_proportions,
    bloc_support,
    clr_distance_export,
    cooccupancy,
    js_matrix,
    k_medoids,
    polarization_series,
    question_fit,
)
from sample_store import (
    FingerprintMismatchError,
    RunManifest,
    chain_file_name,
    check_fingerprint,
    clear_run_outputs,
    find_chain_files,
    read_manifest,
    read_samples,
    write_failure_marker,
    write_manifest,
    write_samples,
)
from samplers import SamplerSchedule, SweepConfig
from simulation import SimSpec, run_replicate, simulate_dataset, summarize_recovery
from vote_io import IngestionError, fingerprint, ingest, parse_column_map, write_ground_truth, write_matrix, write_vote_table
from worker_pool import run_in_workers

Emit = Callable[[str], None]


class UsageError(ValueError):
    """Raised for option values that cannot form a valid run."""


@dataclass
class AnalysisOptions:
    k_star: Optional[int]
    min_bloc_size: int
    draws: int
    pseudocount: float
    seed: int
    bloc_pairs: Optional[List[Tuple[int, int]]] = None
    js_base: Optional[float] = None
    vote_weighted: bool = True


def build_hyperparams(args) -> Hyperparams:
    return Hyperparams(
        kappa=args.kappa,
        theta=args.theta,
        lam=args.lam,
        gamma=args.gamma,
        beta_birth=args.beta_birth,
        k_max=args.k_max,
    )


def build_sweep_config(args) -> SweepConfig:
    return SweepConfig(schedule=SamplerSchedule(args.sampler))


def build_run_config(args) -> RunConfig:
    return RunConfig(
        iterations=args.iterations,
        burn_in=args.burn_in,
        thin=args.thin,
        bd_time_per_iteration=args.bd_time,
        seed=args.seed,
        chains=args.chains,
        initial_blocs=args.initial_blocs,
        death_rate_balance=DeathRateBalance(args.death_rate),
        birth_proposal=BirthProposal(args.birth_proposal) if args.birth_proposal else None,
    )


def parse_bloc_pairs(spec: Optional[str]) -> Optional[List[Tuple[int, int]]]:
    """Parse ``1-2,2-3`` into 1-based bloc pairs."""
    if not spec:
        return None
    pairs = []
    for entry in spec.split(','):
        match = re.fullmatch(r'\s*(\d+)\s*-\s*(\d+)\s*', entry)
        if not match or int(match.group(1)) < 1 or int(match.group(2)) < 1:
            raise UsageError(config.ERROR_MESSAGES['invalid_bloc_pair'].format(entry=entry))
        pairs.append((int(match.group(1)), int(match.group(2))))
    return pairs


def _safe_name(identifier: str) -> str:
    return re.sub(r'[^\w.-]', '_', identifier)


def write_posterior_k(distribution: Dict[int, float], path: str) -> None:
    frame = pd.DataFrame({'K': list(distribution), 'probability': list(distribution.values())})
    frame.to_csv(path, index=False, float_format='%.17g')


def write_chain_diagnostics(
    out_dir: str,
    samples_by_chain: Sequence[List[PosteriorSample]],
    traces: Sequence[ChainTrace],
    min_bloc_size: int,
) -> None:
    rhat = gelman_rubin([trace.log_likelihood for trace in traces])
    rows, time_rows = [], []
    for chain, (samples, trace) in enumerate(zip(samples_by_chain, traces)):
        ks = np.array([effective_k(s.state, min_bloc_size) for s in samples])
        waits = np.array([s.wait_time for s in samples])
        distribution = posterior_K(samples, min_bloc_size)
        time_mode = max(trace.time_at_k, key=lambda k: (trace.time_at_k[k], -k)) if trace.time_at_k else None
        rows.append({
            'chain': chain,
            'samples': len(samples),
            'mean_k': float(np.average(ks, weights=waits)),
            'mode_k': posterior_mode(distribution),
            'time_at_k_mode': time_mode,
            'births': trace.births,
            'deaths': trace.deaths,
            'rejected_births': trace.rejected_births,
            'loglik_rhat': rhat,
        })
        for k in sorted(trace.time_at_k):
            time_rows.append({'chain': chain, 'K': k, 'virtual_time': trace.time_at_k[k]})
    pd.DataFrame(rows).to_csv(os.path.join(out_dir, 'chain_diagnostics.csv'), index=False, float_format='%.17g')
    pd.DataFrame(time_rows, columns=['chain', 'K', 'virtual_time']).to_csv(
        os.path.join(out_dir, 'time_at_k.csv'), index=False, float_format='%.17g'
    )


def write_analysis_products(
    out_dir: str,
    table: VoteTable,
    samples: Sequence[PosteriorSample],
    options: AnalysisOptions,
) -> Dict[str, object]:
    """
    Emit every posterior summary of a pooled sample list.

    Blocs are numbered 1..K* in south-to-north order in every file.
    Deterministic given the samples and ``options.seed``.
    """
    os.makedirs(out_dir, exist_ok=True)
    distribution = posterior_K(samples, options.min_bloc_size)
    write_posterior_k(distribution, os.path.join(out_dir, 'posterior_k.csv'))

    k_star = options.k_star if options.k_star is not None else posterior_mode(distribution)
    if k_star > table.n_municipalities:
        logger.warning(f"K*={k_star} exceeds {table.n_municipalities} municipalities; using {table.n_municipalities}")
        k_star = table.n_municipalities

    cooc = cooccupancy(samples)
    clustering = k_medoids(cooc.distance, k_star, seed=options.seed)
    proportions = bloc_proportions(cooc, clustering)
    clustering = apply_bloc_order(clustering, bloc_ordering(clustering, table.municipalities, proportions))

    ids = [m.id for m in table.municipalities]
    order = clustering.municipality_order()
    ordered_ids = [ids[i] for i in order]
    write_matrix(cooc.values[np.ix_(order, order)], ordered_ids, os.path.join(out_dir, 'cooccupancy.csv'))

    clustering_frame = pd.DataFrame(
        proportions[:, clustering.bloc_order],
        columns=[f"proportion_bloc_{r + 1}" for r in range(k_star)],
    )
    clustering_frame.insert(0, 'bloc', clustering.ranked_labels + 1)
    clustering_frame.insert(0, 'municipality_id', ids)
    clustering_frame.to_csv(os.path.join(out_dir, 'clustering.csv'), index=False, float_format='%.17g')

    fit_rng = np.random.default_rng(np.random.SeedSequence([options.seed, 1]))
    fit = question_fit(table, samples, draws_per_sample=options.draws, rng=fit_rng)
    fit.per_cell(ids).to_csv(os.path.join(out_dir, 'question_fit.csv'), index=False, float_format='%.17g')
    summary = fit.per_question().rename(columns={'median_fit': 'median', 'sd_fit': 'sd'})
    summary.insert(1, 'year', [q.year for q in table.questions])
    summary.to_csv(os.path.join(out_dir, 'question_fit_summary.csv'), index=False, float_format='%.17g')

    js_dir = os.path.join(out_dir, 'js')
    os.makedirs(js_dir, exist_ok=True)
    for q, question in enumerate(table.questions):
        distances = js_matrix(table, q, order=order, base=options.js_base)
        write_matrix(distances, ordered_ids, os.path.join(js_dir, f"js_{_safe_name(question.id)}.csv"))

    write_matrix(clr_distance_export(table, options.pseudocount), ids, os.path.join(out_dir, 'clr_distances.csv'))

    if options.bloc_pairs is None:
        ranked_pairs = [(a, b) for a in range(1, k_star + 1) for b in range(a + 1, k_star + 1)]
    else:
        ranked_pairs = options.bloc_pairs
    for a, b in ranked_pairs:
        if a > k_star or b > k_star:
            raise UsageError(config.ERROR_MESSAGES['invalid_bloc_pair'].format(entry=f"{a}-{b}"))
    raw_pairs = [(int(clustering.bloc_order[a - 1]), int(clustering.bloc_order[b - 1])) for a, b in ranked_pairs]
    polarization = polarization_series(table, clustering, raw_pairs, vote_weighted=options.vote_weighted)
    ranks = clustering.ranks
    polarization['bloc_a'] = ranks[polarization['bloc_a'].to_numpy(dtype=np.int64)] + 1
    polarization['bloc_b'] = ranks[polarization['bloc_b'].to_numpy(dtype=np.int64)] + 1
    polarization.to_csv(os.path.join(out_dir, 'polarization.csv'), index=False, float_format='%.17g')

    support = bloc_support(samples, clustering, table)[clustering.bloc_order]
    support_frame = pd.DataFrame({
        'bloc': np.repeat(np.arange(1, k_star + 1), table.n_questions),
        'question_id': [q.id for q in table.questions] * k_star,
        'year': [q.year for q in table.questions] * k_star,
        'support': support.ravel(),
    })
    support_frame.to_csv(os.path.join(out_dir, 'bloc_support.csv'), index=False, float_format='%.17g')

    logger.info(f"Analysis products written to {out_dir}")
    return {
        'posterior_k': distribution,
        'k_star': k_star,
        'bloc_sizes': np.bincount(clustering.ranked_labels, minlength=k_star),
        'flagged': fit.flagged,
    }


def _report_analysis(result: Dict[str, object], emit: Emit) -> None:
    rows = [{"K": k, "Posterior probability": f"{p:.4f}"} for k, p in result['posterior_k'].items()]
    emit(tabulate(rows, headers="keys", tablefmt="grid"))
    sizes = [{"Bloc": r + 1, "Municipalities": int(n)} for r, n in enumerate(result['bloc_sizes'])]
    emit(f"\nRepresentative clustering with K*={result['k_star']} (blocs numbered south to north)")
    emit(tabulate(sizes, headers="keys", tablefmt="grid"))
    if result['flagged']:
        emit(f"\nLocal questions flagged: {', '.join(result['flagged'])}")


def _analysis_options(args, min_bloc_size: int, seed: int) -> AnalysisOptions:
    return AnalysisOptions(
        k_star=args.k_star,
        min_bloc_size=min_bloc_size,
        draws=args.draws,
        pseudocount=args.pseudocount,
        seed=seed,
        bloc_pairs=parse_bloc_pairs(args.bloc_pairs),
        js_base=args.js_base,
        vote_weighted=not args.average_proportions,
    )


def _run_one_chain(table, hyper, sweep_config, run_config, rng, trace) -> List[PosteriorSample]:
    logger.info(f"Chain {trace.chain} started")
    return run_chain(table, hyper, sweep_config, run_config, rng, trace=trace)


async def handle_infer(args, emit: Emit = print) -> int:
    """Run the chains on a vote CSV and write samples, diagnostics and analysis products."""
    try:
        table = ingest(args.data, parse_column_map(args.column_map))
        hyper = build_hyperparams(args)
        sweep_config = build_sweep_config(args)
        run_config = build_run_config(args)
        options = _analysis_options(args, args.min_bloc_size, args.seed)
    except IngestionError as e:
        emit(config.ERROR_MESSAGES['data_error'].format(error=e))
        return config.EXIT_DATA_ERROR
    except (DomainError, UsageError, ValueError) as e:
        emit(str(e))
        return config.EXIT_USAGE

    out_dir = args.out
    try:
        os.makedirs(out_dir, exist_ok=True)
        clear_run_outputs(out_dir)
        write_manifest(out_dir, RunManifest(
            input_path=os.path.abspath(args.data),
            output_dir=os.path.abspath(out_dir),
            data_fingerprint=fingerprint(args.data),
            tool_version=config.TOOL_VERSION,
            hyper=hyper,
            sweep=sweep_config,
            run=run_config,
            min_bloc_size=args.min_bloc_size,
        ))

        rngs = chain_generators(run_config.seed, run_config.chains)
        traces = [ChainTrace(chain=c) for c in range(run_config.chains)]
        jobs = [
            partial(_run_one_chain, table, hyper, sweep_config, run_config, rngs[c], traces[c])
            for c in range(run_config.chains)
        ]
        samples_by_chain = await run_in_workers(jobs)

        for chain, samples in enumerate(samples_by_chain):
            path = os.path.join(out_dir, chain_file_name(chain, compress=args.compress))
            write_samples(path, samples)
            logger.info(f"Chain {chain}: {len(samples)} samples written to {path}")
        write_chain_diagnostics(out_dir, samples_by_chain, traces, args.min_bloc_size)

        pooled = [s for samples in samples_by_chain for s in samples]
        result = write_analysis_products(out_dir, table, pooled, options)
    except (DomainError, UsageError) as e:
        logger.error(f"Inference stopped: {str(e)}")
        write_failure_marker(out_dir, str(e))
        emit(config.ERROR_MESSAGES['data_error'].format(error=e))
        return config.EXIT_DATA_ERROR
    except Exception as e:
        logger.error(f"Inference failed: {str(e)}", exc_info=True)
        write_failure_marker(out_dir, str(e))
        emit(config.ERROR_MESSAGES['runtime_error'].format(error=e))
        return config.EXIT_RUNTIME_ERROR

    _report_analysis(result, emit)
    emit(f"\nOutputs written to {out_dir}")
    return config.EXIT_OK


async def handle_analyze(args, emit: Emit = print) -> int:
    """Recompute the analysis products from stored samples without re-running chains."""
    try:
        manifest = read_manifest(args.samples)
        check_fingerprint(manifest, fingerprint(args.data))
        table = ingest(args.data, parse_column_map(args.column_map))
    except FingerprintMismatchError as e:
        emit(config.ERROR_MESSAGES['fingerprint_mismatch'].format(samples=args.samples, data=args.data, error=e))
        return config.EXIT_DATA_ERROR
    except (IngestionError, OSError) as e:
        emit(config.ERROR_MESSAGES['data_error'].format(error=e))
        return config.EXIT_DATA_ERROR

    chain_files = find_chain_files(args.samples)
    if not chain_files:
        emit(config.ERROR_MESSAGES['missing_samples'].format(samples=args.samples))
        return config.EXIT_DATA_ERROR

    try:
        min_bloc_size = args.min_bloc_size if args.min_bloc_size is not None else int(manifest['min_bloc_size'])
        seed = int(manifest.get('run.seed', 0))
        options = _analysis_options(args, min_bloc_size, seed)
    except (UsageError, ValueError) as e:
        emit(str(e))
        return config.EXIT_USAGE

    out_dir = args.out or args.samples
    try:
        pooled = [s for path in chain_files.values() for s in read_samples(path)]
        result = write_analysis_products(out_dir, table, pooled, options)
    except (DomainError, UsageError, ValueError) as e:
        logger.error(f"Analysis stopped: {str(e)}")
        emit(config.ERROR_MESSAGES['data_error'].format(error=e))
        return config.EXIT_DATA_ERROR
    except Exception as e:
        logger.error(f"Analysis failed: {str(e)}", exc_info=True)
        emit(config.ERROR_MESSAGES['runtime_error'].format(error=e))
        return config.EXIT_RUNTIME_ERROR

    _report_analysis(result, emit)
    emit(f"\nOutputs written to {out_dir}")
    return config.EXIT_OK


async def handle_simulate(args, emit: Emit = print) -> int:
    """Write a synthetic dataset and its ground truth."""
    try:
        spec = SimSpec(
            K_true=args.k, N=args.n, Q=args.q, C=args.c, delta=args.delta,
            alpha_gen=(args.alpha_shape, args.alpha_scale), seed=args.seed,
        )
    except DomainError as e:
        emit(str(e))
        return config.EXIT_USAGE
    try:
        table, truth = simulate_dataset(spec)
        os.makedirs(args.out, exist_ok=True)
        data_path = os.path.join(args.out, 'votes.csv')
        write_vote_table(table, data_path)
        paths = write_ground_truth(table, truth.mixture, truth.alpha, args.out)
    except Exception as e:
        logger.error(f"Simulation failed: {str(e)}", exc_info=True)
        emit(config.ERROR_MESSAGES['runtime_error'].format(error=e))
        return config.EXIT_RUNTIME_ERROR

    totals = table.totals
    rows = [
        {"Setting": "Blocs", "Value": spec.K_true},
        {"Setting": "Municipalities", "Value": spec.N},
        {"Setting": "Questions", "Value": spec.Q},
        {"Setting": "Voters per cell", "Value": f"{totals.min()}..{totals.max()}"},
        {"Setting": "Dirichlet concentration", "Value": spec.delta},
    ]
    emit(tabulate(rows, headers="keys", tablefmt="grid"))
    emit(f"\nDataset written to {data_path}; ground truth in {', '.join(paths)}")
    return config.EXIT_OK


GRID_COLUMNS = ['K_true', 'N', 'Q', 'C', 'delta']


def read_grid(path: str) -> List[SimSpec]:
    """
    Grid CSV with columns K_true, N, Q, C, delta and optional alpha_shape, alpha_scale.

    Raises:
        UsageError: on a missing column or an invalid cell
    """
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise UsageError(config.ERROR_MESSAGES['invalid_grid'].format(path=path, error=e)) from e
    missing = [c for c in GRID_COLUMNS if c not in frame.columns]
    if missing:
        raise UsageError(config.ERROR_MESSAGES['invalid_grid'].format(path=path, error=f"missing {', '.join(missing)}"))
    cells = []
    for line, row in enumerate(frame.itertuples(index=False), start=2):
        values = row._asdict()
        try:
            cells.append(SimSpec(
                K_true=int(values['K_true']), N=int(values['N']), Q=int(values['Q']), C=int(values['C']),
                delta=float(values['delta']),
                alpha_gen=(float(values.get('alpha_shape', 1.0)), float(values.get('alpha_scale', 20.0))),
            ))
        except (DomainError, ValueError, TypeError) as e:
            raise UsageError(config.ERROR_MESSAGES['invalid_grid'].format(path=path, error=f"line {line}: {e}")) from e
    return cells


async def handle_recover(args, emit: Emit = print) -> int:
    """Run the recovery experiment over a grid of simulation settings."""
    try:
        cells = read_grid(args.grid)
        if args.replicates < 1:
            raise UsageError(f"--replicates must be at least 1, got {args.replicates}")
        hyper = build_hyperparams(args)
        sweep_config = build_sweep_config(args)
        run_config = build_run_config(args)
    except (DomainError, UsageError, ValueError) as e:
        emit(str(e))
        return config.EXIT_USAGE

    try:
        jobs = [
            partial(run_replicate, spec, cell, replicate, hyper, sweep_config, run_config,
                    args.min_bloc_size, args.seed)
            for cell, spec in enumerate(cells)
            for replicate in range(args.replicates)
        ]
        report = pd.DataFrame(await run_in_workers(jobs))
        os.makedirs(args.out, exist_ok=True)
        report.to_csv(os.path.join(args.out, 'recovery_report.csv'), index=False, float_format='%.17g')
        summary = summarize_recovery(report)
        summary.to_csv(os.path.join(args.out, 'recovery_summary.csv'), index=False, float_format='%.17g')
    except Exception as e:
        logger.error(f"Recovery grid failed: {str(e)}", exc_info=True)
        write_failure_marker(args.out, str(e))
        emit(config.ERROR_MESSAGES['runtime_error'].format(error=e))
        return config.EXIT_RUNTIME_ERROR

    emit(tabulate(summary.to_dict('records'), headers="keys", tablefmt="grid"))
    emit(f"\nRecovery report written to {args.out}")
    return config.EXIT_OK
