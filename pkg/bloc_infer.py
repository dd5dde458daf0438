"""
Command-line entry point for bloc-infer.
Infers voting blocs from referendum vote totals and analyzes stored runs.
"""

import argparse
import asyncio
import sys

import config
from command_handler import handle_analyze, handle_infer, handle_recover, handle_simulate
from config_validator import validate_config
from logging_config import logger
from samplers import SamplerSchedule
from bdmcmc import BirthProposal, DeathRateBalance


class UsageExit(Exception):
    """Raised by the parser instead of exiting, so usage errors map to their own exit code."""


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageExit(f"{self.prog}: error: {message}")


def _add_column_map(parser):
    parser.add_argument("--column-map", type=str, default=None,
                        help="Rename input columns, e.g. municipality_id=bfs_nr,yes=ja")


def _add_model_options(parser):
    parser.add_argument("--iterations", type=int, default=config.iterations, help="Hybrid iterations per chain")
    parser.add_argument("--burn-in", type=int, default=config.burn_in, help="Iterations discarded before sampling")
    parser.add_argument("--thin", type=int, default=config.thin, help="Keep every n-th iteration after burn-in")
    parser.add_argument("--seed", type=int, default=config.seed, help="Root random seed")
    parser.add_argument("--chains", type=int, default=config.chains, help="Independent chains")
    parser.add_argument("--bd-time", type=float, default=config.bd_time,
                        help="Virtual birth-death time per iteration")
    parser.add_argument("--lambda", dest="lam", type=float, default=10.0, help="Poisson prior mean of K")
    parser.add_argument("--kappa", type=float, default=1.0, help="Gamma shape of the alpha prior")
    parser.add_argument("--theta", type=float, default=10.0, help="Gamma scale of the alpha prior")
    parser.add_argument("--gamma", type=float, default=1.0, help="Dirichlet concentration of the bloc weights")
    parser.add_argument("--beta-birth", type=float, default=None, help="Birth rate (defaults to --lambda)")
    parser.add_argument("--k-max", type=int, default=30, help="Largest number of blocs")
    parser.add_argument("--initial-blocs", type=int, default=None, help="Blocs at the start of each chain")
    parser.add_argument("--sampler", choices=[s.value for s in SamplerSchedule],
                        default=SamplerSchedule.ALTERNATE.value, help="Alpha sampler schedule")
    parser.add_argument("--death-rate", choices=[b.value for b in DeathRateBalance],
                        default=DeathRateBalance.EXACT.value, help="Death-rate formula")
    parser.add_argument("--birth-proposal", choices=[p.value for p in BirthProposal], default=None,
                        help="Birth proposal (default: data with the exact death rate, prior with uniform)")
    parser.add_argument("--min-bloc-size", type=int, default=config.min_bloc_size,
                        help="Blocs smaller than this are not counted in the posterior on K")


def _add_analysis_options(parser):
    parser.add_argument("--k-star", type=int, default=None, help="Representative number of blocs (default: posterior mode)")
    parser.add_argument("--draws", type=int, default=config.draws, help="Beta draws per sample for the question fit")
    parser.add_argument("--pseudocount", type=float, default=config.pseudocount, help="CLR pseudocount")
    parser.add_argument("--bloc-pairs", type=str, default=None,
                        help="Bloc pairs for the polarization series, e.g. 1-2,2-3 (default: all pairs)")
    parser.add_argument("--js-base", type=float, default=None, help="Log base of the Jensen-Shannon divergence")
    parser.add_argument("--average-proportions", action="store_true",
                        help="Average municipal proportions instead of pooling votes for bloc support")


def build_parser():
    parser = ArgumentParser(prog="bloc_infer", description="Voting bloc inference from referendum vote totals")
    parser.add_argument("--version", action="version", version=f"%(prog)s {config.TOOL_VERSION}")
    subparsers = parser.add_subparsers(dest="command", help="Command to run")

    infer_parser = subparsers.add_parser("infer", help="Run the sampler on a vote CSV")
    infer_parser.add_argument("--data", required=True, help="Vote CSV")
    infer_parser.add_argument("--out", required=True, help="Output directory")
    infer_parser.add_argument("--compress", action="store_true", help="gzip the sample files")
    _add_column_map(infer_parser)
    _add_model_options(infer_parser)
    _add_analysis_options(infer_parser)

    analyze_parser = subparsers.add_parser("analyze", help="Recompute summaries from stored samples")
    analyze_parser.add_argument("--samples", required=True, help="Directory of a previous infer run")
    analyze_parser.add_argument("--data", required=True, help="The vote CSV the run used")
    analyze_parser.add_argument("--out", default=None, help="Output directory (default: the samples directory)")
    analyze_parser.add_argument("--min-bloc-size", type=int, default=None,
                                help="Override the minimum bloc size recorded in the manifest")
    _add_column_map(analyze_parser)
    _add_analysis_options(analyze_parser)

    simulate_parser = subparsers.add_parser("simulate", help="Generate a synthetic dataset")
    simulate_parser.add_argument("--k", type=int, required=True, help="True number of blocs")
    simulate_parser.add_argument("--n", type=int, required=True, help="Municipalities")
    simulate_parser.add_argument("--q", type=int, required=True, help="Questions")
    simulate_parser.add_argument("--c", type=int, required=True, help="Voters per municipality")
    simulate_parser.add_argument("--delta", type=float, required=True, help="Dirichlet concentration of the bloc mix")
    simulate_parser.add_argument("--alpha-shape", type=float, default=1.0, help="Gamma shape for generating alpha")
    simulate_parser.add_argument("--alpha-scale", type=float, default=20.0, help="Gamma scale for generating alpha")
    simulate_parser.add_argument("--seed", type=int, default=config.seed, help="Random seed")
    simulate_parser.add_argument("--out", required=True, help="Output directory")

    recover_parser = subparsers.add_parser("recover", help="Run the recovery experiment over a grid")
    recover_parser.add_argument("--grid", required=True, help="CSV with columns K_true, N, Q, C, delta")
    recover_parser.add_argument("--replicates", type=int, default=10, help="Replicates per grid cell")
    recover_parser.add_argument("--out", required=True, help="Output directory")
    _add_model_options(recover_parser)

    return parser


HANDLERS = {
    "infer": handle_infer,
    "analyze": handle_analyze,
    "simulate": handle_simulate,
    "recover": handle_recover,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageExit as e:
        print(str(e), file=sys.stderr)
        return config.EXIT_USAGE

    if not args.command:
        parser.print_help()
        return config.EXIT_USAGE

    validate_config(config)
    logger.info(f"Running {args.command}")
    return asyncio.run(HANDLERS[args.command](args))


if __name__ == "__main__":
    sys.exit(main())
