"""
bloc-infer configuration using environment variables and .env file support.

Values in a .env file override system environment variables. Every setting
has a default, so an empty environment gives the documented run defaults;
command-line flags override these in turn.
"""

import os

from dotenv import load_dotenv

# Use override=True to prioritize .env file over system environment variables
load_dotenv(override=True)

TOOL_VERSION = "1.0.0"

# Worker cap (optional)
# Environment variable: BLOC_INFER_THREADS
# Upper bound on chains or simulation replicates running at once
threads = int(os.getenv('BLOC_INFER_THREADS', str(os.cpu_count() or 1)))

# Logging (optional)
# Environment variables: BLOC_INFER_LOG_DIR, BLOC_INFER_LOG_LEVEL
# An empty BLOC_INFER_LOG_DIR disables the log file
log_dir = os.getenv('BLOC_INFER_LOG_DIR', 'logs')
log_level = os.getenv('BLOC_INFER_LOG_LEVEL', 'INFO')

# Run defaults (optional)
# Environment variables: BLOC_INFER_ITERATIONS, BLOC_INFER_BURN_IN, BLOC_INFER_THIN,
# BLOC_INFER_CHAINS, BLOC_INFER_SEED, BLOC_INFER_BD_TIME
iterations = int(os.getenv('BLOC_INFER_ITERATIONS', '20000'))
burn_in = int(os.getenv('BLOC_INFER_BURN_IN', '5000'))
thin = int(os.getenv('BLOC_INFER_THIN', '10'))
chains = int(os.getenv('BLOC_INFER_CHAINS', '1'))
seed = int(os.getenv('BLOC_INFER_SEED', '0'))
bd_time = float(os.getenv('BLOC_INFER_BD_TIME', '1.0'))

# Analysis defaults (optional)
# Environment variables: BLOC_INFER_MIN_BLOC_SIZE, BLOC_INFER_DRAWS, BLOC_INFER_PSEUDOCOUNT
min_bloc_size = int(os.getenv('BLOC_INFER_MIN_BLOC_SIZE', '5'))
draws = int(os.getenv('BLOC_INFER_DRAWS', '100'))
pseudocount = float(os.getenv('BLOC_INFER_PSEUDOCOUNT', '0.5'))

# Defaults restored by config_validator when a setting is invalid
DEFAULTS = {
    'threads': os.cpu_count() or 1,
    'iterations': 20000,
    'burn_in': 5000,
    'thin': 10,
    'chains': 1,
    'seed': 0,
    'bd_time': 1.0,
    'min_bloc_size': 5,
    'draws': 100,
    'pseudocount': 0.5,
}

# Exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA_ERROR = 2
EXIT_RUNTIME_ERROR = 3

# Error Messages
ERROR_MESSAGES = {
    'data_error': "Input data rejected: {error}",
    'fingerprint_mismatch': "Samples in {samples} were produced from different data than {data}: {error}",
    'missing_samples': "No sample files found in {samples}.",
    'runtime_error': "Run failed: {error}",
    'invalid_column_map': "Invalid --column-map entry '{entry}'; expected canonical=source.",
    'invalid_bloc_pair': "Invalid --bloc-pairs entry '{entry}'; expected a-b with blocs numbered from 1.",
    'invalid_grid': "Grid file {path} is invalid: {error}",
}
