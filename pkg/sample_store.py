"""
Sample store for bloc-infer runs.
Handles newline-delimited JSON sample files, the run manifest and the failure marker.
"""

import glob
import gzip
import json
import logging
import os
import re
from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterable, Iterator, List, Optional, TextIO

import numpy as np

from bdmcmc import PosteriorSample, RunConfig
from model_core import Hyperparams, ModelState
from samplers import SweepConfig

logger = logging.getLogger('bloc_infer.sample_store')

MANIFEST_FILE = "manifest.txt"
FAILED_MARKER = "FAILED"
CHAIN_FILE_PATTERN = re.compile(r"chain_(\d+)\.ndjson(\.gz)?$")


class FingerprintMismatchError(ValueError):
    """Raised when stored samples were produced from different input data."""


def chain_file_name(chain: int, compress: bool = False) -> str:
    return f"chain_{chain}.ndjson" + (".gz" if compress else "")


def _open_text(path: str, mode: str) -> TextIO:
    """Open a sample file, gzip-compressed when the path ends in .gz."""
    if path.endswith('.gz'):
        return gzip.open(path, mode + 't', encoding='utf-8')
    return open(path, mode, encoding='utf-8')


def sample_to_record(sample: PosteriorSample) -> Dict[str, Any]:
    state = sample.state
    return {
        'iteration': int(sample.iteration),
        'wait_time': float(sample.wait_time),
        'K': state.K,
        'Q': int(state.alpha.shape[1]),
        'log_likelihood': float(sample.log_likelihood),
        'eta': [float(v) for v in state.eta],
        'z': [int(v) for v in state.z],
        # row-major (k, q, s)
        'alpha': [float(v) for v in state.alpha.ravel()],
    }


def record_to_sample(record: Dict[str, Any]) -> PosteriorSample:
    K, Q = int(record['K']), int(record['Q'])
    state = ModelState(
        eta=np.array(record['eta'], dtype=float),
        z=np.array(record['z'], dtype=np.int64),
        alpha=np.array(record['alpha'], dtype=float).reshape(K, Q, 2),
    )
    return PosteriorSample(
        state=state,
        wait_time=float(record['wait_time']),
        iteration=int(record['iteration']),
        log_likelihood=float(record.get('log_likelihood', float('nan'))),
    )


def write_samples(path: str, samples: Iterable[PosteriorSample]) -> int:
    """Write one JSON record per sample; returns the number written."""
    count = 0
    with _open_text(path, 'w') as f:
        for sample in samples:
            f.write(json.dumps(sample_to_record(sample), allow_nan=True))
            f.write('\n')
            count += 1
    logger.debug(f"Wrote {count} samples to {path}")
    return count


def iter_samples(path: str) -> Iterator[PosteriorSample]:
    with _open_text(path, 'r') as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield record_to_sample(json.loads(line))
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                raise ValueError(f"Malformed sample on line {line_number} of {path}: {e}") from e


def read_samples(path: str) -> List[PosteriorSample]:
    return list(iter_samples(path))


def find_chain_files(directory: str) -> Dict[int, str]:
    """Chain index to sample file path, for every chain file in a run directory."""
    files = {}
    for path in glob.glob(os.path.join(directory, "chain_*.ndjson*")):
        match = CHAIN_FILE_PATTERN.search(os.path.basename(path))
        if match:
            files[int(match.group(1))] = path
    return dict(sorted(files.items()))


@dataclass
class RunManifest:
    input_path: str
    output_dir: str
    data_fingerprint: str
    tool_version: str
    hyper: Hyperparams
    sweep: SweepConfig
    run: RunConfig
    min_bloc_size: int

    def to_items(self) -> Dict[str, str]:
        items = {
            'tool_version': self.tool_version,
            'input_path': self.input_path,
            'output_dir': self.output_dir,
            'data_fingerprint': self.data_fingerprint,
            'min_bloc_size': str(self.min_bloc_size),
        }
        for prefix, section in (('hyper', self.hyper), ('sweep', self.sweep), ('run', self.run)):
            for key, value in asdict(section).items():
                if isinstance(value, tuple):
                    value = ','.join(repr(v) for v in value)
                elif hasattr(value, 'value'):
                    value = value.value
                items[f"{prefix}.{key}"] = str(value)
        return items


def write_manifest(directory: str, manifest: RunManifest) -> str:
    path = os.path.join(directory, MANIFEST_FILE)
    with open(path, 'w', encoding='utf-8') as f:
        for key, value in manifest.to_items().items():
            f.write(f"{key}={value}\n")
    logger.info(f"Manifest written to {path}")
    return path


def read_manifest(directory: str) -> Dict[str, str]:
    """Flat key/value view of a run manifest; empty when none exists."""
    path = os.path.join(directory, MANIFEST_FILE)
    if not os.path.exists(path):
        return {}
    items = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            key, sep, value = line.rstrip('\n').partition('=')
            if sep:
                items[key] = value
    return items


def check_fingerprint(manifest: Dict[str, str], data_fingerprint: str) -> None:
    """
    Raises:
        FingerprintMismatchError: if the manifest is missing or records other data
    """
    recorded = manifest.get('data_fingerprint')
    if not recorded:
        raise FingerprintMismatchError("the run directory has no manifest fingerprint")
    if recorded != data_fingerprint:
        raise FingerprintMismatchError(f"recorded {recorded[:12]}..., data is {data_fingerprint[:12]}...")


def write_failure_marker(directory: str, message: str) -> Optional[str]:
    """Leave a FAILED file holding the message next to whatever outputs exist."""
    try:
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, FAILED_MARKER)
        with open(path, 'w', encoding='utf-8') as f:
            f.write(message + '\n')
        return path
    except OSError as e:
        logger.error(f"Could not write failure marker in {directory}: {str(e)}", exc_info=True)
        return None


def clear_run_outputs(directory: str) -> List[str]:
    """Delete the failure marker and chain sample files a previous run left behind."""
    stale = list(find_chain_files(directory).values())
    marker = os.path.join(directory, FAILED_MARKER)
    if os.path.exists(marker):
        stale.append(marker)
    for path in stale:
        os.remove(path)
        logger.info(f"Removed stale output {path}")
    return stale
