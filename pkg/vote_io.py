"""
CSV ingestion and emission of vote tables and derived matrices.

Input is a long table with one row per (municipality, question):
municipality_id, municipality_name, question_id, year, yes, no, and optional
lat, lon, ballot_label, content_tag columns.
"""

import hashlib
import logging
import os
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from model_core import DomainError, Municipality, Question, VoteTable

logger = logging.getLogger('bloc_infer.vote_io')

REQUIRED_COLUMNS = ['municipality_id', 'municipality_name', 'question_id', 'year', 'yes', 'no']
OPTIONAL_COLUMNS = ['lat', 'lon', 'ballot_label', 'content_tag']
# Header is line 1 of the file
FIRST_DATA_LINE = 2


class IngestionError(ValueError):
    """Raised when a vote CSV cannot be turned into a vote table."""


def parse_column_map(spec: Optional[str]) -> Dict[str, str]:
    """
    Parse ``canonical=source,canonical=source`` into a mapping.

    Raises:
        IngestionError: on a malformed entry or an unknown canonical name
    """
    mapping: Dict[str, str] = {}
    if not spec:
        return mapping
    for entry in spec.split(','):
        canonical, sep, source = entry.partition('=')
        canonical, source = canonical.strip(), source.strip()
        if not sep or not canonical or not source:
            raise IngestionError(f"Invalid column mapping entry '{entry}'; expected canonical=source")
        if canonical not in REQUIRED_COLUMNS + OPTIONAL_COLUMNS:
            raise IngestionError(f"Unknown column '{canonical}' in column mapping")
        mapping[canonical] = source
    return mapping


def _lines(frame: pd.DataFrame, mask) -> str:
    return ', '.join(str(i + FIRST_DATA_LINE) for i in frame.index[mask])


def _parse_integers(frame: pd.DataFrame, column: str) -> pd.Series:
    values = pd.to_numeric(frame[column].str.strip(), errors='coerce')
    bad = values.isna() | (values != np.floor(values))
    if bad.any():
        raise IngestionError(f"Column '{column}' is not an integer on line(s) {_lines(frame, bad)}")
    return values.astype(np.int64)


def _parse_coordinate(frame: pd.DataFrame, column: str) -> pd.Series:
    raw = frame[column].str.strip()
    values = pd.to_numeric(raw, errors='coerce')
    bad = values.isna() & (raw != '')
    if bad.any():
        raise IngestionError(f"Column '{column}' is not a number on line(s) {_lines(frame, bad)}")
    return values


def ingest(path: str, column_map: Optional[Dict[str, str]] = None) -> VoteTable:
    """
    Read a vote CSV into a dense vote table.

    Rows with no votes are dropped with a warning. Municipalities and
    questions keep their order of first appearance.

    Raises:
        IngestionError: on unreadable files, missing columns, malformed or
            negative values, duplicate (municipality, question) keys, or
            municipalities missing a question
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise IngestionError(f"Cannot read {path}: {e}") from e

    if column_map:
        frame = frame.rename(columns={source: canonical for canonical, source in column_map.items()})
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise IngestionError(f"{path} lacks required column(s): {', '.join(missing)}")
    for column in OPTIONAL_COLUMNS:
        if column not in frame.columns:
            frame[column] = ''
    frame = frame.reset_index(drop=True)
    for column in ('municipality_id', 'question_id', 'municipality_name', 'ballot_label', 'content_tag'):
        frame[column] = frame[column].str.strip()

    blank = (frame['municipality_id'] == '') | (frame['question_id'] == '')
    if blank.any():
        raise IngestionError(f"Missing municipality or question id on line(s) {_lines(frame, blank)}")

    frame['yes'] = _parse_integers(frame, 'yes')
    frame['no'] = _parse_integers(frame, 'no')
    frame['year'] = _parse_integers(frame, 'year')
    negative = (frame['yes'] < 0) | (frame['no'] < 0)
    if negative.any():
        raise IngestionError(f"Negative vote counts on line(s) {_lines(frame, negative)}")
    frame['lat'] = _parse_coordinate(frame, 'lat')
    frame['lon'] = _parse_coordinate(frame, 'lon')

    keys = ['municipality_id', 'question_id']
    duplicated = frame.duplicated(keys, keep=False)
    if duplicated.any():
        clashes = []
        for (municipality, question), group in frame[duplicated].groupby(keys, sort=False):
            lines = ' and '.join(str(i + FIRST_DATA_LINE) for i in group.index)
            clashes.append(f"({municipality}, {question}) on lines {lines}")
        raise IngestionError(f"Duplicate rows: {'; '.join(clashes)}")

    empty = (frame['yes'] + frame['no']) == 0
    if empty.any():
        dropped = ', '.join(f"({m}, {q})" for m, q in frame.loc[empty, keys].itertuples(index=False))
        logger.warning(f"Dropping {int(empty.sum())} row(s) with no votes: {dropped}")
        frame = frame[~empty]
    if frame.empty:
        raise IngestionError(f"{path} holds no rows with votes")

    years = frame.groupby('question_id', sort=False)['year'].nunique()
    if (years > 1).any():
        raise IngestionError(f"Question(s) listed with more than one year: {', '.join(years.index[years > 1])}")

    question_rows = frame.drop_duplicates('question_id')
    municipality_rows = frame.drop_duplicates('municipality_id')
    question_ids = list(question_rows['question_id'])
    municipality_ids = list(municipality_rows['municipality_id'])

    coverage = frame.groupby('municipality_id', sort=False)['question_id'].nunique()
    incomplete = coverage[coverage < len(question_ids)]
    if not incomplete.empty:
        listing = ', '.join(f"{m} ({len(question_ids) - n} missing)" for m, n in incomplete.items())
        raise IngestionError(f"Municipalities missing questions: {listing}")

    municipalities = [
        Municipality(
            id=row.municipality_id,
            name=row.municipality_name,
            latitude=None if pd.isna(row.lat) else float(row.lat),
            longitude=None if pd.isna(row.lon) else float(row.lon),
        )
        for row in municipality_rows.itertuples(index=False)
    ]
    questions = [
        Question(id=row.question_id, year=int(row.year), ballot_label=row.ballot_label, content_tag=row.content_tag)
        for row in question_rows.itertuples(index=False)
    ]

    row_index = pd.Index(municipality_ids).get_indexer(frame['municipality_id'])
    column_index = pd.Index(question_ids).get_indexer(frame['question_id'])
    counts = np.zeros((len(municipality_ids), len(question_ids), 2), dtype=np.int64)
    counts[row_index, column_index, 0] = frame['yes'].to_numpy()
    counts[row_index, column_index, 1] = frame['no'].to_numpy()

    try:
        table = VoteTable(municipalities=municipalities, questions=questions, counts=counts)
    except DomainError as e:
        raise IngestionError(str(e)) from e
    logger.info(f"Ingested {table.n_municipalities} municipalities and {table.n_questions} questions from {path}")
    return table


def vote_table_frame(table: VoteTable) -> pd.DataFrame:
    """Long-format frame in the ingestion layout."""
    rows = []
    for i, municipality in enumerate(table.municipalities):
        for q, question in enumerate(table.questions):
            rows.append({
                'municipality_id': municipality.id,
                'municipality_name': municipality.name,
                'question_id': question.id,
                'year': question.year,
                'yes': int(table.counts[i, q, 0]),
                'no': int(table.counts[i, q, 1]),
                'lat': municipality.latitude,
                'lon': municipality.longitude,
                'ballot_label': question.ballot_label,
                'content_tag': question.content_tag,
            })
    frame = pd.DataFrame(rows, columns=REQUIRED_COLUMNS + OPTIONAL_COLUMNS)
    if not any(m.has_coordinates for m in table.municipalities):
        frame = frame.drop(columns=['lat', 'lon'])
    for column in ('ballot_label', 'content_tag'):
        if (frame[column] == '').all():
            frame = frame.drop(columns=[column])
    return frame


def write_vote_table(table: VoteTable, path: str) -> None:
    vote_table_frame(table).to_csv(path, index=False, float_format='%.17g')


def write_ground_truth(table: VoteTable, mixture: np.ndarray, alpha: np.ndarray, out_dir: str) -> List[str]:
    """
    Write the generating mixture and alpha next to a simulated dataset.

    Returns:
        list: paths of the mixture CSV (one column per bloc) and the alpha CSV
    """
    os.makedirs(out_dir, exist_ok=True)
    mixture_path = os.path.join(out_dir, 'ground_truth_mixture.csv')
    alpha_path = os.path.join(out_dir, 'ground_truth_alpha.csv')
    mixture_frame = pd.DataFrame(
        mixture, columns=[f"bloc_{k + 1}" for k in range(mixture.shape[1])]
    )
    mixture_frame.insert(0, 'municipality_id', [m.id for m in table.municipalities])
    mixture_frame.to_csv(mixture_path, index=False, float_format='%.17g')

    K, Q = alpha.shape[0], alpha.shape[1]
    alpha_frame = pd.DataFrame({
        'bloc': np.repeat(np.arange(1, K + 1), Q),
        'question_id': [question.id for question in table.questions] * K,
        'alpha_yes': alpha[..., 0].ravel(),
        'alpha_no': alpha[..., 1].ravel(),
    })
    alpha_frame.to_csv(alpha_path, index=False, float_format='%.17g')
    return [mixture_path, alpha_path]


def write_matrix(matrix: np.ndarray, labels: Sequence[str], path: str) -> None:
    """Square matrix with ids as header and first column."""
    frame = pd.DataFrame(matrix, index=list(labels), columns=list(labels))
    frame.index.name = 'municipality_id'
    frame.to_csv(path, float_format='%.17g')


def fingerprint(path: str) -> str:
    """sha256 of the file's bytes."""
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()
