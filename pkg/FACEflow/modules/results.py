"""
This module writes training and evaluation results.

Reports are tab-separated text files with a header row. Evaluation records can additionally be
stored in a SQLite results database.

Functions:
    append_training_log, read_training_log, truncate_training_log: the per-step training log.
    write_records, read_records, summarize_records, write_summary: evaluation reports.
    write_benchmark: the pair list of a pose benchmark.
    store_records_in_db: evaluation records into the results database.
"""
import csv
import logging
import os
from collections import defaultdict

import numpy as np
from sqlalchemy import create_engine
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import Session

from FACEflow.modules.losses import TERMS
from FACEflow.modules.metrics import EvalRecord
from FACEflow.modules.models import Base, EvalRecordRow

LOG_COLUMNS = (['step', 'phase', 'total'] + [f'raw_{term}' for term in TERMS]
               + [f'weighted_{term}' for term in TERMS])
RECORD_COLUMNS = ['video', 'frame', 'metric', 'value']


def append_training_log(path, step, phase, report):
    """
    Appends one row to a training log, writing the header when the file is new.

    Values are written with ``repr`` so logs of two runs can be compared exactly.
    """
    new = not os.path.exists(path)
    row = report.as_row()
    with open(path, 'a', newline='') as file_handle:
        writer = csv.writer(file_handle, delimiter='\t')
        if new:
            writer.writerow(LOG_COLUMNS)
        writer.writerow([step, phase] + [repr(float(row[column])) for column in LOG_COLUMNS[2:]])


def read_training_log(path):
    """Reads a training log into a dict of columns (``step`` and ``phase`` as ints)."""
    columns = defaultdict(list)
    with open(path, 'r', newline='') as file_handle:
        for row in csv.DictReader(file_handle, delimiter='\t'):
            for key, value in row.items():
                columns[key].append(int(value) if key in ('step', 'phase') else float(value))
    return dict(columns)


def truncate_training_log(path, last_step):
    """
    Drops the rows after ``last_step`` from a training log, so a resumed run can append its own.

    :param path: Training log path; nothing happens when it does not exist.
    :type path: str
    :param last_step: Last step to keep.
    :type last_step: int
    :return: Number of dropped rows.
    :rtype: int
    """
    if not os.path.exists(path):
        return 0
    with open(path, 'r', newline='') as file_handle:
        rows = list(csv.reader(file_handle, delimiter='\t'))
    header, body = rows[0], rows[1:]
    kept = [row for row in body if int(row[0]) <= last_step]
    with open(path, 'w', newline='') as file_handle:
        writer = csv.writer(file_handle, delimiter='\t')
        writer.writerow(header)
        writer.writerows(kept)
    if len(kept) < len(body):
        logging.info(f'Dropped {len(body) - len(kept)} training log rows after step {last_step}')
    return len(body) - len(kept)


def write_records(path, records):
    """
    Writes evaluation records as a tab-separated file with a header row.

    :param path: Output path.
    :type path: str
    :param records: Evaluation records.
    :type records: list[EvalRecord]
    """
    with open(path, 'w', newline='') as file_handle:
        writer = csv.writer(file_handle, delimiter='\t')
        writer.writerow(RECORD_COLUMNS)
        for record in records:
            writer.writerow([record.video, record.frame, record.metric, repr(float(record.value))])


def read_records(path):
    with open(path, 'r', newline='') as file_handle:
        return [EvalRecord(row['video'], int(row['frame']), row['metric'], float(row['value']))
                for row in csv.DictReader(file_handle, delimiter='\t')]


def summarize_records(records):
    """
    Mean and count of every metric.

    :param records: Evaluation records.
    :type records: list[EvalRecord]
    :return: Metric name to ``(mean, count)``, in metric name order.
    :rtype: dict[str, tuple[float, int]]
    """
    values = defaultdict(list)
    for record in records:
        values[record.metric].append(record.value)
    return {metric: (float(np.mean(values[metric])), len(values[metric])) for metric in sorted(values)}


def format_summary(summary):
    lines = [f'{"metric":<8}{"mean":>12}{"count":>8}']
    lines += [f'{metric:<8}{mean:>12.4f}{count:>8}' for metric, (mean, count) in summary.items()]
    return '\n'.join(lines)


def write_summary(path, summary):
    with open(path, 'w', newline='') as file_handle:
        writer = csv.writer(file_handle, delimiter='\t')
        writer.writerow(['metric', 'mean', 'count'])
        for metric, (mean, count) in summary.items():
            writer.writerow([metric, repr(mean), count])


def write_benchmark(path, benchmark):
    with open(path, 'w', newline='') as file_handle:
        writer = csv.writer(file_handle, delimiter='\t')
        writer.writerow(['video', 'source_frame', 'target_frame', 'pose_distance'])
        for pair in benchmark.pairs:
            writer.writerow([pair.source.identity, pair.source.index, pair.target.index, repr(pair.pose_distance)])


def store_records_in_db(database_path, records, run, protocol):
    """
    Stores evaluation records in the results database, creating its tables when needed.

    :param database_path: SQLite file path.
    :type database_path: str
    :param records: Evaluation records.
    :type records: list[EvalRecord]
    :param run: Run name the records are tagged with.
    :type run: str
    :param protocol: ``self`` or ``cross``.
    :type protocol: str
    :return: Number of stored rows.
    :rtype: int
    :raises ValueError: If the database cannot be written.
    """
    engine = create_engine(f'sqlite:///{database_path}')
    try:
        Base.metadata.create_all(engine)
        with Session(engine) as session:
            try:
                session.add_all(EvalRecordRow(run=run, protocol=protocol, video=record.video, frame=record.frame,
                                              metric=record.metric, value=float(record.value))
                                for record in records)
                session.commit()
            except SQLAlchemyError:
                session.rollback()
                raise
    except SQLAlchemyError as e:
        raise ValueError(f'Failed to store evaluation records in {database_path}: {e}') from e
    finally:
        engine.dispose()
    logging.info(f'Stored {len(records)} {protocol} records of run {run} in {database_path}')
    return len(records)
