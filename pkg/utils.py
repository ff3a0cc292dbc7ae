import csv
import logging
from collections import defaultdict
from datetime import datetime

import numpy as np
from sqlalchemy import case, func, select

from models import RunRecord, WordResult

# Initialize logger
logger = logging.getLogger(__name__)

METRICS_COLUMNS = ['word', 'scope', 'p_stoi', 'p_estoi', 'mcd', 'status', 'error', 'message']
SUMMARY_COLUMNS = ['word', 'error', 'scope', 'n', 'p_stoi', 'p_estoi', 'mcd']
SCOPE_ORDER = ['original', 'obstruent', 'vowel', 'both', 'reference']
NORMAL_REFERENCE_ERROR = 'Normal'


def _fmt(value):
    return '' if value is None else f"{value:.6f}"


def result_rows(report):
    """Flatten a BatchReport into metrics CSV rows."""
    rows = []
    for r in report.results:
        m = r.metrics
        rows.append({
            'word': r.word,
            'scope': r.scope,
            'p_stoi': None if m is None else m.p_stoi,
            'p_estoi': None if m is None else m.p_estoi,
            'mcd': None if m is None else m.mcd,
            'status': r.status,
            'error': r.error,
            'message': r.message,
        })
    return rows


def write_metrics_csv(rows, path):
    """Write metrics rows (dicts keyed by METRICS_COLUMNS)."""
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) if c in ('p_stoi', 'p_estoi', 'mcd') else row.get(c, '')
                             for c in METRICS_COLUMNS])
    logger.info(f"Wrote {len(rows)} metrics row(s) to {path}")
    return path


def read_metrics_csv(path):
    """Metrics rows with scores as floats (None when empty)."""
    rows = []
    with open(path, newline='', encoding='utf-8') as f:
        for row in csv.DictReader(f):
            for key in ('p_stoi', 'p_estoi', 'mcd'):
                row[key] = float(row[key]) if row.get(key) else None
            rows.append(row)
    return rows


def _scope_key(scope):
    return SCOPE_ORDER.index(scope) if scope in SCOPE_ORDER else len(SCOPE_ORDER)


def summarize(rows):
    """
    Arithmetic means of p_stoi, p_estoi and mcd per (word, error, scope) over successful rows.

    Returns:
        list of dicts keyed by SUMMARY_COLUMNS, sorted by word, error and scope
    """
    groups = defaultdict(list)
    for row in rows:
        if row.get('status', 'ok') != 'ok' or row.get('p_stoi') is None:
            continue
        groups[(row['word'], row['error'], row['scope'])].append(row)

    summary = []
    for (word, error, scope) in sorted(groups, key=lambda k: (k[0], k[1], _scope_key(k[2]), k[2])):
        members = groups[(word, error, scope)]
        summary.append({
            'word': word,
            'error': error,
            'scope': scope,
            'n': len(members),
            'p_stoi': float(np.mean([m['p_stoi'] for m in members])),
            'p_estoi': float(np.mean([m['p_estoi'] for m in members])),
            'mcd': float(np.mean([m['mcd'] for m in members])),
        })
    return summary


def normal_reference_rows(report):
    """Metrics rows for healthy words scored against their own templates."""
    rows = result_rows(report)
    for row in rows:
        row['error'] = NORMAL_REFERENCE_ERROR
        row['scope'] = 'reference'
    return rows


def write_summary_csv(summary, path):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(SUMMARY_COLUMNS)
        for row in summary:
            writer.writerow([row['word'], row['error'], row['scope'], row['n'],
                             _fmt(row['p_stoi']), _fmt(row['p_estoi']), _fmt(row['mcd'])])
    logger.info(f"Wrote {len(summary)} summary row(s) to {path}")
    return path


def record_run(session_factory, command, report, seed=0, scope=None, method=None,
               started_at=None, error_message=None):
    """Store a finished run and its per-word results in the ledger; returns the run id."""
    results = report.results if report is not None else []
    failed = [r for r in results if r.status != 'ok']
    session = session_factory()
    try:
        run = RunRecord(
            command=command,
            started_at=started_at or datetime.utcnow(),
            finished_at=datetime.utcnow(),
            seed=seed,
            scope=scope,
            method=method,
            rows_total=len(results),
            rows_failed=len(failed),
            success=not failed and error_message is None,
            error_message=error_message,
        )
        for r in results:
            m = r.metrics
            run.results.append(WordResult(
                word=r.word or r.row.wav_path,
                error=r.error,
                scope=r.scope,
                p_stoi=None if m is None else m.p_stoi,
                p_estoi=None if m is None else m.p_estoi,
                mcd=None if m is None else m.mcd,
                status=r.status,
                message=r.message or None,
            ))
        session.add(run)
        session.commit()
        logger.info(f"Recorded {command} run {run.id} with {len(results)} result(s)")
        return run.id
    except Exception as e:
        session.rollback()
        logger.error(f"Error recording run in ledger: {str(e)}")
        raise
    finally:
        session.close()


def get_run_stats(session_factory, command=None):
    """Run counts per command: {'enhance': {'runs', 'success', 'failure', 'rows', 'rows_failed'}}"""
    query = select(
        RunRecord.command,
        func.count().label('runs'),
        func.sum(case((RunRecord.success == True, 1), else_=0)).label('success'),  # noqa: E712
        func.sum(case((RunRecord.success == False, 1), else_=0)).label('failure'),  # noqa: E712
        func.sum(RunRecord.rows_total).label('rows'),
        func.sum(RunRecord.rows_failed).label('rows_failed'),
    ).group_by(RunRecord.command).order_by(RunRecord.command)
    if command:
        query = query.where(RunRecord.command == command)

    session = session_factory()
    try:
        stats = {}
        for name, runs, success, failure, rows, rows_failed in session.execute(query).all():
            stats[name] = {
                'runs': runs,
                'success': success or 0,
                'failure': failure or 0,
                'rows': rows or 0,
                'rows_failed': rows_failed or 0,
            }
        return stats
    finally:
        session.close()
