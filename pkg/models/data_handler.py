"""試行結果 CSV の読み書き"""
import csv
import logging

from models.records import TrialRecord
from utils.errors import DataIOError

logger = logging.getLogger('HARNESS')

TRIAL_COLUMNS = ['trial_id', 'seed', 'successful', 'detachable', 'case', 'total_s', 'palpation_s',
                 'palpation_pct', 'halted', 'valid']


def format_pct(fraction):
    return f"{fraction * 100:.1f}%"


def _bool(text, column):
    value = text.strip().lower()
    if value in ('true', '1', 'yes'):
        return True
    if value in ('false', '0', 'no'):
        return False
    raise ValueError(f'{column}: 真偽値ではありません ({text!r})')


def record_row(record):
    return [
        record.trial_id,
        record.seed,
        str(record.successful).lower(),
        str(record.detachable).lower(),
        record.case,
        repr(float(record.total_time)),
        repr(float(record.palpation_time)),
        format_pct(record.palpation_fraction),
        str(record.halted).lower(),
        str(record.valid).lower(),
    ]


def save_trials(path, records):
    try:
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(TRIAL_COLUMNS)
            for record in records:
                writer.writerow(record_row(record))
    except OSError as e:
        raise DataIOError(f'CSV を書けません: {path} ({e})') from e
    logger.info(f"[保存] {len(records)} 件 → {path}")


def load_trials(path):
    try:
        with open(path, newline='') as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise DataIOError(f'CSV を読めません: {path} ({e})') from e

    records = []
    for n, row in enumerate(rows, start=2):
        try:
            records.append(TrialRecord(
                trial_id=int(row['trial_id']),
                seed=int(row['seed']),
                successful=_bool(row['successful'], 'successful'),
                detachable=_bool(row['detachable'], 'detachable'),
                case=int(row['case']),
                total_time=float(row['total_s']),
                palpation_time=float(row['palpation_s']),
                halted=_bool(row['halted'], 'halted'),
                # 古い9列の CSV は valid 列なし
                valid=_bool(row['valid'], 'valid') if row.get('valid') not in (None, '') else True,
            ))
        except (KeyError, TypeError, ValueError) as e:
            raise DataIOError(f'{path} の {n} 行目を解釈できません: {e}') from e
    return records
