"""バッチ試行と集計"""
import logging
from concurrent.futures import ProcessPoolExecutor

from models.data_handler import format_pct
from models.records import BatchSummary
from utils.errors import SimError
from workflow import run_trial

logger = logging.getLogger('HARNESS')


def _run_one(args):
    config, seed, trial_id = args
    record = run_trial(None, config, seed, trial_id)
    # プロセス間で返すのでイベントログは落とす
    record.events = []
    return record


def run_batch(config, trials, seed_base=0, workers=1):
    """trial_id = 1..trials、seed = seed_base + i。結果は試行順"""
    jobs = [(config, seed_base + i, i + 1) for i in range(trials)]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_one, jobs))
    else:
        records = [_run_one(job) for job in jobs]
    logger.info(f"[バッチ] {trials} 試行完了 (seed {seed_base}〜{seed_base + trials - 1})")
    return records


def aggregate(records):
    valid = [r for r in records if r.valid]
    if not valid:
        raise SimError('集計できる試行がありません')
    n = len(valid)
    total = sum(r.total_time for r in valid)
    palpation = sum(r.palpation_time for r in valid)
    histogram = {case: 0 for case in (1, 2, 3, 4)}
    for r in valid:
        histogram[r.case] = histogram.get(r.case, 0) + 1
    return BatchSummary(
        n_trials=n,
        success_ratio=sum(1 for r in valid if r.successful) / n,
        detachable_ratio=sum(1 for r in valid if r.detachable) / n,
        mean_total_time=total / n,
        mean_palpation_time=palpation / n,
        mean_palpation_fraction=palpation / total if total > 0 else 0.0,
        case_histogram=histogram,
    )


def format_report(records, summary=None):
    summary = summary or aggregate(records)
    lines = [f"{'Trial':>5} {'Success':>8} {'Detach':>7} {'Case':>5} {'Total(s)':>10} {'Palpation(s)':>18}"]
    for r in records:
        mark = '' if r.valid else ' *invalid'
        lines.append(f"{r.trial_id:>5} {'Y' if r.successful else 'N':>8} {'Y' if r.detachable else 'N':>7} "
                     f"{r.case:>5} {r.total_time:>10.0f} "
                     f"{f'{r.palpation_time:.0f} ({format_pct(r.palpation_fraction)})':>18}{mark}")
    lines.append(f"{'Avg.':>5} {format_pct(summary.success_ratio):>8} {format_pct(summary.detachable_ratio):>7} "
                 f"{'':>5} {summary.mean_total_time:>10.0f} "
                 f"{f'{summary.mean_palpation_time:.0f} ({format_pct(summary.mean_palpation_fraction)})':>18}")
    lines.append('')
    lines.append(f"試行数: {summary.n_trials}")
    lines.append(f"成功率: {format_pct(summary.success_ratio)}")
    lines.append(f"取り外し可率: {format_pct(summary.detachable_ratio)}")
    lines.append("ケース別: " + ', '.join(f"Case{c}={n}" for c, n in sorted(summary.case_histogram.items())))
    return '\n'.join(lines)
