#!/usr/bin/env python3
"""卵殻穿孔シミュレータ CLI

  run     1試行（--dump-frames でフレーム保存）
  batch   複数試行を CSV に出力
  detect  保存済みフレームに検出器をかけて時系列 CSV を出力
  report  試行 CSV の集計表を表示
"""
import argparse
import sys
from dataclasses import replace

from dotenv import load_dotenv

from detector import build_detector_config, run_offline, write_timeline
from harness import aggregate, format_report, run_batch
from models.data_handler import format_pct, load_trials, save_trials
from models.specimen import DrillPath
from sensing import load_frames
from utils.config import load_config
from utils.errors import EXIT_OK, EXIT_WORKFLOW, ConfigError, SimError
from utils.log import setup_logging
from workflow import execute_trial


def _inject(text):
    try:
        cycle, knot = (int(v) for v in text.split(':'))
    except ValueError:
        raise argparse.ArgumentTypeError('CYCLE:KNOT の形式で指定してください')
    return cycle, knot


def build_parser():
    parser = argparse.ArgumentParser(prog='drilling_system', description='卵殻穿孔シミュレータ')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('run', help='1試行を実行')
    p.add_argument('--config')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--dump-frames', metavar='DIR')
    p.add_argument('--events', metavar='NDJSON', help='イベントログの保存先')
    p.add_argument('--inject', type=_inject, metavar='CYCLE:KNOT', help='指定位置でフラップを脱落させる')

    p = sub.add_parser('batch', help='複数試行を実行')
    p.add_argument('--config')
    p.add_argument('--trials', type=int, default=12)
    p.add_argument('--seed-base', type=int, default=0)
    p.add_argument('--out', required=True)
    p.add_argument('--workers', type=int, default=1)

    p = sub.add_parser('detect', help='保存済みフレームに検出器をかける')
    p.add_argument('--config')
    p.add_argument('--frames', required=True)
    p.add_argument('--out', required=True)

    p = sub.add_parser('report', help='試行 CSV を集計')
    p.add_argument('--in', dest='input', required=True)
    return parser


def cmd_run(args):
    config = load_config(args.config)
    record, runner = execute_trial(None, config, args.seed, trial_id=1,
                                   inject_collapse=args.inject, dump_dir=args.dump_frames)
    if args.events:
        runner.log.write(args.events)
    print(f"[結果] {runner.state} case={record.case} success={record.successful} "
          f"total={record.total_time:.1f}s palpation={record.palpation_time:.1f}s "
          f"({format_pct(record.palpation_fraction)})")
    if not record.valid:
        print(f"[エラー] {record.reason}", file=sys.stderr)
        return EXIT_WORKFLOW
    return EXIT_OK


def cmd_batch(args):
    if args.trials < 1:
        raise ConfigError('試行数は1以上が必要です', key='--trials')
    config = load_config(args.config)
    records = run_batch(config, args.trials, args.seed_base, args.workers)
    save_trials(args.out, records)
    print(format_report(records))
    return EXIT_OK


def cmd_detect(args):
    config = load_config(args.config)
    frames = load_frames(args.frames)
    h, w = frames[0][1].data.shape
    cam = replace(config.camera, width=w, height=h)
    sp = config.specimen
    path = DrillPath(radius=sp.path_radius, sample_count=sp.sample_count)
    cfg = build_detector_config(cam, path, config.hsv, config.detector, sp.bit_radius)
    readings = run_offline(frames, cfg)
    write_timeline(args.out, readings)
    print(f"[完了] {len(readings)} フレーム → {args.out}")
    return EXIT_OK


def cmd_report(args):
    records = load_trials(args.input)
    print(format_report(records, aggregate(records)))
    return EXIT_OK


COMMANDS = {'run': cmd_run, 'batch': cmd_batch, 'detect': cmd_detect, 'report': cmd_report}


def main(argv=None):
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging('INFO' if args.command == 'run' else 'WARNING')
    try:
        return COMMANDS[args.command](args)
    except SimError as e:
        print(f"[エラー] {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
