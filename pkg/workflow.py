"""自動穿孔ワークフロー

切削 → 完了度認識 を繰り返し、平均完了度が閾値を超えたら触診で状態推定する。
取り外し不可なら再切削（認識停止）を挟んで再度触診。切削中は常にたわみを監視する。
"""
import hashlib
import json
import logging
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from detector import DeflectionDetector, build_detector_config
from models.records import FlapState, TrialRecord
from models.specimen import apply_drill_pass, check_contact_model, collapse, generate_specimen, ground_truth_case
from palpation import PalpationController, select_strategic_points
from sensing import (FRAME_TICKS, STREAM_FORCE, STREAM_FRAME, STREAM_OBSERVER, TICK_HZ, CompletionObservation,
                     SimClock, derive_seed, dump_frame, observe_completion, render_rgbd, sample_force)
from trajectory import build_spline, initial_plan, repeat_step, update_plan
from utils.config import SimConfig, WorkflowParams
from utils.errors import DataIOError, PipelineError, PlannerError, SensorStall, WorkflowFault

logger = logging.getLogger('WORKFLOW')


class Phase(str, Enum):
    INITIALIZING = 'Initializing'
    DRILLING = 'DrillingCycle'
    RECOGNIZING = 'Recognizing'
    PALPATING = 'Palpating'
    REPEAT = 'RepeatDrilling'
    DONE = 'Done'
    HALTED = 'Halted'


@dataclass(frozen=True)
class WorkflowState:
    phase: Phase = Phase.INITIALIZING
    cycles_left: int = 0
    rounds: int = 0
    verdict: FlapState = None
    reason: str = ''

    @property
    def terminal(self):
        return self.phase in (Phase.DONE, Phase.HALTED)

    def __str__(self):
        if self.phase is Phase.REPEAT:
            return f"{self.phase.value}({self.cycles_left})"
        if self.phase is Phase.DONE:
            return f"{self.phase.value}({self.verdict.value})"
        if self.phase is Phase.HALTED:
            return f"{self.phase.value}({self.reason})"
        return self.phase.value


# ── イベント ─────────────────────────────

@dataclass(frozen=True)
class Initialized:
    name = 'Initialized'

    def payload(self):
        return {}


@dataclass(frozen=True)
class CycleComplete:
    name = 'CycleComplete'
    cycle: int = 0

    def payload(self):
        return {'cycle': self.cycle}


@dataclass(frozen=True)
class Recognized:
    name = 'Recognized'
    observation: CompletionObservation = None

    def payload(self):
        return {'levels': [float(v) for v in self.observation.levels], 'average': self.observation.average}


@dataclass(frozen=True)
class Verdict:
    name = 'Verdict'
    final: FlapState = FlapState.NON_DETACHABLE
    detachable_count: int = 0
    points: tuple = ()

    def payload(self):
        return {'final': self.final.value, 'detachable_count': self.detachable_count, 'points': list(self.points)}


@dataclass(frozen=True)
class ExceptionDeflection:
    name = 'ExceptionDeflection'
    delta: float = 0.0

    def payload(self):
        return {'delta': self.delta}


@dataclass(frozen=True)
class RepeatCycleComplete:
    name = 'RepeatCycleComplete'

    def payload(self):
        return {}


@dataclass(frozen=True)
class CycleLimit:
    name = 'CycleLimit'
    cycles: int = 0

    def payload(self):
        return {'cycles': self.cycles}


def event_from_record(name, payload):
    if name == 'Initialized':
        return Initialized()
    if name == 'CycleComplete':
        return CycleComplete(payload.get('cycle', 0))
    if name == 'Recognized':
        levels = np.array(payload['levels'], dtype=float)
        return Recognized(CompletionObservation(levels=levels, average=float(levels.mean())))
    if name == 'Verdict':
        return Verdict(FlapState(payload['final']), payload['detachable_count'],
                       tuple(tuple(p) for p in payload.get('points', [])))
    if name == 'ExceptionDeflection':
        return ExceptionDeflection(payload.get('delta', 0.0))
    if name == 'RepeatCycleComplete':
        return RepeatCycleComplete()
    if name == 'CycleLimit':
        return CycleLimit(payload.get('cycles', 0))
    raise WorkflowFault(f'未知のイベントです: {name}')


# ── 状態遷移 ─────────────────────────────

def advance_state(state, event, params=None):
    params = params or WorkflowParams()
    phase = state.phase

    def illegal():
        raise WorkflowFault(f'{state} では {event.name} を受け付けません')

    if state.terminal:
        illegal()

    if phase is Phase.INITIALIZING:
        if isinstance(event, Initialized):
            return replace(state, phase=Phase.DRILLING)
        illegal()

    if phase is Phase.DRILLING:
        if isinstance(event, CycleComplete):
            return replace(state, phase=Phase.RECOGNIZING)
        if isinstance(event, ExceptionDeflection):
            return replace(state, phase=Phase.HALTED, reason='Exception')
        if isinstance(event, CycleLimit):
            return replace(state, phase=Phase.HALTED, reason='cycle-limit')
        illegal()

    if phase is Phase.RECOGNIZING:
        if isinstance(event, Recognized):
            # 「80% を超えたら」なので等号は切削継続
            if event.observation.average > params.gate_level:
                return replace(state, phase=Phase.PALPATING)
            return replace(state, phase=Phase.DRILLING)
        illegal()

    if phase is Phase.PALPATING:
        if isinstance(event, Verdict):
            if event.final is FlapState.DETACHABLE:
                return replace(state, phase=Phase.DONE, verdict=FlapState.DETACHABLE)
            if state.rounds >= params.round_cap:
                return replace(state, phase=Phase.DONE, verdict=FlapState.NON_DETACHABLE)
            return replace(state, phase=Phase.REPEAT, cycles_left=params.repeat_cycles, rounds=state.rounds + 1)
        illegal()

    if phase is Phase.REPEAT:
        if isinstance(event, RepeatCycleComplete):
            left = state.cycles_left - 1
            if left <= 0:
                return replace(state, phase=Phase.PALPATING, cycles_left=0)
            return replace(state, cycles_left=left)
        if isinstance(event, ExceptionDeflection):
            return replace(state, phase=Phase.HALTED, reason='Exception')
        illegal()

    illegal()


# ── 例外監視 ─────────────────────────────

class DeflectionWindow:
    """閾値超えが K フレーム連続したら例外にする"""

    def __init__(self, frames=3, threshold=0.12):
        self.frames = frames
        self.threshold = threshold
        self.count = 0

    def reset(self):
        self.count = 0

    def update(self, reading):
        if abs(reading.delta) > self.threshold:
            self.count += 1
        else:
            self.count = 0
        return self.count >= self.frames


def monitor_exceptions(reading, window):
    if window.update(reading):
        return ExceptionDeflection(delta=float(reading.delta))
    return None


# ── イベントログ ─────────────────────────────

def payload_digest(payload):
    text = json.dumps(payload, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


class EventLog:
    """追記のみのイベント記録（1行1レコードの JSON）"""

    def __init__(self):
        self.entries = []

    def append(self, timestamp, state, event, next_state):
        payload = event.payload()
        self.entries.append({
            'timestamp': timestamp,
            'state': str(state),
            'event': event.name,
            'payload': payload,
            'digest': payload_digest(payload),
            'next': str(next_state),
        })

    def write(self, path):
        try:
            with open(path, 'w') as f:
                for entry in self.entries:
                    f.write(json.dumps(entry, sort_keys=True) + '\n')
        except OSError as e:
            raise DataIOError(f'イベントログを書けません: {path} ({e})') from e

    @staticmethod
    def read(path):
        try:
            with open(path) as f:
                return [json.loads(line) for line in f if line.strip()]
        except (OSError, ValueError) as e:
            raise DataIOError(f'イベントログを読めません: {path} ({e})') from e


def replay(entries, params=None):
    """記録されたイベント列から状態遷移をたどり直す"""
    state = WorkflowState()
    states = [str(state)]
    for entry in entries:
        if payload_digest(entry['payload']) != entry['digest']:
            raise WorkflowFault(f"ペイロードのダイジェストが一致しません: {entry['event']} t={entry['timestamp']}")
        state = advance_state(state, event_from_record(entry['event'], entry['payload']), params)
        states.append(str(state))
    return states


# ── 1試行の実行 ─────────────────────────────

class TrialRunner:
    """1つの試行を単一スレッド・イベント順で進める"""

    def __init__(self, spec, config, seed, trial_id=0, inject_collapse=None, dump_dir=None, drop_frame=None):
        check_contact_model(config.contact, config.guard.fz_max, config.detector.threshold)
        self.spec = spec
        self.config = config
        self.seed = seed
        self.trial_id = trial_id
        self.inject_collapse = inject_collapse
        self.dump_dir = dump_dir
        self.drop_frame = drop_frame

        self.clock = SimClock()
        self.log = EventLog()
        self.state = WorkflowState()
        self.states = [str(self.state)]
        self.plan = initial_plan(spec.path)
        self.verdicts = []
        self.observer_calls = []
        self.drill_cycles = 0
        self.collapse_time = None

        cam = config.camera
        det_cfg = build_detector_config(cam, spec.path, config.hsv, config.detector, config.specimen.bit_radius)
        self.detector = DeflectionDetector(det_cfg)
        self.window = DeflectionWindow(config.workflow.exception_frames, config.detector.threshold)
        self.force_rng = np.random.default_rng(derive_seed(seed, STREAM_FORCE))
        self.knot_angles = np.array([k.angle for k in self.plan])

    # フレーム 1 枚（tick はフレーム格子上）
    def frame(self, tick):
        if self.drop_frame is not None and self.drop_frame(tick):
            return None
        index = tick // FRAME_TICKS
        rgb, depth = render_rgbd(self.spec, self.config.camera, derive_seed(self.seed, STREAM_FRAME, index),
                                 timestamp=tick / TICK_HZ, bit_radius=self.config.specimen.bit_radius)
        if self.dump_dir:
            dump_frame(self.dump_dir, index, rgb, depth, self.seed, self.trial_id)
        return rgb, depth

    def fire(self, event):
        nxt = advance_state(self.state, event, self.config.workflow)
        self.log.append(self.clock.now, self.state, event, nxt)
        logger.debug(f"[遷移] {self.state} --{event.name}--> {nxt}")
        self.state = nxt
        self.states.append(str(nxt))
        return nxt

    def run(self):
        handlers = {
            Phase.INITIALIZING: self._initialize,
            Phase.DRILLING: self._drilling_cycle,
            Phase.RECOGNIZING: self._recognize,
            Phase.PALPATING: self._palpate,
            Phase.REPEAT: self._repeat_cycle,
        }
        while not self.state.terminal:
            self.fire(handlers[self.state.phase]())
        return self.state

    def _initialize(self):
        self.clock.advance(FRAME_TICKS, 'overhead')
        frame = self.frame(self.clock.tick)
        if frame is None:
            raise SensorStall('初期フレームが取得できません')
        self.detector.capture_initial(frame[1])
        # 初回は完了度0として全速で下ろす
        zeros = CompletionObservation(levels=np.zeros(len(self.plan)), average=0.0)
        self.plan = update_plan(self.plan, zeros, self.config.damper, self.config.workflow.cycle_s,
                                self.config.workflow.cycle_s)
        return Initialized()

    def _monitor(self, tick, phase):
        """tick のフレームから監視。閾値を超えている間は連続フレームで確認する"""
        missed = 0
        while True:
            if tick > self.clock.tick:
                self.clock.advance_to(tick, phase)
            frame = self.frame(tick)
            if frame is None:
                missed += 1
                if missed > self.config.guard.stall_frames:
                    raise SensorStall(f'切削中にフレームが {missed} 回途切れました (t={tick / TICK_HZ:.3f}s)')
            else:
                missed = 0
                event = monitor_exceptions(self.detector(*frame), self.window)
                if event is not None:
                    logger.warning(f"[例外] 切削中のたわみ {event.delta:.3f}mm t={tick / TICK_HZ:.3f}s")
                    return event
                if self.window.count == 0:
                    return None
            tick += FRAME_TICKS

    def _drill_pass(self, phase):
        """閉じた軌道を1周する。例外が出たらその場で止めてイベントを返す"""
        wf = self.config.workflow
        traj = build_spline(self.plan, self.spec.path.center, self.spec.path.radius)
        depths = traj.knot_depths()
        n = len(self.plan)
        cycle_ticks = SimClock.ticks_for(wf.cycle_s)
        start = self.clock.tick
        self.window.reset()

        for k in range(n):
            knot_end = start + (k + 1) * cycle_ticks // n
            apply_drill_pass(self.spec, k, float(depths[k]))

            if self.inject_collapse == (self.drill_cycles, k) and phase == 'drilling':
                # パスの途中で脱落させ、直後のフレームから監視する
                self.clock.advance_to((self.clock.tick + knot_end) // 2, phase)
                collapse(self.spec)
                self.collapse_time = self.clock.now
                event = self._monitor(self.clock.next_frame_tick(), phase)
                if event is not None:
                    return event

            self.clock.advance_to(max(knot_end, self.clock.tick), phase)
            if (k + 1) % wf.monitor_stride == 0:
                event = self._monitor(self.clock.tick // FRAME_TICKS * FRAME_TICKS, phase)
                if event is not None:
                    return event
        return None

    def _drilling_cycle(self):
        wf = self.config.workflow
        if self.drill_cycles >= wf.max_drill_cycles:
            logger.warning(f"[上限] 切削サイクルが {self.drill_cycles} 回に達しました")
            return CycleLimit(self.drill_cycles)
        event = self._drill_pass('drilling')
        self.drill_cycles += 1
        return event or CycleComplete(self.drill_cycles)

    def _recognize(self):
        wf = self.config.workflow
        self.observer_calls.append(str(self.state))
        seed = derive_seed(self.seed, STREAM_OBSERVER, len(self.observer_calls))
        self.clock.advance(SimClock.ticks_for(wf.recognition_s), 'recognizing')
        obs = observe_completion(self.spec, self.config.observer, seed, self.clock.now)
        self.plan = update_plan(self.plan, obs, self.config.damper, wf.cycle_s, wf.cycle_s)
        logger.debug(f"[認識] サイクル{self.drill_cycles} 平均完了度 {obs.average:.3f}")
        return Recognized(obs)

    def _palpate(self):
        cfg = self.config
        points = select_strategic_points(self.plan, self.spec.path, cfg.guard.strategic_radius_fraction)
        logger.info(f"[触診] 第{self.state.rounds}ラウンド 位置 " +
                    ', '.join(f"#{p.source_index}" for p in points))

        def force_sampler(tool, ts):
            return sample_force(self.spec, tool, cfg.force, self.force_rng, ts)

        controller = PalpationController(self.spec, self.clock, cfg.guard, force_sampler, self.frame,
                                         self.detector, cfg.force)
        verdict = controller.palpate_flap(points)
        self.verdicts.append(verdict)
        return Verdict(verdict.final, verdict.detachable_count,
                       tuple(p.position for p in points[:len(verdict.per_point)]))

    def _repeat_cycle(self):
        wf = self.config.workflow
        self.plan = repeat_step(self.plan, wf.repeat_strategy, self.state.cycles_left, wf.repeat_overcut,
                                self.config.damper)
        event = self._drill_pass('repeat')
        return event or RepeatCycleComplete()

    def record(self, valid=True, reason=''):
        verdict = self.state.verdict or FlapState.NON_DETACHABLE
        case = ground_truth_case(self.spec, verdict)
        halted = self.state.phase is Phase.HALTED
        return TrialRecord(
            trial_id=self.trial_id,
            seed=self.seed,
            successful=case.success and valid,
            detachable=verdict is FlapState.DETACHABLE,
            case=int(case),
            total_time=self.clock.now,
            palpation_time=self.clock.seconds('palpation'),
            halted=halted,
            valid=valid,
            verdict=verdict.value,
            reason=reason or (self.state.reason if halted else ''),
            events=self.log.entries,
            phases=dict(self.clock.accounting),
        )


def execute_trial(spec, config=None, seed=0, trial_id=0, **options):
    """1試行を実行して (TrialRecord, TrialRunner) を返す。ワークフロー異常やセンサ停止は valid=False"""
    config = config or SimConfig()
    if spec is None:
        spec = generate_specimen(seed, config.specimen, config.contact)
    runner = TrialRunner(spec, config, seed, trial_id, **options)
    try:
        runner.run()
    except (WorkflowFault, SensorStall, PipelineError, PlannerError) as e:
        logger.error(f"[中断] 試行{trial_id} seed={seed}: {type(e).__name__}: {e}")
        return runner.record(valid=False, reason=f'{type(e).__name__}: {e}'), runner
    record = runner.record()
    logger.info(f"[結果] 試行{trial_id} seed={seed} {runner.state} case={record.case} "
                f"総時間={record.total_time:.1f}s 触診={record.palpation_time:.1f}s")
    return record, runner


def run_trial(spec, config=None, seed=0, trial_id=0, **options):
    return execute_trial(spec, config, seed, trial_id, **options)[0]
