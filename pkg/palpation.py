"""安全な触診: フラップ縁の4点を力ガード付きで押し、たわみ検出の結果から取り外し可否を決める"""
import csv
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from models.records import FlapState
from models.specimen import apply_contact_force, contact_stiffness, release_contact
from sensing import FORCE_EVENT, FORCE_PERIOD_S, FRAME_TICKS, TICK_HZ, SimClock, sensor_schedule
from utils.config import ForceParams, GuardParams
from utils.errors import DataIOError, SensorStall

logger = logging.getLogger('PALPATION')

PHASE = 'palpation'
N_POINTS = 4
REQUIRED_DETACHABLE = 3
# 力センサの雑音は1サンプルあたりこの σ 倍までとみなす
GUARD_NOISE_SIGMAS = 4.0


class ToolState(str, Enum):
    IDLE = 'Idle'
    DESCENDING = 'Descending'
    RETRACTING = 'Retracting'
    DRILLING = 'Drilling'


@dataclass
class DrillTool:
    """tip_position の z は元の表面からの高さ（上向き正）"""
    tip_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    descent_velocity: float = 0.0
    state: ToolState = ToolState.IDLE
    z_travel_limit: float = -1.0


@dataclass(frozen=True)
class StrategicPoint:
    position: tuple
    source_index: int


@dataclass
class PointPalpationResult:
    point: StrategicPoint
    verdict: FlapState
    peak_force: float
    peak_delta: float
    duration: float
    no_contact: bool = False
    guard_tripped: bool = False
    trace: list = field(default_factory=list, repr=False)


@dataclass
class FlapVerdict:
    per_point: list
    detachable_count: int
    final: FlapState


def select_strategic_points(plan, path, fraction=0.75):
    """4象限それぞれで完了度が最も高いサンプル点を選び、半径 fraction·r の位置に置く"""
    n = len(plan)
    completions = np.array([k.completion_estimate for k in plan])
    quadrant = (4 * np.arange(n)) // n
    points = []
    for q in range(N_POINTS):
        idx = np.flatnonzero(quadrant == q)
        # argmax は同値なら先頭（小さい番号）を返す
        k = int(idx[np.argmax(completions[idx])])
        theta = 2 * np.pi * k / n
        pos = (path.center[0] + fraction * path.radius * np.cos(theta),
               path.center[1] + fraction * path.radius * np.sin(theta))
        points.append(StrategicPoint(position=(float(pos[0]), float(pos[1])), source_index=k))
    return points


def decide_flap(verdicts):
    count = sum(1 for v in verdicts if v is FlapState.DETACHABLE)
    return FlapState.DETACHABLE if count >= REQUIRED_DETACHABLE else FlapState.NON_DETACHABLE


def is_decided(verdicts):
    """3点取り外し可、または2点不可で結論が確定する"""
    d = sum(1 for v in verdicts if v is FlapState.DETACHABLE)
    nd = len(verdicts) - d
    return d >= REQUIRED_DETACHABLE or nd > N_POINTS - REQUIRED_DETACHABLE


def guard_bound(guard, k_max, noise=0.0):
    """ガード作動までに計測される |F_z| の上限

    作動の1サンプル前は上限未満なので、雑音を除いた力は1サンプル分の押し込み k·|v_z|·T しか越えない。
    計測値にはその前後2サンプルの雑音が乗る。
    """
    step = k_max * abs(guard.vz) * FORCE_PERIOD_S
    return guard.fz_max + step + 2 * GUARD_NOISE_SIGMAS * noise


class PalpationController:
    """力(128SPS)とフレーム(20Hz)の2つの時刻付きストリームを1本の制御ループで処理する

    force_sampler(tool, timestamp) -> ForceSample
    frame_source(tick) -> (RgbImage, DepthMap) または None（フレーム欠落）
    detector(rgb, depth) -> DetachabilityReading
    """

    def __init__(self, spec, clock, guard, force_sampler, frame_source, detector, force_params=None):
        self.spec = spec
        self.clock = clock
        self.guard = guard or GuardParams()
        self.force_sampler = force_sampler
        self.frame_source = frame_source
        self.detector = detector
        self.force_params = force_params or ForceParams()
        self.tool = DrillTool(tip_position=np.array([0.0, 0.0, self.guard.retract_height]),
                              z_travel_limit=-self.guard.travel_limit)

    def _move(self, xyz, speed):
        start = self.tool.tip_position
        dist = float(np.linalg.norm(np.asarray(xyz, dtype=float) - start))
        self.clock.advance(SimClock.ticks_for(dist / speed), PHASE)
        self.tool.tip_position = np.asarray(xyz, dtype=float)

    def palpate_point(self, point):
        guard = self.guard
        start_tick = self.clock.tick
        x, y = point.position

        # 退避高さで移動してから表面の少し上まで早送り
        self._move((x, y, guard.retract_height), guard.approach_speed)
        self._move((x, y, guard.approach_clearance), guard.approach_speed)

        tool = self.tool
        tool.state = ToolState.DESCENDING
        tool.descent_velocity = guard.vz
        z0 = tool.tip_position[2]
        t0 = self.clock.tick
        contact_level = 3 * self.force_params.noise

        verdict = None
        force = 0.0
        peak_force = 0.0
        peak_delta = 0.0
        contact_seen = False
        tripped = False
        missed = 0
        last_frame_tick = t0
        trace = []

        for tick, kind in sensor_schedule(t0):
            z = max(z0 + guard.vz * (tick - t0) / TICK_HZ, tool.z_travel_limit)
            tool.tip_position = np.array([x, y, z])
            self.clock.advance_to(tick, PHASE)
            ts = self.clock.now

            if kind == FORCE_EVENT:
                sample = self.force_sampler(tool, ts)
                force = sample.f_z
                peak_force = max(peak_force, abs(force))
                if abs(force) > contact_level:
                    contact_seen = True
                if abs(force) >= guard.fz_max:
                    # ガード作動: 同じ制御ステップで停止
                    tripped = True
                    logger.info(f"[ガード] 点{point.source_index} F={force:.4f}N z={z:.4f}mm で停止")
                if tripped or z <= tool.z_travel_limit:
                    tool.descent_velocity = 0.0
                    verdict = FlapState.NON_DETACHABLE
                trace.append(self._row(ts, z, force, None, tool, point))
                if verdict is not None:
                    break
                continue

            apply_contact_force(self.spec, (x, y), -z)
            frame = self.frame_source(tick)
            if frame is None:
                missed += 1
                if tick - last_frame_tick > guard.stall_frames * FRAME_TICKS:
                    self._retract(x, y)
                    raise SensorStall(f'フレームが {missed} 回途切れました (t={ts:.3f}s)')
                continue
            missed = 0
            last_frame_tick = tick
            reading = self.detector(*frame)
            peak_delta = max(peak_delta, abs(reading.delta))
            trace.append(self._row(ts, z, force, reading, tool, point))
            if reading.state is FlapState.DETACHABLE and abs(force) < guard.fz_max:
                tool.descent_velocity = 0.0
                verdict = FlapState.DETACHABLE
                break

        no_contact = verdict is FlapState.NON_DETACHABLE and not tripped and not contact_seen
        if no_contact:
            logger.warning(f"[触診] 点{point.source_index} 移動限界まで接触なし (no-contact)")

        self._retract(x, y)
        duration = (self.clock.tick - start_tick) / TICK_HZ
        return PointPalpationResult(point=point, verdict=verdict, peak_force=peak_force, peak_delta=peak_delta,
                                    duration=duration, no_contact=no_contact, guard_tripped=tripped, trace=trace)

    def _retract(self, x, y):
        self.tool.state = ToolState.RETRACTING
        self.tool.descent_velocity = 0.0
        release_contact(self.spec)
        self._move((x, y, self.guard.retract_height), self.guard.approach_speed)
        self.tool.state = ToolState.IDLE

    def _row(self, ts, z, force, reading, tool, point):
        return {
            'timestamp': ts,
            'tip_z': z,
            'f_z': force,
            'delta': None if reading is None else reading.delta,
            'state': None if reading is None else reading.state.value,
            'velocity': tool.descent_velocity,
            'stiffness': contact_stiffness(self.spec, point.position),
        }

    def palpate_flap(self, points):
        results = []
        for point in points:
            logger.info(f"[触診] 点{point.source_index} ({point.position[0]:.3f}, {point.position[1]:.3f})")
            results.append(self.palpate_point(point))
            if is_decided([r.verdict for r in results]):
                break
        verdicts = [r.verdict for r in results]
        final = decide_flap(verdicts)
        count = sum(1 for v in verdicts if v is FlapState.DETACHABLE)
        logger.info(f"[判定] {final.value} ({count}/{len(results)})")
        return FlapVerdict(per_point=results, detachable_count=count, final=final)


def write_trace(path, result):
    try:
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(['timestamp', 'tip_z', 'f_z', 'delta', 'state', 'velocity', 'stiffness'])
            for row in result.trace:
                writer.writerow(['' if row[k] is None else row[k] for k in
                                 ('timestamp', 'tip_z', 'f_z', 'delta', 'state', 'velocity', 'stiffness')])
    except OSError as e:
        raise DataIOError(f'触診トレースを書けません: {path} ({e})') from e
