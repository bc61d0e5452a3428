"""軌道計画: 多段速度ダンパでサンプル点ごとの z を更新し、拘束付き3次スプラインで閉じた軌道にする"""
import csv
import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from utils.config import DamperParams
from utils.errors import DataIOError, PlannerError

logger = logging.getLogger('PLANNER')

TWO_PI = 2 * np.pi


@dataclass(frozen=True)
class SamplePointPlan:
    index: int
    angle: float
    z_command: float = 0.0
    completion_estimate: float = 0.0
    # 直近の更新量（replay 用）と、その観測時点の z（predictive 用）
    last_step: float = 0.0
    observed_z: float = 0.0
    # 一度 c_hi に届いた点はそれ以上下ろさない
    latched: bool = False
    # 止まる前に完了度 c_lo 以上で観測したときの貫通深さの推定 z/c（新しい順に THROUGH_WINDOW 個）
    depth_history: tuple = ()


# 貫通深さの推定に使う観測の数
THROUGH_WINDOW = 8


def initial_plan(path):
    return [SamplePointPlan(index=k, angle=float(a)) for k, a in enumerate(path.angles)]


def _clamp_completion(c):
    if c < 0.0 or c > 1.0:
        logger.warning(f"[ダンパ] 完了度 {c:.4f} が範囲外のため [0,1] に丸めます")
        return min(1.0, max(0.0, c))
    return c


def descent_rate(completion, params=None):
    """停止モードを除いた下降速度 (mm/サイクル)"""
    params = params or DamperParams()
    c = _clamp_completion(completion)
    return params.v_full if c < params.c_lo else params.v_slow


def damper_step(completion, dt, params=None, cycle_s=60.0):
    params = params or DamperParams()
    c = _clamp_completion(completion)
    if c >= params.c_hi:
        return 0.0
    return descent_rate(c, params) * (dt / cycle_s)


def update_plan(plan, observation, params=None, dt=60.0, cycle_s=60.0):
    params = params or DamperParams()
    levels = np.asarray(observation.levels, dtype=float)
    if len(levels) != len(plan):
        raise PlannerError(f'観測点数 {len(levels)} と計画点数 {len(plan)} が一致しません')
    updated = []
    for knot, level in zip(plan, levels):
        level = float(level)
        latched = knot.latched or level >= params.c_hi
        dz = 0.0 if latched else damper_step(level, dt, params, cycle_s)
        history = knot.depth_history
        if not latched and params.c_lo <= level and knot.z_command > 0:
            history = ((knot.z_command / level,) + history)[:THROUGH_WINDOW]
        updated.append(replace(knot, z_command=knot.z_command + dz, completion_estimate=level,
                               last_step=dz, observed_z=knot.z_command, latched=latched,
                               depth_history=history))
    return updated


def through_estimate(knot):
    """貫通深さの推定 (mm)。手がかりが無ければ None

    弾性戻りの分だけ深めに出るので、推定深さまで下ろせば新しい切削1回で抜ける。
    """
    if knot.depth_history:
        return float(np.mean(knot.depth_history))
    c_obs = knot.completion_estimate
    if 0.0 < c_obs < 1.0 and knot.observed_z > 0.0:
        return knot.observed_z / c_obs
    return None


def repeat_step(plan, strategy='predictive', cycles_left=1, overcut=0.01, params=None):
    """認識を止めたまま1サイクル分だけ z を進める

    predictive: 貫通深さの推定に overcut を足した深さへ v_full 以上の速さで下ろし、
                残りのサイクルは同じ深さの再通過にあてる。目標より深くはしない。
    replay:     直近の更新量をそのまま繰り返す。
    """
    params = params or DamperParams()
    if cycles_left < 1:
        raise PlannerError(f'残りサイクル数が不正です: {cycles_left}')

    updated = []
    for knot in plan:
        if strategy == 'replay':
            dz = knot.last_step
        elif strategy == 'predictive':
            dz = _predictive_step(knot, cycles_left, overcut, params)
        else:
            raise PlannerError(f'未知の再切削方式です: {strategy}')
        updated.append(replace(knot, z_command=knot.z_command + dz))
    return updated


def _predictive_step(knot, cycles_left, overcut, params):
    estimate = through_estimate(knot)
    if estimate is None:
        return 0.0 if knot.completion_estimate >= 1.0 else params.v_full
    remaining = max(0.0, estimate + overcut - knot.z_command)
    return min(remaining, max(params.v_full, remaining / cycles_left))


# ── スプライン ─────────────────────────────

def constrained_slopes(x, y):
    """区間の傾きの調和平均。符号が変わる点と平らな点は傾き0（行き過ぎなし）"""
    secant = np.diff(y) / np.diff(x)
    left = np.roll(secant, 1)
    right = secant
    slopes = np.zeros(len(secant))
    same_sign = left * right > 0
    slopes[same_sign] = 2.0 / (1.0 / left[same_sign] + 1.0 / right[same_sign])
    return slopes


@dataclass
class ClosedTrajectory:
    knots: list
    spline: CubicHermiteSpline
    center: tuple = (0.0, 0.0)
    radius: float = 4.0

    def z(self, theta):
        return self.spline(theta)

    def dz(self, theta):
        return self.spline.derivative()(theta)

    def evaluate(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.stack([self.center[0] + self.radius * np.cos(theta),
                         self.center[1] + self.radius * np.sin(theta),
                         self.z(theta)], axis=-1)

    def knot_depths(self):
        return np.array([float(self.z(k.angle)) for k in self.knots])

    def dump_csv(self, path, samples=360):
        theta = np.linspace(0.0, TWO_PI, samples, endpoint=False)
        pts = self.evaluate(theta)
        try:
            with open(path, 'w', newline='') as f:
                writer = csv.writer(f)
                writer.writerow(['theta', 'x', 'y', 'z'])
                for t, (x, y, z) in zip(theta, pts):
                    writer.writerow([repr(float(t)), repr(float(x)), repr(float(y)), repr(float(z))])
        except OSError as e:
            raise DataIOError(f'軌道CSVを書けません: {path} ({e})') from e


def build_spline(knots, center=(0.0, 0.0), radius=4.0):
    if len(knots) < 3:
        raise PlannerError(f'ノットが足りません: {len(knots)}')
    angles = np.array([k.angle for k in knots], dtype=float)
    z = np.array([k.z_command for k in knots], dtype=float)
    if np.any(np.diff(angles) <= 0):
        raise PlannerError('ノットの角度が単調増加ではありません（重複あり）')
    if angles[0] < 0 or angles[-1] >= angles[0] + TWO_PI:
        raise PlannerError('ノットの角度が1周に収まっていません')

    # 周期化: 先頭を 2π 先に複製する
    x = np.append(angles, angles[0] + TWO_PI)
    y = np.append(z, z[0])
    slopes = constrained_slopes(x, y)
    dydx = np.append(slopes, slopes[0])
    spline = CubicHermiteSpline(x, y, dydx, extrapolate='periodic')
    return ClosedTrajectory(knots=list(knots), spline=spline, center=tuple(center), radius=radius)
