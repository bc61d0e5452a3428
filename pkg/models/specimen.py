"""卵殻・ドリル経路・フラップの真値モデル

ワークフローだけがこの状態を書き換える。センサ側はスナップショットとして読むだけ。
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from models.records import CaseLabel
from utils.config import ContactModel, SpecimenParams
from utils.errors import ConfigError

logger = logging.getLogger('SPECIMEN')

# 浮動小数の足し合わせで残る極小の残存は 0 とみなす
WEB_EPS = 1e-9

MIN_THICKNESS_MM = 1e-3


@dataclass(frozen=True)
class DrillPath:
    center: tuple = (0.0, 0.0)
    radius: float = 4.0
    sample_count: int = 32

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigError('経路半径は正の値が必要です', key='PATH_RADIUS_MM')
        if self.sample_count < 4:
            raise ConfigError('サンプル点は4点以上必要です', key='SAMPLE_COUNT')

    @property
    def angles(self):
        return 2 * np.pi * np.arange(self.sample_count) / self.sample_count

    def point(self, k):
        theta = 2 * np.pi * k / self.sample_count
        return np.array([self.center[0] + self.radius * np.cos(theta),
                         self.center[1] + self.radius * np.sin(theta)])

    def points(self):
        a = self.angles
        return np.column_stack([self.center[0] + self.radius * np.cos(a),
                                self.center[1] + self.radius * np.sin(a)])


@dataclass
class SamplePointTruth:
    index: int
    thickness: float
    drilled_depth: float = 0.0
    springback: float = 0.0
    springback_drawn: float = 0.0
    last_commanded: float = 0.0

    @property
    def web(self):
        w = self.thickness - self.drilled_depth
        return w if w > WEB_EPS else 0.0

    @property
    def completion(self):
        return min(1.0, self.drilled_depth / self.thickness)


@dataclass
class SpecimenTruth:
    path: DrillPath
    points: list
    surface_base_depth: float = 500.0
    membrane_intact: bool = True
    flap_displacement: float = 0.0
    flap_tilt: tuple = (0.0, 0.0)
    rest_displacement: float = 0.0
    contact: ContactModel = field(default_factory=ContactModel)
    springback_relief: float = 0.01

    @property
    def total_web(self):
        return float(sum(p.web for p in self.points))

    @property
    def detachable(self):
        return all(p.web == 0.0 for p in self.points)

    def completions(self):
        return np.array([p.completion for p in self.points])

    def displacement_at(self, xy):
        """フラップ上の点 xy（mm, 世界座標）の沈み込み量"""
        dx = np.asarray(xy, dtype=float)[..., 0] - self.path.center[0]
        dy = np.asarray(xy, dtype=float)[..., 1] - self.path.center[1]
        return self.flap_displacement + self.flap_tilt[0] * dx + self.flap_tilt[1] * dy

    def damage_membrane(self, reason):
        if self.membrane_intact:
            self.membrane_intact = False
            logger.warning(f"[膜損傷] {reason}")

    def dump_text(self):
        """1行1サンプル点: index thickness drilled_depth web springback"""
        lines = []
        for p in self.points:
            lines.append(f"{p.index} {p.thickness:.6f} {p.drilled_depth:.6f} {p.web:.6f} {p.springback:.6f}")
        return '\n'.join(lines) + '\n'


def generate_specimen(seed, params=None, contact=None, center=(0.0, 0.0)):
    params = params or SpecimenParams()
    if not params.thickness_mean > 0:
        raise ConfigError('厚みの平均は正の値が必要です', key='THICKNESS_MEAN_MM')
    if params.thickness_sigma < 0:
        raise ConfigError('厚みの標準偏差は0以上が必要です', key='THICKNESS_SIGMA_MM')
    if params.springback_max < 0:
        raise ConfigError('スプリングバック上限は0以上が必要です', key='SPRINGBACK_MAX_MM')

    path = DrillPath(center=tuple(center), radius=params.path_radius, sample_count=params.sample_count)
    rng = np.random.default_rng(seed)
    thickness = rng.normal(params.thickness_mean, params.thickness_sigma, params.sample_count)
    thickness = np.maximum(thickness, MIN_THICKNESS_MM)
    springback = rng.uniform(0.0, params.springback_max, params.sample_count)

    points = [
        SamplePointTruth(index=k, thickness=float(thickness[k]),
                         springback=float(springback[k]), springback_drawn=float(springback[k]))
        for k in range(params.sample_count)
    ]
    spec = SpecimenTruth(path=path, points=points, surface_base_depth=params.surface_depth,
                         contact=contact or ContactModel(), springback_relief=params.springback_relief)
    logger.debug(f"[生成] seed={seed} 平均厚み={thickness.mean():.4f}mm")
    return spec


def apply_drill_pass(spec, k, commanded_depth):
    """サンプル点 k を commanded_depth（元の表面から）まで削る。spec をその場で更新して返す"""
    if not 0 <= k < len(spec.points):
        raise IndexError(f'sample point {k} out of range')
    if commanded_depth <= 0:
        return spec

    p = spec.points[k]
    if commanded_depth > p.last_commanded:
        # 新しい深さへの切削: 弾性戻りは毎回発生する
        p.springback = p.springback_drawn
        p.last_commanded = commanded_depth
    else:
        # 同じ軌道の再通過で弾性残りが少しずつ取れる
        p.springback = max(0.0, p.springback - spec.springback_relief)

    p.drilled_depth = max(p.drilled_depth, commanded_depth - p.springback)

    if commanded_depth > p.thickness + spec.contact.membrane_overdrill_margin:
        spec.damage_membrane(f"点{k} 過切削 指令={commanded_depth:.3f}mm 厚み={p.thickness:.3f}mm")
    return spec


def attached_stiffness(spec):
    """付いたままのフラップの剛性: 残存部の局所ばね k_a·W と膜の支持ばね k_s の直列"""
    c = spec.contact
    k_web = c.k_attached_per_mm * spec.total_web
    return k_web * c.k_support / (k_web + c.k_support)


def apply_contact_force(spec, point, tip_depth):
    """先端深さ tip_depth（元の表面から下向き）での接触力と、更新後の spec を返す"""
    if tip_depth <= 0:
        return 0.0, spec

    c = spec.contact
    if not spec.detachable:
        # 押し込みは残存部のくぼみと支持ばねの沈みに分かれる。沈みは F/k_s を超えない
        force = attached_stiffness(spec) * tip_depth
        spec.flap_displacement = force / c.k_support
        spec.flap_tilt = (0.0, 0.0)
        return float(force), spec

    # 切り離されたフラップは反対側の経路上の点を支点に傾く
    r = spec.path.radius
    offset = np.asarray(point, dtype=float) - np.asarray(spec.path.center, dtype=float)
    dist = float(np.hypot(offset[0], offset[1]))
    u = offset / dist if dist > 0 else np.zeros(2)
    slope = tip_depth / (dist + r)
    spec.flap_displacement = slope * r
    spec.flap_tilt = (float(slope * u[0]), float(slope * u[1]))
    force = c.k_free * spec.flap_displacement
    if force > c.membrane_force_limit:
        spec.damage_membrane(f"押し込み力 {force:.3f}N > {c.membrane_force_limit}N")
    return float(force), spec


def contact_stiffness(spec, point):
    """現在の状態での接触剛性 (N/mm)"""
    if not spec.detachable:
        return attached_stiffness(spec)
    r = spec.path.radius
    offset = np.asarray(point, dtype=float) - np.asarray(spec.path.center, dtype=float)
    return spec.contact.k_free * r / (float(np.hypot(offset[0], offset[1])) + r)


# 力上限で押したときの付いたフラップの沈みは、たわみ閾値のこの割合まで
ATTACHED_SINK_FRACTION = 0.25

_CONTACT_KEYS = {
    'k_attached_per_mm': 'K_ATTACHED_PER_MM',
    'k_free': 'K_FREE',
    'k_support': 'K_SUPPORT_N_PER_MM',
    'membrane_force_limit': 'MEMBRANE_FORCE_LIMIT_N',
    'membrane_overdrill_margin': 'MEMBRANE_OVERDRILL_MARGIN_MM',
}


def check_contact_model(contact, fz_max, threshold):
    """接触モデルの検証。付いたフラップが力上限まで押されても検出閾値に届かないこと"""
    for attr, key in _CONTACT_KEYS.items():
        if not getattr(contact, attr) > 0:
            raise ConfigError('接触モデルの値は正の値が必要です', key=key)
    sink = fz_max / contact.k_support
    if sink > ATTACHED_SINK_FRACTION * threshold:
        raise ConfigError(f'支持ばねが柔らかすぎます: {fz_max}N で {sink:.3f}mm 沈みます'
                          f'（上限 {ATTACHED_SINK_FRACTION * threshold:.3f}mm）', key='K_SUPPORT_N_PER_MM')
    return contact


def release_contact(spec):
    spec.flap_displacement = spec.rest_displacement
    spec.flap_tilt = (0.0, 0.0)
    return spec


def collapse(spec, drop=None):
    """フラップが途中で抜け落ちた状態にする（故障注入用）"""
    drop = spec.contact.collapse_drop if drop is None else drop
    for p in spec.points:
        p.drilled_depth = max(p.drilled_depth, p.thickness)
    spec.rest_displacement = drop
    spec.flap_displacement = drop
    spec.flap_tilt = (0.0, 0.0)
    logger.warning(f"[故障注入] フラップ脱落 {drop:.3f}mm")
    return spec


def ground_truth_case(spec, verdict):
    if not spec.membrane_intact:
        return CaseLabel.CASE2
    if spec.detachable:
        return CaseLabel.CASE1
    if spec.total_web <= spec.contact.forcible_web_limit:
        return CaseLabel.CASE3
    return CaseLabel.CASE4
