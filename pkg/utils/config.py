"""シミュレーション設定

設定ファイルは KEY=VALUE 形式（.env と同じ書式）で、python-dotenv で読み込む。
ここに無いキーはエラーにする。
"""
import logging
import os
from dataclasses import dataclass, field, replace

from dotenv import dotenv_values

from utils.errors import ConfigError, DataIOError

logger = logging.getLogger('HARNESS')

DEFAULT_CONFIG_ENV = 'DRILLSIM_CONFIG'


@dataclass(frozen=True)
class SpecimenParams:
    thickness_mean: float = 0.35
    thickness_sigma: float = 0.05
    springback_max: float = 0.05
    springback_relief: float = 0.01
    path_radius: float = 4.0
    sample_count: int = 32
    bit_radius: float = 0.25
    surface_depth: float = 500.0


@dataclass(frozen=True)
class ContactModel:
    k_attached_per_mm: float = 20.0
    k_free: float = 1.0
    k_support: float = 20.0
    membrane_force_limit: float = 0.60
    membrane_overdrill_margin: float = 0.10
    forcible_web_limit: float = 0.15
    collapse_drop: float = 0.20


@dataclass(frozen=True)
class CameraModel:
    width: int = 960
    height: int = 540
    mm_per_px: float = 0.04
    depth_noise: float = 0.02
    depth_bias: float = 0.0
    hue_jitter: float = 0.02
    # (hue, saturation, value)
    inner_color: tuple = (0.08, 0.60, 0.85)
    outer_color: tuple = (0.55, 0.50, 0.80)
    groove_color: tuple = (0.00, 0.70, 0.35)


@dataclass(frozen=True)
class HsvConfig:
    # (h_lo, h_hi, s_lo, s_hi, v_lo, v_hi)
    inner: tuple = (0.03, 0.13, 0.30, 1.00, 0.50, 1.00)
    outer: tuple = (0.50, 0.60, 0.30, 1.00, 0.50, 1.00)
    erode_px: int = 3


@dataclass(frozen=True)
class DetectorParams:
    threshold: float = 0.12
    groove_band_radii: float = 3.0
    crop_margin: float = 1.5


@dataclass(frozen=True)
class ObserverParams:
    sigma: float = 0.05
    bias: float = 0.0


@dataclass(frozen=True)
class ForceParams:
    noise: float = 0.01


@dataclass(frozen=True)
class DamperParams:
    c_lo: float = 0.5
    c_hi: float = 0.95
    v_full: float = 0.02
    v_slow: float = 0.005


@dataclass(frozen=True)
class GuardParams:
    fz_max: float = 0.40
    vz: float = -0.05
    travel_limit: float = 1.0
    retract_height: float = 2.0
    approach_speed: float = 1.0
    approach_clearance: float = 0.05
    strategic_radius_fraction: float = 0.75
    stall_frames: int = 3


@dataclass(frozen=True)
class WorkflowParams:
    gate_level: float = 0.80
    repeat_cycles: int = 10
    round_cap: int = 5
    exception_frames: int = 3
    cycle_s: float = 60.0
    recognition_s: float = 5.0
    monitor_stride: int = 1
    repeat_strategy: str = 'predictive'
    repeat_overcut: float = 0.01
    max_drill_cycles: int = 150


@dataclass(frozen=True)
class SimConfig:
    specimen: SpecimenParams = field(default_factory=SpecimenParams)
    contact: ContactModel = field(default_factory=ContactModel)
    camera: CameraModel = field(default_factory=CameraModel)
    hsv: HsvConfig = field(default_factory=HsvConfig)
    detector: DetectorParams = field(default_factory=DetectorParams)
    observer: ObserverParams = field(default_factory=ObserverParams)
    force: ForceParams = field(default_factory=ForceParams)
    damper: DamperParams = field(default_factory=DamperParams)
    guard: GuardParams = field(default_factory=GuardParams)
    workflow: WorkflowParams = field(default_factory=WorkflowParams)


def _window(text):
    parts = [float(p) for p in str(text).split(',')]
    if len(parts) != 6:
        raise ValueError('6つの値 (h_lo,h_hi,s_lo,s_hi,v_lo,v_hi) が必要です')
    return tuple(parts)


def _color(text):
    parts = [float(p) for p in str(text).split(',')]
    if len(parts) != 3:
        raise ValueError('3つの値 (h,s,v) が必要です')
    return tuple(parts)


def _strategy(text):
    value = str(text).strip().lower()
    if value not in ('predictive', 'replay'):
        raise ValueError('predictive または replay')
    return value


# キー → (セクション, フィールド, 変換関数)
KEYS = {
    'THICKNESS_MEAN_MM': ('specimen', 'thickness_mean', float),
    'THICKNESS_SIGMA_MM': ('specimen', 'thickness_sigma', float),
    'SPRINGBACK_MAX_MM': ('specimen', 'springback_max', float),
    'SPRINGBACK_RELIEF_MM': ('specimen', 'springback_relief', float),
    'PATH_RADIUS_MM': ('specimen', 'path_radius', float),
    'SAMPLE_COUNT': ('specimen', 'sample_count', int),
    'BIT_RADIUS_MM': ('specimen', 'bit_radius', float),
    'SURFACE_DEPTH_MM': ('specimen', 'surface_depth', float),

    'K_ATTACHED_PER_MM': ('contact', 'k_attached_per_mm', float),
    'K_FREE': ('contact', 'k_free', float),
    'K_SUPPORT_N_PER_MM': ('contact', 'k_support', float),
    'MEMBRANE_FORCE_LIMIT_N': ('contact', 'membrane_force_limit', float),
    'MEMBRANE_OVERDRILL_MARGIN_MM': ('contact', 'membrane_overdrill_margin', float),
    'FORCIBLE_WEB_LIMIT_MM': ('contact', 'forcible_web_limit', float),
    'COLLAPSE_DROP_MM': ('contact', 'collapse_drop', float),

    'FRAME_WIDTH': ('camera', 'width', int),
    'FRAME_HEIGHT': ('camera', 'height', int),
    'MM_PER_PX': ('camera', 'mm_per_px', float),
    'DEPTH_NOISE_MM': ('camera', 'depth_noise', float),
    'DEPTH_BIAS_MM': ('camera', 'depth_bias', float),
    'HUE_JITTER': ('camera', 'hue_jitter', float),
    'INNER_COLOR_HSV': ('camera', 'inner_color', _color),
    'OUTER_COLOR_HSV': ('camera', 'outer_color', _color),
    'GROOVE_COLOR_HSV': ('camera', 'groove_color', _color),

    'INNER_HSV': ('hsv', 'inner', _window),
    'OUTER_HSV': ('hsv', 'outer', _window),
    'ERODE_PX': ('hsv', 'erode_px', int),

    'DEFLECTION_THRESHOLD_MM': ('detector', 'threshold', float),
    'GROOVE_BAND_RADII': ('detector', 'groove_band_radii', float),
    'CROP_MARGIN_MM': ('detector', 'crop_margin', float),

    'OBSERVER_SIGMA': ('observer', 'sigma', float),
    'OBSERVER_BIAS': ('observer', 'bias', float),

    'FORCE_NOISE_N': ('force', 'noise', float),

    'DAMPER_C_LO': ('damper', 'c_lo', float),
    'DAMPER_C_HI': ('damper', 'c_hi', float),
    'V_FULL_MM': ('damper', 'v_full', float),
    'V_SLOW_MM': ('damper', 'v_slow', float),

    'FZ_MAX_N': ('guard', 'fz_max', float),
    'VZ_MM_S': ('guard', 'vz', float),
    'TRAVEL_LIMIT_MM': ('guard', 'travel_limit', float),
    'RETRACT_HEIGHT_MM': ('guard', 'retract_height', float),
    'APPROACH_SPEED_MM_S': ('guard', 'approach_speed', float),
    'APPROACH_CLEARANCE_MM': ('guard', 'approach_clearance', float),
    'STRATEGIC_RADIUS_FRACTION': ('guard', 'strategic_radius_fraction', float),
    'STALL_FRAMES': ('guard', 'stall_frames', int),

    'GATE_LEVEL': ('workflow', 'gate_level', float),
    'REPEAT_CYCLES': ('workflow', 'repeat_cycles', int),
    'ROUND_CAP': ('workflow', 'round_cap', int),
    'EXCEPTION_FRAMES': ('workflow', 'exception_frames', int),
    'CYCLE_S': ('workflow', 'cycle_s', float),
    'RECOGNITION_S': ('workflow', 'recognition_s', float),
    'MONITOR_STRIDE': ('workflow', 'monitor_stride', int),
    'REPEAT_STRATEGY': ('workflow', 'repeat_strategy', _strategy),
    'REPEAT_OVERCUT_MM': ('workflow', 'repeat_overcut', float),
    'MAX_DRILL_CYCLES': ('workflow', 'max_drill_cycles', int),
}


def apply_overrides(cfg, values):
    """KEY → 値 の辞書を既存の設定に上書きした新しい SimConfig を返す"""
    changes = {}
    for key, raw in values.items():
        name = key.strip().upper()
        if name not in KEYS:
            raise ConfigError('未知の設定キーです', key=name)
        if raw is None or str(raw).strip() == '':
            raise ConfigError('値がありません', key=name)
        section, attr, parse = KEYS[name]
        try:
            value = parse(str(raw).strip())
        except ValueError as e:
            raise ConfigError(f'値を解釈できません ({raw!r}): {e}', key=name) from e
        changes.setdefault(section, {})[attr] = value

    for section, fields_ in changes.items():
        cfg = replace(cfg, **{section: replace(getattr(cfg, section), **fields_)})
    return cfg


def load_config(path=None):
    """設定ファイルを読み込む。path が無ければ DRILLSIM_CONFIG、それも無ければ既定値"""
    path = path or os.getenv(DEFAULT_CONFIG_ENV)
    cfg = SimConfig()
    if not path:
        return cfg
    if not os.path.exists(path):
        raise DataIOError(f'設定ファイルが見つかりません: {path}')

    values = dotenv_values(path)
    cfg = apply_overrides(cfg, values)
    logger.info(f"[設定] {path} から {len(values)} 件読み込み")
    return cfg
