"""合成センサ: ステレオカメラ(RGB-D 20Hz)、完了度オブザーバ、力センサ(128SPS)

すべて (スナップショット, 時刻, シード) の純関数。時計だけが状態を持つ。
"""
import heapq
import logging
import os
from dataclasses import dataclass

import numpy as np
from skimage import io
from skimage.color import hsv2rgb

from models.specimen import apply_contact_force
from utils.config import CameraModel, ForceParams, ObserverParams
from utils.errors import ConfigError, DataIOError

logger = logging.getLogger('SENSING')

# 640Hz = 20Hz と 128Hz の最小公倍数
TICK_HZ = 640
FORCE_TICKS = 5
FRAME_TICKS = 32
FORCE_PERIOD_S = FORCE_TICKS / TICK_HZ
FRAME_PERIOD_S = FRAME_TICKS / TICK_HZ

# 同時刻のイベントは 力 → フレーム の順
FORCE_EVENT = 0
FRAME_EVENT = 1

# 乱数ストリームの識別子
STREAM_FRAME = 1
STREAM_OBSERVER = 2
STREAM_FORCE = 3

DEPTH_UNIT_MM = 0.01


@dataclass
class DepthMap:
    data: np.ndarray
    timestamp: float = 0.0

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


@dataclass
class RgbImage:
    data: np.ndarray
    timestamp: float = 0.0

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


@dataclass(frozen=True)
class ForceSample:
    # 圧縮（フラップを押し込む向き）を正とする
    f_z: float
    timestamp: float


@dataclass(frozen=True)
class CompletionObservation:
    levels: np.ndarray
    average: float
    timestamp: float = 0.0


def derive_seed(trial_seed, stream, index=0):
    """試行シード・ストリーム・通し番号から独立したシードを作る"""
    return int(np.random.SeedSequence([int(trial_seed), int(stream), int(index)]).generate_state(1)[0])


# ── 時計 ─────────────────────────────

class SimClock:
    """640Hz の整数ティックで進むシミュレーション時計

    フェーズごとの経過ティックを積算するので、各フェーズの合計は総時間と厳密に一致する。
    """

    def __init__(self):
        self.tick = 0
        self.accounting = {}

    @property
    def now(self):
        return self.tick / TICK_HZ

    def advance(self, ticks, phase):
        if ticks < 0:
            raise ValueError('時計は逆行できません')
        self.tick += ticks
        self.accounting[phase] = self.accounting.get(phase, 0) + ticks

    def advance_to(self, tick, phase):
        self.advance(tick - self.tick, phase)

    def seconds(self, phase):
        return self.accounting.get(phase, 0) / TICK_HZ

    def total_seconds(self):
        return sum(self.accounting.values()) / TICK_HZ

    def phase_seconds(self):
        return {phase: ticks / TICK_HZ for phase, ticks in self.accounting.items()}

    def next_frame_tick(self, tick=None):
        tick = self.tick if tick is None else tick
        return -(-tick // FRAME_TICKS) * FRAME_TICKS

    @staticmethod
    def ticks_for(seconds):
        return int(round(seconds * TICK_HZ))


def sensor_schedule(start_tick, end_tick=None):
    """start_tick より後の力・フレームのイベントを時刻順に返す（end_tick 含む）"""
    def stream(period, kind):
        t = (start_tick // period + 1) * period
        while end_tick is None or t <= end_tick:
            yield (t, kind)
            t += period

    return heapq.merge(stream(FORCE_TICKS, FORCE_EVENT), stream(FRAME_TICKS, FRAME_EVENT))


# ── カメラ ─────────────────────────────

def pixel_grid(cam, center=(0.0, 0.0)):
    """各画素中心の世界座標 (X, Y)。画像中心が経路中心に一致する"""
    cols = (np.arange(cam.width) - (cam.width - 1) / 2) * cam.mm_per_px + center[0]
    rows = (np.arange(cam.height) - (cam.height - 1) / 2) * cam.mm_per_px + center[1]
    return np.meshgrid(cols, rows)


def check_field_of_view(cam, path, bit_radius):
    need = path.radius + bit_radius
    if cam.width * cam.mm_per_px / 2 < need:
        raise ConfigError(f'視野が経路より狭い (幅 {cam.width * cam.mm_per_px:.2f}mm)', key='FRAME_WIDTH')
    if cam.height * cam.mm_per_px / 2 < need:
        raise ConfigError(f'視野が経路より狭い (高さ {cam.height * cam.mm_per_px:.2f}mm)', key='FRAME_HEIGHT')


def region_masks(cam, path, band):
    """描画側の正解領域 (inner, outer)。溝まわりの帯 band(mm) はどちらにも含めない"""
    X, Y = pixel_grid(cam, path.center)
    rho = np.hypot(X - path.center[0], Y - path.center[1])
    inner = rho < path.radius - band / 2
    outer = rho > path.radius + band / 2
    return inner, outer


def render_rgbd(spec, cam=None, noise_seed=0, timestamp=0.0, bit_radius=0.25):
    cam = cam or CameraModel()
    path = spec.path
    check_field_of_view(cam, path, bit_radius)

    X, Y = pixel_grid(cam, path.center)
    dx = X - path.center[0]
    dy = Y - path.center[1]
    rho = np.hypot(dx, dy)

    depth = np.full(X.shape, spec.surface_base_depth + cam.depth_bias)

    flap = rho < path.radius - bit_radius
    depth[flap] += spec.flap_displacement + spec.flap_tilt[0] * dx[flap] + spec.flap_tilt[1] * dy[flap]

    # 溝: 最寄りのサンプル点の切削深さ
    n = path.sample_count
    theta = np.mod(np.arctan2(dy, dx), 2 * np.pi)
    nearest = np.mod(np.rint(theta / (2 * np.pi / n)).astype(int), n)
    drilled = np.array([p.drilled_depth for p in spec.points])[nearest]
    groove = (np.abs(rho - path.radius) <= bit_radius) & (drilled > 0)
    depth[groove] += drilled[groove]

    rng = np.random.default_rng(noise_seed)
    if cam.depth_noise > 0:
        depth = depth + rng.normal(0.0, cam.depth_noise, depth.shape)

    hsv = np.empty(X.shape + (3,))
    hsv[...] = cam.outer_color
    hsv[rho < path.radius] = cam.inner_color
    hsv[groove] = cam.groove_color
    if cam.hue_jitter > 0:
        hsv[..., 0] = np.mod(hsv[..., 0] + rng.uniform(-cam.hue_jitter, cam.hue_jitter, X.shape), 1.0)
    rgb = np.rint(hsv2rgb(hsv) * 255).astype(np.uint8)

    return RgbImage(rgb, timestamp), DepthMap(depth, timestamp)


# ── オブザーバ / 力センサ ─────────────────────────────

def observe_completion(spec, observer=None, seed=0, timestamp=0.0):
    """完了度認識の代用: 真の完了度にバイアスとガウス雑音を加えて [0,1] に収める"""
    observer = observer or ObserverParams()
    rng = np.random.default_rng(seed)
    truth = spec.completions()
    levels = np.clip(truth + observer.bias + rng.normal(0.0, observer.sigma, truth.shape), 0.0, 1.0)
    return CompletionObservation(levels=levels, average=float(levels.mean()), timestamp=timestamp)


def sample_force(spec, tip, params=None, rng=None, timestamp=0.0):
    """tip.tip_position = (x, y, z)、z は元の表面からの高さ（上向き正）"""
    params = params or ForceParams()
    x, y, z = tip.tip_position
    plant, _ = apply_contact_force(spec, (x, y), -z)
    noise = 0.0
    if params.noise > 0:
        if rng is None:
            raise ValueError('力センサのノイズには乱数生成器 rng が必要です')
        noise = rng.normal(0.0, params.noise)
    return ForceSample(f_z=plant + noise, timestamp=timestamp)


# ── フレーム保存 / 読み込み ─────────────────────────────

def dump_frame(directory, index, rgb, depth, seed, trial_id):
    os.makedirs(directory, exist_ok=True)
    base = os.path.join(directory, f"frame_{index:05d}")
    counts = np.rint(depth.data / DEPTH_UNIT_MM)
    if counts.min() < 0 or counts.max() > 65535:
        raise DataIOError(f'深度が16bitに収まりません: {depth.data.min():.2f}〜{depth.data.max():.2f}mm')
    try:
        # int32 の2次元配列は maxval 65535 の P5 で書かれる
        io.imsave(base + '_depth.pgm', counts.astype(np.int32), check_contrast=False)
        io.imsave(base + '_rgb.ppm', rgb.data.astype(np.uint8), check_contrast=False)
        with open(base + '.txt', 'w') as f:
            f.write(f"{depth.timestamp!r} {seed} {trial_id}\n")
    except (OSError, ValueError) as e:
        raise DataIOError(f'フレームを書けません: {base} ({e})') from e


def load_frames(directory):
    """dump_frame で書いたフレームを番号順に (RgbImage, DepthMap) のリストで返す"""
    if not os.path.isdir(directory):
        raise DataIOError(f'フレームディレクトリがありません: {directory}')
    names = sorted(n[:-4] for n in os.listdir(directory) if n.startswith('frame_') and n.endswith('.txt'))
    if not names:
        raise DataIOError(f'フレームがありません: {directory}')

    frames = []
    for name in names:
        base = os.path.join(directory, name)
        try:
            with open(base + '.txt') as f:
                timestamp = float(f.read().split()[0])
            depth = np.asarray(io.imread(base + '_depth.pgm'), dtype=float) * DEPTH_UNIT_MM
            rgb = np.asarray(io.imread(base + '_rgb.ppm'), dtype=np.uint8)[..., :3].copy()
        except (OSError, ValueError, IndexError) as e:
            raise DataIOError(f'フレームを読めません: {base} ({e})') from e
        frames.append((RgbImage(rgb, timestamp), DepthMap(depth, timestamp)))
    logger.info(f"[読込] {len(frames)} フレーム ({directory})")
    return frames
