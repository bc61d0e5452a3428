"""たわみ検出器

切り出し → 初期深度との差分 → RGB を内側/外側に領域分割 → 領域ごとの平均差で判定
"""
import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.color import rgb2hsv
from skimage.filters import sobel
from skimage.morphology import disk
from skimage.segmentation import watershed

from models.records import FlapState
from sensing import DepthMap, RgbImage, pixel_grid
from utils.config import DetectorParams, HsvConfig
from utils.errors import ConfigError, DataIOError, PipelineError, SegmentationError
from utils.stage import StageTracker

logger = logging.getLogger('DETECTOR')

IGNORE = 0
INNER = 1
OUTER = 2


@dataclass(frozen=True)
class CropRect:
    x: int
    y: int
    width: int
    height: int

    def fits(self, shape):
        h, w = shape[:2]
        return self.x >= 0 and self.y >= 0 and self.width > 0 and self.height > 0 \
            and self.x + self.width <= w and self.y + self.height <= h

    def apply(self, array):
        return array[self.y:self.y + self.height, self.x:self.x + self.width]


@dataclass(frozen=True)
class DetectorConfig:
    crop: CropRect
    band: np.ndarray
    hsv: HsvConfig
    threshold: float = 0.12


@dataclass(frozen=True)
class InitialReference:
    depth: np.ndarray
    crop: CropRect
    timestamp: float = 0.0


@dataclass(frozen=True)
class ResidualMap:
    data: np.ndarray


@dataclass(frozen=True)
class RegionLabels:
    data: np.ndarray

    @property
    def inner(self):
        return self.data == INNER

    @property
    def outer(self):
        return self.data == OUTER


@dataclass(frozen=True)
class DetachabilityReading:
    mean_inner: float
    mean_outer: float
    delta: float
    threshold: float
    state: FlapState
    timestamp: float = 0.0


def _unwrap(value, kind):
    """ドメイン型なら中身の配列を、それ以外は ndarray として返す"""
    return value.data if isinstance(value, kind) else np.asarray(value)


def build_detector_config(cam, path, hsv=None, params=None, bit_radius=0.25):
    """カメラと経路の形状から切り出し範囲と溝の帯マスクを決める"""
    hsv = hsv or HsvConfig()
    params = params or DetectorParams()
    side = int(np.ceil(2 * (path.radius + params.crop_margin) / cam.mm_per_px))
    crop = CropRect(x=(cam.width - side) // 2, y=(cam.height - side) // 2, width=side, height=side)
    if not crop.fits((cam.height, cam.width)):
        raise ConfigError(f'切り出し範囲 {side}px がフレームに収まりません', key='CROP_MARGIN_MM')

    X, Y = pixel_grid(cam, path.center)
    rho = np.hypot(X - path.center[0], Y - path.center[1])
    band_width = params.groove_band_radii * bit_radius
    band = crop.apply(np.abs(rho - path.radius) <= band_width / 2)
    return DetectorConfig(crop=crop, band=band, hsv=hsv, threshold=params.threshold)


def capture_initial(depth, crop, timestamp=None):
    data = _unwrap(depth, DepthMap)
    if not crop.fits(data.shape):
        raise ConfigError(f'切り出し範囲がフレーム外です {crop}', key='CROP_MARGIN_MM')
    if timestamp is None:
        timestamp = getattr(depth, 'timestamp', 0.0)
    return InitialReference(depth=crop.apply(data).copy(), crop=crop, timestamp=timestamp)


def subtract(current, ref):
    data = _unwrap(current, DepthMap)
    if data.shape == ref.depth.shape:
        cropped = data
    elif ref.crop.fits(data.shape):
        cropped = ref.crop.apply(data)
    else:
        raise PipelineError(f'寸法が一致しません {data.shape} / 基準 {ref.depth.shape}', stage='subtract')
    if cropped.shape != ref.depth.shape:
        raise PipelineError(f'寸法が一致しません {cropped.shape} / 基準 {ref.depth.shape}', stage='subtract')
    return ResidualMap(cropped - ref.depth)


def _in_window(hsv, window):
    h_lo, h_hi, s_lo, s_hi, v_lo, v_hi = window
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    if h_lo <= h_hi:
        hue = (h >= h_lo) & (h <= h_hi)
    else:
        # 0/1 をまたぐ色相
        hue = (h >= h_lo) | (h <= h_hi)
    return hue & (s >= s_lo) & (s <= s_hi) & (v >= v_lo) & (v <= v_hi)


def seed_markers(rgb, cfg, band=None):
    """HSV 窓に確実に入る画素を収縮させてマーカーにする。内側を優先"""
    cfg = cfg or HsvConfig()
    data = _unwrap(rgb, RgbImage)
    hsv = rgb2hsv(data)
    structure = disk(cfg.erode_px) if cfg.erode_px > 0 else None

    inner = _in_window(hsv, cfg.inner)
    outer = _in_window(hsv, cfg.outer)
    if structure is not None:
        inner = ndimage.binary_erosion(inner, structure=structure)
        outer = ndimage.binary_erosion(outer, structure=structure)
    outer &= ~inner
    if band is not None:
        inner &= ~band
        outer &= ~band

    markers = np.zeros(data.shape[:2], dtype=np.int32)
    markers[inner] = INNER
    markers[outer] = OUTER
    return markers


def segment(rgb, cfg=None, band=None):
    data = _unwrap(rgb, RgbImage)
    markers = seed_markers(data, cfg, band)
    if not (markers == INNER).any():
        raise SegmentationError('内側のマーカーがありません（配色または照明を確認）')
    if not (markers == OUTER).any():
        raise SegmentationError('外側のマーカーがありません（配色または照明を確認）')

    channels = data.astype(float) / 255.0
    gradient = np.sqrt(sum(sobel(channels[..., c]) ** 2 for c in range(3)))
    mask = None if band is None else ~band
    labels = watershed(gradient, markers, connectivity=1, mask=mask, watershed_line=True)
    return RegionLabels(labels.astype(np.int32))


def classify(residual, labels, threshold=0.12, timestamp=0.0):
    data = _unwrap(residual, ResidualMap)
    lab = _unwrap(labels, RegionLabels)
    if data.shape != lab.shape:
        raise PipelineError(f'寸法が一致しません {data.shape} / {lab.shape}', stage='classify')
    inner = data[lab == INNER]
    outer = data[lab == OUTER]
    if inner.size == 0 or outer.size == 0:
        raise PipelineError('内側または外側の領域が空です', stage='classify')

    mean_inner = float(inner.mean())
    mean_outer = float(outer.mean())
    delta = mean_inner - mean_outer
    state = FlapState.DETACHABLE if abs(delta) > threshold else FlapState.NON_DETACHABLE
    return DetachabilityReading(mean_inner, mean_outer, delta, threshold, state, timestamp)


def detect(rgb, depth, ref, cfg):
    """1組のフレームに対して検出パイプラインを通す。失敗した段の名前を例外に付ける"""
    tracker = StageTracker()
    with tracker.step('crop'):
        image = _unwrap(rgb, RgbImage)
        if not cfg.crop.fits(image.shape):
            raise PipelineError(f'RGB がフレームより小さい {image.shape}')
        rgb_crop = cfg.crop.apply(image)
    with tracker.step('subtract'):
        residual = subtract(depth, ref)
    with tracker.step('segment'):
        labels = segment(rgb_crop, cfg.hsv, cfg.band)
    with tracker.step('classify'):
        reading = classify(residual, labels, cfg.threshold, getattr(depth, 'timestamp', 0.0))
    return reading


class DeflectionDetector:
    """初期深度マップを1つ保持して毎フレーム判定する"""

    def __init__(self, cfg):
        self.cfg = cfg
        self.ref = None

    def capture_initial(self, depth):
        if self.ref is not None:
            logger.info(f"[基準] 初期深度を再取得 t={depth.timestamp:.3f}s（前回 t={self.ref.timestamp:.3f}s）")
        self.ref = capture_initial(depth, self.cfg.crop)
        return self.ref

    def __call__(self, rgb, depth):
        if self.ref is None:
            raise PipelineError('初期深度が未取得です', stage='subtract')
        return detect(rgb, depth, self.ref, self.cfg)


def run_offline(frames, cfg):
    """保存済みフレーム列を判定する。最初のフレームを初期深度とする"""
    if not frames:
        raise DataIOError('フレームがありません')
    detector = DeflectionDetector(cfg)
    detector.capture_initial(frames[0][1])
    return [detector(rgb, depth) for rgb, depth in frames]


def write_timeline(path, readings):
    try:
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(['timestamp', 'mean_inner', 'mean_outer', 'delta', 'state'])
            for r in readings:
                writer.writerow([repr(r.timestamp), repr(r.mean_inner), repr(r.mean_outer),
                                 repr(r.delta), r.state.value])
    except OSError as e:
        raise DataIOError(f'CSV を書けません: {path} ({e})') from e
