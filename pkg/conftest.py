"""テスト共通のフィクスチャ"""
from dataclasses import replace

import numpy as np
import pytest

from models.specimen import DrillPath, SamplePointTruth, SpecimenTruth
from utils.config import CameraModel, SimConfig, apply_overrides

# 切り出し 110px 四方（内側 約4100px / 外側 約6000px）
SMALL_CAMERA = CameraModel(width=160, height=120, mm_per_px=0.1)
# ワークフロー用。切り出し 92px 四方
TINY_CAMERA = CameraModel(width=100, height=100, mm_per_px=0.12)
# 内側・外側とも 1万画素以上
LARGE_CAMERA = CameraModel(width=240, height=240, mm_per_px=0.05)


@pytest.fixture
def small_camera():
    return SMALL_CAMERA


@pytest.fixture
def tiny_camera():
    return TINY_CAMERA


@pytest.fixture
def large_camera():
    return LARGE_CAMERA


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def specimen_factory():
    """厚み一定の試料を作る。thickness にリストを渡せば点ごとに指定できる"""

    def make(thickness=0.35, drilled=0.0, springback=0.0, n=32):
        thicknesses = thickness if isinstance(thickness, (list, tuple)) else [thickness] * n
        points = [SamplePointTruth(index=k, thickness=float(t), drilled_depth=drilled,
                                   springback=springback, springback_drawn=springback)
                  for k, t in enumerate(thicknesses)]
        return SpecimenTruth(path=DrillPath(sample_count=len(points)), points=points)

    return make


@pytest.fixture(scope="session")
def workflow_config():
    """小さいカメラと粗い監視間隔で試行を速く回す設定"""

    def make(**overrides):
        values = {'MONITOR_STRIDE': 32}
        values.update(overrides)
        return apply_overrides(replace(SimConfig(), camera=TINY_CAMERA), values)

    return make
