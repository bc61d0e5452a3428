"""触診（力ガード・3/4 ルール）のテスト"""
import itertools

import numpy as np
import pytest

from detector import DeflectionDetector, DetachabilityReading, build_detector_config
from models.records import FlapState
from models.specimen import apply_drill_pass, generate_specimen
from palpation import (PalpationController, PointPalpationResult, StrategicPoint, ToolState, decide_flap, guard_bound,
                       is_decided, select_strategic_points, write_trace)
from sensing import ForceSample, SimClock, render_rgbd, sample_force
from trajectory import SamplePointPlan
from utils.config import ForceParams, GuardParams
from utils.errors import SensorStall

D = FlapState.DETACHABLE
ND = FlapState.NON_DETACHABLE

POINT = StrategicPoint(position=(3.0, 0.0), source_index=0)


def _nd_reading(rgb, depth):
    return DetachabilityReading(0.0, 0.0, 0.0, 0.12, ND)


def _controller(spec, cam=None, noise=0.0, force_sampler=None, frame_source=None, detector=None, seed=0):
    clock = SimClock()
    force_params = ForceParams(noise=noise)
    rng = np.random.default_rng(seed)
    if force_sampler is None:
        def force_sampler(tool, ts):
            return sample_force(spec, tool, force_params, rng, ts)
    if detector is None and cam is not None:
        detector = DeflectionDetector(build_detector_config(cam, spec.path))
        detector.capture_initial(render_rgbd(spec, cam, noise_seed=0)[1])

        def frame_source(tick):
            return render_rgbd(spec, cam, noise_seed=tick, timestamp=tick / 640)
    return PalpationController(spec, clock, GuardParams(), force_sampler,
                               frame_source or (lambda tick: (None, None)), detector or _nd_reading,
                               force_params)


# ── 点の選択と判定 ─────────────────────────────

def test_strategic_points_per_quadrant():
    plan = [SamplePointPlan(index=k, angle=2 * np.pi * k / 32, completion_estimate=0.5) for k in range(32)]
    points = select_strategic_points(plan, generate_specimen(0).path)
    assert [p.source_index for p in points] == [0, 8, 16, 24]
    for p in points:
        assert np.hypot(*p.position) == pytest.approx(3.0)

    plan[11] = SamplePointPlan(index=11, angle=2 * np.pi * 11 / 32, completion_estimate=0.99)
    points = select_strategic_points(plan, generate_specimen(0).path)
    assert points[1].source_index == 11


@pytest.mark.parametrize('verdicts', list(itertools.product([D, ND], repeat=4)))
def test_three_of_four_rule(verdicts):
    expected = D if sum(v is D for v in verdicts) >= 3 else ND
    assert decide_flap(verdicts) is expected

    # 途中で確定したら残りを見なくても同じ結論
    for n in range(1, 5):
        if is_decided(verdicts[:n]):
            assert decide_flap(verdicts[:n]) is expected
            break
    else:
        pytest.fail('4点で確定していません')


@pytest.mark.parametrize('sequence, calls, final', [
    ([D, D, D, D], 3, D),
    ([ND, ND, D, D], 2, ND),
    ([D, ND, D, D], 4, D),
    ([D, ND, ND, D], 3, ND),
    ([D, D, ND, ND], 4, ND),
])
def test_flap_palpation_exits_early(specimen_factory, sequence, calls, final):
    controller = _controller(specimen_factory())
    seen = []

    def fake(point):
        v = sequence[len(seen)]
        seen.append(point)
        return PointPalpationResult(point=point, verdict=v, peak_force=0.0, peak_delta=0.0, duration=1.0)

    controller.palpate_point = fake
    points = [StrategicPoint((0.0, 0.0), k) for k in range(4)]
    verdict = controller.palpate_flap(points)
    assert len(seen) == calls
    assert verdict.final is final
    assert verdict.detachable_count == sum(v is D for v in sequence[:calls])


# ── 1点の触診 ─────────────────────────────

def test_free_flap_is_detachable(specimen_factory, tiny_camera):
    spec = specimen_factory(drilled=0.35)
    controller = _controller(spec, tiny_camera)
    result = controller.palpate_point(POINT)
    assert result.verdict is D
    assert result.peak_force < 0.40
    assert not result.guard_tripped
    assert spec.membrane_intact
    # 退避で元に戻る
    assert spec.flap_displacement == 0.0
    assert controller.tool.state is ToolState.IDLE


def test_attached_flap_trips_guard(specimen_factory, tiny_camera):
    spec = specimen_factory(thickness=0.1)
    before = spec.dump_text()
    controller = _controller(spec, tiny_camera)
    result = controller.palpate_point(POINT)
    assert result.verdict is ND
    assert result.guard_tripped
    assert not result.no_contact

    k = max(row['stiffness'] for row in result.trace)
    assert result.peak_force <= 0.40 + k * 0.05 / 128 + 1e-12
    last = result.trace[-1]
    assert abs(last['f_z']) >= 0.40
    assert last['velocity'] == 0.0
    # 押しても切削状態は変わらない
    assert spec.dump_text() == before


def test_hole_under_point_is_no_contact(specimen_factory, caplog):
    spec = specimen_factory()

    def no_force(tool, ts):
        return ForceSample(0.0, ts)

    controller = _controller(spec, force_sampler=no_force)
    with caplog.at_level('WARNING', logger='PALPATION'):
        result = controller.palpate_point(POINT)
    assert result.verdict is ND
    assert result.no_contact
    assert result.trace[-1]['tip_z'] == pytest.approx(-1.0)
    assert any('no-contact' in r.getMessage() for r in caplog.records)


def test_missing_frames_stall(specimen_factory):
    spec = specimen_factory()
    controller = _controller(spec, force_sampler=lambda tool, ts: ForceSample(0.0, ts),
                             frame_source=lambda tick: None)
    with pytest.raises(SensorStall):
        controller.palpate_point(POINT)
    assert controller.tool.state is ToolState.IDLE
    assert controller.tool.descent_velocity == 0.0


def test_palpation_time_is_accounted(specimen_factory, tiny_camera):
    spec = specimen_factory(thickness=0.1)
    controller = _controller(spec, tiny_camera)
    result = controller.palpate_point(POINT)
    assert controller.clock.accounting == {'palpation': controller.clock.tick}
    assert result.duration == pytest.approx(controller.clock.now)


def test_guard_bound_values():
    guard = GuardParams()
    assert guard_bound(guard, 12.8) == pytest.approx(0.405)
    assert guard_bound(guard, 12.8, noise=0.01) == pytest.approx(0.485)


@pytest.mark.parametrize('seed', range(100))
def test_guard_bound_holds(seed):
    rng = np.random.default_rng(seed)
    spec = generate_specimen(seed)
    for k in range(32):
        apply_drill_pass(spec, k, float(rng.uniform(0.0, 0.3)))
    angle = rng.uniform(0.0, 2 * np.pi)
    point = StrategicPoint((3.0 * np.cos(angle), 3.0 * np.sin(angle)), 0)
    noise = ForceParams().noise
    result = _controller(spec, noise=noise, seed=seed).palpate_point(point)

    assert result.guard_tripped
    k_max = max(row['stiffness'] for row in result.trace)
    assert result.peak_force <= guard_bound(GuardParams(), k_max, noise) + 1e-12
    for row in result.trace:
        if abs(row['f_z']) >= 0.40:
            assert row['velocity'] == 0.0
            assert row is result.trace[-1]


def test_write_trace(tmp_path, specimen_factory):
    spec = specimen_factory(thickness=0.1)
    result = _controller(spec).palpate_point(POINT)
    out = tmp_path / 'trace.csv'
    write_trace(str(out), result)
    lines = out.read_text().splitlines()
    assert lines[0] == 'timestamp,tip_z,f_z,delta,state,velocity,stiffness'
    assert len(lines) == len(result.trace) + 1
