"""試料モデルのテスト"""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from models.records import CaseLabel, FlapState
from models.specimen import (DrillPath, apply_contact_force, apply_drill_pass, attached_stiffness, check_contact_model,
                             collapse, contact_stiffness, generate_specimen, ground_truth_case, release_contact)
from utils.config import ContactModel, SpecimenParams
from utils.errors import ConfigError


def test_zero_sigma_gives_uniform_thickness():
    spec = generate_specimen(3, SpecimenParams(thickness_sigma=0.0))
    assert all(p.thickness == 0.35 for p in spec.points)
    assert len(spec.points) == 32


def test_same_seed_same_specimen():
    a = generate_specimen(11)
    b = generate_specimen(11)
    assert a.points == b.points
    assert a.dump_text() == b.dump_text()
    assert generate_specimen(12).points != a.points


def test_sample_mean_near_nominal():
    spec = generate_specimen(7)
    mean = np.mean([p.thickness for p in spec.points])
    assert abs(mean - 0.35) <= 0.03


def test_springback_within_range():
    spec = generate_specimen(5)
    assert all(0.0 <= p.springback <= 0.05 for p in spec.points)
    assert all(p.springback == p.springback_drawn for p in spec.points)


@pytest.mark.parametrize('params, key', [
    (SpecimenParams(thickness_mean=0.0), 'THICKNESS_MEAN_MM'),
    (SpecimenParams(thickness_mean=-0.1), 'THICKNESS_MEAN_MM'),
    (SpecimenParams(thickness_sigma=-0.01), 'THICKNESS_SIGMA_MM'),
])
def test_invalid_params_rejected(params, key):
    with pytest.raises(ConfigError) as exc:
        generate_specimen(0, params)
    assert exc.value.key == key


def test_path_validation():
    with pytest.raises(ConfigError):
        DrillPath(radius=0.0)
    with pytest.raises(ConfigError):
        DrillPath(sample_count=3)
    path = DrillPath(radius=4.0, sample_count=32)
    np.testing.assert_allclose(path.point(8), [0.0, 4.0], atol=1e-12)
    assert path.points().shape == (32, 2)


def test_zero_command_is_noop(specimen_factory):
    spec = specimen_factory(springback=0.02)
    before = spec.dump_text()
    apply_drill_pass(spec, 0, 0.0)
    assert spec.dump_text() == before
    assert spec.points[0].last_commanded == 0.0


def test_springback_leaves_web(specimen_factory):
    spec = specimen_factory(springback=0.03)
    apply_drill_pass(spec, 0, 0.35)
    assert spec.points[0].web == pytest.approx(0.03)
    assert not spec.detachable
    assert spec.membrane_intact


def test_repass_relieves_springback(specimen_factory):
    spec = specimen_factory(springback=0.03, n=4)
    for k in range(4):
        apply_drill_pass(spec, k, 0.35)
    # 同じ深さを3回なぞると残りが取れる
    for _ in range(3):
        for k in range(4):
            apply_drill_pass(spec, k, 0.35)
    assert spec.detachable
    assert spec.total_web == 0.0

    # より深い指令は新しい切削なので弾性戻りが戻る
    apply_drill_pass(spec, 0, 0.36)
    assert spec.points[0].springback == pytest.approx(0.03)


def test_full_cut_without_springback_is_detachable(specimen_factory):
    spec = specimen_factory()
    for k in range(32):
        apply_drill_pass(spec, k, 0.35)
    assert spec.detachable
    assert spec.membrane_intact


def test_overdrill_margin(specimen_factory):
    spec = specimen_factory()
    apply_drill_pass(spec, 0, 0.44)
    assert spec.membrane_intact
    apply_drill_pass(spec, 1, 0.46)
    assert not spec.membrane_intact


def test_membrane_damage_logged_once(specimen_factory, caplog):
    spec = specimen_factory()
    with caplog.at_level('WARNING', logger='SPECIMEN'):
        apply_drill_pass(spec, 0, 0.5)
        apply_drill_pass(spec, 1, 0.5)
    assert sum('膜損傷' in r.getMessage() for r in caplog.records) == 1


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000),
       passes=st.lists(st.tuples(st.integers(0, 31), st.floats(0.0, 0.6)), min_size=1, max_size=40))
def test_web_never_grows(seed, passes):
    spec = generate_specimen(seed)
    webs = [p.web for p in spec.points]
    intact = True
    detachable = False
    for k, depth in passes:
        apply_drill_pass(spec, k, depth)
        now = [p.web for p in spec.points]
        assert all(b <= a for a, b in zip(webs, now))
        # 膜は一度壊れたら戻らない
        assert not (spec.membrane_intact and not intact)
        # 取り外し可は一度なったら戻らない
        assert not (detachable and not spec.detachable)
        webs, intact, detachable = now, spec.membrane_intact, spec.detachable


def test_no_contact_above_surface(specimen_factory):
    spec = specimen_factory()
    force, _ = apply_contact_force(spec, (3.0, 0.0), 0.0)
    assert force == 0.0
    assert spec.flap_displacement == 0.0


def test_attached_series_spring(specimen_factory):
    spec = specimen_factory(thickness=0.1)
    spec.contact = ContactModel(k_attached_per_mm=2.0)
    w = spec.total_web
    assert w == pytest.approx(3.2)
    # くぼみ 0.05mm → 2.0 × 3.2 × 0.05 = 0.32N、支持ばねの沈み 0.32/20 = 0.016mm
    tip = 0.05 + 0.32 / spec.contact.k_support
    force, _ = apply_contact_force(spec, (3.0, 0.0), tip)
    assert force == pytest.approx(0.32)
    assert spec.flap_displacement == pytest.approx(0.016)
    assert spec.flap_displacement < 0.02
    assert contact_stiffness(spec, (3.0, 0.0)) == pytest.approx(force / tip)


@pytest.mark.parametrize('web', [1e-4, 0.01, 0.05, 0.13, 1.0, 3.2])
def test_attached_sink_stays_small_at_guard_force(specimen_factory, web):
    spec = specimen_factory(thickness=[0.35 + web] + [0.35] * 31, drilled=0.35)
    assert spec.total_web == pytest.approx(web)
    tip = 0.40 / attached_stiffness(spec)
    force, _ = apply_contact_force(spec, (3.0, 0.0), tip)
    assert force == pytest.approx(0.40)
    assert spec.flap_displacement <= 0.03
    # 付いたままの方が外れたフラップより硬い（残りが少し以上あれば）
    if web >= 0.05:
        assert attached_stiffness(spec) > 4 / 7


def test_contact_model_checks():
    assert check_contact_model(ContactModel(), 0.40, 0.12) == ContactModel()
    with pytest.raises(ConfigError) as exc:
        check_contact_model(ContactModel(k_support=5.0), 0.40, 0.12)
    assert exc.value.key == 'K_SUPPORT_N_PER_MM'
    with pytest.raises(ConfigError) as exc:
        check_contact_model(ContactModel(k_free=0.0), 0.40, 0.12)
    assert exc.value.key == 'K_FREE'


def test_free_flap_follows_press(specimen_factory):
    spec = specimen_factory()
    for k in range(32):
        apply_drill_pass(spec, k, 0.35)
    force, _ = apply_contact_force(spec, (0.0, 0.0), 0.20)
    assert spec.flap_displacement == pytest.approx(0.20)
    assert force == pytest.approx(0.20)
    assert spec.membrane_intact

    # 縁を押すと反対側を支点に傾く
    force, _ = apply_contact_force(spec, (3.0, 0.0), 0.35)
    assert spec.flap_displacement == pytest.approx(0.20)
    assert spec.flap_tilt[0] == pytest.approx(0.05)
    assert spec.displacement_at((3.0, 0.0)) == pytest.approx(0.35)

    release_contact(spec)
    assert spec.flap_displacement == 0.0
    assert spec.flap_tilt == (0.0, 0.0)


def test_excessive_press_damages_membrane(specimen_factory):
    spec = specimen_factory()
    for k in range(32):
        apply_drill_pass(spec, k, 0.35)
    apply_contact_force(spec, (0.0, 0.0), 0.7)
    assert not spec.membrane_intact


def test_collapse_drops_flap(specimen_factory):
    spec = specimen_factory()
    collapse(spec)
    assert spec.detachable
    assert spec.flap_displacement == pytest.approx(0.2)
    release_contact(spec)
    assert spec.flap_displacement == pytest.approx(0.2)


def test_ground_truth_cases(specimen_factory):
    through = specimen_factory(drilled=0.35)
    assert ground_truth_case(through, FlapState.DETACHABLE) is CaseLabel.CASE1
    assert CaseLabel.CASE1.success

    damaged = specimen_factory(drilled=0.35)
    damaged.damage_membrane('test')
    assert ground_truth_case(damaged, FlapState.DETACHABLE) is CaseLabel.CASE2
    assert not CaseLabel.CASE2.success

    thin_web = specimen_factory(thickness=[0.35] * 31 + [0.43], drilled=0.35)
    assert thin_web.total_web == pytest.approx(0.08)
    assert ground_truth_case(thin_web, FlapState.NON_DETACHABLE) is CaseLabel.CASE3
    assert CaseLabel.CASE3.success

    thick_web = specimen_factory(thickness=0.35, drilled=0.30)
    assert ground_truth_case(thick_web, FlapState.NON_DETACHABLE) is CaseLabel.CASE4


def test_dump_text_lines(specimen_factory):
    text = specimen_factory(springback=0.01).dump_text()
    lines = text.strip().split('\n')
    assert len(lines) == 32
    assert all(len(line.split()) == 5 for line in lines)
    assert lines[0].split()[0] == '0'
