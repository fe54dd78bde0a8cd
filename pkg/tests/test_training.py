import itertools
import math

import numpy as np
import pytest

from coopsim.errors import DimensionError, TrainingError
from coopsim.geometry import DetBox, Pose2D
from coopsim.numerics import Tensor, backward, fresh_tape
from coopsim.pipeline import DetectionMap, FeatureMap, ModelConfig, PerceptionModel, init_perception
from coopsim.system import CoopSystem, Variant, copy_model, save_model, teacher_forward
from coopsim.training import (
    TrainConfig,
    build_targets,
    detection_loss,
    fold_yaw,
    kd_loss,
    prepare_dataset,
    total_loss,
    train_student,
    train_teacher,
)
from coopsim.world import ScenarioConfig, SensorConfig, generate_scenario
from oracles import kl_per_cell

CFG = ModelConfig(grid=32, cell=0.5, channels=4)
SENS = SensorConfig(window=16.0, cell=0.5, max_range=8.0)


@pytest.fixture(scope="module")
def tiny_data():
    scen = [generate_scenario(ScenarioConfig(num_objects=6, map_extent=20.0, frames=3), s) for s in range(2)]
    return prepare_dataset(scen, SENS, CFG)


# -- targets ------------------------------------------------------------------------

def test_no_boxes_all_background():
    t = build_targets([], 8, 1.0)
    assert not t.cls.any() and not t.mask.any()


def test_box_at_cell_center():
    # 8 cells of 1 m: centres at -3.5 .. 3.5
    t = build_targets([DetBox(0.5, -1.5, 2.0, 4.0, 0.0)], 8, 1.0)
    r, c = 2, 4
    assert t.cls[0, r, c] == 1.0 and t.mask.sum() == 1
    assert t.reg[0, r, c] == pytest.approx(0.0) and t.reg[1, r, c] == pytest.approx(0.0)


def test_regression_closed_form():
    t = build_targets([DetBox(0.5, 0.5, 2.0, 4.0, math.pi / 4)], 8, 1.0)
    np.testing.assert_allclose(t.reg[2:, 4, 4], [math.log(2), math.log(4), math.sqrt(0.5), math.sqrt(0.5)], atol=1e-6)


def test_yaw_target_folded_to_half_turn():
    a = build_targets([DetBox(0.5, 0.5, 2.0, 4.0, 0.3)], 8, 1.0)
    b = build_targets([DetBox(0.5, 0.5, 2.0, 4.0, 0.3 - math.pi)], 8, 1.0)
    np.testing.assert_allclose(a.reg, b.reg, atol=1e-6)
    for yaw in np.linspace(-4, 4, 41):
        f = fold_yaw(yaw)
        assert -math.pi / 2 <= f < math.pi / 2
        assert math.isclose(math.sin(2 * f), math.sin(2 * yaw), abs_tol=1e-9)


def test_shared_cell_nearer_centre_wins():
    near = DetBox(0.55, 0.5, 2.0, 4.0, 0.0)
    far = DetBox(0.9, 0.9, 3.0, 5.0, 0.0)
    for boxes in ([near, far], [far, near]):
        t = build_targets(boxes, 8, 1.0)
        assert t.reg[2, 4, 4] == pytest.approx(math.log(2.0))


def test_shared_cell_tie_goes_to_lower_id():
    a = DetBox(0.6, 0.5, 2.0, 4.0, 0.0)
    b = DetBox(0.4, 0.5, 3.0, 5.0, 0.0)
    assert build_targets([a, b], 8, 1.0, ids=[7, 3]).reg[2, 4, 4] == pytest.approx(math.log(3.0))
    assert build_targets([a, b], 8, 1.0, ids=[3, 7]).reg[2, 4, 4] == pytest.approx(math.log(2.0))


# -- losses -------------------------------------------------------------------------

def _targets_random(rng, h=6):
    boxes = [DetBox(*rng.uniform(-2.5, 2.5, 2), 2.0, 4.0, rng.uniform(-1, 1)) for _ in range(3)]
    return build_targets(boxes, h, 1.0)


def test_perfect_prediction_loss_is_tiny():
    tg = _targets_random(np.random.default_rng(0))
    det = DetectionMap(Tensor(tg.cls.copy()), Tensor(tg.reg.copy()))
    assert detection_loss(det, tg).item() < 1e-5


def test_half_probability_on_background():
    tg = build_targets([], 6, 1.0)
    det = DetectionMap(Tensor(np.full((1, 6, 6), 0.5, np.float32)), Tensor(np.ones((6, 6, 6), np.float32)))
    assert detection_loss(det, tg, alpha=1.0).item() == pytest.approx(math.log(2), abs=1e-6)
    assert detection_loss(det, tg, alpha=3.0).item() == pytest.approx(3 * math.log(2), abs=1e-5)


@pytest.mark.parametrize("seed", range(5))
def test_detection_loss_compositional_oracle(seed):
    rng = np.random.default_rng(seed)
    tg = _targets_random(rng)
    p = rng.uniform(0.01, 0.99, (1, 6, 6))
    reg = rng.normal(0, 1.5, (6, 6, 6))
    bce = -(tg.cls * np.log(p) + (1 - tg.cls) * np.log(1 - p)).mean()
    d = reg - tg.reg
    elem = np.where(np.abs(d) < 1, 0.5 * d * d, np.abs(d) - 0.5)
    m = np.broadcast_to(tg.mask, d.shape)
    sl1 = elem[m].mean()
    want = 1.0 * bce + 2.0 * sl1
    got = detection_loss(DetectionMap(Tensor(p), Tensor(reg)), tg, 1.0, 2.0).item()
    assert got == pytest.approx(want, abs=1e-6)


def test_kd_examples():
    s = Tensor(np.zeros((2, 1, 1)))
    g = Tensor(np.array([0.0, math.log(3)]).reshape(2, 1, 1))
    assert kd_loss(s, g).item() == pytest.approx(0.14384, abs=1e-5)
    assert kd_loss(g, g).item() == pytest.approx(0.0, abs=1e-12)
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
    single = kd_loss(Tensor(a), Tensor(b)).item()
    double = kd_loss(Tensor(np.concatenate([a, a], 2)), Tensor(np.concatenate([b, b], 2))).item()
    assert double == pytest.approx(2 * single, rel=1e-10)
    per_cell = sum(kl_per_cell(a[:, r, c], b[:, r, c]) for r in range(4) for c in range(4))
    assert single == pytest.approx(per_cell, rel=1e-6)
    fm = FeatureMap(0, 0, Pose2D(0, 0, 0), Tensor(a))
    assert kd_loss(fm, Tensor(b)).item() == pytest.approx(single)
    with pytest.raises(DimensionError):
        kd_loss(Tensor(a), Tensor(b[:, :2]))


def test_kd_gradient_reaches_student_only():
    rng = np.random.default_rng(1)
    s = Tensor(rng.normal(size=(3, 2, 2)), requires_grad=True)
    g = Tensor(rng.normal(size=(3, 2, 2)), requires_grad=True)
    with fresh_tape():
        backward(kd_loss(s, g))
    assert s.grad is not None and np.abs(s.grad).sum() > 0
    assert g.grad is None or not np.any(g.grad)


def test_total_loss_examples():
    assert total_loss(1.0, 0.0, 1e4) == 1.0
    assert total_loss(0.0, 1e-4, 1e4) == pytest.approx(1.0)
    assert total_loss(0.0, 0.0, 1e4) == 0.0
    det, kd = Tensor(np.array(0.7)), Tensor(np.array(3e-5))
    assert total_loss(det, kd, 1e4).item() == pytest.approx(0.7 + 0.3, abs=1e-6)


# -- teacher forward ----------------------------------------------------------------

@pytest.fixture(scope="module")
def teacher_setup(tiny_data):
    model = PerceptionModel(CFG, init_perception(CFG, 5))
    scene = tiny_data[0]
    return model, scene.frame_obs(1), scene.poses[1]


def test_teacher_forward_empty_contact_is_ego_only(teacher_setup):
    model, obs, poses = teacher_setup
    guide = teacher_forward(obs, poses, 0, set(), model)
    sys_ = CoopSystem(model, Variant("none", ego_only=True), len(poses))
    out = sys_.step(0, obs, poses, [set()] * len(poses))
    np.testing.assert_allclose(guide.data.data, out.fused[0].data, atol=1e-6)


def test_teacher_forward_matches_student_ideal_fusion(teacher_setup):
    model, obs, poses = teacher_setup
    n = len(poses)
    out = CoopSystem(model, Variant("none"), n).step(0, obs, poses, [set(range(n)) - {i} for i in range(n)])
    for i in range(n):
        guide = teacher_forward(obs, poses, i, set(range(n)) - {i}, model)
        np.testing.assert_allclose(guide.data.data, out.fused[i].data, atol=1e-5)


def test_teacher_forward_order_invariant(teacher_setup):
    model, obs, poses = teacher_setup
    contact = [1, 2, 3]
    ref = teacher_forward(obs, poses, 0, set(contact), model).data.data
    for perm in itertools.permutations(contact):
        got = teacher_forward(obs, poses, 0, list(perm), model).data.data
        np.testing.assert_array_equal(got, ref)


# -- training loops -----------------------------------------------------------------

def _small_cfg(**kw):
    base = dict(epochs=2, ramp_epochs=2, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def test_teacher_training_deterministic(tiny_data, tmp_path):
    a = train_teacher(tiny_data, CFG, _small_cfg())
    b = train_teacher(tiny_data, CFG, _small_cfg())
    pa = save_model(tmp_path / "a.json", a.model, a.variant)
    pb = save_model(tmp_path / "b.json", b.model, b.variant)
    assert pa.with_suffix(".bin").read_bytes() == pb.with_suffix(".bin").read_bytes()
    assert [e.mean_det_loss for e in a.history] == [e.mean_det_loss for e in b.history]


def test_student_training_deterministic_and_teacher_untouched(tiny_data, tmp_path):
    teacher = PerceptionModel(CFG, init_perception(CFG, 2))
    before = {k: v.data.copy() for k, v in teacher.weights.items()}
    runs = [train_student(tiny_data, teacher, _small_cfg(), Variant("msstp", 2)) for _ in range(2)]
    paths = [save_model(tmp_path / f"s{n}.json", r.model, r.variant) for n, r in enumerate(runs)]
    assert paths[0].with_suffix(".bin").read_bytes() == paths[1].with_suffix(".bin").read_bytes()
    for k, v in teacher.weights.items():
        np.testing.assert_array_equal(v.data, before[k])
        assert v.grad is None
    assert any(e.mean_kd_loss > 0 for e in runs[0].history)


def test_zero_gamma_zero_p_reduces_to_teacher_training(tiny_data):
    init = PerceptionModel(CFG, init_perception(CFG, 9))
    cfg = _small_cfg(gamma=0.0, fixed_p=0.0)
    teacher = train_teacher(tiny_data, CFG, cfg, init=init)
    student = train_student(tiny_data, init, cfg, Variant("none"), init=init)
    for k in teacher.model.weights:
        np.testing.assert_array_equal(teacher.model.weights[k].data, student.model.weights[k].data)


def test_nan_aborts_with_location(tiny_data):
    w = init_perception(CFG, 0)
    w["dec.b0"] = Tensor(np.full_like(w["dec.b0"].data, np.nan), requires_grad=True)
    with pytest.raises(TrainingError, match="epoch 0.*frame 0"):
        train_teacher(tiny_data, CFG, _small_cfg(), init=PerceptionModel(CFG, w))


def test_training_log_columns(tiny_data, tmp_path):
    res = train_teacher(tiny_data, CFG, _small_cfg(epochs=1))
    res.write_log(tmp_path / "log.csv")
    header = (tmp_path / "log.csv").read_text().splitlines()[0]
    assert header == "epoch,mean_det_loss,mean_kd_loss,sampled_p_low,sampled_p_high,wall_time"


def test_invalid_config_rejected(tiny_data):
    with pytest.raises(TrainingError):
        train_teacher(tiny_data, CFG, _small_cfg(gamma=-1.0))


def test_copy_model_is_independent():
    m = PerceptionModel(CFG, init_perception(CFG, 0))
    c = copy_model(m)
    c.weights["enc.w0"].data[...] = 0
    assert np.any(m.weights["enc.w0"].data)
