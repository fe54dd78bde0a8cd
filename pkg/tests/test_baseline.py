import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopsim.baseline import (
    KalmanConfig,
    Track,
    Tracker,
    center_cost,
    hungarian,
    kf_predict,
    kf_update,
    late_fuse_recover,
    to_local,
    to_world,
)
from coopsim.geometry import DetBox, Pose2D
from oracles import best_permutation_cost

CFG = KalmanConfig()
Q = CFG.process_noise()
R = CFG.measurement_noise()


def _track(state, cov=None, **kw):
    cov = np.eye(7) if cov is None else cov
    return Track(0, np.asarray(state, float), np.asarray(cov, float), **kw)


def _random_spd(rng, n=7):
    a = rng.normal(size=(n, n))
    return a @ a.T + 0.1 * np.eye(n)


def greedy_cost(cost):
    """Total cost of repeatedly taking the cheapest remaining finite entry."""
    cost = np.array(cost, dtype=float)
    total = 0.0
    while np.isfinite(cost).any():
        r, c = np.unravel_index(np.argmin(cost), cost.shape)
        total += cost[r, c]
        cost[r, :] = np.inf
        cost[:, c] = np.inf
    return total


# -- predict ----------------------------------------------------------------------

def test_predict_moves_by_velocity():
    out = kf_predict(_track([0, 0, 0, 2, 4, 1, 0]), 0.1, Q)
    assert out.state[0] == pytest.approx(0.1)
    assert out.state[1] == 0.0


def test_predict_static_without_noise_is_identity():
    cov = np.zeros((7, 7))
    cov[:5, :5] = _random_spd(np.random.default_rng(0), 5)   # velocity known to be exactly zero
    tr = _track([3, -1, 0.4, 2, 4, 0, 0], cov)
    out = kf_predict(tr, 0.1, np.zeros((7, 7)))
    np.testing.assert_allclose(out.state, tr.state, atol=1e-12)
    np.testing.assert_allclose(out.cov, tr.cov, atol=1e-12)


def test_predict_rejects_non_positive_dt():
    with pytest.raises(ValueError):
        kf_predict(_track([0] * 7), 0.0, Q)


def _predict_oracle(x, p, dt, q):
    x = x.copy()
    x[0] += x[5] * dt
    x[1] += x[6] * dt
    f = np.eye(7)
    f[0, 5] = f[1, 6] = dt
    p = np.einsum("ij,jk,lk->il", f, p, f) + q
    return x, p


def test_predict_five_steps_match_matrix_oracle():
    rng = np.random.default_rng(1)
    x = np.array([1.0, 2.0, 0.3, 2.0, 4.5, 1.5, -0.7])
    p = _random_spd(rng)
    tr = _track(x, p)
    for _ in range(5):
        tr = kf_predict(tr, 0.1, Q)
        x, p = _predict_oracle(x, p, 0.1, Q)
    np.testing.assert_allclose(tr.state, x, atol=1e-9)
    np.testing.assert_allclose(tr.cov, p, atol=1e-9)


# -- update -----------------------------------------------------------------------

def test_update_exact_measurement_limit():
    tr = _track([0, 0, 0.1, 2, 4, 1, 0], np.eye(7))
    det = DetBox(1.0, -0.5, 2.2, 4.4, 0.3)
    out = kf_update(tr, det, 1e-9 * np.eye(5))
    np.testing.assert_allclose(out.state[:5], [1.0, -0.5, 0.3, 2.2, 4.4], atol=1e-3)


def test_update_with_predicted_measurement_only_shrinks_covariance():
    p = _random_spd(np.random.default_rng(2))
    tr = _track([1, 2, 0.5, 2, 4, 1, 1], p)
    out = kf_update(tr, DetBox(1, 2, 2, 4, 0.5), R)
    np.testing.assert_allclose(out.state, tr.state, atol=1e-12)
    assert np.trace(out.cov) < np.trace(tr.cov)


def test_update_matches_matrix_oracle():
    rng = np.random.default_rng(3)
    x = np.array([0.5, -1.0, 0.2, 1.9, 4.2, 0.8, 0.1])
    p = _random_spd(rng)
    det = DetBox(0.9, -0.7, 2.1, 4.0, 0.35)
    out = kf_update(_track(x, p), det, R)

    h = np.zeros((5, 7))
    h[np.arange(5), np.arange(5)] = 1.0
    z = np.array([det.x, det.y, det.yaw, det.width, det.length])
    s = h @ p @ h.T + R
    gain = p @ h.T @ np.linalg.inv(s)
    x_post = x + gain @ (z - h @ x)
    p_post = (np.eye(7) - gain @ h) @ p
    np.testing.assert_allclose(out.state, x_post, atol=1e-9)
    np.testing.assert_allclose(out.cov, 0.5 * (p_post + p_post.T), atol=1e-9)


def test_update_wraps_yaw_innovation():
    tr = _track([0, 0, np.pi - 0.05, 2, 4, 0, 0], np.eye(7))
    out = kf_update(tr, DetBox(0, 0, 2, 4, -np.pi + 0.05), 1e-9 * np.eye(5))
    # the short way round is +0.1 rad, not -2pi + 0.1
    assert abs(abs(out.state[2]) - (np.pi - 0.05)) < 1e-3


def test_singular_innovation_skips_update():
    tr = _track([0, 0, 0, 2, 4, 0, 0], np.zeros((7, 7)), misses=1)
    out = kf_update(tr, DetBox(1, 1, 2, 4, 0), np.zeros((5, 5)))
    np.testing.assert_array_equal(out.state, tr.state)
    assert out.misses == 2


def test_covariance_symmetric_over_many_cycles():
    rng = np.random.default_rng(4)
    tr = _track([0, 0, 0, 2, 4, 1, 0.5], _random_spd(rng))
    for _ in range(100):
        tr = kf_predict(tr, 0.1, Q)
        x, y = tr.state[:2] + rng.normal(0, 0.3, 2)
        tr = kf_update(tr, DetBox(x, y, 2, 4, rng.normal(0, 0.1)), R)
        assert np.abs(tr.cov - tr.cov.T).max() < 1e-9
        assert np.linalg.eigvalsh(tr.cov).min() >= -1e-9


# -- assignment -------------------------------------------------------------------

def test_hungarian_two_by_two():
    a = hungarian([[1, 2], [2, 1]])
    assert sorted(a.pairs) == [(0, 0), (1, 1)]


def test_hungarian_single_entry():
    assert hungarian([[5]]).pairs == [(0, 0)]


def test_hungarian_empty():
    a = hungarian(np.zeros((0, 3)))
    assert a.pairs == [] and a.unmatched_cols == [0, 1, 2]
    assert hungarian(np.zeros((0, 0))).pairs == []


def test_hungarian_excludes_gated_pairs():
    a = hungarian([[np.inf, 1.0], [np.inf, np.inf]])
    assert a.pairs == [(0, 1)]
    assert a.unmatched_rows == [1] and a.unmatched_cols == [0]


@pytest.mark.parametrize("seed", range(100))
def test_hungarian_matches_permutation_oracle(seed):
    cost = np.random.default_rng(seed).random((6, 6))
    a = hungarian(cost)
    assert len(a.pairs) == 6
    assert sum(cost[r, c] for r, c in a.pairs) == pytest.approx(best_permutation_cost(cost), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_hungarian_never_worse_than_greedy(n, m, seed):
    cost = np.random.default_rng(seed).random((n, m))
    a = hungarian(cost)
    rows = [r for r, _ in a.pairs]
    cols = [c for _, c in a.pairs]
    assert len(set(rows)) == len(rows) and len(set(cols)) == len(cols)
    assert len(a.pairs) == min(n, m)
    assert sum(cost[r, c] for r, c in a.pairs) <= greedy_cost(cost) + 1e-12


def test_center_cost_gates():
    tr = [_track([0, 0, 0, 2, 4, 0, 0])]
    c = center_cost(tr, [DetBox(1, 0, 2, 4, 0), DetBox(5, 0, 2, 4, 0)], gate=3.0)
    assert c[0, 0] == pytest.approx(1.0) and np.isinf(c[0, 1])


# -- recovery ---------------------------------------------------------------------

def _cv_dets(t, speed=(5.0, 1.0), start=(0.0, 0.0), dt=0.1):
    return DetBox(start[0] + speed[0] * t * dt, start[1] + speed[1] * t * dt, 2.0, 4.5, 0.2, 0.9)


def test_no_interruption_returns_current_detections():
    tracker = Tracker()
    for t in range(5):
        dets = [_cv_dets(t), _cv_dets(t, start=(10.0, 5.0))]
        assert tracker.step(dets) == dets


def test_missing_object_is_predicted_on_third_frame():
    tracker = Tracker()
    tracker.step([_cv_dets(0)])
    tracker.step([_cv_dets(1)])
    confirmed = tracker.tracks[0]
    expected = kf_predict(confirmed, CFG.dt, Q)
    out = tracker.step([])
    assert len(out) == 1
    assert out[0].x == pytest.approx(expected.state[0]) and out[0].y == pytest.approx(expected.state[1])
    assert out[0].score == pytest.approx(0.9 * CFG.score_decay)
    # prediction moved along the motion direction past the last detection
    assert out[0].x > _cv_dets(1).x


def test_unconfirmed_track_is_not_recovered():
    tracker = Tracker()
    tracker.step([_cv_dets(0)])
    assert tracker.step([]) == []


def test_track_dropped_after_max_misses():
    tracker = Tracker()
    tracker.step([_cv_dets(0)])
    tracker.step([_cv_dets(1)])
    for _ in range(CFG.max_misses):
        assert len(tracker.step([])) == 1
    assert tracker.step([]) == []
    assert tracker.tracks == []


def test_late_fuse_recover_direct():
    cfg = KalmanConfig()
    matched = _track([0, 0, 0, 2, 4, 0, 0], age=3, misses=0)
    lost = Track(1, np.array([5.0, 0, 0, 2, 4, 0, 0]), np.eye(7), age=3, misses=1, score=0.5)
    young = Track(2, np.array([9.0, 0, 0, 2, 4, 0, 0]), np.eye(7), age=1, misses=1)
    stale = Track(3, np.array([12.0, 0, 0, 2, 4, 0, 0]), np.eye(7), age=5, misses=4)
    det = DetBox(0, 0, 2, 4, 0, 0.8)
    out = late_fuse_recover([matched, lost, young, stale], [det], cfg)
    assert out[0] == det and len(out) == 2
    assert out[1].x == 5.0 and out[1].score == 0.5


def test_single_interrupted_frame_error_below_one_cell():
    cell = 0.4
    tracker = Tracker()
    truth = lambda t: _cv_dets(t, speed=(8.0, -3.0))
    for t in range(10):
        tracker.step([truth(t)])
    out = tracker.step([])
    assert len(out) == 1
    assert np.hypot(out[0].x - truth(10).x, out[0].y - truth(10).y) < cell


def test_world_local_round_trip():
    pose = Pose2D(3.0, -2.0, 0.7)
    boxes = [DetBox(1.0, 2.0, 2.0, 4.0, 0.3, 0.7)]
    back = to_local(to_world(boxes, pose), pose)[0]
    assert back.x == pytest.approx(1.0) and back.y == pytest.approx(2.0) and back.yaw == pytest.approx(0.3)
