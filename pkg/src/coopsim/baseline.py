"""Output-domain recovery: constant-velocity Kalman tracks over detected boxes.

State is ``(x, y, yaw, w, l, vx, vy)``; measurements are ``(x, y, yaw, w, l)``.
Tracks are associated to detections by centre distance with a hard gate and
an optimal one-to-one assignment. Confirmed tracks that miss a frame
contribute their predicted box (with a decayed score) for a few frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import DetBox, Pose2D, wrap_angle

STATE_DIM = 7
MEAS_DIM = 5
H = np.hstack([np.eye(MEAS_DIM), np.zeros((MEAS_DIM, 2))])


@dataclass
class KalmanConfig:
    dt: float = 0.1
    pos_sigma: float = 0.5
    yaw_sigma: float = 0.1
    size_sigma: float = 0.1
    vel_sigma: float = 1.0
    init_vel_sigma: float = 20.0   # unknown speed of a freshly spawned track
    gate: float = 3.0              # metres, centre distance
    min_age: int = 2
    max_misses: int = 3
    score_decay: float = 0.9

    def process_noise(self) -> np.ndarray:
        return np.diag(np.square([self.pos_sigma, self.pos_sigma, self.yaw_sigma, self.size_sigma,
                                  self.size_sigma, self.vel_sigma, self.vel_sigma]))

    def measurement_noise(self) -> np.ndarray:
        return np.diag(np.square([self.pos_sigma, self.pos_sigma, self.yaw_sigma, self.size_sigma,
                                  self.size_sigma]))


@dataclass
class Track:
    id: int
    state: np.ndarray
    cov: np.ndarray
    age: int = 1        # successful updates, including the spawning detection
    misses: int = 0     # consecutive frames without a match
    score: float = 1.0

    def box(self) -> DetBox:
        x, y, yaw, w, length = self.state[:5]
        return DetBox(float(x), float(y), max(float(w), 1e-3), max(float(length), 1e-3), wrap_angle(float(yaw)),
                      self.score)


@dataclass
class Assignment:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    unmatched_rows: list[int] = field(default_factory=list)
    unmatched_cols: list[int] = field(default_factory=list)


def transition(dt: float) -> np.ndarray:
    f = np.eye(STATE_DIM)
    f[0, 5] = dt
    f[1, 6] = dt
    return f


def kf_predict(track: Track, dt: float, q: np.ndarray) -> Track:
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    f = transition(dt)
    x = f @ track.state
    x[2] = wrap_angle(x[2])
    p = f @ track.cov @ f.T + q
    return replace(track, state=x, cov=0.5 * (p + p.T))


def kf_update(track: Track, det: DetBox, r: np.ndarray) -> Track:
    """Standard Kalman update with the yaw innovation wrapped.

    A singular innovation covariance skips the update and counts a miss.
    """
    z = np.array([det.x, det.y, det.yaw, det.width, det.length])
    innov = z - H @ track.state
    innov[2] = wrap_angle(innov[2])
    s = H @ track.cov @ H.T + r
    try:
        if np.linalg.cond(s) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned innovation covariance")
        k = np.linalg.solve(s, H @ track.cov).T
    except np.linalg.LinAlgError:
        return replace(track, misses=track.misses + 1)
    x = track.state + k @ innov
    x[2] = wrap_angle(x[2])
    ikh = np.eye(STATE_DIM) - k @ H
    p = ikh @ track.cov @ ikh.T + k @ r @ k.T   # Joseph form keeps P symmetric PSD
    return replace(track, state=x, cov=0.5 * (p + p.T), misses=0, age=track.age + 1, score=det.score)


def hungarian(cost) -> Assignment:
    """Minimum-cost one-to-one assignment; ``inf`` entries are never paired."""
    cost = np.asarray(cost, dtype=float)
    if cost.size == 0:
        rows = cost.shape[0] if cost.ndim == 2 else 0
        cols = cost.shape[1] if cost.ndim == 2 else 0
        return Assignment([], list(range(rows)), list(range(cols)))
    finite = np.isfinite(cost)
    big = (np.abs(cost[finite]).sum() + 1.0) * 2 if finite.any() else 1.0
    rr, cc = linear_sum_assignment(np.where(finite, cost, big))
    pairs = [(int(r), int(c)) for r, c in zip(rr, cc) if finite[r, c]]
    used_r = {r for r, _ in pairs}
    used_c = {c for _, c in pairs}
    return Assignment(pairs, [r for r in range(cost.shape[0]) if r not in used_r],
                      [c for c in range(cost.shape[1]) if c not in used_c])


def center_cost(tracks: list[Track], dets: list[DetBox], gate: float) -> np.ndarray:
    cost = np.full((len(tracks), len(dets)), np.inf)
    for a, t in enumerate(tracks):
        for b, d in enumerate(dets):
            dist = float(np.hypot(t.state[0] - d.x, t.state[1] - d.y))
            if dist <= gate:
                cost[a, b] = dist
    return cost


def late_fuse_recover(tracks: list[Track], current_dets: list[DetBox], config: KalmanConfig) -> list[DetBox]:
    """Current detections plus predictions of confirmed tracks that missed this frame.

    ``tracks`` must already be predicted to the current time and associated,
    so a track that matched a detection has ``misses == 0``.
    """
    out = list(current_dets)
    for t in tracks:
        if 0 < t.misses <= config.max_misses and t.age >= config.min_age:
            out.append(t.box())
    return out


class Tracker:
    """Per-ego multi-object tracker operating in a fixed world frame."""

    def __init__(self, config: KalmanConfig | None = None):
        self.config = config or KalmanConfig()
        self.tracks: list[Track] = []
        self._next_id = 0
        self._q = self.config.process_noise()
        self._r = self.config.measurement_noise()

    def _spawn(self, det: DetBox) -> Track:
        cfg = self.config
        state = np.array([det.x, det.y, det.yaw, det.width, det.length, 0.0, 0.0])
        cov = np.diag(np.square([cfg.pos_sigma, cfg.pos_sigma, cfg.yaw_sigma, cfg.size_sigma, cfg.size_sigma,
                                 cfg.init_vel_sigma, cfg.init_vel_sigma]))
        track = Track(self._next_id, state, cov, score=det.score)
        self._next_id += 1
        return track

    def step(self, dets: list[DetBox]) -> list[DetBox]:
        """Advance one frame with world-frame detections; return the recovered set."""
        cfg = self.config
        self.tracks = [kf_predict(t, cfg.dt, self._q) for t in self.tracks]
        assign = hungarian(center_cost(self.tracks, dets, cfg.gate))
        for a, b in assign.pairs:
            self.tracks[a] = kf_update(self.tracks[a], dets[b], self._r)
        for a in assign.unmatched_rows:
            t = self.tracks[a]
            self.tracks[a] = replace(t, misses=t.misses + 1, score=t.score * cfg.score_decay)
        self.tracks = [t for t in self.tracks if t.misses <= cfg.max_misses]
        self.tracks.extend(self._spawn(dets[b]) for b in assign.unmatched_cols)
        return late_fuse_recover(self.tracks, dets, cfg)


def to_world(boxes: list[DetBox], pose: Pose2D) -> list[DetBox]:
    world = Pose2D(0.0, 0.0, 0.0)
    return [b.transformed(pose, world) for b in boxes]


def to_local(boxes: list[DetBox], pose: Pose2D) -> list[DetBox]:
    world = Pose2D(0.0, 0.0, 0.0)
    return [b.transformed(world, pose) for b in boxes]
