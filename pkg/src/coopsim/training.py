"""Targets, losses and the teacher / student training loops.

Every parameter update consumes one frame of one scenario: all nodes act
as egos, their losses are summed in ascending node order, and a single
backward pass feeds one Adam step. History maps are stored detached, so
gradients never flow across frames.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .comms import CurriculumSchedule, build_trace, curriculum_sample_p, curriculum_stream, keyed_rng, past_contact_set
from .errors import DimensionError, NumericsError, TrainingError
from .geometry import DetBox, Pose2D
from .numerics import AdamState, Tensor, adam_step, backward, bce, fresh_tape, kl_channelwise, no_grad, smooth_l1
from .pipeline import DetectionMap, FeatureMap, ModelConfig, PerceptionModel, encode_tensor, init_perception
from .recovery import init_msstp
from .system import CoopSystem, Variant, copy_model, teacher_forward
from .world import Scenario, SensorConfig, cell_centers, ground_truth_boxes, render_observation

log = logging.getLogger(__name__)

_SHUFFLE_TAG = 0x5F


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 2.0
    gamma: float = 10000.0
    learning_rate: float = 0.002
    epochs: int = 40
    ramp_epochs: int = 30
    batch_size: int = 1           # scenario-frames per update; only 1 is supported
    curriculum: bool = True
    fixed_p: float | None = None  # overrides sampling when set
    seed: int = 0

    def validate(self) -> None:
        if min(self.alpha, self.beta, self.gamma, self.learning_rate) < 0:
            raise TrainingError("loss weights and learning rate must be non-negative")
        if self.epochs < 1:
            raise TrainingError("need at least one epoch")
        if self.batch_size != 1:
            raise TrainingError("only one scenario-frame per update is supported")

    def schedule(self) -> CurriculumSchedule:
        if self.fixed_p is not None:
            return CurriculumSchedule.fixed(self.epochs, self.fixed_p, self.fixed_p)
        if not self.curriculum:
            return CurriculumSchedule.fixed(self.epochs, 0.0, 1.0)
        return CurriculumSchedule(epochs=self.epochs, ramp_epochs=self.ramp_epochs)


@dataclass
class TargetMap:
    cls: np.ndarray    # [1,h,w]
    reg: np.ndarray    # [6,h,w]
    mask: np.ndarray   # [1,h,w] bool


def fold_yaw(yaw: float) -> float:
    """Equivalent heading of a symmetric box in [-pi/2, pi/2)."""
    return (yaw + math.pi / 2) % math.pi - math.pi / 2


def build_targets(gts: list[DetBox], grid: int, cell: float, ids: list[int] | None = None) -> TargetMap:
    """One positive cell per box: the cell containing the box centre.

    When two centres share a cell the nearer one wins; equal distances go
    to the lower id (list position unless ``ids`` is given). A rectangle
    looks the same after a half turn, so the yaw target is folded into
    [-pi/2, pi/2) first.
    """
    cls = np.zeros((1, grid, grid), np.float32)
    reg = np.zeros((6, grid, grid), np.float32)
    mask = np.zeros((1, grid, grid), bool)
    centers = cell_centers(grid, cell)
    half = grid * cell / 2.0
    ids = list(range(len(gts))) if ids is None else ids
    best: dict[tuple[int, int], tuple[float, int]] = {}
    for b, oid in zip(gts, ids):
        col = int(math.floor((b.x + half) / cell))
        row = int(math.floor((b.y + half) / cell))
        if not (0 <= col < grid and 0 <= row < grid):
            continue
        dx, dy = b.x - centers[col], b.y - centers[row]
        rank = (math.hypot(dx, dy), oid)
        if (row, col) in best and best[(row, col)] <= rank:
            continue
        best[(row, col)] = rank
        cls[0, row, col] = 1.0
        mask[0, row, col] = True
        yaw = fold_yaw(b.yaw)
        reg[:, row, col] = (dx / cell, dy / cell, math.log(b.width), math.log(b.length), math.sin(yaw), math.cos(yaw))
    return TargetMap(cls, reg, mask)


def detection_loss(det: DetectionMap, targets: TargetMap, alpha: float = 1.0, beta: float = 2.0) -> Tensor:
    """alpha * BCE over all cells + beta * smooth-L1 over foreground cells."""
    cls_term = bce(det.cls, targets.cls)
    reg_term = smooth_l1(det.reg, targets.reg, targets.mask)
    return alpha * cls_term + beta * reg_term


def kd_loss(student_fused, guidance) -> Tensor:
    s = student_fused.data if isinstance(student_fused, FeatureMap) else student_fused
    g = guidance.data if isinstance(guidance, FeatureMap) else guidance
    if s.shape != g.shape:
        raise DimensionError(f"student {s.shape} and guidance {g.shape} differ")
    return kl_channelwise(s, g.detach())


def total_loss(det_loss, kd_loss_value, gamma: float):
    return det_loss + gamma * kd_loss_value


# ----------------------------------------------------------------------------
# data
# ----------------------------------------------------------------------------

@dataclass
class SceneData:
    """Rendered observations, poses and targets of one scenario."""

    scenario: Scenario
    obs: np.ndarray                       # [T,N,1,H,W] uint8
    poses: list[list[Pose2D]]             # [T][N]
    targets: list[list[TargetMap]]        # [T][N]
    gts: list[list[list[DetBox]]]         # [T][N]

    @property
    def num_frames(self) -> int:
        return self.obs.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.obs.shape[1]

    def frame_obs(self, t: int) -> np.ndarray:
        return self.obs[t].astype(np.float32)


def prepare_scene(scenario: Scenario, sensing: SensorConfig, model_cfg: ModelConfig) -> SceneData:
    if sensing.grid != model_cfg.grid or abs(sensing.cell - model_cfg.cell) > 1e-9:
        raise DimensionError(f"sensor grid {sensing.grid}@{sensing.cell} does not match model "
                             f"{model_cfg.grid}@{model_cfg.cell}")
    frames = scenario.frames
    n = scenario.num_nodes
    obs = np.zeros((len(frames), n, 1, sensing.grid, sensing.grid), np.uint8)
    poses, targets, gts = [], [], []
    for t, f in enumerate(frames):
        poses.append(list(f.agent_poses))
        row_t, row_g = [], []
        for i in range(n):
            obs[t, i] = render_observation(f, i, sensing)
            boxes = ground_truth_boxes(f, i, sensing.window)
            ids = [o.id for o in f.objects if _in_window(o, f.agent_poses[i], sensing.window)]
            row_g.append(boxes)
            row_t.append(build_targets(boxes, model_cfg.feat_grid, model_cfg.feat_cell, ids))
        targets.append(row_t)
        gts.append(row_g)
    return SceneData(scenario, obs, poses, targets, gts)


def _in_window(obj, owner: Pose2D, window: float) -> bool:
    x, y = owner.to_local(np.array([obj.pose.x, obj.pose.y]))
    return abs(x) < window / 2 and abs(y) < window / 2


def prepare_dataset(scenarios: list[Scenario], sensing: SensorConfig, model_cfg: ModelConfig) -> list[SceneData]:
    return [prepare_scene(s, sensing, model_cfg) for s in scenarios]


# ----------------------------------------------------------------------------
# training loops
# ----------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    mean_det_loss: float
    mean_kd_loss: float
    sampled_p_low: float
    sampled_p_high: float
    wall_time: float


@dataclass
class TrainResult:
    model: PerceptionModel
    variant: Variant
    history: list[EpochLog] = field(default_factory=list)

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mean_det_loss", "mean_kd_loss", "sampled_p_low", "sampled_p_high", "wall_time"])
            for e in self.history:
                w.writerow([e.epoch, f"{e.mean_det_loss:.6f}", f"{e.mean_kd_loss:.6f}",
                            f"{e.sampled_p_low:.4f}", f"{e.sampled_p_high:.4f}", f"{e.wall_time:.2f}"])


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return keyed_rng(seed, _SHUFFLE_TAG, epoch).permutation(n)


def _frame_step(system: CoopSystem, scene: SceneData, t: int, received, cfg: TrainConfig,
                teacher: PerceptionModel | None, trace, k: int):
    """Forward one frame for all egos; returns (loss, det sum, kd sum, kd count)."""
    obs = scene.frame_obs(t)
    poses = scene.poses[t]
    out = system.step(t, obs, poses, received)
    det_sum = None
    kd_sum = None
    kd_count = 0
    teacher_feats = None
    for i in range(scene.num_nodes):
        tg = scene.targets[t][i]
        d = detection_loss(DetectionMap(out.det.cls[i], out.det.reg[i]), tg, cfg.alpha, cfg.beta)
        det_sum = d if det_sum is None else det_sum + d
        if teacher is not None and cfg.gamma > 0 and out.pseudo_used[i]:
            if teacher_feats is None:
                with no_grad():
                    teacher_feats = encode_tensor(Tensor(obs), teacher.weights)
            contact = past_contact_set(trace, i, t, k)
            guide = teacher_forward(obs, poses, i, contact, teacher, t, teacher_feats)
            kd = kd_loss(out.fused[i], guide)
            kd_sum = kd if kd_sum is None else kd_sum + kd
            kd_count += 1
    loss = det_sum if kd_sum is None else total_loss(det_sum, kd_sum, cfg.gamma)
    return loss, float(det_sum.item()), 0.0 if kd_sum is None else float(kd_sum.item()), kd_count


def _run_training(data: list[SceneData], model: PerceptionModel, variant: Variant, cfg: TrainConfig,
                  teacher: PerceptionModel | None, label: str, force_p: float | None = None,
                  log_every: int = 0) -> TrainResult:
    cfg.validate()
    params = model.params()
    for name, p in zip(model.names(), params):
        p.name = name
    opt = AdamState(learning_rate=cfg.learning_rate)
    schedule = cfg.schedule() if force_p is None else CurriculumSchedule.fixed(cfg.epochs, force_p, force_p)
    result = TrainResult(model, variant)
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        det_total, kd_total, frames, kd_frames = 0.0, 0.0, 0, 0
        lo, hi = schedule.bounds(epoch)
        for idx in _epoch_order(cfg.seed, epoch, len(data)):
            scene = data[idx]
            p = curriculum_sample_p(schedule, epoch, curriculum_stream(cfg.seed, epoch, int(idx)))
            trace = build_trace(scene.num_nodes, scene.num_frames, p, cfg.seed, stream=(1, epoch, int(idx)))
            system = CoopSystem(model, variant, scene.num_nodes)
            for t in range(scene.num_frames):
                received = [trace.received(i, t) for i in range(scene.num_nodes)]
                for prm in params:
                    prm.grad = None
                try:
                    with fresh_tape():
                        loss, det_v, kd_v, kd_n = _frame_step(system, scene, t, received, cfg, teacher,
                                                              trace, variant.k)
                        if not math.isfinite(loss.item()):
                            raise NumericsError("non-finite loss")
                        backward(loss)
                    adam_step(params, None, opt)
                except (NumericsError, TrainingError) as exc:
                    raise TrainingError(f"{label}: epoch {epoch}, scenario seed {scene.scenario.seed} "
                                        f"(index {idx}), frame {t}: {exc}") from exc
                det_total += det_v
                kd_total += kd_v
                frames += scene.num_nodes
                kd_frames += kd_n
        entry = EpochLog(epoch, det_total / max(frames, 1), kd_total / max(kd_frames, 1), lo, hi,
                         time.perf_counter() - start)
        result.history.append(entry)
        log.info("%s epoch %d det=%.4f kd=%.6f p=[%.2f, %.2f] %.0fs", label, epoch, entry.mean_det_loss,
                 entry.mean_kd_loss, lo, hi, entry.wall_time)
    for p in params:
        p.grad = None
    return result


def train_teacher(data: list[SceneData], model_cfg: ModelConfig, cfg: TrainConfig, ego_only: bool = False,
                  init: PerceptionModel | None = None) -> TrainResult:
    """Ideal-communication training (p = 0) of encoder, fusion and decoder.

    With ``ego_only`` the same loop trains an individual (non-cooperative)
    detector instead.
    """
    model = copy_model(init) if init is not None else PerceptionModel(model_cfg, init_perception(model_cfg, cfg.seed))
    variant = Variant(history="none", ego_only=ego_only)
    label = "individual" if ego_only else "teacher"
    return _run_training(data, model, variant, cfg, None, label, force_p=0.0)


def train_student(data: list[SceneData], teacher: PerceptionModel, cfg: TrainConfig, variant: Variant,
                  init: PerceptionModel | None = None) -> TrainResult:
    """Interruption-aware training under sampled drop rates.

    The student starts from ``init`` (default: the teacher's encoder, fusion
    and decoder weights) and gets a freshly initialised predictor when the
    variant uses one. Knowledge distillation is active when ``gamma > 0``.
    """
    base = init if init is not None else teacher
    model = copy_model(base, prefixes=("enc.", "saff.", "dec."))
    if variant.history == "msstp":
        rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x57, variant.k]))
        model.weights.update(init_msstp(model.config, variant.k, rng))
    frozen = copy_model(teacher, trainable=False, prefixes=("enc.", "saff.", "dec."))
    return _run_training(data, model, variant, cfg, frozen if cfg.gamma > 0 else None, f"student[{variant.history}]")
