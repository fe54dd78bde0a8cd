"""Rotated-box AP and the experiment drivers (drop-rate, pose-noise, ablations).

Every method is evaluated with all nodes of a scenario acting as egos. AP is
pooled per ego node index across scenarios and frames, then averaged over
the nodes that saw at least one ground-truth box.

Link traces for evaluation seed ``s`` and scenario ``k`` use stream
``(2, k)`` under seed ``s``, disjoint from the training streams.
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .baseline import KalmanConfig, Tracker, to_local, to_world
from .comms import build_trace, keyed_rng
from .errors import ConfigurationError, UsageError
from .geometry import DetBox, Pose2D, rotated_iou
from .numerics import Tensor, no_grad
from .pipeline import DetectionMap, PerceptionModel, encode_tensor, nms, postprocess
from .system import CoopSystem, Variant, load_model
from .training import SceneData

log = logging.getLogger(__name__)

METHODS = ("incop", "no_history", "ego_only", "kalman_late_fusion")
COMPONENTS = ("no_history", "temporal_summation", "msstp", "msstp_kd", "msstp_kd_curriculum")
DEFAULT_P = tuple(round(0.1 * i, 1) for i in range(10))
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
IOU_THRESHOLDS = (0.5, 0.7)
EVAL_CONF_THRESH = 0.05

_EVAL_STREAM = 2
_NOISE_TAG = 0x7E


@dataclass(frozen=True)
class EvalRecord:
    method: str
    p: float
    iou_thresh: float
    ap: float
    seed: int
    num_scenarios: int
    sigma_t: float = 0.0
    sigma_r: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.ap <= 1.0:
            raise ValueError(f"AP must lie in [0, 1], got {self.ap}")


@dataclass(frozen=True)
class NoiseConfig:
    sigma_t: float = 0.0   # metres, per axis
    sigma_r: float = 0.0   # radians
    seed: int = 0

    def __post_init__(self):
        if self.sigma_t < 0 or self.sigma_r < 0:
            raise ConfigurationError("noise sigmas must be non-negative")

    @property
    def is_zero(self) -> bool:
        return self.sigma_t == 0 and self.sigma_r == 0


# ----------------------------------------------------------------------------
# average precision
# ----------------------------------------------------------------------------

def _may_overlap(a: DetBox, b: DetBox) -> bool:
    reach = 0.5 * (np.hypot(a.width, a.length) + np.hypot(b.width, b.length))
    return (a.x - b.x) ** 2 + (a.y - b.y) ** 2 < reach * reach


def match_frame(dets: list[DetBox], gts: list[DetBox], iou_thresh: float) -> list[tuple[float, bool]]:
    """Greedy score-descending matching; each GT absorbs at most one detection.

    A detection is a true positive when its best IoU with a still unmatched
    GT exceeds ``iou_thresh``.
    """
    order = sorted(range(len(dets)), key=lambda k: -dets[k].score)
    taken = [False] * len(gts)
    out = []
    for k in order:
        d = dets[k]
        best, best_g = iou_thresh, -1
        for g, gt in enumerate(gts):
            if taken[g] or not _may_overlap(d, gt):
                continue
            iou = rotated_iou(d, gt)
            if iou > best:
                best, best_g = iou, g
        if best_g >= 0:
            taken[best_g] = True
        out.append((d.score, best_g >= 0))
    return out


def ap_from_matches(matches: list[tuple[float, bool]], num_gt: int) -> float:
    """All-point interpolated area under the precision-recall curve."""
    if num_gt <= 0:
        raise UsageError("AP is undefined without ground-truth boxes")
    if not matches:
        return 0.0
    scores = np.array([m[0] for m in matches])
    tp = np.array([m[1] for m in matches], dtype=float)
    order = np.argsort(-scores, kind="stable")
    tp = tp[order]
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    # precision envelope, then sum over recall steps
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def average_precision(dets: list[list[DetBox]], gts: list[list[DetBox]], iou_thresh: float) -> float:
    """AP over a sequence of frames; ``dets[f]`` and ``gts[f]`` belong to frame ``f``."""
    if len(dets) != len(gts):
        raise UsageError(f"{len(dets)} detection frames but {len(gts)} ground-truth frames")
    matches = []
    for d, g in zip(dets, gts):
        matches.extend(match_frame(d, g, iou_thresh))
    return ap_from_matches(matches, sum(len(g) for g in gts))


# ----------------------------------------------------------------------------
# running methods
# ----------------------------------------------------------------------------

def noisy_poses(poses: list[Pose2D], noise: NoiseConfig | None, seed: int, scene: int, t: int) -> list[Pose2D]:
    """Poses as broadcast by each node: true pose plus Gaussian centre and yaw error."""
    if noise is None or noise.is_zero:
        return list(poses)
    rng = keyed_rng(noise.seed, _NOISE_TAG, seed, scene, t)
    eps = rng.normal(size=(len(poses), 3)) * [noise.sigma_t, noise.sigma_t, noise.sigma_r]
    return [Pose2D(p.x + e[0], p.y + e[1], p.yaw + e[2]) for p, e in zip(poses, eps)]


def _in_window(b: DetBox, half: float) -> bool:
    return abs(b.x) < half and abs(b.y) < half


def method_variant(method: str, variant: Variant | None) -> Variant:
    if method == "ego_only" or method == "kalman_late_fusion":
        return Variant(history="none", ego_only=True)
    if method == "no_history":
        return Variant(history="none", k=variant.k if variant else 3)
    if method == "incop":
        return variant if variant is not None else Variant()
    raise ConfigurationError(f"unknown method {method!r}; expected one of {METHODS}")


class Evaluator:
    """Runs methods over a fixed list of prepared test scenarios.

    Encoder outputs and individual detections do not depend on the channel
    and are cached per model, so sweeping drop rates only repeats fusion,
    decoding and tracking.
    """

    def __init__(self, data: list[SceneData], conf_thresh: float = EVAL_CONF_THRESH,
                 kalman: KalmanConfig | None = None):
        if not data:
            raise UsageError("evaluation needs at least one scenario")
        self.data = data
        self.conf_thresh = conf_thresh
        self.kalman = kalman
        self._feats: dict[tuple[int, int], tuple[PerceptionModel, list[Tensor]]] = {}
        self._solo: dict[tuple[int, int], tuple[PerceptionModel, list[list[list[DetBox]]]]] = {}

    def _encoded(self, model: PerceptionModel, k: int) -> list[Tensor]:
        key = (id(model), k)
        if key not in self._feats:
            scene = self.data[k]
            with no_grad():
                feats = [encode_tensor(Tensor(scene.frame_obs(t)), model.weights) for t in range(scene.num_frames)]
            self._feats[key] = (model, feats)
        return self._feats[key][1]

    def _boxes(self, det: DetectionMap, i: int, model: PerceptionModel) -> list[DetBox]:
        cfg = model.config
        return postprocess(DetectionMap(det.cls.data[i], det.reg.data[i]), self.conf_thresh, cfg.nms_iou,
                           cfg.feat_cell)

    def _individual(self, model: PerceptionModel, k: int) -> list[list[list[DetBox]]]:
        """Ego-only boxes ``[t][i]`` in each node's own frame."""
        key = (id(model), k)
        if key not in self._solo:
            scene, feats = self.data[k], self._encoded(model, k)
            system = CoopSystem(model, Variant(history="none", ego_only=True), scene.num_nodes)
            out = []
            with no_grad():
                for t in range(scene.num_frames):
                    step = system.step(t, None, scene.poses[t], [set()] * scene.num_nodes, feats=feats[t])
                    out.append([self._boxes(step.det, i, model) for i in range(scene.num_nodes)])
            self._solo[key] = (model, out)
        return self._solo[key][1]

    def run_scene(self, method: str, model: PerceptionModel, variant: Variant | None, k: int, p: float,
                  seed: int, noise: NoiseConfig | None = None) -> list[list[list[DetBox]]]:
        """Detections ``[t][i]`` of every ego of scenario ``k``, clipped to the window."""
        scene = self.data[k]
        n, frames = scene.num_nodes, scene.num_frames
        half = model.config.grid * model.config.cell / 2
        if method == "ego_only":
            out = self._individual(model, k)
        else:
            trace = build_trace(n, frames, p, seed, stream=(_EVAL_STREAM, k))
            if method == "kalman_late_fusion":
                out = self._late_fusion(model, k, trace, seed, noise)
            else:
                out = self._intermediate(model, method_variant(method, variant), k, trace, seed, noise)
        return [[[b for b in boxes if _in_window(b, half)] for boxes in row] for row in out]

    def _intermediate(self, model, variant, k, trace, seed, noise):
        scene, feats = self.data[k], self._encoded(model, k)
        system = CoopSystem(model, variant, scene.num_nodes)
        out = []
        with no_grad():
            for t in range(scene.num_frames):
                received = [trace.received(i, t) for i in range(scene.num_nodes)]
                senders = noisy_poses(scene.poses[t], noise, seed, k, t)
                step = system.step(t, None, scene.poses[t], received, senders, feats=feats[t])
                out.append([self._boxes(step.det, i, model) for i in range(scene.num_nodes)])
        return out

    def _late_fusion(self, model, k, trace, seed, noise):
        scene = self.data[k]
        solo = self._individual(model, k)
        kcfg = self.kalman or KalmanConfig(dt=scene.scenario.config.dt)
        trackers = [Tracker(kcfg) for _ in range(scene.num_nodes)]
        out = []
        for t in range(scene.num_frames):
            poses = scene.poses[t]
            senders = noisy_poses(poses, noise, seed, k, t)
            row = []
            for i in range(scene.num_nodes):
                merged = list(solo[t][i])
                for j in sorted(trace.received(i, t)):
                    merged.extend(b.transformed(senders[j], poses[i]) for b in solo[t][j])
                merged = nms(merged, model.config.nms_iou)
                recovered = trackers[i].step(to_world(merged, poses[i]))
                row.append(to_local(recovered, poses[i]))
            out.append(row)
        return out

    def evaluate(self, method: str, model: PerceptionModel, variant: Variant | None, p: float, seed: int,
                 noise: NoiseConfig | None = None, label: str | None = None) -> list[EvalRecord]:
        """AP@0.5 and AP@0.7 of one (method, p, seed) cell."""
        per_node_dets: dict[int, list] = {}
        per_node_gts: dict[int, list] = {}
        for k, scene in enumerate(self.data):
            dets = self.run_scene(method, model, variant, k, p, seed, noise)
            for t in range(scene.num_frames):
                for i in range(scene.num_nodes):
                    per_node_dets.setdefault(i, []).append(dets[t][i])
                    per_node_gts.setdefault(i, []).append(scene.gts[t][i])
        records = []
        for thr in IOU_THRESHOLDS:
            aps = [average_precision(per_node_dets[i], per_node_gts[i], thr)
                   for i in sorted(per_node_dets) if any(per_node_gts[i])]
            if not aps:
                raise UsageError("AP is undefined: no ground-truth boxes in the evaluation set")
            records.append(EvalRecord(label or method, float(p), thr, float(np.mean(aps)), int(seed), len(self.data),
                                      noise.sigma_t if noise else 0.0, noise.sigma_r if noise else 0.0))
        return records


# ----------------------------------------------------------------------------
# sweeps
# ----------------------------------------------------------------------------

def _threads() -> int:
    try:
        return max(1, int(os.environ.get("COOPSIM_THREADS", "1")))
    except ValueError:
        raise ConfigurationError("COOPSIM_THREADS must be an integer") from None


def _run_cells(cells, fn) -> list[EvalRecord]:
    workers = min(_threads(), max(1, len(cells)))
    if workers == 1:
        results = [fn(c) for c in cells]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, cells))
    return sort_records([r for rs in results for r in rs])


def sort_records(records: list[EvalRecord]) -> list[EvalRecord]:
    return sorted(records, key=lambda r: (r.method, r.sigma_t, r.sigma_r, r.p, r.seed, r.iou_thresh))


def resolve_model(model) -> tuple[PerceptionModel, Variant | None]:
    """Accept a loaded model, a ``(model, variant)`` pair or a checkpoint path."""
    if isinstance(model, PerceptionModel):
        return model, None
    if isinstance(model, tuple):
        return model
    path = Path(model)
    if not path.exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    m, variant, _ = load_model(path)
    return m, variant


def run_pdr_sweep(model, method: str, scenarios: list[SceneData] | Evaluator, p_list=DEFAULT_P,
                  seeds=DEFAULT_SEEDS, noise: NoiseConfig | None = None, label: str | None = None) -> list[EvalRecord]:
    """One record per (p, seed, IoU threshold)."""
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}; expected one of {METHODS}")
    model, variant = resolve_model(model)
    ev = scenarios if isinstance(scenarios, Evaluator) else Evaluator(scenarios)
    cells = [(float(p), int(s)) for p in p_list for s in seeds]
    log.info("sweep %s over %d cells", label or method, len(cells))
    return _run_cells(cells, lambda c: ev.evaluate(method, model, variant, c[0], c[1], noise, label))


def run_pose_noise_sweep(model, method: str, scenarios: list[SceneData] | Evaluator, noise_levels: list[NoiseConfig],
                         p: float = 0.5, seeds=DEFAULT_SEEDS, label: str | None = None) -> list[EvalRecord]:
    """AP per noise level at a fixed drop rate; noise affects broadcast poses only."""
    model, variant = resolve_model(model)
    ev = scenarios if isinstance(scenarios, Evaluator) else Evaluator(scenarios)
    cells = [(nz, int(s)) for nz in noise_levels for s in seeds]
    return _run_cells(cells, lambda c: ev.evaluate(method, model, variant, p, c[1], c[0], label))


def run_ablations(kind: str, grid, models: dict, scenarios, p_list=DEFAULT_P, seeds=DEFAULT_SEEDS) -> list[EvalRecord]:
    """Records per grid value per p.

    - ``history_k``: ``models[k]`` is the V2X-INCOP model trained with window ``k``.
    - ``num_nodes``: ``models["incop"]`` runs on ``scenarios[n]``, a test set with ``n`` nodes.
    - ``components``: ``models[name]`` for each name in ``COMPONENTS``.
    """
    records = []
    if kind == "history_k":
        ev = scenarios if isinstance(scenarios, Evaluator) else Evaluator(scenarios)
        for k in grid:
            records += run_pdr_sweep(models[k], "incop", ev, p_list, seeds, label=f"incop_k{k}")
    elif kind == "num_nodes":
        for n in grid:
            data = scenarios[n]
            ev = data if isinstance(data, Evaluator) else Evaluator(data)
            records += run_pdr_sweep(models["incop"], "incop", ev, p_list, seeds, label=f"incop_n{n}")
    elif kind == "components":
        ev = scenarios if isinstance(scenarios, Evaluator) else Evaluator(scenarios)
        for name in grid:
            if name not in COMPONENTS:
                raise ConfigurationError(f"unknown component variant {name!r}; expected one of {COMPONENTS}")
            method = "no_history" if name == "no_history" else "incop"
            records += run_pdr_sweep(models[name], method, ev, p_list, seeds, label=name)
    else:
        raise ConfigurationError(f"unknown ablation {kind!r}; expected history_k, num_nodes or components")
    return sort_records(records)


# ----------------------------------------------------------------------------
# summaries and persistence
# ----------------------------------------------------------------------------

def mean_ap(records: list[EvalRecord], method: str, iou: float = 0.5, p_values=None,
            sigma_t: float | None = None) -> float:
    """Mean AP of ``method`` over seeds and the given drop rates."""
    sel = [r.ap for r in records if r.method == method and r.iou_thresh == iou
           and (p_values is None or any(abs(r.p - q) < 1e-9 for q in p_values))
           and (sigma_t is None or abs(r.sigma_t - sigma_t) < 1e-12)]
    if not sel:
        raise UsageError(f"no records for method {method!r} at IoU {iou}")
    return float(np.mean(sel))


def ap_by_p(records: list[EvalRecord], method: str, iou: float = 0.5) -> dict[float, float]:
    ps = sorted({r.p for r in records if r.method == method})
    return {p: mean_ap(records, method, iou, [p]) for p in ps}


def spearman_p_ap(records: list[EvalRecord], method: str, iou: float = 0.5) -> float:
    curve = ap_by_p(records, method, iou)
    rho = spearmanr(list(curve), list(curve.values())).statistic
    return float(rho)


CSV_COLUMNS = ["method", "p", "iou", "ap", "seed"]
NOISE_COLUMNS = ["sigma_t", "sigma_r"]


def write_records(path, records: list[EvalRecord], with_noise: bool = False) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS + (NOISE_COLUMNS if with_noise else []))
        for r in sort_records(records):
            row = [r.method, f"{r.p:.2f}", f"{r.iou_thresh:.2f}", f"{r.ap:.6f}", r.seed]
            if with_noise:
                row += [f"{r.sigma_t:.4f}", f"{r.sigma_r:.6f}"]
            w.writerow(row)
    return path


def read_records(path) -> list[EvalRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(EvalRecord(row["method"], float(row["p"]), float(row["iou"]), float(row["ap"]),
                                  int(row["seed"]), 0, float(row.get("sigma_t", 0.0)),
                                  float(row.get("sigma_r", 0.0))))
    return out

