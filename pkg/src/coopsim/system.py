"""Frame-by-frame cooperative forward pass shared by training and evaluation.

One :class:`CoopSystem` runs every node of a scenario as an ego at once:
all observations are encoded in a single batched call, each ego warps the
maps it received into its own frame, optionally adds the pseudo node built
from its history, fuses, and the fused maps are decoded in one batch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .geometry import Pose2D
from .numerics import Tensor, load_weights, no_grad, save_weights, stack
from .pipeline import (
    DetectionMap,
    FeatureMap,
    ModelConfig,
    PerceptionModel,
    decode_tensor,
    encode_tensor,
    fuse_tensors,
    warp_tensor,
)
from .recovery import HistoryBuffer, build_history_input, msstp_tensor, temporal_summation

HISTORY_MODES = ("none", "summation", "msstp")


@dataclass(frozen=True)
class Variant:
    """Which recovery path a model uses."""

    history: str = "msstp"
    k: int = 3
    ego_only: bool = False

    def __post_init__(self):
        if self.history not in HISTORY_MODES:
            raise ConfigurationError(f"unknown history mode {self.history!r}; expected one of {HISTORY_MODES}")
        if not 1 <= self.k <= 5:
            raise ConfigurationError(f"history length must be in 1..5, got {self.k}")


@dataclass
class StepOutput:
    feats: Tensor                # [N,C,h,w] encoder output
    fused: list[Tensor]          # per ego [C,h,w]
    det: DetectionMap            # batched [N,1,h,w] / [N,6,h,w]
    pseudo_used: list[bool]


class CoopSystem:
    def __init__(self, model: PerceptionModel, variant: Variant, num_nodes: int):
        self.model = model
        self.variant = variant
        self.num_nodes = num_nodes
        self.buffers = [HistoryBuffer(variant.k) for _ in range(num_nodes)]

    @property
    def cell(self) -> float:
        return self.model.config.feat_cell

    def reset(self) -> None:
        for b in self.buffers:
            b.clear()

    def pseudo(self, i: int, pose: Pose2D) -> Tensor | None:
        buf = self.buffers[i]
        if self.variant.history == "summation":
            return temporal_summation(buf, pose, self.cell)
        if self.variant.history == "msstp":
            hist = build_history_input(buf, pose, self.cell)
            return None if hist is None else msstp_tensor(hist, self.model.weights)
        return None

    def step(self, t: int, obs: np.ndarray, poses: list[Pose2D], received: list[set[int]],
             sender_poses: list[Pose2D] | None = None, feats: Tensor | None = None) -> StepOutput:
        """Advance one timestep.

        ``received[i]`` lists the senders whose maps reached ego ``i``;
        ``sender_poses`` are the (possibly noisy) poses attached to those
        maps and default to the true poses. ``feats`` may carry this frame's
        encoder output when it was computed beforehand.
        """
        w = self.model.weights
        sender_poses = poses if sender_poses is None else sender_poses
        if feats is None:
            feats = encode_tensor(Tensor(obs), w)
        fused, used = [], []
        for i in range(self.num_nodes):
            own = feats[i]
            if self.variant.ego_only:
                fused.append(own)
                used.append(False)
                continue
            others = [warp_tensor(feats[j], sender_poses[j], poses[i], self.cell) for j in sorted(received[i])]
            ps = self.pseudo(i, poses[i])
            if ps is not None:
                others.append(ps)
            used.append(ps is not None)
            fused.append(fuse_tensors(own, others, w))
        if self.variant.history != "none" and not self.variant.ego_only:
            for i in range(self.num_nodes):
                self.buffers[i].push(t, poses[i], fused[i])
        det = decode_tensor(stack(fused, axis=0), w)
        return StepOutput(feats, fused, det, used)


def teacher_forward(obs: np.ndarray, poses: list[Pose2D], i: int, contact: set[int], teacher: PerceptionModel,
                    t: int = 0, feats: Tensor | None = None) -> FeatureMap:
    """Guidance map for ego ``i``: teacher fusion over ``{i}`` and its contact set.

    Runs without recording gradients. ``feats`` may carry the teacher's
    encoder output for all nodes of the frame to avoid re-encoding.
    """
    cell = teacher.config.feat_cell
    with no_grad():
        if feats is None:
            nodes = sorted({i, *contact})
            enc = encode_tensor(Tensor(obs[nodes]), teacher.weights)
            feats_of = {n: enc[k] for k, n in enumerate(nodes)}
        else:
            feats_of = {n: feats[n] for n in {i, *contact}}
        others = [warp_tensor(feats_of[j], poses[j], poses[i], cell) for j in sorted(set(contact) - {i})]
        fused = fuse_tensors(feats_of[i], others, teacher.weights)
    return FeatureMap(i, t, poses[i], fused)


# ----------------------------------------------------------------------------
# model persistence
# ----------------------------------------------------------------------------

def save_model(path, model: PerceptionModel, variant: Variant | None = None, extra: dict | None = None) -> Path:
    meta = {"model_config": asdict(model.config)}
    if variant is not None:
        meta["variant"] = asdict(variant)
    if extra:
        meta.update(extra)
    return save_weights(path, {k: v.data for k, v in model.weights.items()}, meta)


def load_model(path, trainable: bool = False) -> tuple[PerceptionModel, Variant | None, dict]:
    arrays, meta = load_weights(path)
    cfg = ModelConfig(**meta["model_config"])
    variant = Variant(**meta["variant"]) if "variant" in meta else None
    weights = {k: Tensor(v, requires_grad=trainable) for k, v in arrays.items()}
    return PerceptionModel(cfg, weights), variant, meta


def copy_model(model: PerceptionModel, trainable: bool = True, prefixes: tuple[str, ...] | None = None) -> PerceptionModel:
    """Fresh tensors holding copies of (a subset of) ``model``'s weights."""
    keep = {k: v for k, v in model.weights.items() if prefixes is None or k.startswith(prefixes)}
    return PerceptionModel(model.config, {k: Tensor(v.data.copy(), requires_grad=trainable) for k, v in keep.items()})
