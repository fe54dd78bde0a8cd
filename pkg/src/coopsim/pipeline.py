"""Per-node perception stack: encoder, feature warp, attentive fusion, decoder.

Weights live in flat ``dict[str, Tensor]`` mappings with dotted names
(``"enc.w0"``, ``"saff.b1"`` ...), which is also the checkpoint layout.
Every forward function accepts a single map ``[C,H,W]`` or a batch
``[N,C,H,W]`` where that makes sense, so all nodes of a frame can share one
convolution call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, UsageError
from .geometry import DetBox, Pose2D, rotated_iou  # noqa: F401  (re-exported)
from .numerics import (
    Tensor,
    concat,
    conv2d,
    gather_cells,
    mul,
    relu,
    sigmoid,
    softmax,
    stack,
    tsum,
)
from .world import cell_centers

REG_CHANNELS = 6  # dx, dy, log w, log l, sin yaw, cos yaw
CLS_PRIOR = 0.05  # initial foreground probability of the classification head


@dataclass
class ModelConfig:
    grid: int = 128          # observation cells per side
    cell: float = 0.4        # observation cell size, metres
    channels: int = 16
    conf_thresh: float = 0.3
    nms_iou: float = 0.15

    @property
    def feat_grid(self) -> int:
        return self.grid // 2

    @property
    def feat_cell(self) -> float:
        return self.cell * 2

    @property
    def mask_hidden(self) -> int:
        return max(1, self.channels // 2)

    def validate(self) -> None:
        if self.grid < 4 or self.grid % 2:
            raise ConfigurationError(f"grid must be an even number >= 4, got {self.grid}")
        if self.channels < 1:
            raise ConfigurationError("channels must be positive")
        if not (0 < self.conf_thresh < 1 and 0 < self.nms_iou < 1):
            raise ConfigurationError("thresholds must lie in (0, 1)")


@dataclass
class FeatureMap:
    owner: int
    timestep: int
    pose: Pose2D
    data: Tensor


@dataclass
class DetectionMap:
    cls: Tensor   # [1,H,W] (or [N,1,H,W]) foreground probability
    reg: Tensor   # [6,H,W] (or [N,6,H,W])


# ----------------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------------

def he_normal(rng: np.random.Generator, shape, dtype=np.float32) -> Tensor:
    fan_in = int(np.prod(shape[1:]))
    w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    return Tensor(w.astype(dtype), requires_grad=True, dtype=dtype)


def zeros_param(shape, dtype=np.float32, value=0.0) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True, dtype=dtype)


def init_encoder(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    c = cfg.channels
    p = {}
    for i, cin in enumerate((1, c, c)):
        p[f"enc.w{i}"] = he_normal(rng, (c, cin, 3, 3), dtype)
        p[f"enc.b{i}"] = zeros_param((c,), dtype)
    return p


def init_saff(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    c, hid = cfg.channels, cfg.mask_hidden
    return {
        "saff.w0": he_normal(rng, (hid, 2 * c, 1, 1), dtype),
        "saff.b0": zeros_param((hid,), dtype),
        "saff.w1": he_normal(rng, (1, hid, 1, 1), dtype),
        "saff.b1": zeros_param((1,), dtype),
    }


def init_decoder(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    c = cfg.channels
    p = {
        "dec.w0": he_normal(rng, (c, c, 3, 3), dtype),
        "dec.b0": zeros_param((c,), dtype),
        "dec.w1": he_normal(rng, (c, c, 3, 3), dtype),
        "dec.b1": zeros_param((c,), dtype),
    }
    # small heads so early predictions stay near the prior
    p["dec.cls_w"] = Tensor((rng.normal(0, 0.01, (1, c, 1, 1))).astype(dtype), requires_grad=True, dtype=dtype)
    p["dec.cls_b"] = zeros_param((1,), dtype, math.log(CLS_PRIOR / (1 - CLS_PRIOR)))
    p["dec.reg_w"] = Tensor((rng.normal(0, 0.01, (REG_CHANNELS, c, 1, 1))).astype(dtype), requires_grad=True, dtype=dtype)
    p["dec.reg_b"] = zeros_param((REG_CHANNELS,), dtype)
    return p


def init_perception(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Encoder, fusion and decoder weights drawn from one seeded stream."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xE1C0]))
    return {**init_encoder(cfg, rng, dtype), **init_saff(cfg, rng, dtype), **init_decoder(cfg, rng, dtype)}


def _need(weights, *names):
    missing = [n for n in names if n not in weights]
    if missing:
        raise ConfigurationError(f"missing weights: {', '.join(missing)}")
    return [weights[n] for n in names]


# ----------------------------------------------------------------------------
# encoder / decoder
# ----------------------------------------------------------------------------

def encode_tensor(x: Tensor, weights) -> Tensor:
    """Occupancy ``[1,H,W]`` or ``[N,1,H,W]`` to features at half resolution."""
    w0, b0, w1, b1, w2, b2 = _need(weights, "enc.w0", "enc.b0", "enc.w1", "enc.b1", "enc.w2", "enc.b2")
    try:
        h = relu(conv2d(x, w0, b0, stride=1, pad=1))
        h = relu(conv2d(h, w1, b1, stride=2, pad=1))
        return relu(conv2d(h, w2, b2, stride=1, pad=1))
    except DimensionError as exc:
        raise ConfigurationError(f"encoder weights do not match input: {exc}") from exc


def encode(obs, weights, owner: int = 0, timestep: int = 0, pose: Pose2D | None = None) -> FeatureMap:
    x = obs if isinstance(obs, Tensor) else Tensor(obs)
    return FeatureMap(owner, timestep, pose or Pose2D(0, 0, 0), encode_tensor(x, weights))


def decode_tensor(fused: Tensor, weights) -> DetectionMap:
    w0, b0, w1, b1, cw, cb, rw, rb = _need(
        weights, "dec.w0", "dec.b0", "dec.w1", "dec.b1", "dec.cls_w", "dec.cls_b", "dec.reg_w", "dec.reg_b")
    try:
        h = relu(conv2d(fused, w0, b0, pad=1))
        h = relu(conv2d(h, w1, b1, pad=1))
        return DetectionMap(sigmoid(conv2d(h, cw, cb)), conv2d(h, rw, rb))
    except DimensionError as exc:
        raise ConfigurationError(f"decoder weights do not match input: {exc}") from exc


def decode(fused: FeatureMap, weights) -> DetectionMap:
    return decode_tensor(fused.data, weights)


# ----------------------------------------------------------------------------
# warp
# ----------------------------------------------------------------------------

def warp_indices(src: Pose2D, dst: Pose2D, grid: int, cell: float):
    """Flat source index and validity for every destination cell.

    Destination cell centres are mapped to the world, then into the source
    frame, and read from the source cell that contains them.
    """
    centers = cell_centers(grid, cell)
    px, py = np.meshgrid(centers, centers)
    pts = np.stack([px, py], axis=-1)
    local = src.to_local(dst.to_world(pts))
    half = grid * cell / 2.0
    # tiny shift keeps exact cell-centre hits away from floor() boundaries
    col = np.floor((local[..., 0] + half) / cell + 1e-9).astype(np.int64)
    row = np.floor((local[..., 1] + half) / cell + 1e-9).astype(np.int64)
    valid = (col >= 0) & (col < grid) & (row >= 0) & (row < grid)
    return row * grid + col, valid


def warp_tensor(x: Tensor, src: Pose2D, dst: Pose2D, cell: float) -> Tensor:
    if src == dst:
        return x
    idx, valid = warp_indices(src, dst, x.shape[-1], cell)
    return gather_cells(x, idx, valid)


def warp_to(feat: FeatureMap, dst_pose: Pose2D, cell: float) -> FeatureMap:
    """Resample ``feat`` into the frame of ``dst_pose`` (nearest cell, zero fill)."""
    return FeatureMap(feat.owner, feat.timestep, dst_pose, warp_tensor(feat.data, feat.pose, dst_pose, cell))


# ----------------------------------------------------------------------------
# spatially attentive fusion
# ----------------------------------------------------------------------------

def saff_logits(ego: Tensor, maps: Tensor, weights) -> Tensor:
    """Per-pixel mask logits ``[N,1,H,W]`` for stacked contributor maps ``[N,C,H,W]``."""
    w0, b0, w1, b1 = _need(weights, "saff.w0", "saff.b0", "saff.w1", "saff.b1")
    n = maps.shape[0]
    ego_rep = stack([ego] * n, axis=0)
    pair = concat([ego_rep, maps], axis=1)
    return conv2d(relu(conv2d(pair, w0, b0)), w1, b1)


def fuse_tensors(ego: Tensor, others: list[Tensor], weights, return_masks: bool = False):
    """Fuse ``[ego, *others]`` (all ``[C,H,W]`` in the ego frame)."""
    maps_list = [ego, *others]
    shape = ego.shape
    for m in others:
        if m.shape != shape:
            raise DimensionError(f"contributor shape {m.shape} != ego shape {shape}")
    if len(maps_list) == 1 and not return_masks:
        return ego
    maps = stack(maps_list, axis=0)
    masks = softmax(saff_logits(ego, maps, weights), axis=0)
    fused = tsum(mul(masks, maps), axis=0)
    return (fused, masks) if return_masks else fused


def fuse_saff(ego: FeatureMap, contributors: list[FeatureMap], mask_weights) -> FeatureMap:
    """Fuse warped maps; ``contributors`` starts with the ego map itself."""
    if not contributors:
        raise UsageError("fusion needs at least one contributor")
    head, *rest = contributors
    fused = fuse_tensors(head.data, [c.data for c in rest], mask_weights)
    return FeatureMap(ego.owner, ego.timestep, ego.pose, fused)


# ----------------------------------------------------------------------------
# box decoding
# ----------------------------------------------------------------------------

def decode_boxes(cls: np.ndarray, reg: np.ndarray, cell: float, conf_thresh: float) -> list[DetBox]:
    """Boxes for every cell whose score reaches ``conf_thresh`` (no NMS)."""
    cls = np.asarray(cls).reshape(cls.shape[-2:])
    n = cls.shape[-1]
    centers = cell_centers(n, cell)
    rows, cols = np.nonzero(cls >= conf_thresh)
    out = []
    for r, c in zip(rows, cols):
        dx, dy, lw, ll, s, co = (float(v) for v in reg[:, r, c])
        out.append(DetBox(
            x=float(centers[c]) + dx * cell,
            y=float(centers[r]) + dy * cell,
            width=math.exp(min(max(lw, -4.0), 4.0)),
            length=math.exp(min(max(ll, -4.0), 4.0)),
            yaw=math.atan2(s, co),
            score=float(cls[r, c]),
        ))
    return out


def nms(boxes: list[DetBox], iou_thresh: float) -> list[DetBox]:
    """Greedy suppression, highest score first (ties keep the earlier box)."""
    order = sorted(range(len(boxes)), key=lambda k: -boxes[k].score)
    kept: list[DetBox] = []
    for k in order:
        b = boxes[k]
        if all(rotated_iou(b, q) <= iou_thresh for q in kept):
            kept.append(b)
    return kept


def postprocess(det: DetectionMap, conf_thresh: float, nms_iou: float, cell: float) -> list[DetBox]:
    cls = det.cls.data if isinstance(det.cls, Tensor) else np.asarray(det.cls)
    reg = det.reg.data if isinstance(det.reg, Tensor) else np.asarray(det.reg)
    return nms(decode_boxes(cls, reg, cell, conf_thresh), nms_iou)


@dataclass
class PerceptionModel:
    """Config plus named weights; MSSTP weights are stored alongside when present."""

    config: ModelConfig
    weights: dict[str, Tensor] = field(default_factory=dict)

    def params(self, prefix: str | tuple[str, ...] = "") -> list[Tensor]:
        return [self.weights[k] for k in sorted(self.weights) if k.startswith(prefix)]

    def names(self, prefix: str | tuple[str, ...] = "") -> list[str]:
        return [k for k in sorted(self.weights) if k.startswith(prefix)]
