"""History buffering and the spatio-temporal predictor for the pseudo node.

The predictor turns the last ``k`` fused feature maps of an ego node,
warped into its current frame, into one synthetic feature map that joins
the fusion as an extra contributor. Architecture (channels ``C``):

* group 1: per-slice 3x3 stride-2 conv (C -> 2C), 3x3 conv (2C -> 2C),
  then a valid temporal conv shrinking ``k`` slices to ``ceil(k/2)``;
* group 2: the same with 2C -> 4C, shrinking time to a single slice;
* decoder: upsample x2, concat the time-mean of group 1, conv to 2C;
  upsample x2, concat the time-mean of the input, conv to C;
  then two 3x3 convs (the last one linear).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .geometry import Pose2D
from .numerics import Tensor, add, concat, conv1d_temporal, conv2d, mean, mul, relu, stack, upsample_nearest
from .pipeline import FeatureMap, ModelConfig, he_normal, warp_tensor, zeros_param
from .world import MAX_NODES

MAX_HISTORY = 5


def pseudo_id(node: int) -> int:
    """Owner id used for the pseudo node attached to ``node``."""
    return MAX_NODES + node


def temporal_lengths(k: int) -> tuple[int, int]:
    """Temporal kernel lengths of the two groups for a ``k``-slice history."""
    if not 1 <= k <= MAX_HISTORY:
        raise ConfigurationError(f"history length must be in 1..{MAX_HISTORY}, got {k}")
    mid = math.ceil(k / 2)
    return k - mid + 1, mid


@dataclass(frozen=True)
class HistoryEntry:
    timestep: int
    pose: Pose2D
    data: Tensor


class HistoryBuffer:
    """Ring of the last ``k`` fused maps of one node, oldest first."""

    def __init__(self, k: int = 3):
        if k < 1:
            raise ConfigurationError(f"history window must be positive, got {k}")
        self.k = k
        self._ring: deque[HistoryEntry] = deque(maxlen=k)

    def push(self, timestep: int, pose: Pose2D, data: Tensor) -> None:
        if self._ring and timestep <= self._ring[-1].timestep:
            raise ValueError(f"timestep {timestep} not after {self._ring[-1].timestep}")
        self._ring.append(HistoryEntry(timestep, pose, data.detach()))

    def entries(self) -> list[HistoryEntry]:
        return list(self._ring)

    def clear(self) -> None:
        self._ring.clear()

    def __len__(self) -> int:
        return len(self._ring)

    def __bool__(self) -> bool:
        return bool(self._ring)


def warped_history(buffer: HistoryBuffer, current_pose: Pose2D, cell: float) -> list[Tensor]:
    return [warp_tensor(e.data, e.pose, current_pose, cell) for e in buffer.entries()]


def build_history_input(buffer: HistoryBuffer, current_pose: Pose2D, cell: float) -> Tensor | None:
    """Stack ``[k,C,H,W]`` of ego-motion compensated history, or None if empty.

    Short histories are padded at the front with the oldest entry.
    """
    maps = warped_history(buffer, current_pose, cell)
    if not maps:
        return None
    maps = [maps[0]] * (buffer.k - len(maps)) + maps
    return stack(maps, axis=0)


def temporal_summation(buffer: HistoryBuffer, current_pose: Pose2D, cell: float) -> Tensor | None:
    """Elementwise mean of the warped stored maps (no padding)."""
    maps = warped_history(buffer, current_pose, cell)
    if not maps:
        return None
    return mean(stack(maps, axis=0), axis=0)


def init_msstp(cfg: ModelConfig, k: int, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    c = cfg.channels
    l1, l2 = temporal_lengths(k)
    p = {
        "msstp.g1_s0": he_normal(rng, (2 * c, c, 3, 3), dtype),
        "msstp.g1_s1": he_normal(rng, (2 * c, 2 * c, 3, 3), dtype),
        "msstp.g1_t": he_normal(rng, (2 * c, 2 * c, l1), dtype),
        "msstp.g2_s0": he_normal(rng, (4 * c, 2 * c, 3, 3), dtype),
        "msstp.g2_s1": he_normal(rng, (4 * c, 4 * c, 3, 3), dtype),
        "msstp.g2_t": he_normal(rng, (4 * c, 4 * c, l2), dtype),
        "msstp.up1": he_normal(rng, (2 * c, 6 * c, 3, 3), dtype),
        "msstp.up0": he_normal(rng, (c, 3 * c, 3, 3), dtype),
        "msstp.out0": he_normal(rng, (c, c, 3, 3), dtype),
        "msstp.out1": he_normal(rng, (c, c, 3, 3), dtype),
    }
    p["msstp.out1"].data *= 0.1  # start close to the skip-driven mean
    for name in list(p):
        p[name + "_b"] = zeros_param((p[name].shape[0],), dtype)
    p["msstp.skip_gain"] = zeros_param((1, 1, 1), dtype, 1.0)
    return p


def msstp_tensor(history: Tensor, weights) -> Tensor:
    """Predict ``[C,H,W]`` from a ``[k,C,H,W]`` history stack."""
    if history.ndim != 4:
        raise DimensionError(f"history must be [k,C,H,W], got {history.shape}")
    k, c, h, w = history.shape
    try:
        w_g1t = weights["msstp.g1_t"]
    except KeyError as exc:
        raise ConfigurationError("missing predictor weights") from exc
    if w_g1t.shape[1] != 2 * c or w_g1t.shape[2] != temporal_lengths(k)[0]:
        raise DimensionError(f"predictor weights do not fit history of shape {history.shape}")
    if h % 4 or w % 4:
        raise DimensionError(f"predictor needs spatial size divisible by 4, got {h}x{w}")

    def cv(x, name, stride=1):
        return conv2d(x, weights[name], weights[name + "_b"], stride=stride, pad=1)

    g1 = relu(cv(relu(cv(history, "msstp.g1_s0", 2)), "msstp.g1_s1"))
    g1 = relu(conv1d_temporal(g1, weights["msstp.g1_t"], weights["msstp.g1_t_b"]))
    g2 = relu(cv(relu(cv(g1, "msstp.g2_s0", 2)), "msstp.g2_s1"))
    g2 = relu(conv1d_temporal(g2, weights["msstp.g2_t"], weights["msstp.g2_t_b"]))
    if g2.shape[0] != 1:
        raise DimensionError(f"temporal reduction left {g2.shape[0]} slices")
    d1 = relu(cv(concat([upsample_nearest(g2[0]), mean(g1, axis=0)], axis=0), "msstp.up1"))
    d0 = relu(cv(concat([upsample_nearest(d1), mean(history, axis=0)], axis=0), "msstp.up0"))
    # residual on the time-averaged history keeps the output in the encoder's
    # non-negative feature range and starts training from a plain summation
    skip = mul(mean(history, axis=0), weights["msstp.skip_gain"])
    return relu(add(cv(relu(cv(d0, "msstp.out0")), "msstp.out1"), skip))


def msstp_predict(history: Tensor, weights, pose: Pose2D, node: int = 0, timestep: int = 0) -> FeatureMap:
    return FeatureMap(pseudo_id(node), timestep, pose, msstp_tensor(history, weights))


def insert_pseudo_node(contributors: list, pseudo) -> list:
    """Append the pseudo contributor when one exists."""
    return list(contributors) if pseudo is None else [*contributors, pseudo]
