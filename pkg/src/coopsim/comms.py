"""Lossy V2X channel: per-link Bernoulli drops, contact sets, curriculum.

All randomness comes from keyed streams: a stream for ``(seed, *key)`` is a
fresh numpy Generator seeded from ``SeedSequence([seed, *key])``, so every
outcome depends only on its key and never on evaluation order.

A directed link ``j -> i`` at timestep ``t`` draws one uniform ``u`` from
the stream keyed by ``(seed, t, i)`` (one draw per node in ascending id
order) and delivers iff ``u >= p``. Reusing the same uniforms for every
drop rate makes traces nested: anything delivered at ``p`` is also
delivered at any lower rate.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

_LINK_TAG = 0x11
_CURRICULUM_TAG = 0xC0


def keyed_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(k) for k in key)]))


def _check_rate(p: float) -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"drop rate must lie in [0, 1], got {p}")
    return p


@dataclass(frozen=True)
class ChannelConfig:
    p: float
    seed: int

    def __post_init__(self):
        _check_rate(self.p)


def _stream_key(stream) -> tuple[int, ...]:
    return tuple(stream) if isinstance(stream, (tuple, list)) else (stream,)


def link_uniforms(seed: int, t: int, receiver: int, num_nodes: int, stream: int | tuple[int, ...] = 0) -> np.ndarray:
    """Uniforms for the incoming links of ``receiver`` at ``t``, indexed by sender id.

    ``stream`` names an independent family of traces (e.g. one per
    scenario) under the same seed.
    """
    return keyed_rng(seed, _LINK_TAG, *_stream_key(stream), t, receiver).random(num_nodes)


def sample_received_set(neighbors, p: float, rng_stream: np.random.Generator) -> set[int]:
    """Keep each neighbour independently with probability ``1 - p``.

    One uniform is drawn per neighbour in ascending id order.
    """
    p = _check_rate(p)
    nbrs = sorted(neighbors)
    u = rng_stream.random(len(nbrs))
    return {j for j, uj in zip(nbrs, u) if uj >= p}


@dataclass(frozen=True)
class LinkTrace:
    """Delivery outcomes ``delivered[t, dst, src]`` for one scenario."""

    delivered: np.ndarray
    p: float
    seed: int

    @property
    def num_steps(self) -> int:
        return self.delivered.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.delivered.shape[1]

    def received(self, i: int, t: int) -> set[int]:
        """R_i^(t): senders whose message reached ``i`` at ``t``."""
        return {int(j) for j in np.nonzero(self.delivered[t, i])[0] if j != i}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "src", "dst", "delivered"])
        for t in range(self.num_steps):
            for dst in range(self.num_nodes):
                for src in range(self.num_nodes):
                    if src != dst:
                        w.writerow([t, src, dst, int(self.delivered[t, dst, src])])
        return buf.getvalue()


def full_topology(num_nodes: int) -> list[set[int]]:
    """Every node neighbours every other node."""
    return [set(range(num_nodes)) - {i} for i in range(num_nodes)]


def build_trace(num_nodes: int, num_steps: int, p: float, seed: int, stream: int | tuple[int, ...] = 0,
                topology: list[set[int]] | None = None) -> LinkTrace:
    """Roll delivery outcomes for every directed link and timestep."""
    p = _check_rate(p)
    topology = topology if topology is not None else full_topology(num_nodes)
    delivered = np.zeros((num_steps, num_nodes, num_nodes), dtype=bool)
    for t in range(num_steps):
        for i in range(num_nodes):
            u = link_uniforms(seed, t, i, num_nodes, stream)
            for j in topology[i]:
                delivered[t, i, j] = u[j] >= p
    return LinkTrace(delivered, p, int(seed))


def past_contact_set(trace: LinkTrace, i: int, t: int, k: int) -> set[int]:
    """P_i^(t): union of R_i^(t - tau) for tau = 1..k, truncated at t = 0."""
    out: set[int] = set()
    for tau in range(1, k + 1):
        if t - tau < 0:
            break
        out |= trace.received(i, t - tau)
    return out


@dataclass
class CurriculumSchedule:
    """Per-epoch drop-rate bounds; ``p_high`` ramps linearly then holds."""

    epochs: int = 40
    ramp_epochs: int = 30
    start_high: float = 0.1
    end_high: float = 1.0
    p_low_value: float = 0.0
    lows: list[float] | None = field(default=None, repr=False)
    highs: list[float] | None = field(default=None, repr=False)

    def bounds(self, epoch: int) -> tuple[float, float]:
        if not 0 <= epoch < self.epochs:
            raise ConfigurationError(f"epoch {epoch} outside schedule of {self.epochs}")
        if self.highs is not None:
            return float(self.lows[epoch]), float(self.highs[epoch])
        if self.ramp_epochs <= 1:
            hi = self.end_high
        else:
            frac = min(epoch / (self.ramp_epochs - 1), 1.0)
            hi = self.start_high + frac * (self.end_high - self.start_high)
        return self.p_low_value, hi

    def p_low(self, epoch: int) -> float:
        return self.bounds(epoch)[0]

    def p_high(self, epoch: int) -> float:
        return self.bounds(epoch)[1]

    @classmethod
    def fixed(cls, epochs: int, low: float, high: float) -> "CurriculumSchedule":
        """Constant bounds every epoch (no curriculum)."""
        return cls(epochs=epochs, ramp_epochs=0, lows=[low] * epochs, highs=[high] * epochs)

    @classmethod
    def scaled(cls, epochs: int) -> "CurriculumSchedule":
        """The default 40/30 ramp compressed to ``epochs`` epochs."""
        return cls(epochs=epochs, ramp_epochs=max(1, round(epochs * 0.75)))


def curriculum_sample_p(schedule: CurriculumSchedule, epoch: int, rng_stream: np.random.Generator) -> float:
    lo, hi = schedule.bounds(epoch)
    return float(rng_stream.uniform(lo, hi))


def curriculum_stream(seed: int, epoch: int, item: int) -> np.random.Generator:
    return keyed_rng(seed, _CURRICULUM_TAG, epoch, item)
