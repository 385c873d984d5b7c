"""Top-down semantic memory and the intrinsic reward family.

Predicted labels are projected into the agent frame, registered back into the
world frame from the pose, and max-pooled over time into a binary per-class
map. The curiosity reward is the per-step growth of that map's bit count, so
it pays most when the same object keeps getting re-labeled from new views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .simkernel import HEADING_STEP_DEG, Pose
from .worldgen import FREE, Scene

REWARD_SEMANTIC_CURIOSITY = "semantic_curiosity"
REWARD_COVERAGE = "coverage"
REWARD_OBJECT_COUNT = "object_count"
REWARD_PREDICTION_ERROR = "prediction_error"
REWARD_NONE = "none"
REWARD_KINDS = (
    REWARD_SEMANTIC_CURIOSITY,
    REWARD_COVERAGE,
    REWARD_OBJECT_COUNT,
    REWARD_PREDICTION_ERROR,
    REWARD_NONE,
)
TRAINABLE_REWARD_KINDS = REWARD_KINDS[:4]


@dataclass(frozen=True)
class RewardConfig:
    lambda_sc: float = 2.5e-3
    reward_kind: str = REWARD_SEMANTIC_CURIOSITY

    def validate(self) -> None:
        if self.lambda_sc <= 0:
            raise ValueError("lambda_sc must be positive")
        if self.reward_kind not in REWARD_KINDS:
            raise ValueError(f"unknown reward kind {self.reward_kind!r}")


@dataclass
class SemanticMap:
    tensor: np.ndarray  # (C, W, H) bool, monotone: bits never clear
    explored: np.ndarray  # (W, H) bool
    sum_cache: int
    explored_cache: int

    @classmethod
    def empty(cls, num_classes: int, width: int, height: int) -> "SemanticMap":
        return cls(
            tensor=np.zeros((num_classes, width, height), dtype=bool),
            explored=np.zeros((width, height), dtype=bool),
            sum_cache=0,
            explored_cache=0,
        )

    @classmethod
    def for_scene(cls, scene: Scene) -> "SemanticMap":
        return cls.empty(scene.num_classes, scene.width, scene.height)

    def copy(self) -> "SemanticMap":
        return SemanticMap(self.tensor.copy(), self.explored.copy(), self.sum_cache, self.explored_cache)


# (channel, point in the agent frame)
EgoProjection = list[tuple[int, tuple[float, float]]]


def ego_project(obs, detections, pose: Pose) -> EgoProjection:
    """Labeled world cells of the frame's detections, in the agent frame."""
    theta = math.radians(pose.heading * HEADING_STEP_DEG)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    out: EgoProjection = []
    for det in detections:
        for x, y in sorted(det.cells):
            rx, ry = x - pose.x, y - pose.y
            out.append((det.predicted_class, (rx * cos_t + ry * sin_t, -rx * sin_t + ry * cos_t)))
    return out


def to_geocentric(
    proj: EgoProjection, pose: Pose, bounds: tuple[int, int]
) -> list[tuple[int, tuple[int, int]]]:
    """Invert the egocentric transform; cells rounded and clamped to bounds."""
    theta = math.radians(pose.heading * HEADING_STEP_DEG)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    width, height = bounds
    out = []
    for channel, (ex, ey) in proj:
        wx = ex * cos_t - ey * sin_t + pose.x
        wy = ex * sin_t + ey * cos_t + pose.y
        ix = min(max(int(math.floor(wx + 0.5)), 0), width - 1)
        iy = min(max(int(math.floor(wy + 0.5)), 0), height - 1)
        out.append((channel, (ix, iy)))
    return out


def update(
    smap: SemanticMap,
    geo: list[tuple[int, tuple[int, int]]],
    visible: set[tuple[int, int]] | dict,
) -> tuple[SemanticMap, int, int]:
    """Max-pool new bits into the map; returns (map, delta_sem, delta_explored)."""
    delta_sem = 0
    for channel, (x, y) in geo:
        if not smap.tensor[channel, x, y]:
            smap.tensor[channel, x, y] = True
            delta_sem += 1
    delta_explored = 0
    for x, y in visible:
        if not smap.explored[x, y]:
            smap.explored[x, y] = True
            delta_explored += 1
    smap.sum_cache += delta_sem
    smap.explored_cache += delta_explored
    return smap, delta_sem, delta_explored


def peek_update(
    smap: SemanticMap,
    geo: list[tuple[int, tuple[int, int]]],
    visible: set[tuple[int, int]] | dict,
) -> tuple[int, int]:
    """Deltas that ``update`` would produce, without mutating the map."""
    new_bits = {(c, cell) for c, cell in geo if not smap.tensor[c, cell[0], cell[1]]}
    new_cells = {cell for cell in visible if not smap.explored[cell[0], cell[1]]}
    return len(new_bits), len(new_cells)


def semantic_curiosity_reward(delta_sem: int, cfg: RewardConfig) -> float:
    if delta_sem < 0:
        raise ValueError("delta_sem must be non-negative")
    return cfg.lambda_sc * delta_sem


def coverage_reward(delta_explored: int) -> float:
    return float(delta_explored)


def object_count_reward(detections) -> float:
    return float(len(detections))


@dataclass(frozen=True)
class InconsistencyStats:
    per_object: dict[int, int]  # object id -> distinct channels set on its footprint
    histogram: dict[int, int]  # channel count -> number of objects
    mean: float  # over objects observed at least once


def inconsistency_stats(smap: SemanticMap, scene: Scene) -> InconsistencyStats:
    """How many distinct labels each object accumulated on the map."""
    per_object = {}
    for obj in scene.objects:
        channels = 0
        for c in range(smap.tensor.shape[0]):
            if any(smap.tensor[c, x, y] for x, y in obj.footprint):
                channels += 1
        per_object[obj.id] = channels
    histogram: dict[int, int] = {}
    for count in per_object.values():
        histogram[count] = histogram.get(count, 0) + 1
    observed = [v for v in per_object.values() if v > 0]
    mean = float(np.mean(observed)) if observed else 0.0
    return InconsistencyStats(per_object=per_object, histogram=histogram, mean=mean)


# One display color per channel, cycled when there are more channels.
CHANNEL_PALETTE = (
    (230, 60, 60),
    (60, 120, 230),
    (60, 200, 90),
    (235, 200, 60),
    (180, 90, 220),
)
EXPLORED_GRAY = (205, 205, 205)
UNEXPLORED_BLACK = (0, 0, 0)


def render_map(smap: SemanticMap, path) -> None:
    """Write the map as a binary portable pixmap (P6).

    Semantic bits use the channel palette (striped when a cell carries several
    channels), explored cells without bits are light gray, the rest black.
    """
    num_channels, width, height = smap.tensor.shape
    buf = bytearray(f"P6\n{width} {height}\n255\n".encode("ascii"))
    for y in range(height):
        for x in range(width):
            channels = [c for c in range(num_channels) if smap.tensor[c, x, y]]
            if channels:
                pick = channels[(x + y) % len(channels)]
                color = CHANNEL_PALETTE[pick % len(CHANNEL_PALETTE)]
            elif smap.explored[x, y]:
                color = EXPLORED_GRAY
            else:
                color = UNEXPLORED_BLACK
            buf.extend(color)
    with open(path, "wb") as fh:
        fh.write(buf)
