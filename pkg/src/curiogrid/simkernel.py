"""Agent embodiment: discrete actions, pose updates and raycast sensing.

The sensor traces rays through the grid (Amanatides-Woo style traversal) and
reports per-ray depth plus the identity of whatever stopped the ray; this frame
plays the role of an RGB-D observation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .worldgen import FREE, WALL, Scene

NUM_HEADINGS = 12
HEADING_STEP_DEG = 360.0 / NUM_HEADINGS

HIT_WALL = "wall"
HIT_OBJECT = "object"
HIT_MAX_RANGE = "max_range"


class Action(IntEnum):
    FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: int  # 0..11, 30 degree increments; heading 0 points along +x


@dataclass(frozen=True)
class SensorParams:
    fov: float = 90.0
    num_rays: int = 31
    max_range: float = 16.0
    forward_step: float = 1.0

    def validate(self) -> None:
        if self.num_rays < 1 or self.num_rays % 2 == 0:
            raise ValueError("num_rays must be odd so a center ray exists")
        if self.max_range < 1:
            raise ValueError("max_range must be >= 1")
        if self.fov <= 0 or self.forward_step <= 0:
            raise ValueError("fov and forward_step must be positive")


@dataclass(frozen=True)
class RayHit:
    angle_offset: float  # degrees relative to heading
    distance: float
    kind: str  # HIT_WALL | HIT_OBJECT | HIT_MAX_RANGE
    object_id: int | None = None


@dataclass(frozen=True)
class Observation:
    rays: tuple[RayHit, ...]
    visible_cells: dict[tuple[int, int], int]  # cell -> grid code seen there
    max_range: float

    def depths(self) -> np.ndarray:
        """Per-ray distances normalized by max range, in ray order."""
        return np.array([r.distance / self.max_range for r in self.rays])


def heading_vector(heading: int) -> tuple[float, float]:
    a = math.radians(heading * HEADING_STEP_DEG)
    return math.cos(a), math.sin(a)


def pose_valid(scene: Scene, pose: Pose) -> bool:
    return scene.is_free(int(math.floor(pose.x)), int(math.floor(pose.y)))


def step(scene: Scene, pose: Pose, action: Action, params: SensorParams | None = None) -> Pose:
    """Apply one action; blocked forward moves are silent no-ops."""
    if action == Action.TURN_LEFT:
        return Pose(pose.x, pose.y, (pose.heading - 1) % NUM_HEADINGS)
    if action == Action.TURN_RIGHT:
        return Pose(pose.x, pose.y, (pose.heading + 1) % NUM_HEADINGS)
    stride = params.forward_step if params is not None else 1.0
    ux, uy = heading_vector(pose.heading)
    nx, ny = pose.x + stride * ux, pose.y + stride * uy
    if not scene.is_free(int(math.floor(nx)), int(math.floor(ny))):
        return pose
    return Pose(nx, ny, pose.heading)


_NO_HIT = -1000  # kernel marker for a ray that ran out to max range


def _render_kernel(grid, x0, y0, dirs, max_range, dists, codes, vis_x, vis_y, seen):
    """Trace every ray and record first-touch-deduplicated visible cells.

    Plain numpy/Python so it runs anywhere; compiled with numba when present.
    Returns the number of visible cells written into vis_x/vis_y.
    """
    n_vis = 0
    start_x = int(np.floor(x0))
    start_y = int(np.floor(y0))
    seen[start_x, start_y] = True
    vis_x[n_vis] = start_x
    vis_y[n_vis] = start_y
    n_vis += 1
    for i in range(dirs.shape[0]):
        dx = dirs[i, 0]
        dy = dirs[i, 1]
        cx = start_x
        cy = start_y
        if dx > 1e-12:
            step_x, t_max_x, t_dx = 1, (cx + 1 - x0) / dx, 1.0 / dx
        elif dx < -1e-12:
            step_x, t_max_x, t_dx = -1, (cx - x0) / dx, -1.0 / dx
        else:
            step_x, t_max_x, t_dx = 0, np.inf, np.inf
        if dy > 1e-12:
            step_y, t_max_y, t_dy = 1, (cy + 1 - y0) / dy, 1.0 / dy
        elif dy < -1e-12:
            step_y, t_max_y, t_dy = -1, (cy - y0) / dy, -1.0 / dy
        else:
            step_y, t_max_y, t_dy = 0, np.inf, np.inf
        while True:
            if t_max_x <= t_max_y:
                t = t_max_x
                cx += step_x
                t_max_x += t_dx
            else:
                t = t_max_y
                cy += step_y
                t_max_y += t_dy
            if t > max_range:
                dists[i] = max_range
                codes[i] = _NO_HIT
                break
            code = grid[cx, cy]
            if not seen[cx, cy]:
                seen[cx, cy] = True
                vis_x[n_vis] = cx
                vis_y[n_vis] = cy
                n_vis += 1
            if code != FREE:
                dists[i] = t
                codes[i] = code
                break
    return n_vis


try:  # pragma: no cover - exercised indirectly through render()
    from numba import njit

    _render_kernel = njit(cache=True)(_render_kernel)
except ImportError:  # pragma: no cover
    pass


_OFFSET_CACHE: dict[tuple[float, int], np.ndarray] = {}


def _ray_offsets(params: SensorParams) -> np.ndarray:
    key = (params.fov, params.num_rays)
    offsets = _OFFSET_CACHE.get(key)
    if offsets is None:
        offsets = np.linspace(-params.fov / 2.0, params.fov / 2.0, params.num_rays)
        _OFFSET_CACHE[key] = offsets
    return offsets


def render(scene: Scene, pose: Pose, params: SensorParams) -> Observation:
    """Trace ``num_rays`` rays evenly spanning the field of view about heading."""
    params.validate()
    offsets = _ray_offsets(params)
    angles = np.radians(pose.heading * HEADING_STEP_DEG + offsets)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    n = params.num_rays
    dists = np.empty(n)
    codes = np.empty(n, dtype=np.int32)
    cap = n * (2 * int(math.ceil(params.max_range)) + 3) + 1
    vis_x = np.empty(cap, dtype=np.int32)
    vis_y = np.empty(cap, dtype=np.int32)
    seen = np.zeros((scene.width, scene.height), dtype=np.bool_)
    n_vis = _render_kernel(
        scene.grid, pose.x, pose.y, dirs, float(params.max_range), dists, codes, vis_x, vis_y, seen
    )
    grid = scene.grid
    rays = []
    for i in range(n):
        code = int(codes[i])
        if code == _NO_HIT:
            rays.append(RayHit(float(offsets[i]), float(dists[i]), HIT_MAX_RANGE))
        elif code == WALL:
            rays.append(RayHit(float(offsets[i]), float(dists[i]), HIT_WALL))
        else:
            rays.append(RayHit(float(offsets[i]), float(dists[i]), HIT_OBJECT, object_id=code))
    visible = {}
    for j in range(n_vis):
        x, y = int(vis_x[j]), int(vis_y[j])
        visible[(x, y)] = int(grid[x, y])
    return Observation(rays=tuple(rays), visible_cells=visible, max_range=params.max_range)


def _draw_free_pose(scene: Scene, rng: np.random.Generator) -> Pose:
    xs, ys = np.nonzero(scene.grid == FREE)
    idx = int(rng.integers(len(xs)))
    heading = int(rng.integers(NUM_HEADINGS))
    return Pose(float(xs[idx]) + 0.5, float(ys[idx]) + 0.5, heading)


def random_free_pose(scene: Scene, rng_seed: int) -> Pose:
    """Uniform cell-center pose over free cells with uniform heading."""
    return _draw_free_pose(scene, np.random.default_rng(rng_seed))
