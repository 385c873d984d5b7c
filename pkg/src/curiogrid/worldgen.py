"""Procedural indoor-style grid scenes: walled rooms, corridors and labeled objects."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass

import numpy as np

FREE = -1
WALL = -2

# Full-scale split sizes (unlabeled / train / test) echoed into report metadata
# when a run asks for them; desk-scale runs use much smaller splits.
REFERENCE_SCALE = (72, 50, 11)


class SceneGenerationError(RuntimeError):
    """Scene could not be generated within bounded retries (overconstrained spec)."""


@dataclass(frozen=True)
class SceneSpec:
    """Deterministic recipe for one scene; equal specs yield identical scenes."""

    seed: int
    width: int = 64
    height: int = 64
    num_rooms: tuple[int, int] = (3, 6)
    num_objects: tuple[int, int] = (8, 16)
    num_classes: int = 5

    def validate(self) -> None:
        if self.width < 16 or self.height < 16:
            raise ValueError(f"scene must be at least 16x16, got {self.width}x{self.height}")
        if self.num_classes < 2:
            raise ValueError("need at least 2 object classes")
        for name, (lo, hi) in (("num_rooms", self.num_rooms), ("num_objects", self.num_objects)):
            if lo < 0 or hi < lo:
                raise ValueError(f"bad {name} range ({lo}, {hi})")
        if self.num_rooms[0] < 1:
            raise ValueError("need at least one room")


@dataclass(frozen=True)
class ObjectInstance:
    id: int
    class_id: int
    footprint: frozenset[tuple[int, int]]
    center: tuple[float, float]


@dataclass(frozen=True)
class Scene:
    width: int
    height: int
    num_classes: int
    seed: int
    grid: np.ndarray  # (width, height) int16; FREE, WALL or an object id
    objects: tuple[ObjectInstance, ...]

    def cell(self, x: int, y: int) -> int:
        return int(self.grid[x, y])

    def is_free(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height and self.grid[x, y] == FREE

    def free_cells(self) -> list[tuple[int, int]]:
        xs, ys = np.nonzero(self.grid == FREE)
        return [(int(x), int(y)) for x, y in zip(xs, ys)]


@dataclass(frozen=True)
class SceneSplit:
    """Disjoint scene-seed pools for policy training, data collection and testing."""

    unlabeled_seeds: tuple[int, ...]
    train_seeds: tuple[int, ...]
    test_seeds: tuple[int, ...]

    def validate(self) -> None:
        pools = (self.unlabeled_seeds, self.train_seeds, self.test_seeds)
        if any(len(p) == 0 for p in pools):
            raise ValueError("every split pool must be non-empty")
        all_seeds = [s for p in pools for s in p]
        if len(set(all_seeds)) != len(all_seeds):
            raise ValueError("split pools overlap")


def make_split(base_seed: int, n_unlabeled: int, n_train: int, n_test: int) -> SceneSplit:
    """Carve three disjoint blocks of scene seeds from a base seed."""
    if min(n_unlabeled, n_train, n_test) < 1:
        raise ValueError("all split sizes must be >= 1")
    start = base_seed * 1_000_003
    u = tuple(range(start, start + n_unlabeled))
    t = tuple(range(start + n_unlabeled, start + n_unlabeled + n_train))
    e = tuple(range(start + n_unlabeled + n_train, start + n_unlabeled + n_train + n_test))
    split = SceneSplit(u, t, e)
    split.validate()
    return split


def _rects_overlap(a, b) -> bool:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    return ax0 <= bx1 and bx0 <= ax1 and ay0 <= by1 and by0 <= ay1


def _free_component_count(grid: np.ndarray) -> int:
    free = grid == FREE
    seen = np.zeros_like(free)
    count = 0
    width, height = grid.shape
    for sx, sy in zip(*np.nonzero(free)):
        if seen[sx, sy]:
            continue
        count += 1
        queue = deque([(int(sx), int(sy))])
        seen[sx, sy] = True
        while queue:
            x, y = queue.popleft()
            for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
                if 0 <= nx < width and 0 <= ny < height and free[nx, ny] and not seen[nx, ny]:
                    seen[nx, ny] = True
                    queue.append((nx, ny))
    return count


def _carve_rooms(grid, rng, spec):
    lo, hi = spec.num_rooms
    target = int(rng.integers(lo, hi + 1))
    max_side = max(5, min(14, spec.width // 3, spec.height // 3))
    rooms = []
    attempts = 0
    while len(rooms) < target and attempts < 400 * target:
        attempts += 1
        rw = int(rng.integers(5, max_side + 1))
        rh = int(rng.integers(5, max_side + 1))
        if rw > spec.width - 2 or rh > spec.height - 2:
            continue
        x0 = int(rng.integers(1, spec.width - 1 - rw + 1))
        y0 = int(rng.integers(1, spec.height - 1 - rh + 1))
        rect = (x0, y0, x0 + rw - 1, y0 + rh - 1)
        inflated = (x0 - 1, y0 - 1, x0 + rw, y0 + rh)
        if any(_rects_overlap(inflated, r) for r in rooms):
            continue
        rooms.append(rect)
    if len(rooms) < target:
        raise SceneGenerationError(
            f"placed only {len(rooms)}/{target} rooms on a {spec.width}x{spec.height} grid"
        )
    for x0, y0, x1, y1 in rooms:
        grid[x0 : x1 + 1, y0 : y1 + 1] = FREE
    return rooms


def _carve_corridors(grid, rng, rooms):
    centers = [((x0 + x1) // 2, (y0 + y1) // 2) for x0, y0, x1, y1 in rooms]
    for (ax, ay), (bx, by) in zip(centers, centers[1:]):
        horizontal_first = bool(rng.integers(2))
        if horizontal_first:
            for x in range(min(ax, bx), max(ax, bx) + 1):
                grid[x, ay] = FREE
            for y in range(min(ay, by), max(ay, by) + 1):
                grid[bx, y] = FREE
        else:
            for y in range(min(ay, by), max(ay, by) + 1):
                grid[ax, y] = FREE
            for x in range(min(ax, bx), max(ax, bx) + 1):
                grid[x, by] = FREE


def _wall_adjacent(grid, cells) -> bool:
    width, height = grid.shape
    for x, y in cells:
        for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
            if 0 <= nx < width and 0 <= ny < height and grid[nx, ny] == WALL:
                return True
    return False


def _place_objects(grid, rng, rooms, spec):
    lo, hi = spec.num_objects
    target = int(rng.integers(lo, hi + 1))
    if target == 0:
        return []
    c = spec.num_classes
    if target >= c:
        class_ids = list(range(c)) + [int(rng.integers(c)) for _ in range(target - c)]
    else:
        class_ids = [int(rng.integers(c)) for _ in range(target)]
    rng.shuffle(class_ids)

    objects = []
    for obj_id, class_id in enumerate(class_ids):
        placed = False
        for _ in range(400):
            x0, y0, x1, y1 = rooms[int(rng.integers(len(rooms)))]
            fw = int(rng.integers(1, 4))
            fh = int(rng.integers(1, 4))
            if fw > x1 - x0 or fh > y1 - y0:
                continue
            # Anchor the footprint flush against one of the room's edges so it
            # reads as furniture along a wall.
            edge = int(rng.integers(4))
            if edge == 0:
                ox, oy = int(rng.integers(x0, x1 - fw + 2)), y0
            elif edge == 1:
                ox, oy = int(rng.integers(x0, x1 - fw + 2)), y1 - fh + 1
            elif edge == 2:
                ox, oy = x0, int(rng.integers(y0, y1 - fh + 2))
            else:
                ox, oy = x1 - fw + 1, int(rng.integers(y0, y1 - fh + 2))
            cells = [(x, y) for x in range(ox, ox + fw) for y in range(oy, oy + fh)]
            if any(grid[x, y] != FREE for x, y in cells):
                continue
            if not _wall_adjacent(grid, cells):
                continue
            for x, y in cells:
                grid[x, y] = obj_id
            if _free_component_count(grid) != 1:
                for x, y in cells:
                    grid[x, y] = FREE
                continue
            center = (
                float(np.mean([x + 0.5 for x, _ in cells])),
                float(np.mean([y + 0.5 for _, y in cells])),
            )
            objects.append(ObjectInstance(obj_id, class_id, frozenset(cells), center))
            placed = True
            break
        if not placed:
            raise SceneGenerationError(
                f"could not place object {obj_id} after bounded retries"
            )
    return objects


def _validate_scene(scene: Scene) -> None:
    grid = scene.grid
    if not (
        np.all(grid[0, :] == WALL)
        and np.all(grid[-1, :] == WALL)
        and np.all(grid[:, 0] == WALL)
        and np.all(grid[:, -1] == WALL)
    ):
        raise SceneGenerationError("scene border is not fully walled")
    ids = {obj.id for obj in scene.objects}
    for v in np.unique(grid):
        if v >= 0 and int(v) not in ids:
            raise SceneGenerationError(f"grid references unknown object {int(v)}")
    seen_cells: set[tuple[int, int]] = set()
    for obj in scene.objects:
        if not obj.footprint:
            raise SceneGenerationError("empty object footprint")
        if seen_cells & obj.footprint:
            raise SceneGenerationError("object footprints overlap")
        seen_cells |= obj.footprint
        for x, y in obj.footprint:
            if grid[x, y] != obj.id:
                raise SceneGenerationError("grid/footprint mismatch")
    if _free_component_count(grid) != 1:
        raise SceneGenerationError("free space is not a single connected component")


def generate_scene(spec: SceneSpec) -> Scene:
    """Generate the scene described by ``spec``; pure function of the spec."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    grid = np.full((spec.width, spec.height), WALL, dtype=np.int16)
    rooms = _carve_rooms(grid, rng, spec)
    _carve_corridors(grid, rng, rooms)
    if _free_component_count(grid) != 1:
        raise SceneGenerationError("rooms and corridors did not connect")
    objects = _place_objects(grid, rng, rooms, spec)
    scene = Scene(
        width=spec.width,
        height=spec.height,
        num_classes=spec.num_classes,
        seed=spec.seed,
        grid=grid,
        objects=tuple(objects),
    )
    _validate_scene(scene)
    return scene


def _rle_encode(values) -> list[list[int]]:
    runs: list[list[int]] = []
    for v in values:
        v = int(v)
        if runs and runs[-1][0] == v:
            runs[-1][1] += 1
        else:
            runs.append([v, 1])
    return runs


def _rle_decode(runs) -> list[int]:
    out: list[int] = []
    for value, count in runs:
        out.extend([int(value)] * int(count))
    return out


def scene_to_json(scene: Scene) -> str:
    doc = {
        "width": scene.width,
        "height": scene.height,
        "num_classes": scene.num_classes,
        "seed": scene.seed,
        "grid_rle": _rle_encode(scene.grid.flatten(order="C")),
        "objects": [
            {
                "id": obj.id,
                "class_id": obj.class_id,
                "cells": sorted([x, y] for x, y in obj.footprint),
                "center": [obj.center[0], obj.center[1]],
            }
            for obj in scene.objects
        ],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def scene_from_json(text: str) -> Scene:
    doc = json.loads(text)
    flat = _rle_decode(doc["grid_rle"])
    grid = np.array(flat, dtype=np.int16).reshape((doc["width"], doc["height"]), order="C")
    objects = tuple(
        ObjectInstance(
            id=o["id"],
            class_id=o["class_id"],
            footprint=frozenset((int(x), int(y)) for x, y in o["cells"]),
            center=(float(o["center"][0]), float(o["center"][1])),
        )
        for o in doc["objects"]
    )
    return Scene(
        width=doc["width"],
        height=doc["height"],
        num_classes=doc["num_classes"],
        seed=doc["seed"],
        grid=grid,
        objects=objects,
    )
