"""Synthetic view-conditioned object detector.

Predictions for an object depend on the viewpoint bucket (bearing sector x
range band), are deterministic per (object, bucket, model version), and are
drawn from a per-(class, bucket) confusion row. Labeled samples sharpen the
rows through Dirichlet-style smoothing toward the observed label counts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .simkernel import HIT_OBJECT, Observation, Pose, SensorParams, _draw_free_pose
from .worldgen import Scene

NUM_SECTORS = 8
SECTOR_DEG = 360.0 / NUM_SECTORS
DEFAULT_NUM_BUCKETS = 2 * NUM_SECTORS
FINETUNE_PRIOR_WEIGHT = 8.0


@dataclass(frozen=True)
class ViewBucket:
    sector: int  # 0..7, 45 degree sector of the object->agent bearing
    far: bool  # beyond max_range / 2

    @property
    def index(self) -> int:
        return self.sector + NUM_SECTORS * int(self.far)

    @classmethod
    def from_index(cls, index: int) -> "ViewBucket":
        return cls(sector=index % NUM_SECTORS, far=index >= NUM_SECTORS)


def view_bucket(pose: Pose, center: tuple[float, float], max_range: float) -> ViewBucket:
    """Bucket of the agent's viewpoint on an object; heading-independent."""
    vx, vy = pose.x - center[0], pose.y - center[1]
    bearing = math.degrees(math.atan2(vy, vx)) % 360.0
    sector = int(((bearing + SECTOR_DEG / 2.0) % 360.0) // SECTOR_DEG)
    dist = math.hypot(vx, vy)
    return ViewBucket(sector=sector, far=dist >= max_range / 2.0)


def default_confusable_partners(num_classes: int) -> tuple[int, ...]:
    """Designated look-alike class per class (confusions are asymmetric)."""
    if num_classes >= 5:
        base = [3, 3, 0, 0, 0]
        return tuple(base + [c - 1 for c in range(5, num_classes)])
    return tuple((c + 1) % num_classes for c in range(num_classes))


@dataclass(frozen=True)
class DetectorModel:
    num_classes: int
    num_buckets: int
    version: int
    confusion: np.ndarray  # (C, B, C), each row a distribution over predicted class
    counts: np.ndarray  # (C, B, C) labeled observations seen per row
    prior: np.ndarray  # (C, B, C) pretrained rows, the smoothing prior

    def validate(self) -> None:
        c, b = self.num_classes, self.num_buckets
        if self.confusion.shape != (c, b, c) or self.counts.shape != (c, b, c):
            raise ValueError("confusion/counts shape mismatch")
        if np.any(self.confusion < 0):
            raise ValueError("negative confusion entry")
        if not np.allclose(self.confusion.sum(axis=2), 1.0, atol=1e-9):
            raise ValueError("confusion rows must sum to 1")


@dataclass(frozen=True)
class Detection:
    object_id: int
    true_class: int  # ground truth; never exposed to the unsupervised phase
    predicted_class: int
    confidence: float
    bucket: ViewBucket
    cells: frozenset[tuple[int, int]]


@dataclass(frozen=True)
class BlindDetection:
    """Label-free view of a detection, safe to hand to exploration policies."""

    predicted_class: int
    confidence: float
    cells: frozenset[tuple[int, int]]


def pretrained_model(
    num_classes: int,
    num_buckets: int = DEFAULT_NUM_BUCKETS,
    noise: float = 0.35,
    seed: int = 0,
    partners: tuple[int, ...] | None = None,
) -> DetectorModel:
    """Build the starting detector.

    Each (class, bucket) row is either concentrated on the true class or, with
    probability ``noise``, shifted onto the class's confusable partner so the
    same object reads differently from different viewpoints. When noise > 0,
    every class is guaranteed at least one correct and one confused bucket.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if not 0 <= noise < 1:
        raise ValueError("noise must be in [0, 1)")
    if partners is None:
        partners = default_confusable_partners(num_classes)
    rng = np.random.default_rng(seed)
    c, b = num_classes, num_buckets
    confusion = np.zeros((c, b, c))
    if noise == 0:
        for cls in range(c):
            confusion[cls, :, cls] = 1.0
    else:
        correct = rng.random((c, b)) >= noise
        for cls in range(c):
            if correct[cls].all():
                correct[cls, int(rng.integers(b))] = False
            elif not correct[cls].any():
                correct[cls, int(rng.integers(b))] = True
            for bk in range(b):
                row = confusion[cls, bk]
                if correct[cls, bk]:
                    mass = 0.8 + 0.15 * rng.random()
                    row[:] = (1.0 - mass) / (c - 1)
                    row[cls] = mass
                else:
                    # Confused rows lean on the partner but stay scattered, so
                    # circling an object surfaces several different labels.
                    partner = partners[cls]
                    p_mass = 0.34 + 0.06 * rng.random()
                    t_mass = 0.15 if c > 2 else 1.0 - p_mass
                    rest = 1.0 - p_mass - t_mass
                    row[:] = rest / (c - 2) if c > 2 else 0.0
                    row[partner] = p_mass
                    row[cls] = t_mass
        confusion /= confusion.sum(axis=2, keepdims=True)
    model = DetectorModel(
        num_classes=c,
        num_buckets=b,
        version=0,
        confusion=confusion,
        counts=np.zeros((c, b, c), dtype=np.int64),
        prior=confusion.copy(),
    )
    model.validate()
    return model


_M64 = (1 << 64) - 1


def _hash_unit(a: int, b: int, c: int) -> float:
    """Deterministic uniform draw in [0, 1) from three ints (splitmix64 mix)."""
    x = (
        a * 0x9E3779B97F4A7C15 + b * 0xBF58476D1CE4E5B9 + c * 0x94D049BB133111EB + 0xD6E8FEB86659FD93
    ) & _M64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _M64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _M64
    x ^= x >> 31
    return x / 2**64


def _sample_prediction(model: DetectorModel, true_class: int, bucket_index: int, object_id: int) -> int:
    row = model.confusion[true_class, bucket_index]
    # Fixed per (object, bucket, version): inconsistency is a property of the
    # viewpoint, not per-frame noise.
    u = _hash_unit(object_id, bucket_index, model.version)
    return int(min(np.searchsorted(np.cumsum(row), u, side="right"), model.num_classes - 1))


def detect(model: DetectorModel, scene: Scene, obs: Observation, pose: Pose) -> list[Detection]:
    """One detection per object visible in the frame, ordered by object id."""
    # visible_cells carries the grid code per cell; object cells appear there
    # exactly when a ray struck them.
    hit_cells: dict[int, set[tuple[int, int]]] = {}
    for cell, code in obs.visible_cells.items():
        if code >= 0:
            hit_cells.setdefault(code, set()).add(cell)
    detections = []
    for obj_id in sorted(hit_cells):
        obj = scene.objects[obj_id]
        bucket = view_bucket(pose, obj.center, obs.max_range)
        predicted = _sample_prediction(model, obj.class_id, bucket.index, obj_id)
        confidence = float(model.confusion[obj.class_id, bucket.index, predicted])
        detections.append(
            Detection(
                object_id=obj_id,
                true_class=obj.class_id,
                predicted_class=predicted,
                confidence=confidence,
                bucket=bucket,
                cells=frozenset(hit_cells[obj_id]),
            )
        )
    # Footprints are disjoint so cell conflicts cannot normally occur; resolve
    # defensively anyway: higher confidence keeps the cell, ties to lower id.
    claimed: set[tuple[int, int]] = set()
    resolved = []
    for det in sorted(detections, key=lambda d: (-d.confidence, d.object_id)):
        cells = det.cells - claimed
        claimed |= cells
        resolved.append(replace(det, cells=frozenset(cells)))
    resolved.sort(key=lambda d: d.object_id)
    return resolved


def strip_labels(detections: list[Detection]) -> list[BlindDetection]:
    return [BlindDetection(d.predicted_class, d.confidence, d.cells) for d in detections]


class BlindDetector:
    """Detector handle for the unsupervised phase; exposes no ground truth."""

    def __init__(self, model: DetectorModel, scene: Scene):
        self._model = model
        self._scene = scene

    @property
    def num_classes(self) -> int:
        return self._model.num_classes

    def detect(self, obs: Observation, pose: Pose) -> list[BlindDetection]:
        return strip_labels(detect(self._model, self._scene, obs, pose))


def finetune(model: DetectorModel, samples: list[tuple[int, int, int]]) -> DetectorModel:
    """Fold labeled (true_class, bucket, label) samples into a new model.

    Rows move toward the empirical label counts with the pretrained row as a
    prior of weight FINETUNE_PRIOR_WEIGHT; sample order never matters.
    """
    c, b = model.num_classes, model.num_buckets
    for i, (tc, bk, label) in enumerate(samples):
        if not (0 <= tc < c and 0 <= bk < b and 0 <= label < c):
            raise ValueError(f"sample {i} out of range: {(tc, bk, label)}")
    counts = model.counts.copy()
    for tc, bk, label in samples:
        counts[tc, bk, label] += 1
    totals = counts.sum(axis=2, keepdims=True)
    confusion = (counts + FINETUNE_PRIOR_WEIGHT * model.prior) / (totals + FINETUNE_PRIOR_WEIGHT)
    confusion /= confusion.sum(axis=2, keepdims=True)
    new_model = DetectorModel(
        num_classes=c,
        num_buckets=b,
        version=model.version + 1,
        confusion=confusion,
        counts=counts,
        prior=model.prior,
    )
    new_model.validate()
    return new_model


@dataclass(frozen=True)
class EvalReport:
    per_class: dict[int, float]  # classes with zero detections are absent
    totals: dict[int, int]
    macro: float
    num_detections: int


def evaluate(
    model: DetectorModel,
    scenes: list[Scene],
    n_poses_per_scene: int,
    seed: int,
    params: SensorParams | None = None,
) -> EvalReport:
    """Detection accuracy per class over random free poses in ``scenes``."""
    if n_poses_per_scene < 1:
        raise ValueError("n_poses_per_scene must be >= 1")
    if params is None:
        params = SensorParams()
    from .simkernel import render  # local import to avoid cycle at module load

    correct = np.zeros(model.num_classes, dtype=np.int64)
    total = np.zeros(model.num_classes, dtype=np.int64)
    for i, scene in enumerate(scenes):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        for _ in range(n_poses_per_scene):
            pose = _draw_free_pose(scene, rng)
            obs = render(scene, pose, params)
            for det in detect(model, scene, obs, pose):
                total[det.true_class] += 1
                if det.predicted_class == det.true_class:
                    correct[det.true_class] += 1
    per_class = {c: float(correct[c] / total[c]) for c in range(model.num_classes) if total[c] > 0}
    totals = {c: int(total[c]) for c in range(model.num_classes) if total[c] > 0}
    macro = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalReport(per_class=per_class, totals=totals, macro=macro, num_detections=int(total.sum()))


def model_to_json(model: DetectorModel) -> str:
    doc = {
        "num_classes": model.num_classes,
        "num_buckets": model.num_buckets,
        "version": model.version,
        "confusion": model.confusion.tolist(),
        "counts": model.counts.tolist(),
        "prior": model.prior.tolist(),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def model_from_json(text: str) -> DetectorModel:
    doc = json.loads(text)
    model = DetectorModel(
        num_classes=doc["num_classes"],
        num_buckets=doc["num_buckets"],
        version=doc["version"],
        confusion=np.array(doc["confusion"], dtype=float),
        counts=np.array(doc["counts"], dtype=np.int64),
        prior=np.array(doc["prior"], dtype=float),
    )
    model.validate()
    return model
