"""Deterministic generator of small multi-task shape datasets.

Images are grayscale squares with background noise and 0-3 bright shapes
(ellipse, rectangle, ring).  Each dataset declares which annotation types it
carries; samples then hold exactly those: a multi-hot label vector, tight
bounding boxes, and/or per-class binary masks.  Everything is seeded, and
every sample derives its own child seed, so regeneration is bit-identical
and per-image generation could run in parallel.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .losses import BoxTarget

__all__ = [
    "SHAPE_GENERATORS",
    "MIN_IMAGE_SIZE",
    "SynthDatasetSpec",
    "SynthSample",
    "derive_seed",
    "generate_dataset",
    "flip_sample",
    "augment",
    "split",
    "few_shot_subset",
    "sample_classes",
    "subtask_samples",
    "save_dataset",
    "load_dataset",
    "preset_cls_only",
    "preset_cls_loc",
    "preset_cls_loc_seg",
    "preset_organ_pairs",
    "preset_loc_only",
]

SHAPE_GENERATORS = ("ellipse", "rectangle", "ring")
MIN_IMAGE_SIZE = 12


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from arbitrary hashable parts (SHA-256 based)."""
    digest = hashlib.sha256(repr(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class SynthDatasetSpec:
    """Recipe for one dataset: size, shapes, annotation types, seed."""

    dataset_id: str
    num_images: int
    tasks: tuple[str, ...]
    image_size: int = 32
    shape_classes: tuple[str, ...] = SHAPE_GENERATORS
    noise_level: float = 0.05
    seed: int = 0
    min_instances: int = 0
    max_instances: int = 3
    subtasks: tuple[str, ...] = ()
    round_robin_classes: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "shape_classes", tuple(self.shape_classes))
        object.__setattr__(self, "subtasks", tuple(self.subtasks))
        if self.num_images < 1:
            raise ValueError("num_images must be >= 1")
        if not self.tasks:
            raise ValueError("tasks must be nonempty")
        bad = set(self.tasks) - {"cls", "loc", "seg"}
        if bad:
            raise ValueError(f"unknown tasks {sorted(bad)}")
        if self.image_size < MIN_IMAGE_SIZE:
            raise ValueError(
                f"image_size {self.image_size} too small to fit the minimum "
                f"shape (need >= {MIN_IMAGE_SIZE})"
            )
        unknown = set(self.shape_classes) - set(SHAPE_GENERATORS)
        if unknown:
            raise ValueError(f"unknown shape generators {sorted(unknown)}")
        if not (0 <= self.min_instances <= self.max_instances <= 3):
            raise ValueError("instance counts must satisfy 0 <= min <= max <= 3")
        if set(self.subtasks) - set(self.shape_classes):
            raise ValueError("subtasks must name shape classes of this dataset")

    @property
    def num_classes(self) -> int:
        return len(self.shape_classes)

    def model_spec(self):
        from .model import DatasetModelSpec

        n = self.num_classes
        return DatasetModelSpec(
            dataset_id=self.dataset_id,
            cls_classes=n if "cls" in self.tasks else None,
            loc_classes=n if "loc" in self.tasks else None,
            seg_classes=n if "seg" in self.tasks else None,
        )


@dataclass(frozen=True)
class SynthSample:
    """One image with whatever annotations its dataset declares."""

    sample_id: int
    image: np.ndarray
    labels: np.ndarray | None = None
    boxes: BoxTarget | None = None
    mask: np.ndarray | None = None


def _shape_support(kind: str, size: int, cx: int, cy: int, rx: int, ry: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "ellipse":
        return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(xx - cx) <= rx) & (np.abs(yy - cy) <= ry)
    if kind == "ring":
        outer = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        inner = ((xx - cx) / (0.55 * rx)) ** 2 + ((yy - cy) / (0.55 * ry)) ** 2 <= 1.0
        return outer & ~inner
    raise ValueError(f"unknown shape kind '{kind}'")


def _tight_box(support: np.ndarray, size: int) -> tuple[float, float, float, float]:
    rows = np.flatnonzero(support.any(axis=1))
    cols = np.flatnonzero(support.any(axis=0))
    r0, r1 = int(rows[0]), int(rows[-1])
    c0, c1 = int(cols[0]), int(cols[-1])
    cx = (c0 + c1 + 1) / 2.0 / size
    cy = (r0 + r1 + 1) / 2.0 / size
    w = (c1 - c0 + 1) / size
    h = (r1 - r0 + 1) / size
    return (cx, cy, w, h)


def _generate_sample(spec: SynthDatasetSpec, index: int) -> SynthSample:
    rs = np.random.RandomState(derive_seed(spec.seed, "image", index))
    size = spec.image_size
    image = rs.uniform(0.0, 0.2, (size, size))
    n_instances = int(rs.randint(spec.min_instances, spec.max_instances + 1))
    r_min = max(3, size // 8)
    r_max = max(r_min + 1, round(size * 0.22))
    instance_classes: list[int] = []
    instance_supports: list[np.ndarray] = []
    placed: list[tuple[int, int, int, int]] = []
    for j in range(n_instances):
        if spec.round_robin_classes:
            c = (index + j) % spec.num_classes
        else:
            c = int(rs.randint(spec.num_classes))
        # rejection-sample a placement that avoids earlier instances so
        # blended shapes do not scramble the class evidence; give up after a
        # few tries and allow the overlap
        for _ in range(8):
            rx = int(rs.randint(r_min, r_max + 1))
            ry = int(rs.randint(r_min, r_max + 1))
            cx = int(rs.randint(rx + 1, size - rx - 1))
            cy = int(rs.randint(ry + 1, size - ry - 1))
            clear = all(
                abs(cx - px) > (rx + prx) * 0.8 or abs(cy - py) > (ry + pry) * 0.8
                for px, py, prx, pry in placed
            )
            if clear:
                break
        placed.append((cx, cy, rx, ry))
        intensity = rs.uniform(0.55, 0.95)
        support = _shape_support(spec.shape_classes[c], size, cx, cy, rx, ry)
        image = np.maximum(image, support * intensity)
        instance_classes.append(c)
        instance_supports.append(support)

    labels = None
    if "cls" in spec.tasks:
        labels = np.zeros(spec.num_classes, dtype=np.int64)
        for c in instance_classes:
            labels[c] = 1
    boxes = None
    if "loc" in spec.tasks:
        box_list = [_tight_box(s, size) for s in instance_supports]
        boxes = BoxTarget(
            boxes=np.asarray(box_list, dtype=np.float64).reshape(-1, 4),
            class_ids=np.asarray(instance_classes, dtype=np.int64),
        )
    mask = None
    if "seg" in spec.tasks:
        mask = np.zeros((spec.num_classes, size, size), dtype=np.uint8)
        for c, s in zip(instance_classes, instance_supports):
            mask[c] |= s.astype(np.uint8)
    return SynthSample(sample_id=index, image=image, labels=labels, boxes=boxes, mask=mask)


def generate_dataset(spec: SynthDatasetSpec) -> list[SynthSample]:
    """Materialize the dataset; bit-identical for the same spec."""
    return [_generate_sample(spec, i) for i in range(spec.num_images)]


def sample_classes(sample: SynthSample) -> set[int]:
    """Class indices present in a sample, from whichever annotation exists."""
    if sample.labels is not None:
        return {int(c) for c in np.flatnonzero(sample.labels)}
    if sample.boxes is not None:
        return {int(c) for c in sample.boxes.class_ids}
    if sample.mask is not None:
        return {int(c) for c in range(sample.mask.shape[0]) if sample.mask[c].any()}
    return set()


def subtask_samples(samples, spec: SynthDatasetSpec, subtask: str | None):
    """Samples containing the subtask's class (all samples when no subtask)."""
    if subtask is None:
        return list(samples)
    c = spec.shape_classes.index(subtask)
    return [s for s in samples if c in sample_classes(s)]


# ---------------------------------------------------------------------------
# augmentation


def flip_sample(sample: SynthSample) -> SynthSample:
    """Horizontal mirror with boxes and masks flipped consistently."""
    image = sample.image[:, ::-1].copy()
    boxes = None
    if sample.boxes is not None:
        b = sample.boxes.boxes.copy()
        if len(b):
            b[:, 0] = 1.0 - b[:, 0]
        boxes = BoxTarget(boxes=b, class_ids=sample.boxes.class_ids.copy())
    mask = sample.mask[:, :, ::-1].copy() if sample.mask is not None else None
    labels = sample.labels.copy() if sample.labels is not None else None
    return SynthSample(sample.sample_id, image, labels, boxes, mask)


def augment(sample: SynthSample, epoch_seed: int, noise_level: float = 0.05) -> SynthSample:
    """Flip with probability 0.5 plus additive Gaussian pixel noise.

    Deterministic per (sample, epoch_seed); geometry annotations follow the
    flip, labels never change.
    """
    rs = np.random.RandomState(derive_seed(epoch_seed, "augment", sample.sample_id))
    out = flip_sample(sample) if rs.rand() < 0.5 else sample
    noisy = out.image + rs.normal(0.0, noise_level, out.image.shape)
    return replace(out, image=np.clip(noisy, 0.0, 1.0))


# ---------------------------------------------------------------------------
# splits


def split(samples, fractions=(0.70, 0.10, 0.20), seed: int = 0):
    """Disjoint, exhaustive (train, val, test) partition."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    n = len(samples)
    if n < 3:
        raise ValueError(f"dataset of {n} samples is too small to split")
    perm = np.random.RandomState(seed & 0xFFFFFFFF).permutation(n)
    n_train = int(math.floor(fractions[0] * n))
    n_val = int(math.floor(fractions[1] * n))
    train = [samples[i] for i in perm[:n_train]]
    val = [samples[i] for i in perm[n_train : n_train + n_val]]
    test = [samples[i] for i in perm[n_train + n_val :]]
    return train, val, test


def few_shot_subset(train_split, k: int, seed: int = 0):
    """k distinct training samples, deterministic per seed."""
    n = len(train_split)
    if k > n:
        raise ValueError(f"requested {k} samples from a split of {n}")
    perm = np.random.RandomState(seed & 0xFFFFFFFF).permutation(n)
    return [train_split[i] for i in perm[:k]]


def stratified_split(samples, spec: SynthDatasetSpec, fractions=(0.70, 0.10, 0.20), seed: int = 0):
    """Split each subtask's samples separately so none vanishes from a split.

    Samples matching zero or several subtasks form their own remainder
    stratum.  Without declared subtasks this is a plain :func:`split`.
    """
    if not spec.subtasks:
        return split(samples, fractions, seed)
    strata: dict[str, list] = {st: [] for st in spec.subtasks}
    remainder: list = []
    for s in samples:
        present = sample_classes(s)
        matches = [st for st in spec.subtasks if spec.shape_classes.index(st) in present]
        if len(matches) == 1:
            strata[matches[0]].append(s)
        else:
            remainder.append(s)
    train: list = []
    val: list = []
    test: list = []
    for i, (name, group) in enumerate([*strata.items(), ("", remainder)]):
        if not group:
            continue
        if len(group) < 3:
            train += group  # too small to carve a val/test share from
            continue
        tr, va, te = split(group, fractions, seed=derive_seed(seed, "stratum", name, i))
        train += tr
        val += va
        test += te
    return train, val, test


# ---------------------------------------------------------------------------
# on-disk form: raw little-endian arrays plus a manifest


def save_dataset(directory: str, spec: SynthDatasetSpec, samples) -> None:
    os.makedirs(directory, exist_ok=True)
    n = len(samples)
    size = spec.image_size
    arrays: dict[str, np.ndarray] = {
        "images": np.stack([s.image for s in samples]).astype("<f8"),
    }
    if "cls" in spec.tasks:
        arrays["labels"] = np.stack([s.labels for s in samples]).astype("<i8")
    if "seg" in spec.tasks:
        arrays["masks"] = np.stack([s.mask for s in samples]).astype("<i8")
    if "loc" in spec.tasks:
        counts = np.asarray([len(s.boxes) for s in samples], dtype="<i8")
        arrays["box_counts"] = counts
        total = int(counts.sum())
        flat_boxes = np.zeros((total, 4), dtype="<f8")
        flat_classes = np.zeros(total, dtype="<i8")
        at = 0
        for s in samples:
            t = len(s.boxes)
            flat_boxes[at : at + t] = s.boxes.boxes
            flat_classes[at : at + t] = s.boxes.class_ids
            at += t
        arrays["boxes"] = flat_boxes
        arrays["box_classes"] = flat_classes
    manifest = {
        "format_version": 1,
        "spec": {
            "dataset_id": spec.dataset_id,
            "num_images": spec.num_images,
            "tasks": list(spec.tasks),
            "image_size": spec.image_size,
            "shape_classes": list(spec.shape_classes),
            "noise_level": spec.noise_level,
            "seed": spec.seed,
            "min_instances": spec.min_instances,
            "max_instances": spec.max_instances,
            "subtasks": list(spec.subtasks),
            "round_robin_classes": spec.round_robin_classes,
        },
        "arrays": {
            name: {"file": f"{name}.bin", "dtype": str(a.dtype), "shape": list(a.shape)}
            for name, a in arrays.items()
        },
    }
    for name, a in arrays.items():
        with open(os.path.join(directory, f"{name}.bin"), "wb") as f:
            f.write(np.ascontiguousarray(a).tobytes())
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(directory: str) -> tuple[SynthDatasetSpec, list[SynthSample]]:
    with open(os.path.join(directory, "manifest.json"), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    spec_d = manifest["spec"]
    spec = SynthDatasetSpec(
        dataset_id=spec_d["dataset_id"],
        num_images=spec_d["num_images"],
        tasks=tuple(spec_d["tasks"]),
        image_size=spec_d["image_size"],
        shape_classes=tuple(spec_d["shape_classes"]),
        noise_level=spec_d["noise_level"],
        seed=spec_d["seed"],
        min_instances=spec_d["min_instances"],
        max_instances=spec_d["max_instances"],
        subtasks=tuple(spec_d["subtasks"]),
        round_robin_classes=spec_d["round_robin_classes"],
    )
    arrays: dict[str, np.ndarray] = {}
    for name, meta in manifest["arrays"].items():
        with open(os.path.join(directory, meta["file"]), "rb") as f:
            raw = f.read()
        a = np.frombuffer(raw, dtype=meta["dtype"]).reshape(meta["shape"])
        arrays[name] = a
    samples = []
    at = 0
    for i in range(spec.num_images):
        labels = arrays["labels"][i].copy() if "labels" in arrays else None
        mask = arrays["masks"][i].astype(np.uint8) if "masks" in arrays else None
        boxes = None
        if "box_counts" in arrays:
            t = int(arrays["box_counts"][i])
            boxes = BoxTarget(
                boxes=arrays["boxes"][at : at + t].astype(np.float64),
                class_ids=arrays["box_classes"][at : at + t].astype(np.int64),
            )
            at += t
        samples.append(
            SynthSample(
                sample_id=i,
                image=arrays["images"][i].astype(np.float64),
                labels=labels,
                boxes=boxes,
                mask=mask,
            )
        )
    return spec, samples


# ---------------------------------------------------------------------------
# presets mirroring the three annotation-availability archetypes


def preset_cls_only(dataset_id="labels_only", num_images=200, seed=101) -> SynthDatasetSpec:
    return SynthDatasetSpec(
        dataset_id=dataset_id,
        num_images=num_images,
        tasks=("cls",),
        seed=seed,
    )


def preset_cls_loc(dataset_id="labels_boxes", num_images=200, seed=202) -> SynthDatasetSpec:
    return SynthDatasetSpec(
        dataset_id=dataset_id,
        num_images=num_images,
        tasks=("cls", "loc"),
        min_instances=1,
        max_instances=2,
        seed=seed,
    )


def preset_cls_loc_seg(dataset_id="labels_boxes_masks", num_images=200, seed=303) -> SynthDatasetSpec:
    return SynthDatasetSpec(
        dataset_id=dataset_id,
        num_images=num_images,
        tasks=("cls", "loc", "seg"),
        min_instances=1,
        max_instances=2,
        seed=seed,
    )


def preset_organ_pairs(dataset_id="organ_pairs", num_images=48, seed=404) -> SynthDatasetSpec:
    """Localization+segmentation dataset split into three per-class subtasks.

    Every image holds exactly one instance, classes assigned round robin, so
    the three subtasks partition the data into equal thirds.
    """
    return SynthDatasetSpec(
        dataset_id=dataset_id,
        num_images=num_images,
        tasks=("loc", "seg"),
        min_instances=1,
        max_instances=1,
        subtasks=SHAPE_GENERATORS,
        round_robin_classes=True,
        seed=seed,
    )


def preset_loc_only(dataset_id="boxes_only", num_images=160, seed=505) -> SynthDatasetSpec:
    return SynthDatasetSpec(
        dataset_id=dataset_id,
        num_images=num_images,
        tasks=("loc",),
        shape_classes=("ellipse", "rectangle"),
        min_instances=1,
        max_instances=1,
        seed=seed,
    )
