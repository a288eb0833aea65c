"""Dataset ingestion, letterbox resizing, stratified splitting, balancing
augmentation, normalization, and batch iteration.

Images are H x W x 3 uint8 arrays between ingestion and normalization.
Class order is alphabetical when ingesting a directory tree; an explicit
manifest header overrides it. All randomness flows through seeded
generators so repeated runs produce identical splits, transforms, and
batch orders.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .tensor import Tensor

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.70, 0.15, 0.15)


@dataclass
class Sample:
    image: np.ndarray | None
    label: int
    source_id: str
    augmented_from: str | None = None


@dataclass
class ManifestEntry:
    path: str
    class_name: str
    split: str | None = None
    source_id: str = ""
    augmented_from: str | None = None


@dataclass
class DatasetManifest:
    classes: list[str]
    entries: list[ManifestEntry] = field(default_factory=list)

    def class_index(self, name: str) -> int:
        return self.classes.index(name)

    def in_split(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]


@dataclass
class AugmentationPlan:
    per_class_extra: dict[str, int]
    rotation_range: float = 25.0
    scale_range: tuple[float, float] = (0.8, 1.2)
    rng_seed: int = 0


# -- image primitives ---------------------------------------------------------

def load_image(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_image(arr: np.ndarray, path: str):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def pad_resize(image: np.ndarray, target: int = 224) -> np.ndarray:
    """Aspect-preserving resize onto a black square canvas.

    The longer side is scaled to exactly ``target``; the shorter side scales
    by the same factor (rounded half-up) and the result is centered, leaving
    exactly-zero borders.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h < 1 or w < 1:
        raise ValueError("empty image")
    scale = target / max(h, w)
    new_h = int(h * scale + 0.5)
    new_w = int(w * scale + 0.5)
    resized = np.asarray(
        Image.fromarray(image, mode="RGB").resize((new_w, new_h), Image.BILINEAR),
        dtype=np.uint8,
    )
    canvas = np.zeros((target, target, 3), dtype=np.uint8)
    top = (target - new_h) // 2
    left = (target - new_w) // 2
    canvas[top:top + new_h, left:left + new_w] = resized
    return canvas


def rotate_image(image: np.ndarray, angle: float) -> np.ndarray:
    """Rotate about the center on the same canvas; uncovered corners fill black."""
    im = Image.fromarray(image, mode="RGB").rotate(
        angle, resample=Image.BILINEAR, fillcolor=(0, 0, 0)
    )
    return np.asarray(im, dtype=np.uint8)


def scale_image(image: np.ndarray, factor: float) -> np.ndarray:
    """Zoom about the center on the same canvas.

    Factors below 1 shrink the content inside a black border; factors above
    1 enlarge and center-crop. Either way the canvas size is unchanged, so
    the effect survives a later pad_resize.
    """
    h, w = image.shape[:2]
    new_h = max(1, int(h * factor + 0.5))
    new_w = max(1, int(w * factor + 0.5))
    resized = np.asarray(
        Image.fromarray(image, mode="RGB").resize((new_w, new_h), Image.BILINEAR),
        dtype=np.uint8,
    )
    canvas = np.zeros((h, w, 3), dtype=np.uint8)
    if factor <= 1.0:
        top, left = (h - new_h) // 2, (w - new_w) // 2
        canvas[top:top + new_h, left:left + new_w] = resized
    else:
        top, left = (new_h - h) // 2, (new_w - w) // 2
        canvas[:, :] = resized[top:top + h, left:left + w]
    return canvas


# -- manifest machinery -------------------------------------------------------

def ingest_directory(root: str) -> DatasetManifest:
    """Build a manifest from a `<root>/<class>/*.png|jpg` tree, classes sorted
    alphabetically, files sorted within each class."""
    classes = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    if not classes:
        raise ValueError(f"no class directories under {root}")
    manifest = DatasetManifest(classes=classes)
    for cls in classes:
        for fname in sorted(os.listdir(os.path.join(root, cls))):
            if os.path.splitext(fname)[1].lower() in IMAGE_EXTENSIONS:
                rel = f"{cls}/{fname}"
                manifest.entries.append(
                    ManifestEntry(path=rel, class_name=cls, source_id=rel)
                )
    return manifest


def write_manifest(manifest: DatasetManifest, path: str):
    lines = ["classes," + ",".join(manifest.classes)]
    for e in manifest.entries:
        lines.append(
            f"{e.path},{e.class_name},{e.split or ''},{e.source_id},{e.augmented_from or ''}"
        )
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path: str) -> DatasetManifest:
    with open(path, encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines or not lines[0].startswith("classes,"):
        raise ValueError(f"{path}: missing classes header")
    classes = lines[0].split(",")[1:]
    manifest = DatasetManifest(classes=classes)
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) == 2:
            parts += ["", parts[0], ""]
        if len(parts) != 5:
            raise ValueError(f"{path}: malformed row {ln!r}")
        rel, cls, split, source_id, aug = parts
        if cls not in classes:
            raise ValueError(f"{path}: unknown class {cls!r} in row {ln!r}")
        if split and split not in SPLITS:
            raise ValueError(f"{path}: unknown split {split!r}")
        manifest.entries.append(
            ManifestEntry(rel, cls, split or None, source_id or rel, aug or None)
        )
    return manifest


def largest_remainder_counts(n: int, fractions=DEFAULT_FRACTIONS) -> list[int]:
    """Integer allocation of n by fractions: floor each quota, then hand the
    remaining units to the largest fractional parts (ties favor the earlier
    split)."""
    quotas = [n * f for f in fractions]
    base = [int(q) for q in quotas]
    leftover = n - sum(base)
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:leftover]:
        base[i] += 1
    return base


def stratified_split(manifest: DatasetManifest, fractions=DEFAULT_FRACTIONS,
                     seed: int = 0) -> DatasetManifest:
    """Assign train/val/test per class with largest-remainder proportions.

    Samples are shuffled within each class by a per-class seeded generator,
    so the assignment is deterministic for a given (manifest, seed).
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three values summing to 1, got {fractions}")
    out = DatasetManifest(classes=list(manifest.classes), entries=[])
    by_class: dict[str, list[ManifestEntry]] = {c: [] for c in manifest.classes}
    for e in manifest.entries:
        by_class[e.class_name].append(e)
    for ci, cls in enumerate(manifest.classes):
        group = by_class[cls]
        if len(group) < 3:
            raise ValueError(f"class {cls!r} has {len(group)} samples; need at least 3")
        rng = np.random.default_rng((seed, ci))
        order = rng.permutation(len(group))
        counts = largest_remainder_counts(len(group), fractions)
        bounds = np.cumsum(counts)
        for pos, idx in enumerate(order):
            split = SPLITS[int(np.searchsorted(bounds, pos, side="right"))]
            e = group[idx]
            out.entries.append(
                ManifestEntry(e.path, e.class_name, split, e.source_id, e.augmented_from)
            )
    return out


# -- augmentation -------------------------------------------------------------

def augment_samples(samples: list[Sample], plan: AugmentationPlan,
                    classes: list[str], target: int = 224) -> list[Sample]:
    """Append per-class balanced copies to a training sample list.

    Every original of a planned class gets exactly ``per_class_extra[class]``
    new samples, each made by one seeded random transform (rotation within
    +/-rotation_range degrees, or scaling within scale_range, chosen with
    equal probability) followed by pad_resize. Originals are returned
    untouched, in order, ahead of the appended copies.
    """
    unknown = sorted(set(plan.per_class_extra) - set(classes))
    if unknown:
        raise ValueError(f"augmentation plan names unknown classes: {unknown}")
    rng = np.random.default_rng(plan.rng_seed)
    out = list(samples)
    for sample in samples:
        cls = classes[sample.label]
        for k in range(plan.per_class_extra.get(cls, 0)):
            if rng.random() < 0.5:
                angle = rng.uniform(-plan.rotation_range, plan.rotation_range)
                img = rotate_image(sample.image, angle)
            else:
                factor = rng.uniform(*plan.scale_range)
                img = scale_image(sample.image, factor)
            out.append(
                Sample(
                    image=pad_resize(img, target),
                    label=sample.label,
                    source_id=f"{sample.source_id}#aug{k}",
                    augmented_from=sample.source_id,
                )
            )
    return out


# -- model-facing encoding ----------------------------------------------------

def normalize_encode(samples: list[Sample], num_classes: int) -> tuple[Tensor, Tensor]:
    """Stack pad-resized samples into (X, Y): pixels scaled to [0,1] in NCHW
    float32, labels one-hot."""
    if not samples:
        raise ValueError("no samples to encode")
    size = samples[0].image.shape[0]
    x = np.empty((len(samples), 3, size, size), dtype=np.float32)
    y = np.zeros((len(samples), num_classes), dtype=np.float32)
    for i, s in enumerate(samples):
        if s.image.shape != (size, size, 3):
            raise ValueError(
                f"sample {s.source_id} not pad-resized: shape {s.image.shape}"
            )
        if not 0 <= s.label < num_classes:
            raise ValueError(f"sample {s.source_id} label {s.label} out of range")
        x[i] = (s.image.astype(np.float32) / 255.0).transpose(2, 0, 1)
        y[i, s.label] = 1.0
    return Tensor(x), Tensor(y)


def batch_iter(x, y, batch_size: int, shuffle: bool, seed: int = 0, epoch: int = 0):
    """Yield (X_b, Y_b) tensor minibatches covering every sample exactly once.

    The shuffle permutation is a pure function of (seed, epoch); the final
    short batch is emitted rather than dropped.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    yd = y.data if isinstance(y, Tensor) else np.asarray(y)
    n = xd.shape[0]
    if yd.shape[0] != n:
        raise ValueError(f"X/Y length mismatch: {n} vs {yd.shape[0]}")
    order = np.arange(n)
    if shuffle:
        order = np.random.default_rng((seed, epoch)).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield Tensor(np.ascontiguousarray(xd[idx])), Tensor(np.ascontiguousarray(yd[idx]))


def class_distribution_report(manifest: DatasetManifest) -> str:
    """Per-class, per-split counts as CSV: originals and with-augmentation
    totals."""
    lines = ["class,split,originals,total"]
    for cls in manifest.classes:
        for split in SPLITS:
            rows = [e for e in manifest.entries if e.class_name == cls and e.split == split]
            originals = sum(1 for e in rows if not e.augmented_from)
            lines.append(f"{cls},{split},{originals},{len(rows)}")
    return "\n".join(lines) + "\n"


def load_split_samples(manifest: DatasetManifest, root: str, split: str) -> list[Sample]:
    """Materialize one split's samples, reading images relative to ``root``."""
    out = []
    for e in manifest.in_split(split):
        out.append(
            Sample(
                image=load_image(os.path.join(root, e.path)),
                label=manifest.class_index(e.class_name),
                source_id=e.source_id,
                augmented_from=e.augmented_from,
            )
        )
    return out
