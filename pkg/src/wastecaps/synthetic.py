"""Synthetic shape imagery: a toy 9-class corpus for pipeline tests and a
pose-varied dataset for pretraining and the ordering experiment.

Nine shape kinds are drawn with random color, rotation, scale, and position
so that class identity lives in geometry rather than color statistics. No
kind is a rotation of another, so classes stay distinguishable under the
full pose range. Foreground area is equalized across kinds and background
noise, edge softness, and clutter vary per sample, keeping low-order image
statistics (brightness, edge energy, orientation histograms) as
uninformative about class as the generator can make them.
"""

from __future__ import annotations

import math
import os

import numpy as np
from PIL import Image, ImageDraw

from .data import save_image

SHAPE_KINDS = (
    "circle", "ring", "square", "triangle", "star",
    "cross", "ellipse", "crescent", "lshape",
)

# class names used by the toy corpus, mapped one-to-one onto SHAPE_KINDS
WASTE_CLASSES = (
    "syringe", "gloves", "mask", "medicines", "plastic",
    "paper", "metal", "glass", "organic",
)

ROTATION_RANGE = 180.0
SCALE_RANGE = (0.6, 1.0)

# Base extent of a shape as a fraction of the canvas side, before the
# per-kind area equalization multiplier (at most ~1.42) is applied. Kept
# small so the background dominates pooled image statistics and so no
# kind is clipped at full scale.
_BASE_EXTENT = 0.55

_EXTENT_MULT: dict[str, float] = {}


def _extent_multipliers() -> dict[str, float]:
    """Per-kind size multipliers that equalize drawn foreground area.

    Shape kinds fill very different fractions of their bounding box (a
    square covers ~2.5x the pixels of a thin crescent at equal extent).
    Left uncorrected, total foreground mass becomes a class giveaway that
    even untrained features can read. Scaling each kind's extent by
    sqrt(median_fill / kind_fill) gives all kinds the same expected pixel
    count, so class identity has to come from geometry.
    """
    if not _EXTENT_MULT:
        ref = 96
        fills = {k: float((draw_shape_mask(k, ref) > 127).mean())
                 for k in SHAPE_KINDS}
        target = float(np.median(sorted(fills.values())))
        for kind, fill in fills.items():
            _EXTENT_MULT[kind] = math.sqrt(target / fill)
    return _EXTENT_MULT


def _regular_points(cx, cy, radii, phase=0.0):
    pts = []
    n = len(radii)
    for i, r in enumerate(radii):
        a = phase + 2.0 * math.pi * i / n
        pts.append((cx + r * math.sin(a), cy - r * math.cos(a)))
    return pts


def draw_shape_mask(kind: str, patch: int) -> np.ndarray:
    """White shape on black, centered in a patch x patch uint8 canvas."""
    if kind not in SHAPE_KINDS:
        raise ValueError(f"unknown shape kind {kind!r}")
    im = Image.new("L", (patch, patch), 0)
    d = ImageDraw.Draw(im)
    c = patch / 2.0
    r = patch * 0.38
    if kind == "circle":
        d.ellipse([c - r, c - r, c + r, c + r], fill=255)
    elif kind == "ring":
        d.ellipse([c - r, c - r, c + r, c + r], fill=255)
        d.ellipse([c - r * 0.55, c - r * 0.55, c + r * 0.55, c + r * 0.55], fill=0)
    elif kind == "square":
        s = r * 0.9
        d.rectangle([c - s, c - s, c + s, c + s], fill=255)
    elif kind == "triangle":
        d.polygon(_regular_points(c, c, [r, r, r]), fill=255)
    elif kind == "star":
        radii = [r if i % 2 == 0 else r * 0.42 for i in range(10)]
        d.polygon(_regular_points(c, c, radii), fill=255)
    elif kind == "cross":
        a = r * 0.35
        d.rectangle([c - a, c - r, c + a, c + r], fill=255)
        d.rectangle([c - r, c - a, c + r, c + a], fill=255)
    elif kind == "ellipse":
        d.ellipse([c - r, c - r * 0.45, c + r, c + r * 0.45], fill=255)
    elif kind == "crescent":
        d.ellipse([c - r, c - r, c + r, c + r], fill=255)
        off = r * 0.55
        d.ellipse([c - r + off, c - r, c + r + off, c + r], fill=0)
    elif kind == "lshape":
        a = r * 0.4
        d.rectangle([c - r, c - r, c - r + 2 * a, c + r], fill=255)
        d.rectangle([c - r, c + r - 2 * a, c + r, c + r], fill=255)
    return np.asarray(im, dtype=np.uint8)


def render_shape(kind: str, size: int, color, angle: float, scale: float,
                 dx: int, dy: int, background: np.ndarray | None = None,
                 softness: float = 1.0) -> np.ndarray:
    """Compose one posed shape onto a size x size RGB canvas.

    Pose is explicit (angle degrees, scale of the base extent, integer pixel
    offsets from center), so callers control all randomness. ``softness``
    below 1.0 resamples the mask through a lower resolution, blurring the
    outline; the shape is alpha-composited so soft edges stay soft.
    """
    patch = int(size * 0.9)
    mask = Image.fromarray(draw_shape_mask(kind, patch), mode="L")
    mask = mask.rotate(angle, resample=Image.BILINEAR, fillcolor=0)
    ext = int(size * _BASE_EXTENT * _extent_multipliers()[kind] * scale + 0.5)
    ext = max(1, min(size, ext))
    if softness < 1.0:
        small = max(2, int(ext * softness + 0.5))
        mask = mask.resize((small, small), Image.BILINEAR)
    alpha = np.asarray(mask.resize((ext, ext), Image.BILINEAR),
                       dtype=np.float32)[:, :, None] / 255.0

    canvas = (background.copy() if background is not None
              else np.zeros((size, size, 3), dtype=np.uint8))
    top = (size - ext) // 2 + dy
    left = (size - ext) // 2 + dx
    top = min(max(top, 0), size - ext)
    left = min(max(left, 0), size - ext)
    region = canvas[top:top + ext, left:left + ext].astype(np.float32)
    fg = np.asarray(color, dtype=np.float32)
    blended = region * (1.0 - alpha) + fg * alpha
    canvas[top:top + ext, left:left + ext] = (blended + 0.5).astype(np.uint8)
    return canvas


def _blotch_background(size: int, rng: np.random.Generator) -> np.ndarray:
    """Dark background with low-frequency blotches plus fine pixel noise.

    Smooth large-scale brightness variation acts like uneven lighting: it
    dominates pooled image statistics sample-to-sample while carrying no
    class information, unlike i.i.d. pixel noise which spatial averaging
    suppresses.
    """
    amplitude = int(rng.integers(12, 96))
    cells = int(rng.integers(3, 9))
    field = rng.integers(0, amplitude, size=(cells, cells, 3)).astype(np.uint8)
    blotch = Image.fromarray(field, mode="RGB").resize((size, size), Image.BILINEAR)
    fine = rng.integers(0, 24, size=(size, size, 3))
    mixed = np.asarray(blotch, dtype=np.int16) + fine
    return np.clip(mixed, 0, 255).astype(np.uint8)


def _random_bright_color(rng) -> tuple[int, int, int]:
    c = rng.integers(0, 256, size=3)
    while c.max() < 90:  # keep the shape visible against the dark field
        c = rng.integers(0, 256, size=3)
    return tuple(int(v) for v in c)


def random_shape_image(kind: str, size: int, rng: np.random.Generator,
                       clutter: bool = True) -> np.ndarray:
    """One pose-, color-, and clutter-randomized sample of a shape class.

    Nuisance factors (background noise level, foreground color, clutter)
    are drawn per sample so that first-order image statistics vary far
    more within a class than between classes.
    """
    noise = _blotch_background(size, rng)
    angle = rng.uniform(-ROTATION_RANGE, ROTATION_RANGE)
    scale = rng.uniform(*SCALE_RANGE)
    softness = float(rng.uniform(0.6, 1.0))
    margin = max(1, int(size * (1.0 - _BASE_EXTENT * scale) / 2))
    dx = int(rng.integers(-margin, margin + 1))
    dy = int(rng.integers(-margin, margin + 1))
    img = render_shape(kind, size, _random_bright_color(rng), angle, scale,
                       dx, dy, background=noise, softness=softness)
    if clutter:
        im = Image.fromarray(img, mode="RGB")
        d = ImageDraw.Draw(im)
        for _ in range(int(rng.integers(2, 7))):
            style = int(rng.integers(0, 3))
            if style == 2:  # line segment: oriented edge noise
                x0, y0, x1, y1 = (int(v) for v in rng.integers(0, size, size=4))
                d.line([x0, y0, x1, y1], fill=_random_bright_color(rng),
                       width=max(1, size // 32))
                continue
            rr = int(rng.integers(1, max(2, size // 10)))
            x = int(rng.integers(0, size))
            y = int(rng.integers(0, size))
            box = [x - rr, y - rr, x + rr, y + rr]
            if style:
                d.ellipse(box, fill=_random_bright_color(rng))
            else:  # hollow ring: edge noise without much area
                d.ellipse(box, outline=_random_bright_color(rng),
                          width=max(1, size // 48))
        img = np.asarray(im, dtype=np.uint8)
    return img


def make_pose_dataset(per_class: dict[str, int] | int, size: int = 64,
                      seed: int = 0, clutter: bool = True):
    """Generate (X, y) arrays over the nine shape classes.

    ``per_class`` is samples per class (int) or a per-split style mapping of
    shape kind to count. X is (N, 3, size, size) float32 in [0,1]; y is int
    labels in shape-kind order. Samples are generated class-by-class with a
    per-class seeded stream and then interleaved deterministically.
    """
    if isinstance(per_class, int):
        per_class = {k: per_class for k in SHAPE_KINDS}
    images = []
    labels = []
    for ci, kind in enumerate(SHAPE_KINDS):
        rng = np.random.default_rng((seed, ci))
        for _ in range(per_class.get(kind, 0)):
            images.append(random_shape_image(kind, size, rng, clutter))
            labels.append(ci)
    x = np.stack(images).astype(np.float32).transpose(0, 3, 1, 2) / 255.0
    y = np.asarray(labels, dtype=np.int64)
    order = np.random.default_rng((seed, 1_000_003)).permutation(len(y))
    return x[order], y[order]


def make_pose_splits(n_train: int, n_val: int, n_test: int, size: int = 64,
                     seed: int = 0, clutter: bool = True):
    """Balanced train/val/test arrays: counts must divide evenly by 9."""
    splits = {}
    for name, total, sub in (("train", n_train, 0), ("val", n_val, 1), ("test", n_test, 2)):
        if total % len(SHAPE_KINDS):
            raise ValueError(f"{name} count {total} not divisible by {len(SHAPE_KINDS)}")
        splits[name] = make_pose_dataset(
            total // len(SHAPE_KINDS), size=size, seed=(seed * 16 + 3 + sub), clutter=clutter
        )
    return splits


def write_toy_corpus(root: str, per_class: int = 33, seed: int = 0,
                     size_range: tuple[int, int] = (48, 96)):
    """Materialize a raw image tree `<root>/<class>/NNN.png` for pipeline tests.

    Images are rectangular with varying aspect so pad_resize has real work,
    and classes use the waste-category names with one shape kind each.
    """
    for ci, (cls, kind) in enumerate(zip(WASTE_CLASSES, SHAPE_KINDS)):
        rng = np.random.default_rng((seed, 77, ci))
        for i in range(per_class):
            base = random_shape_image(kind, int(rng.integers(*size_range)), rng)
            # crop to a random aspect so heights and widths differ
            h, w = base.shape[:2]
            crop_h = int(rng.integers(int(h * 0.6), h + 1))
            top = int(rng.integers(0, h - crop_h + 1))
            img = base[top:top + crop_h]
            save_image(img, os.path.join(root, cls, f"{i:04d}.png"))
