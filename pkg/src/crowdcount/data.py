"""Dot-annotated image I/O, redundancy-free augmentation, and synthetic scenes.

The annotation format is one text file per image:

    DCNT1 <width> <height> <num_heads> <image_file>
    <x> <y>
    ...

with the image stored as a binary PGM/PPM next to the annotation file.
A dataset manifest lists one annotation path per line, with an optional
"# density: high|medium" header used by cross-dataset reports.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import netpbm
from .density import HeadAnnotation, knn_mean_distances
from .errors import (
    AnnotationError,
    AugmentationError,
    ConfigurationError,
    ParseError,
)

AUGMENTATION_SCHEMES = ("none", "quadrants", "quadrants+center")


@dataclass
class DotAnnotatedImage:
    """An image plus its head-center annotations.

    pixels is (C, H, W) float32 in [0, 1] with C in {1, 3}.
    """

    id: str
    pixels: np.ndarray
    heads: list[HeadAnnotation] = field(default_factory=list)

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    def validate(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[0] not in (1, 3):
            raise AnnotationError(
                f"{self.id}: pixels must be (1|3, H, W), got {self.pixels.shape}"
            )
        for i, head in enumerate(self.heads):
            if not (0 <= head.x < self.width and 0 <= head.y < self.height):
                raise AnnotationError(
                    f"{self.id}: head {i} at ({head.x}, {head.y}) outside "
                    f"{self.width}x{self.height} image"
                )


@dataclass
class DatasetManifest:
    name: str
    sample_paths: list[str]
    density_profile: str | None = None


def load_annotations(path) -> DotAnnotatedImage:
    """Load one annotation file and its referenced image."""
    path = os.fspath(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty annotation file")
    parts = lines[0].split(None, 4)
    if len(parts) != 5 or parts[0] != "DCNT1":
        raise ParseError(f"{path}: line 1: expected 'DCNT1 <w> <h> <n> <image>'")
    try:
        width, height, num_heads = int(parts[1]), int(parts[2]), int(parts[3])
    except ValueError as exc:
        raise ParseError(f"{path}: line 1: non-integer header field") from exc
    image_file = parts[4]

    heads: list[HeadAnnotation] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 2:
            raise ParseError(f"{path}: line {lineno}: expected 'x y'")
        try:
            heads.append(HeadAnnotation(float(fields[0]), float(fields[1])))
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: non-numeric coordinate") from exc
    if len(heads) != num_heads:
        raise ParseError(
            f"{path}: header declares {num_heads} heads, file has {len(heads)}"
        )

    raw = netpbm.read_image(os.path.join(os.path.dirname(path), image_file))
    if raw.shape[:2] != (height, width):
        raise ParseError(
            f"{path}: header says {width}x{height}, image is "
            f"{raw.shape[1]}x{raw.shape[0]}"
        )
    if raw.ndim == 2:
        pixels = raw[None, :, :].astype(np.float32) / 255.0
    else:
        pixels = raw.transpose(2, 0, 1).astype(np.float32) / 255.0

    sample = DotAnnotatedImage(
        id=os.path.splitext(os.path.basename(path))[0], pixels=pixels, heads=heads
    )
    sample.validate()
    return sample


def save_annotations(sample: DotAnnotatedImage, ann_path) -> None:
    """Write the annotation file plus its PGM/PPM image next to it."""
    sample.validate()
    ann_path = os.fspath(ann_path)
    stem = os.path.splitext(os.path.basename(ann_path))[0]
    ext = ".pgm" if sample.pixels.shape[0] == 1 else ".ppm"
    image_file = stem + ext
    image_path = os.path.join(os.path.dirname(ann_path), image_file)

    quantized = np.rint(np.clip(sample.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    if sample.pixels.shape[0] == 1:
        netpbm.write_pgm(image_path, quantized[0])
    else:
        netpbm.write_ppm(image_path, quantized.transpose(1, 2, 0))

    lines = [f"DCNT1 {sample.width} {sample.height} {len(sample.heads)} {image_file}"]
    lines += [
        f"{_coord(h.x, sample.width)} {_coord(h.y, sample.height)}"
        for h in sample.heads
    ]
    with open(ann_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _coord(value: float, bound: int) -> str:
    """Four-decimal coordinate; never rounds up across the open bound."""
    text = f"{value:.4f}"
    if float(text) >= bound:
        text = f"{bound - 1e-4:.4f}"
    return text


def load_manifest(path) -> DatasetManifest:
    """Read a manifest: one annotation path per line, '#' comments."""
    path = os.fspath(path)
    base = os.path.dirname(path)
    density = None
    sample_paths: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.lower().startswith("density:"):
                    density = body.split(":", 1)[1].strip()
                continue
            sample_paths.append(os.path.join(base, line))
    ids = [os.path.splitext(os.path.basename(p))[0] for p in sample_paths]
    if len(set(ids)) != len(ids):
        raise ParseError(f"{path}: duplicate sample ids in manifest")
    name = os.path.splitext(os.path.basename(path))[0]
    return DatasetManifest(name=name, sample_paths=sample_paths, density_profile=density)


def write_manifest(path, ann_files: list[str], density: str | None = None) -> None:
    """Write a manifest of annotation-file names (relative to the manifest)."""
    lines = []
    if density is not None:
        lines.append(f"# density: {density}")
    lines.extend(ann_files)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def quadrant_crops(sample: DotAnnotatedImage) -> list[DotAnnotatedImage]:
    """Split into four non-overlapping quadrants.

    Boundaries sit at floor(W/2) and floor(H/2); the right/bottom crops
    absorb any extra column/row.  Each head goes to the unique quadrant
    containing it (x < floor(W/2) means left, y < floor(H/2) means top)
    with coordinates re-based to the crop origin.
    """
    h, w = sample.height, sample.width
    if h < 2 or w < 2:
        raise AugmentationError(
            f"{sample.id}: image {w}x{h} too small for quadrant crops"
        )
    hh, wh = h // 2, w // 2
    bounds = [
        (0, hh, 0, wh),
        (0, hh, wh, w),
        (hh, h, 0, wh),
        (hh, h, wh, w),
    ]
    crops = []
    for qi, (y0, y1, x0, x1) in enumerate(bounds):
        heads = [
            HeadAnnotation(head.x - x0, head.y - y0)
            for head in sample.heads
            if (head.x < wh) == (x0 == 0) and (head.y < hh) == (y0 == 0)
        ]
        crops.append(
            DotAnnotatedImage(
                id=f"{sample.id}_q{qi}",
                pixels=np.ascontiguousarray(sample.pixels[:, y0:y1, x0:x1]),
                heads=heads,
            )
        )
    return crops


def center_crop(sample: DotAnnotatedImage) -> DotAnnotatedImage:
    """Overlapping floor(W/2) x floor(H/2) centre crop (for the
    quadrants+center scheme only); heads outside the window are dropped."""
    h, w = sample.height, sample.width
    if h < 2 or w < 2:
        raise AugmentationError(f"{sample.id}: image {w}x{h} too small to crop")
    ch, cw = h // 2, w // 2
    y0, x0 = (h - ch) // 2, (w - cw) // 2
    heads = [
        HeadAnnotation(head.x - x0, head.y - y0)
        for head in sample.heads
        if x0 <= head.x < x0 + cw and y0 <= head.y < y0 + ch
    ]
    return DotAnnotatedImage(
        id=f"{sample.id}_c",
        pixels=np.ascontiguousarray(sample.pixels[:, y0 : y0 + ch, x0 : x0 + cw]),
        heads=heads,
    )


def horizontal_flip(sample: DotAnnotatedImage) -> DotAnnotatedImage:
    """Mirror pixels about the vertical axis; head x maps to (W-1) - x.

    The mirror matches the pixel-grid flip, so it is an exact involution
    for heads with x <= W-1.  A head in the sub-pixel sliver beyond the
    last pixel center (x > W-1, e.g. in the left half of a quadrant
    split) would map slightly negative, so the result is clamped at 0;
    no head is ever dropped.
    """
    flipped = np.ascontiguousarray(sample.pixels[:, :, ::-1])
    heads = [
        HeadAnnotation(max(0.0, (sample.width - 1) - head.x), head.y)
        for head in sample.heads
    ]
    return DotAnnotatedImage(id=f"{sample.id}_f", pixels=flipped, heads=heads)


def build_training_set(
    images: list[DotAnnotatedImage], scheme: str = "quadrants"
) -> list[DotAnnotatedImage]:
    """Expand source images into training samples.

    none: originals + flips (2 per image); quadrants: four crops + flips
    (8); quadrants+center adds the overlapping centre crop + flip (10).
    """
    if scheme not in AUGMENTATION_SCHEMES:
        raise ConfigurationError(
            f"unknown augmentation scheme {scheme!r}; pick one of "
            f"{AUGMENTATION_SCHEMES}"
        )
    out: list[DotAnnotatedImage] = []
    for image in images:
        if scheme == "none":
            variants = [image]
        else:
            variants = quadrant_crops(image)
            if scheme == "quadrants+center":
                variants.append(center_crop(image))
        for variant in variants:
            out.append(variant)
            out.append(horizontal_flip(variant))
    return out


def train_val_split(
    images: list[DotAnnotatedImage], seed: int, val_fraction: float = 0.1
) -> tuple[list[DotAnnotatedImage], list[DotAnnotatedImage]]:
    """Deterministic 9:1 split keyed on source-image ids.

    Splitting happens before augmentation so no crop of a validation
    image can leak into training.  The shuffle operates on sorted ids,
    making the split independent of input ordering.
    """
    if len(images) < 10:
        raise ConfigurationError(
            f"need at least 10 images to split, got {len(images)}"
        )
    by_id = {image.id: image for image in images}
    if len(by_id) != len(images):
        raise ConfigurationError("duplicate image ids in split input")
    ids = sorted(by_id)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n_val = int(round(val_fraction * len(ids)))
    val_ids = {ids[i] for i in order[:n_val]}
    train = [img for img in images if img.id not in val_ids]
    val = [img for img in images if img.id in val_ids]
    return train, val


def synth_scene(
    seed: int,
    dims: tuple[int, int] = (128, 128),
    count_range: tuple[int, int] = (10, 600),
    clustering: float = 0.6,
) -> DotAnnotatedImage:
    """Deterministic synthetic crowd scene.

    Heads are placed by a seeded mix of Gaussian clusters and uniform
    background, then rendered as dark blobs whose radius follows the
    local head spacing (a crude stand-in for perspective) on a noisy
    light background.  The annotation list is exactly the set of
    rendered blob centers.
    """
    h, w = dims
    if h < 32 or w < 32:
        raise ConfigurationError(f"synthetic dims must be >= 32x32, got {w}x{h}")
    lo, hi = count_range
    if not (0 <= lo <= hi <= 5000):
        raise ConfigurationError(
            f"count range must satisfy 0 <= lo <= hi <= 5000, got {count_range}"
        )
    rng = np.random.default_rng(seed)
    count = int(rng.integers(lo, hi + 1))

    heads: list[HeadAnnotation] = []
    if count > 0:
        n_clusters = int(rng.integers(1, 5))
        centers_x = rng.uniform(0.15 * w, 0.85 * w, n_clusters)
        centers_y = rng.uniform(0.15 * h, 0.85 * h, n_clusters)
        spreads = rng.uniform(0.08, 0.22, n_clusters) * min(h, w)
        in_cluster = rng.random(count) < clustering
        which = rng.integers(0, n_clusters, count)
        offsets = rng.normal(0.0, 1.0, (count, 2)) * spreads[which, None]
        uniform_x = rng.uniform(0.0, w, count)
        uniform_y = rng.uniform(0.0, h, count)
        xs = np.where(in_cluster, centers_x[which] + offsets[:, 0], uniform_x)
        ys = np.where(in_cluster, centers_y[which] + offsets[:, 1], uniform_y)
        # Clamp to the last pixel center so flips stay exact involutions.
        xs = np.clip(xs, 0.0, w - 1.0)
        ys = np.clip(ys, 0.0, h - 1.0)
        heads = [HeadAnnotation(float(x), float(y)) for x, y in zip(xs, ys)]

    base = rng.uniform(0.72, 0.92)
    image = base + rng.normal(0.0, 0.025, (h, w))

    if count > 0:
        fallback = 0.1 * min(h, w)
        spacing = knn_mean_distances(heads, single_head_fallback=fallback)
        radii = np.clip(0.35 * np.asarray(spacing), 1.0, 0.06 * min(h, w))
        amps = rng.uniform(0.65, 0.85, count)
        darkness = np.zeros((h, w))
        for head, radius, amp in zip(heads, radii, amps):
            sigma = radius / 1.5
            half = int(np.ceil(2.5 * sigma))
            x0, x1 = max(0, int(head.x) - half), min(w - 1, int(head.x) + half)
            y0, y1 = max(0, int(head.y) - half), min(h - 1, int(head.y) + half)
            gy = np.arange(y0, y1 + 1, dtype=np.float64) - head.y
            gx = np.arange(x0, x1 + 1, dtype=np.float64) - head.x
            blob = np.exp(-(gy[:, None] ** 2 + gx[None, :] ** 2) / (2.0 * sigma**2))
            darkness[y0 : y1 + 1, x0 : x1 + 1] += amp * blob
        image = image * np.exp(-darkness)

    pixels = np.clip(image, 0.0, 1.0).astype(np.float32)[None, :, :]
    return DotAnnotatedImage(id=f"synth_{seed:08d}", pixels=pixels, heads=heads)
