"""Geometry-adaptive density heatmaps from head annotations.

Each annotated head contributes a truncated, renormalized Gaussian whose
spread follows the mean distance to its nearest neighbours, so the map
integrates (element-wise sums) to the crowd count.  Maps can be
block-sum downsampled to a network's output stride without losing count
mass, and serialized to a small binary format or a PGM preview.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import AnnotationError, CheckpointError, ConfigurationError
from .netpbm import write_pgm

# Spread multiplier applied to the mean neighbour distance.
SPREAD_FACTOR = 0.3
# Lower bound on the Gaussian spread, in pixels, so coincident heads do
# not degenerate to sub-pixel kernels.
SIGMA_FLOOR = 1.0
# Neighbours considered when adapting the kernel to local geometry.
DEFAULT_NEIGHBORS = 5

_DMAP_MAGIC = b"DMAP"
_DMAP_VERSION = 1


@dataclass(frozen=True)
class HeadAnnotation:
    """Sub-pixel head-center position; 0 <= x < width, 0 <= y < height."""

    x: float
    y: float


@dataclass
class DensityMap:
    """Non-negative 2D grid whose sum is the (fractional) crowd count.

    stride is the downsample factor relative to the source image
    (1 for full resolution).
    """

    values: np.ndarray
    stride: int = 1

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def count(self) -> float:
        return float(self.values.sum(dtype=np.float64))


def knn_mean_distances(
    heads: list[HeadAnnotation],
    k: int = DEFAULT_NEIGHBORS,
    single_head_fallback: float = 0.0,
) -> list[float]:
    """Mean Euclidean distance from each head to its k nearest others.

    When fewer than k other heads exist, averages over all of them.  A
    single isolated head has no neighbours at all and gets
    single_head_fallback (callers derive it from the image scale).
    """
    n = len(heads)
    if n == 0:
        return []
    if n == 1:
        return [float(single_head_fallback)]
    points = np.array([(h.x, h.y) for h in heads], dtype=np.float64)
    tree = cKDTree(points)
    # first result is the query point itself at distance 0
    dists, _ = tree.query(points, k=min(k + 1, n))
    return [float(np.mean(row[1:])) for row in dists]


def adaptive_sigma(mean_distance: float) -> float:
    """Kernel spread for a head: SPREAD_FACTOR * d, floored at SIGMA_FLOOR."""
    if mean_distance < 0:
        raise ConfigurationError(f"mean distance must be >= 0, got {mean_distance}")
    return max(SPREAD_FACTOR * mean_distance, SIGMA_FLOOR)


def adaptive_sigmas(
    heads: list[HeadAnnotation],
    image_height: int,
    image_width: int,
    k: int = DEFAULT_NEIGHBORS,
) -> list[float]:
    """Per-head spreads from local head geometry.

    An image with a single head falls back to a spread derived from
    one tenth of the smaller image side.
    """
    fallback = 0.1 * min(image_width, image_height)
    dbars = knn_mean_distances(heads, k=k, single_head_fallback=fallback)
    return [adaptive_sigma(d) for d in dbars]


def render_density_map(
    height: int,
    width: int,
    heads: list[HeadAnnotation],
    sigmas: list[float],
) -> DensityMap:
    """Render heads as unit-mass Gaussians onto a stride-1 map.

    Each kernel is truncated at half-width ceil(3 * sigma) and
    renormalized over the pixels that remain inside the image, so every
    head contributes exactly 1.0 even when clipped by a border.
    Accumulation happens in float64 to keep count conservation tight.
    """
    if len(heads) != len(sigmas):
        raise ConfigurationError(
            f"{len(heads)} heads but {len(sigmas)} sigmas"
        )
    values = np.zeros((height, width), dtype=np.float64)
    for i, (head, sigma) in enumerate(zip(heads, sigmas)):
        if not (0 <= head.x < width and 0 <= head.y < height):
            raise AnnotationError(
                f"head {i} at ({head.x}, {head.y}) outside {width}x{height} image"
            )
        r = math.ceil(3.0 * sigma)
        x0 = max(0, math.ceil(head.x - r))
        x1 = min(width - 1, math.floor(head.x + r))
        y0 = max(0, math.ceil(head.y - r))
        y1 = min(height - 1, math.floor(head.y + r))
        ys = np.arange(y0, y1 + 1, dtype=np.float64) - head.y
        xs = np.arange(x0, x1 + 1, dtype=np.float64) - head.x
        kernel = np.exp(-(ys[:, None] ** 2 + xs[None, :] ** 2) / (2.0 * sigma**2))
        kernel /= kernel.sum()
        values[y0 : y1 + 1, x0 : x1 + 1] += kernel
    return DensityMap(values, stride=1)


def render_adaptive(
    height: int, width: int, heads: list[HeadAnnotation]
) -> DensityMap:
    """Full pipeline: neighbour distances -> spreads -> rendered map."""
    sigmas = adaptive_sigmas(heads, height, width)
    return render_density_map(height, width, heads, sigmas)


def block_sum_downsample(density: DensityMap, factor: int) -> DensityMap:
    """Sum factor x factor blocks (ceiling semantics at the edges).

    The total sum is preserved; the stride field is multiplied by
    factor.
    """
    if factor < 1:
        raise ConfigurationError(f"downsample factor must be >= 1, got {factor}")
    values = density.values
    if factor == 1:
        return DensityMap(values.copy(), stride=density.stride)
    h, w = values.shape
    h2 = -(-h // factor)
    w2 = -(-w // factor)
    padded = np.zeros((h2 * factor, w2 * factor), dtype=np.float64)
    padded[:h, :w] = values
    out = padded.reshape(h2, factor, w2, factor).sum(axis=(1, 3))
    return DensityMap(out, stride=density.stride * factor)


def save_dmap(density: DensityMap, path) -> None:
    """Write the flat binary density-map format.

    Layout: magic "DMAP", version u16, height u32, width u32,
    stride u16, then row-major little-endian float32 values.
    """
    header = struct.pack(
        "<4sHIIH",
        _DMAP_MAGIC,
        _DMAP_VERSION,
        density.height,
        density.width,
        density.stride,
    )
    payload = np.ascontiguousarray(density.values, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + payload)


def load_dmap(path) -> DensityMap:
    """Read a density map written by save_dmap."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header_size = struct.calcsize("<4sHIIH")
    if len(blob) < header_size:
        raise CheckpointError(f"{path}: truncated density-map header")
    magic, version, height, width, stride = struct.unpack(
        "<4sHIIH", blob[:header_size]
    )
    if magic != _DMAP_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != _DMAP_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    expected = height * width * 4
    payload = blob[header_size:]
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: expected {expected} payload bytes, found {len(payload)}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(height, width)
    return DensityMap(values.copy(), stride=stride)


def save_density_pgm(density: DensityMap, path) -> None:
    """Lossy PGM preview, linearly scaled to 0..255."""
    values = density.values
    peak = float(values.max()) if values.size else 0.0
    if peak > 0:
        scaled = np.rint(values / peak * 255.0).astype(np.uint8)
    else:
        scaled = np.zeros_like(values, dtype=np.uint8)
    write_pgm(path, scaled)
