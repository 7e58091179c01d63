"""Inference-time scaling, count metrics, and evaluation reports.

Counts are estimated per scale and averaged (counts, not heatmaps).
MAE follows the plain mean absolute error; MSE here is the rooted
mean squared error, as is conventional for counting benchmarks.
"""

from __future__ import annotations

import math
import statistics
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as model_mod
from .data import DatasetManifest, DotAnnotatedImage, load_annotations
from .errors import ConfigurationError, CrowdCountError, InferenceError
from .model import FcnModel, MIN_INPUT_SIDE

EVAL_CSV_HEADER = "id,true,estimated,latency_ms"
SWEEP_CSV_HEADER = "scale,mae,mse,latency_ms,flops"

DEFAULT_SCHEME = (1.0, 0.8)


def validate_scheme(scheme) -> tuple[float, ...]:
    """A scale scheme is a non-empty ordered list of factors in (0, 1]."""
    scales = tuple(float(s) for s in scheme)
    if not scales:
        raise ConfigurationError("scale scheme must be non-empty")
    for s in scales:
        if not 0.0 < s <= 1.0:
            raise ConfigurationError(f"scale factors must be in (0, 1], got {s}")
    return scales


def resize_bilinear(image: np.ndarray, scale: float) -> np.ndarray:
    """Downscale a (C, H, W) image, aspect ratio preserved.

    Output dims are round(scale * dim); interpolation uses half-pixel
    centers.  scale 1.0 returns the input unchanged.
    """
    if not 0.0 < scale <= 1.0:
        raise ConfigurationError(f"scale must be in (0, 1], got {scale}")
    if image.ndim != 3:
        raise ConfigurationError(f"image must be (C, H, W), got shape {image.shape}")
    _, h, w = image.shape
    if scale == 1.0:
        return image
    h2 = int(round(scale * h))
    w2 = int(round(scale * w))
    if h2 < MIN_INPUT_SIDE or w2 < MIN_INPUT_SIDE:
        raise InferenceError(
            f"resized dims {w2}x{h2} fall below the "
            f"{MIN_INPUT_SIDE}x{MIN_INPUT_SIDE} minimum"
        )
    return _resize_to(image, h2, w2)


def _resize_to(image: np.ndarray, h2: int, w2: int) -> np.ndarray:
    """Bilinear resample to exact target dims (half-pixel convention)."""
    _, h, w = image.shape
    src_y = np.clip((np.arange(h2) + 0.5) * (h / h2) - 0.5, 0.0, h - 1.0)
    src_x = np.clip((np.arange(w2) + 0.5) * (w / w2) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(src_y).astype(np.intp)
    x0 = np.floor(src_x).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (src_y - y0).astype(image.dtype, copy=False)
    wx = (src_x - x0).astype(image.dtype, copy=False)
    top = image[:, y0, :] * (1.0 - wy)[None, :, None] + image[:, y1, :] * wy[None, :, None]
    out = (
        top[:, :, x0] * (1.0 - wx)[None, None, :]
        + top[:, :, x1] * wx[None, None, :]
    )
    return np.ascontiguousarray(out, dtype=image.dtype)


def multiscale_count(
    model: FcnModel, image: np.ndarray, scheme=DEFAULT_SCHEME
) -> tuple[float, list[float]]:
    """Mean of per-scale count estimates; the mean is clamped at >= 0.

    Per-scale counts are reported raw.  math.fsum keeps the mean
    independent of scale ordering.
    """
    scales = validate_scheme(scheme)
    per_scale: list[float] = []
    for s in scales:
        try:
            resized = resize_bilinear(image, s)
            per_scale.append(model_mod.predict_count(model, resized))
        except InferenceError as exc:
            raise InferenceError(f"scale {s:g}: {exc}") from exc
    count = max(0.0, math.fsum(per_scale) / len(per_scale))
    return count, per_scale


def mae(pairs) -> float:
    """Mean absolute count error over (true, estimated) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ConfigurationError("metric over empty pair set")
    return float(np.mean([abs(z - est) for z, est in pairs]))


def mse(pairs) -> float:
    """Rooted mean squared count error over (true, estimated) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ConfigurationError("metric over empty pair set")
    return float(np.sqrt(np.mean([(z - est) ** 2 for z, est in pairs])))


@dataclass
class EvalRow:
    id: str
    true_count: float
    estimated: float
    latency_ms: float


@dataclass
class EvalReport:
    """Per-image counts plus the aggregate metrics of one evaluation."""

    rows: list[EvalRow]
    mae: float
    mse: float
    scheme: tuple[float, ...]
    dataset: str = ""
    skipped: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.skipped

    def pairs(self) -> list[tuple[float, float]]:
        return [(r.true_count, r.estimated) for r in self.rows]


def write_eval_csv(report: EvalReport, path) -> None:
    """CSV rows under a fixed header; scheme and dataset ride along as
    leading # comments so reports can serve as cross-domain baselines."""
    lines = [
        f"# scheme: {','.join(f'{s:g}' for s in report.scheme)}",
        f"# dataset: {report.dataset}",
    ]
    for sample_id in report.skipped:
        lines.append(f"# skipped: {sample_id}")
    lines.append(EVAL_CSV_HEADER)
    for r in report.rows:
        lines.append(f"{r.id},{r.true_count:g},{r.estimated:.4f},{r.latency_ms:.3f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_eval_csv(path) -> EvalReport:
    """Rebuild an EvalReport (aggregates recomputed) from write_eval_csv."""
    scheme: tuple[float, ...] = ()
    dataset = ""
    skipped: list[str] = []
    rows: list[EvalRow] = []
    saw_header = False
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("scheme:"):
                    scheme = validate_scheme(
                        s for s in body.split(":", 1)[1].strip().split(",") if s
                    )
                elif body.startswith("dataset:"):
                    dataset = body.split(":", 1)[1].strip()
                elif body.startswith("skipped:"):
                    skipped.append(body.split(":", 1)[1].strip())
                continue
            if not saw_header:
                if line != EVAL_CSV_HEADER:
                    raise ConfigurationError(
                        f"{path}: expected header {EVAL_CSV_HEADER!r}, got {line!r}"
                    )
                saw_header = True
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ConfigurationError(f"{path}: malformed row {line!r}")
            rows.append(
                EvalRow(parts[0], float(parts[1]), float(parts[2]), float(parts[3]))
            )
    if not saw_header:
        raise ConfigurationError(f"{path}: missing eval CSV header")
    if not rows:
        raise ConfigurationError(f"{path}: eval report has no rows")
    pairs = [(r.true_count, r.estimated) for r in rows]
    return EvalReport(
        rows=rows,
        mae=mae(pairs),
        mse=mse(pairs),
        scheme=scheme,
        dataset=dataset,
        skipped=skipped,
    )


def _load_eval_samples(
    source,
) -> tuple[str, list[DotAnnotatedImage], list[str], list[str]]:
    """Accepts a DatasetManifest or an in-memory sample list.

    Returns (dataset name, loaded samples, skipped ids, notes); manifest
    entries that fail to load are skipped with a warning.
    """
    if isinstance(source, DatasetManifest):
        samples: list[DotAnnotatedImage] = []
        skipped: list[str] = []
        notes: list[str] = []
        for ann_path in source.sample_paths:
            try:
                samples.append(load_annotations(ann_path))
            except (CrowdCountError, OSError) as exc:
                skipped.append(Path(ann_path).stem)
                note = f"skipped {ann_path}: {exc}"
                notes.append(note)
                warnings.warn(note)
        return source.name, samples, skipped, notes
    samples = list(source)
    return "", samples, [], []


def evaluate(
    model: FcnModel, source, scheme=DEFAULT_SCHEME, threads: int | None = None
) -> EvalReport:
    """Count every sample with multiscale_count and aggregate MAE/MSE.

    source is a DatasetManifest or a list of samples.  Latency is the
    wall clock around the forward passes only.  With threads > 1 images
    are processed concurrently; results are ordered as submitted, so
    they match serial execution.
    """
    scales = validate_scheme(scheme)
    dataset, samples, skipped, notes = _load_eval_samples(source)
    if not samples and not skipped:
        raise ConfigurationError("evaluation over an empty sample set")

    def run_one(sample: DotAnnotatedImage) -> EvalRow:
        start = time.perf_counter()
        count, _ = multiscale_count(model, sample.pixels, scales)
        elapsed_ms = 1000.0 * (time.perf_counter() - start)
        return EvalRow(sample.id, float(len(sample.heads)), count, elapsed_ms)

    rows: list[EvalRow] = []
    if threads is not None and threads > 1 and len(samples) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run_one, samples))
    else:
        rows = [run_one(s) for s in samples]

    if not rows:
        raise ConfigurationError("all samples failed to load; nothing to evaluate")
    pairs = [(r.true_count, r.estimated) for r in rows]
    if skipped:
        notes = notes + [f"incomplete: {len(skipped)} of "
                         f"{len(samples) + len(skipped)} samples skipped"]
    return EvalReport(
        rows=rows,
        mae=mae(pairs),
        mse=mse(pairs),
        scheme=scales,
        dataset=dataset,
        skipped=skipped,
        notes=notes,
    )


@dataclass
class CrossDomainReport:
    """Out-of-domain metrics against the target's in-domain baseline."""

    source_domain: str
    target_domain: str
    mae: float
    mse: float
    baseline_mae: float
    baseline_mse: float

    @property
    def pct_increase_mae(self) -> float:
        return 100.0 * (self.mae - self.baseline_mae) / self.baseline_mae

    @property
    def pct_increase_mse(self) -> float:
        return 100.0 * (self.mse - self.baseline_mse) / self.baseline_mse

    def summary(self) -> str:
        return (
            f"{self.source_domain} -> {self.target_domain}: "
            f"MAE {self.mae:.2f} ({self.pct_increase_mae:+.1f}%), "
            f"MSE {self.mse:.2f} ({self.pct_increase_mse:+.1f}%)"
        )


CROSS_CSV_HEADER = (
    "source,target,mae,mse,baseline_mae,baseline_mse,pct_increase_mae,pct_increase_mse"
)


def write_cross_csv(report: CrossDomainReport, path) -> None:
    row = (
        f"{report.source_domain},{report.target_domain},"
        f"{report.mae:.4f},{report.mse:.4f},"
        f"{report.baseline_mae:.4f},{report.baseline_mse:.4f},"
        f"{report.pct_increase_mae:.1f},{report.pct_increase_mse:.1f}"
    )
    Path(path).write_text(CROSS_CSV_HEADER + "\n" + row + "\n", encoding="utf-8")


def cross_evaluate(
    model: FcnModel,
    source_name: str,
    target,
    baseline: EvalReport,
    scheme=DEFAULT_SCHEME,
    threads: int | None = None,
) -> tuple[CrossDomainReport, EvalReport]:
    """Evaluate a foreign-domain model on a target set and compare with
    the target's own in-domain baseline report.

    The baseline must cover the same samples and scale scheme; baseline
    metrics must be non-zero for the percentage fields to exist.
    """
    scales = validate_scheme(scheme)
    if baseline.scheme and tuple(baseline.scheme) != scales:
        raise ConfigurationError(
            f"baseline scheme {baseline.scheme} != requested {scales}"
        )
    report = evaluate(model, target, scales, threads=threads)
    baseline_ids = sorted(r.id for r in baseline.rows)
    target_ids = sorted(r.id for r in report.rows)
    if baseline_ids != target_ids:
        raise ConfigurationError(
            "baseline report covers different samples than the target manifest"
        )
    if baseline.mae <= 0 or baseline.mse <= 0:
        raise ConfigurationError(
            "baseline MAE/MSE must be positive to express percentage increases"
        )
    cross = CrossDomainReport(
        source_domain=source_name,
        target_domain=report.dataset or baseline.dataset or "target",
        mae=report.mae,
        mse=report.mse,
        baseline_mae=baseline.mae,
        baseline_mse=baseline.mse,
    )
    return cross, report


@dataclass
class SweepPoint:
    scale: float
    mae: float
    mse: float
    median_latency_ms: float
    mean_latency_ms: float
    flops: float


def write_sweep_csv(points: list[SweepPoint], path) -> None:
    """Fixed-header curve; the latency column carries the mean."""
    lines = [SWEEP_CSV_HEADER]
    for p in points:
        lines.append(
            f"{p.scale:g},{p.mae:.4f},{p.mse:.4f},"
            f"{p.mean_latency_ms:.3f},{p.flops:.0f}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def speed_accuracy_sweep(model: FcnModel, source, scales) -> list[SweepPoint]:
    """Single-scale accuracy and latency at each scale factor.

    Scales must be descending and in (0, 1].  Runs serially so latency
    samples do not contend; the median per scale absorbs timer noise.
    FLOPs are the mean per-image forward cost at that scale.
    """
    scales = validate_scheme(scales)
    if list(scales) != sorted(scales, reverse=True) or len(set(scales)) != len(scales):
        raise ConfigurationError(f"sweep scales must be strictly descending, got {scales}")
    _, samples, _, _ = _load_eval_samples(source)
    if not samples:
        raise ConfigurationError("sweep over an empty sample set")
    points: list[SweepPoint] = []
    for s in scales:
        report = evaluate(model, samples, (s,), threads=None)
        latencies = [r.latency_ms for r in report.rows]
        total_flops = 0
        for sample in samples:
            h2 = int(round(s * sample.height)) if s != 1.0 else sample.height
            w2 = int(round(s * sample.width)) if s != 1.0 else sample.width
            total_flops += model_mod.flops(model, h2, w2)
        points.append(
            SweepPoint(
                scale=s,
                mae=report.mae,
                mse=report.mse,
                median_latency_ms=float(statistics.median(latencies)),
                mean_latency_ms=float(np.mean(latencies)),
                flops=total_flops / len(samples),
            )
        )
    return points
