"""SGD training loop for the density regressor.

Pixel-wise Euclidean loss, heavy-ball SGD with weight decay, a single
learning-rate drop, epoch-wise seeded shuffling, and checkpoint/resume
that is bit-exact because momentum buffers and shuffle state are
serialized alongside the weights.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as model_mod
from .data import DotAnnotatedImage
from .density import DensityMap, block_sum_downsample, load_dmap, render_adaptive, save_dmap
from .errors import CheckpointError, ConfigurationError, DivergenceError
from .model import FcnModel
from .nnops import sgd_step

LOG_HEADER = "iteration,loss,val_mae,val_mse,lr"

_STATE_MAGIC = b"FCNS"
_STATE_VERSION = 1

PRESETS = {
    # Full-scale schedule: lr 1e-6 dropped 10x at 1e6 of 2e6 iterations.
    "paper-sht": dict(
        base_lr=1e-6,
        lr_drop_factor=10.0,
        lr_drop_at_iter=1_000_000,
        total_iters=2_000_000,
        init_std=0.01,
        checkpoint_every=100_000,
        validate_every=10_000,
    ),
    # Desk-scale schedule for the synthetic end-to-end run: minutes, not
    # days, on a CPU.  Larger init keeps early activations from
    # vanishing through the 6-layer chain at this tiny iteration budget.
    "desk": dict(
        base_lr=2e-5,
        lr_drop_factor=10.0,
        lr_drop_at_iter=15_000,
        total_iters=20_000,
        init_std=0.05,
        checkpoint_every=5_000,
        validate_every=500,
    ),
}


@dataclass
class TrainConfig:
    """Optimizer schedule; defaults follow the full-scale recipe."""

    seed: int
    base_lr: float = 1e-6
    lr_drop_factor: float = 10.0
    lr_drop_at_iter: int = 1_000_000
    total_iters: int = 2_000_000
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 1
    init_std: float = 0.01
    checkpoint_every: int = 100_000
    validate_every: int = 10_000

    def __post_init__(self):
        if self.total_iters < 1:
            raise ConfigurationError(f"total_iters must be >= 1, got {self.total_iters}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.base_lr <= 0:
            raise ConfigurationError(f"base_lr must be > 0, got {self.base_lr}")
        if self.lr_drop_factor <= 0:
            raise ConfigurationError(
                f"lr_drop_factor must be > 0, got {self.lr_drop_factor}"
            )
        if self.lr_drop_at_iter < 1:
            raise ConfigurationError(
                f"lr_drop_at_iter must be >= 1, got {self.lr_drop_at_iter}"
            )
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError(
                f"weight_decay must be >= 0, got {self.weight_decay}"
            )
        if self.init_std <= 0:
            raise ConfigurationError(f"init_std must be > 0, got {self.init_std}")
        if self.checkpoint_every < 1 or self.validate_every < 1:
            raise ConfigurationError("checkpoint_every and validate_every must be >= 1")

    @classmethod
    def preset(cls, name: str, seed: int, **overrides) -> "TrainConfig":
        if name not in PRESETS:
            raise ConfigurationError(
                f"unknown preset {name!r}; pick one of {sorted(PRESETS)}"
            )
        fields = dict(PRESETS[name])
        fields.update(overrides)
        return cls(seed=seed, **fields)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Parse a key=value config file; a seed line is mandatory.

        An optional preset=NAME line loads that preset's values first;
        later keys override them.  Lines starting with # are comments.
        """
        int_fields = {
            "seed",
            "lr_drop_at_iter",
            "total_iters",
            "batch_size",
            "checkpoint_every",
            "validate_every",
        }
        float_fields = {
            "base_lr",
            "lr_drop_factor",
            "momentum",
            "weight_decay",
            "init_std",
        }
        values: dict = {}
        preset_name = None
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigurationError(
                        f"{path}:{lineno}: expected key=value, got {line!r}"
                    )
                key, _, value = line.partition("=")
                key, value = key.strip(), value.strip()
                if key == "preset":
                    preset_name = value
                    continue
                if key in values:
                    raise ConfigurationError(f"{path}:{lineno}: duplicate key {key!r}")
                try:
                    if key in int_fields:
                        values[key] = int(float(value))
                    elif key in float_fields:
                        values[key] = float(value)
                    else:
                        raise ConfigurationError(
                            f"{path}:{lineno}: unknown config key {key!r}"
                        )
                except ValueError:
                    raise ConfigurationError(
                        f"{path}:{lineno}: bad value {value!r} for {key}"
                    )
        if preset_name is not None:
            seed = values.pop("seed", None)
            if seed is None:
                raise ConfigurationError(f"{path}: config must set seed")
            return cls.preset(preset_name, seed=seed, **values)
        if "seed" not in values:
            raise ConfigurationError(f"{path}: config must set seed")
        return cls(**values)

    def to_file(self, path) -> None:
        lines = ["# training configuration"]
        for f in dataclasses.fields(self):
            lines.append(f"{f.name}={getattr(self, f.name)}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class LossReport:
    """One validation-interval record of the training run."""

    iteration: int
    loss: float
    val_mae: float | None
    val_mse: float | None
    lr: float

    def csv_row(self) -> str:
        mae = f"{self.val_mae:.6f}" if self.val_mae is not None else ""
        mse = f"{self.val_mse:.6f}" if self.val_mse is not None else ""
        return f"{self.iteration},{self.loss:.8g},{mae},{mse},{self.lr:.8g}"


def read_loss_log(path) -> list[LossReport]:
    """Parse a CSV written during train() back into LossReports."""
    reports: list[LossReport] = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != LOG_HEADER:
            raise ConfigurationError(
                f"{path}: expected header {LOG_HEADER!r}, got {header!r}"
            )
        for lineno, raw in enumerate(fh, start=2):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise ConfigurationError(f"{path}:{lineno}: malformed row {line!r}")
            reports.append(
                LossReport(
                    iteration=int(parts[0]),
                    loss=float(parts[1]),
                    val_mae=float(parts[2]) if parts[2] else None,
                    val_mse=float(parts[3]) if parts[3] else None,
                    lr=float(parts[4]),
                )
            )
    return reports


def euclidean_loss(
    estimate: DensityMap, target: DensityMap, batch_size: int = 1
) -> tuple[float, np.ndarray]:
    """Half squared error summed over pixels, and its gradient map.

    loss = (1/2N) * sum((est - tgt)^2); gradient = (est - tgt)/N.
    """
    if estimate.values.shape != target.values.shape:
        raise ConfigurationError(
            f"estimate dims {estimate.values.shape} != target {target.values.shape}"
        )
    if estimate.stride != target.stride:
        raise ConfigurationError(
            f"estimate stride {estimate.stride} != target stride {target.stride}"
        )
    if batch_size < 1:
        raise ConfigurationError(f"batch size must be >= 1, got {batch_size}")
    diff = estimate.values - target.values
    loss = float(np.sum(diff * diff, dtype=np.float64)) / (2.0 * batch_size)
    return loss, diff / batch_size


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Step schedule: base rate, divided once at the drop iteration."""
    if not 0 <= iteration < config.total_iters:
        raise ConfigurationError(
            f"iteration {iteration} outside [0, {config.total_iters})"
        )
    if iteration < config.lr_drop_at_iter:
        return config.base_lr
    return config.base_lr / config.lr_drop_factor


def target_cache_name(sample_id: str, stride: int) -> str:
    return f"{sample_id}_s{stride}.dmap"


def generate_targets(
    samples: list[DotAnnotatedImage], output_stride: int, cache_dir=None
) -> dict[str, DensityMap]:
    """Ground-truth density maps at the model's output stride.

    Rendered at full resolution, block-sum downsampled, and quantized to
    float32 (the on-disk precision) so cached and cold results are
    bit-identical.  Corrupt cache files are regenerated with a warning.
    """
    if output_stride < 1:
        raise ConfigurationError(f"output stride must be >= 1, got {output_stride}")
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
    targets: dict[str, DensityMap] = {}
    for sample in samples:
        cache_path = (
            cache_dir / target_cache_name(sample.id, output_stride)
            if cache_dir is not None
            else None
        )
        loaded = None
        if cache_path is not None and cache_path.exists():
            try:
                candidate = load_dmap(cache_path)
                expected = (
                    -(-sample.height // output_stride),
                    -(-sample.width // output_stride),
                )
                if (
                    candidate.stride != output_stride
                    or candidate.values.shape != expected
                ):
                    raise CheckpointError(
                        f"{cache_path}: cached map does not match sample geometry"
                    )
                loaded = candidate
            except CheckpointError as exc:
                warnings.warn(f"regenerating corrupt target cache: {exc}")
        if loaded is None:
            full = render_adaptive(sample.height, sample.width, sample.heads)
            down = block_sum_downsample(full, output_stride)
            loaded = DensityMap(down.values.astype(np.float32), stride=down.stride)
            if cache_path is not None:
                save_dmap(loaded, cache_path)
        targets[sample.id] = loaded
    return targets


@dataclass
class TrainState:
    """Mid-run bookkeeping needed to resume a run bit-exactly."""

    iteration: int
    epoch_position: int
    epoch_order: np.ndarray
    rng_state: dict


def save_train_state(path, model: FcnModel, state: TrainState) -> None:
    """Sidecar next to a checkpoint: shuffle/RNG state plus momentum
    buffers (JSON header, then float32 velocity payload with a CRC)."""
    header = json.dumps(
        {
            "iteration": state.iteration,
            "epoch_position": state.epoch_position,
            "epoch_order": [int(i) for i in state.epoch_order],
            "rng_state": state.rng_state,
        },
        sort_keys=True,
    ).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(p.vel_weights, dtype="<f4").tobytes()
        + np.ascontiguousarray(p.vel_bias, dtype="<f4").tobytes()
        for p in model.params
    )
    with open(path, "wb") as fh:
        fh.write(_STATE_MAGIC)
        fh.write(struct.pack("<HI", _STATE_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", zlib.crc32(payload)))
        fh.write(payload)


def load_train_state(path, model: FcnModel) -> TrainState:
    """Restore a sidecar written by save_train_state; the model's
    momentum buffers are filled in place."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 10 or blob[:4] != _STATE_MAGIC:
        raise CheckpointError(f"{path}: not a training-state file")
    version, header_len = struct.unpack_from("<HI", blob, 4)
    if version != _STATE_VERSION:
        raise CheckpointError(f"{path}: unsupported state version {version}")
    offset = 10
    try:
        header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
        offset += header_len
        (crc_stored,) = struct.unpack_from("<I", blob, offset)
    except (ValueError, struct.error) as exc:
        raise CheckpointError(f"{path}: truncated training-state header") from exc
    offset += 4
    payload = blob[offset:]
    expected = sum((p.weights.size + p.bias.size) * 4 for p in model.params)
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: expected {expected} velocity bytes, found {len(payload)}"
        )
    if zlib.crc32(payload) != crc_stored:
        raise CheckpointError(f"{path}: checksum mismatch, state corrupt")
    pos = 0
    for p in model.params:
        n_w = p.weights.size
        p.vel_weights = (
            np.frombuffer(payload, dtype="<f4", count=n_w, offset=pos)
            .reshape(p.weights.shape)
            .copy()
        )
        pos += n_w * 4
        p.vel_bias = np.frombuffer(
            payload, dtype="<f4", count=p.bias.size, offset=pos
        ).copy()
        pos += p.bias.size * 4
    return TrainState(
        iteration=int(header["iteration"]),
        epoch_position=int(header["epoch_position"]),
        epoch_order=np.asarray(header["epoch_order"], dtype=np.int64),
        rng_state=header["rng_state"],
    )


def _validate(model: FcnModel, val_samples: list[DotAnnotatedImage]) -> tuple[float, float]:
    errors = []
    for sample in val_samples:
        estimated = model_mod.predict_count(model, sample.pixels)
        errors.append(len(sample.heads) - estimated)
    errors_arr = np.asarray(errors, dtype=np.float64)
    val_mae = float(np.mean(np.abs(errors_arr)))
    val_mse = float(np.sqrt(np.mean(errors_arr**2)))
    return val_mae, val_mse


def _write_checkpoint(directory: Path, name: str, model: FcnModel, state: TrainState):
    ckpt_path = directory / f"{name}.fcnc"
    model_mod.save_checkpoint(model, ckpt_path)
    save_train_state(ckpt_path.with_suffix(".state"), model, state)
    return ckpt_path


def train(
    model: FcnModel,
    train_samples: list[DotAnnotatedImage],
    val_samples: list[DotAnnotatedImage],
    config: TrainConfig,
    targets: dict[str, DensityMap] | None = None,
    log_path=None,
    checkpoint_dir=None,
    resume: TrainState | None = None,
) -> tuple[FcnModel, list[LossReport]]:
    """Run the SGD loop; returns the trained model and interval reports.

    One iteration = one SGD step on one sample.  Sample order is a
    seeded shuffle per epoch.  A LossReport is emitted (and a CSV row
    appended, if log_path is given) every validate_every iterations;
    checkpoints plus resume sidecars are written every checkpoint_every
    iterations and at the end when checkpoint_dir is given.
    """
    if not train_samples:
        raise ConfigurationError("train_samples must be non-empty")
    if config.batch_size != 1:
        raise ConfigurationError(
            "the training loop implements the single-sample schedule "
            f"(batch_size 1); got {config.batch_size}"
        )
    stride = model.spec.output_stride
    if targets is None:
        targets = generate_targets(train_samples, stride)
    for sample in train_samples:
        target = targets.get(sample.id)
        if target is None:
            raise ConfigurationError(f"no ground-truth target for sample {sample.id!r}")
        if target.stride != stride:
            raise ConfigurationError(
                f"target stride {target.stride} != model output stride {stride} "
                f"for sample {sample.id!r}"
            )

    rng = np.random.default_rng(config.seed)
    if resume is not None:
        iteration = resume.iteration
        order = np.asarray(resume.epoch_order, dtype=np.int64)
        position = resume.epoch_position
        rng.bit_generator.state = resume.rng_state
        if order.size != len(train_samples):
            raise ConfigurationError(
                f"resume state covers {order.size} samples, got {len(train_samples)}"
            )
    else:
        iteration = 0
        order = rng.permutation(len(train_samples))
        position = 0

    reports: list[LossReport] = []
    log_fh = None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = resume is None or not log_path.exists()
        log_fh = open(log_path, "w" if fresh else "a", encoding="utf-8")
        if fresh:
            log_fh.write(LOG_HEADER + "\n")
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    try:
        while iteration < config.total_iters:
            if position >= order.size:
                order = rng.permutation(len(train_samples))
                position = 0
            sample = train_samples[int(order[position])]
            position += 1
            lr = lr_at(iteration, config)

            x = model_mod.prepare_input(model, sample.pixels)
            out, caches = model_mod.forward_collect(model, x)
            estimate = DensityMap(out[0], stride=stride)
            loss, grad = euclidean_loss(estimate, targets[sample.id], config.batch_size)
            iteration += 1
            if not np.isfinite(loss):
                raise DivergenceError(iteration, loss)
            grads = model_mod.backward_chain(model, caches, grad[None])
            for layer, (grad_w, grad_b) in zip(model.params, grads):
                sgd_step(layer, grad_w, grad_b, lr, config.momentum, config.weight_decay)

            if iteration % config.validate_every == 0 or iteration == config.total_iters:
                val_mae, val_mse = (
                    _validate(model, val_samples) if val_samples else (None, None)
                )
                report = LossReport(iteration, loss, val_mae, val_mse, lr)
                reports.append(report)
                if log_fh is not None:
                    log_fh.write(report.csv_row() + "\n")
                    log_fh.flush()
            if checkpoint_dir is not None and (
                iteration % config.checkpoint_every == 0
                or iteration == config.total_iters
            ):
                state = TrainState(
                    iteration=iteration,
                    epoch_position=position,
                    epoch_order=order,
                    rng_state=rng.bit_generator.state,
                )
                name = (
                    "final"
                    if iteration == config.total_iters
                    else f"ckpt_{iteration:08d}"
                )
                _write_checkpoint(checkpoint_dir, name, model, state)
    finally:
        if log_fh is not None:
            log_fh.close()
    return model, reports

