"""Single-column fully convolutional density regressor.

The default network is six same-padded conv layers (ReLU after all but
the last 1x1 layer) with two 2x2 max-pools, so any input of at least
16x16 maps to a density heatmap at output stride 4.  The chain is fixed
and differentiated explicitly; there is no autodiff graph.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import nnops
from .density import DensityMap
from .errors import CheckpointError, ConfigurationError, InferenceError
from .nnops import ConvLayerParams

MIN_INPUT_SIDE = 16

_CKPT_MAGIC = b"FCNC"
_CKPT_VERSION = 1
_KIND_CONV = 0
_KIND_POOL = 1


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    in_channels: int
    out_channels: int
    relu: bool


@dataclass(frozen=True)
class PoolSpec:
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    """Ordered conv/pool layer descriptors forming a simple chain."""

    layers: tuple

    def __post_init__(self):
        prev_out = None
        for entry in self.layers:
            if isinstance(entry, ConvSpec):
                if entry.kernel % 2 == 0 or entry.kernel < 1:
                    raise ConfigurationError(
                        f"conv kernel must be odd and >= 1, got {entry.kernel}"
                    )
                if prev_out is not None and entry.in_channels != prev_out:
                    raise ConfigurationError(
                        f"conv expects {entry.in_channels} channels but the "
                        f"previous layer produces {prev_out}"
                    )
                prev_out = entry.out_channels
            elif not isinstance(entry, PoolSpec):
                raise ConfigurationError(f"unknown layer descriptor {entry!r}")

    @property
    def conv_specs(self) -> list[ConvSpec]:
        return [e for e in self.layers if isinstance(e, ConvSpec)]

    @property
    def input_channels(self) -> int:
        return self.conv_specs[0].in_channels

    @property
    def output_stride(self) -> int:
        return 2 ** sum(1 for e in self.layers if isinstance(e, PoolSpec))


def default_architecture() -> ArchitectureSpec:
    """The stock 6-conv single-column network (324,117 parameters)."""
    return ArchitectureSpec(
        layers=(
            ConvSpec(9, 3, 36, relu=True),
            PoolSpec(),
            ConvSpec(7, 36, 72, relu=True),
            PoolSpec(),
            ConvSpec(7, 72, 36, relu=True),
            ConvSpec(7, 36, 24, relu=True),
            ConvSpec(7, 24, 16, relu=True),
            ConvSpec(1, 16, 1, relu=False),
        )
    )


@dataclass
class FcnModel:
    spec: ArchitectureSpec
    params: list[ConvLayerParams]

    @classmethod
    def initialize(
        cls, spec: ArchitectureSpec | None = None, std: float = 0.01, seed: int = 0
    ) -> "FcnModel":
        """Gaussian weight init (zero biases) from one seeded stream."""
        spec = spec or default_architecture()
        rng = np.random.default_rng(seed)
        params = []
        for conv in spec.conv_specs:
            weights = nnops.draw_gaussian(
                rng, (conv.out_channels, conv.in_channels, conv.kernel, conv.kernel), std
            )
            bias = np.zeros(conv.out_channels, dtype=np.float32)
            params.append(ConvLayerParams(weights, bias))
        return cls(spec=spec, params=params)

    @classmethod
    def zeros(cls, spec: ArchitectureSpec | None = None) -> "FcnModel":
        spec = spec or default_architecture()
        params = [
            ConvLayerParams(
                np.zeros((c.out_channels, c.in_channels, c.kernel, c.kernel), np.float32),
                np.zeros(c.out_channels, np.float32),
            )
            for c in spec.conv_specs
        ]
        return cls(spec=spec, params=params)


def prepare_input(model: FcnModel, image: np.ndarray) -> np.ndarray:
    """Validate dims and replicate grayscale to the model's channel count."""
    if image.ndim == 2:
        image = image[None, :, :]
    if image.ndim != 3:
        raise ConfigurationError(f"image must be (C, H, W), got shape {image.shape}")
    c, h, w = image.shape
    if h < MIN_INPUT_SIDE or w < MIN_INPUT_SIDE:
        raise InferenceError(
            f"input {w}x{h} below the {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE} minimum"
        )
    want = model.spec.input_channels
    if c == 1 and want == 3:
        image = np.repeat(image, 3, axis=0)
    elif c != want:
        raise ConfigurationError(
            f"model expects {want} input channels, image has {c}"
        )
    return image


def forward_collect(model: FcnModel, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Forward pass keeping the per-layer records backprop needs."""
    caches = []
    conv_idx = 0
    for entry in model.spec.layers:
        if isinstance(entry, ConvSpec):
            layer = model.params[conv_idx]
            pre = nnops.conv2d_forward(x, layer)
            caches.append(("conv", x, pre if entry.relu else None))
            x = nnops.relu(pre) if entry.relu else pre
            conv_idx += 1
        else:
            pooled, argmax = nnops.maxpool2_forward(x)
            caches.append(("pool", argmax, x.shape))
            x = pooled
    return x, caches


def backward_chain(
    model: FcnModel, caches: list, grad_out: np.ndarray
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Backprop the chain; returns (grad_weights, grad_bias) per conv layer."""
    grads: list[tuple[np.ndarray, np.ndarray]] = []
    conv_idx = len(model.params)
    grad = grad_out
    for entry, cache in zip(reversed(model.spec.layers), reversed(caches)):
        if isinstance(entry, ConvSpec):
            conv_idx -= 1
            _, layer_input, pre = cache[0], cache[1], cache[2]
            if entry.relu:
                grad = nnops.relu_backward(pre, grad)
            gw, gb, grad = nnops.conv2d_backward(
                layer_input, model.params[conv_idx], grad
            )
            grads.append((gw, gb))
        else:
            _, argmax, in_shape = cache
            grad = nnops.maxpool2_backward(grad, argmax, in_shape)
    grads.reverse()
    return grads


def forward(model: FcnModel, image: np.ndarray) -> DensityMap:
    """Map an image to its density heatmap (raw output, may be negative)."""
    x = prepare_input(model, image)
    out, _ = forward_collect(model, x)
    return DensityMap(out[0], stride=model.spec.output_stride)


def predict_count(model: FcnModel, image: np.ndarray) -> float:
    """Element-wise sum of the output heatmap."""
    return forward(model, image).count()


def count_params(spec_or_model) -> int:
    """Total learnable parameters: sum of k^2 * c_in * c_out + c_out."""
    spec = spec_or_model.spec if isinstance(spec_or_model, FcnModel) else spec_or_model
    return sum(
        c.kernel**2 * c.in_channels * c.out_channels + c.out_channels
        for c in spec.conv_specs
    )


def flops(spec_or_model, height: int, width: int) -> int:
    """Multiply-add FLOPs of one forward pass at the given input size."""
    spec = spec_or_model.spec if isinstance(spec_or_model, FcnModel) else spec_or_model
    total = 0
    h, w = height, width
    for entry in spec.layers:
        if isinstance(entry, ConvSpec):
            total += 2 * entry.kernel**2 * entry.in_channels * entry.out_channels * h * w
        else:
            h, w = (h + 1) // 2, (w + 1) // 2
    return total


def _pack_spec(spec: ArchitectureSpec) -> bytes:
    chunks = [struct.pack("<H", len(spec.layers))]
    for entry in spec.layers:
        if isinstance(entry, ConvSpec):
            chunks.append(
                struct.pack(
                    "<BHHHB",
                    _KIND_CONV,
                    entry.kernel,
                    entry.in_channels,
                    entry.out_channels,
                    int(entry.relu),
                )
            )
        else:
            chunks.append(struct.pack("<B", _KIND_POOL))
    return b"".join(chunks)


def _unpack_spec(blob: bytes, offset: int) -> tuple[ArchitectureSpec, int]:
    (n_layers,) = struct.unpack_from("<H", blob, offset)
    offset += 2
    layers: list = []
    for _ in range(n_layers):
        (kind,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        if kind == _KIND_CONV:
            k, cin, cout, has_relu = struct.unpack_from("<HHHB", blob, offset)
            offset += 7
            layers.append(ConvSpec(k, cin, cout, relu=bool(has_relu)))
        elif kind == _KIND_POOL:
            layers.append(PoolSpec())
        else:
            raise CheckpointError(f"unknown layer kind {kind} in checkpoint")
    try:
        spec = ArchitectureSpec(layers=tuple(layers))
    except ConfigurationError as exc:
        raise CheckpointError(f"checkpoint violates architecture invariants: {exc}")
    return spec, offset


def save_checkpoint(model: FcnModel, path) -> None:
    """Binary checkpoint: magic "FCNC", version u16, spec block, CRC32 of
    the weight payload, then little-endian float32 weights+bias per layer
    in declaration order."""
    payload = b"".join(
        np.ascontiguousarray(p.weights, dtype="<f4").tobytes()
        + np.ascontiguousarray(p.bias, dtype="<f4").tobytes()
        for p in model.params
    )
    blob = (
        _CKPT_MAGIC
        + struct.pack("<H", _CKPT_VERSION)
        + _pack_spec(model.spec)
        + struct.pack("<I", zlib.crc32(payload))
        + payload
    )
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> FcnModel:
    """Load a checkpoint, verifying magic, version, CRC, and shapes."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 6 or blob[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        spec, offset = _unpack_spec(blob, 6)
        (crc_stored,) = struct.unpack_from("<I", blob, offset)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint header") from exc
    offset += 4
    payload = blob[offset:]
    expected = sum(
        (c.kernel**2 * c.in_channels * c.out_channels + c.out_channels) * 4
        for c in spec.conv_specs
    )
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: expected {expected} weight bytes, found {len(payload)}"
        )
    if zlib.crc32(payload) != crc_stored:
        raise CheckpointError(f"{path}: checksum mismatch, checkpoint corrupt")
    params = []
    pos = 0
    for c in spec.conv_specs:
        n_w = c.kernel**2 * c.in_channels * c.out_channels
        weights = (
            np.frombuffer(payload, dtype="<f4", count=n_w, offset=pos)
            .reshape(c.out_channels, c.in_channels, c.kernel, c.kernel)
            .copy()
        )
        pos += n_w * 4
        bias = np.frombuffer(payload, dtype="<f4", count=c.out_channels, offset=pos).copy()
        pos += c.out_channels * 4
        params.append(ConvLayerParams(weights, bias))
    return FcnModel(spec=spec, params=params)
