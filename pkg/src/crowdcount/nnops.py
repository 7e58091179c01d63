"""Dense numeric kernels: 2D convolution, ReLU, 2x2 max-pooling, SGD.

Arrays are plain numpy ndarrays in channel-first (C, H, W) layout,
float32 in the training path.  Every operation preserves the dtype of
its inputs, so the finite-difference tests can run the identical code
in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError


@dataclass
class ConvLayerParams:
    """Weights, bias and momentum buffers of one convolutional layer.

    weights has shape (out_channels, in_channels, k, k) with odd k;
    momentum buffers start at zero and are updated by sgd_step.
    """

    weights: np.ndarray
    bias: np.ndarray
    vel_weights: np.ndarray = field(default=None)  # type: ignore[assignment]
    vel_bias: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ConfigurationError(
                f"conv weights must be (out, in, k, k), got {self.weights.shape}"
            )
        if self.weights.shape[2] % 2 == 0:
            raise ConfigurationError(
                f"kernel size must be odd, got {self.weights.shape[2]}"
            )
        if self.bias.shape != (self.weights.shape[0],):
            raise ConfigurationError(
                f"bias shape {self.bias.shape} does not match "
                f"{self.weights.shape[0]} output channels"
            )
        if self.vel_weights is None:
            self.vel_weights = np.zeros_like(self.weights)
        if self.vel_bias is None:
            self.vel_bias = np.zeros_like(self.bias)

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]


_COLS_BUDGET_BYTES = 32 << 20


def _rows_per_chunk(in_channels: int, k: int, width: int, itemsize: int) -> int:
    """Output rows per patch-matrix block, bounding it to a fixed budget."""
    per_row = in_channels * k * k * width * itemsize
    return max(1, _COLS_BUDGET_BYTES // per_row)


def _fill_cols(
    cols: np.ndarray, xp: np.ndarray, k: int, y0: int, rows: int, width: int
) -> None:
    """Fill cols (I*k*k, rows*width) with patches for output rows y0.."""
    i_ch = xp.shape[0]
    view = cols.reshape(i_ch, k * k, rows, width)
    for dy in range(k):
        for dx in range(k):
            view[:, dy * k + dx] = xp[:, y0 + dy : y0 + dy + rows, dx : dx + width]


def conv2d_forward(x: np.ndarray, params: ConvLayerParams) -> np.ndarray:
    """Same-padded 2D convolution of a (C, H, W) input.

    Output spatial dims equal input dims; out-of-bounds input is treated
    as zero.  Each block of output rows is one patch-matrix GEMM; the
    block size is capped so scratch memory stays bounded on large
    images.  Accumulation order is fixed, so results are deterministic.
    """
    if x.ndim != 3:
        raise ConfigurationError(f"conv input must be (C, H, W), got shape {x.shape}")
    if x.shape[0] != params.in_channels:
        raise ConfigurationError(
            f"conv expects {params.in_channels} input channels, got {x.shape[0]}"
        )
    k = params.kernel_size
    pad = (k - 1) // 2
    i_ch, h, w = x.shape
    dtype = np.result_type(x.dtype, params.weights.dtype)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    w2d = params.weights.reshape(params.out_channels, -1)
    out = np.empty((params.out_channels, h, w), dtype=dtype)
    chunk = min(_rows_per_chunk(i_ch, k, w, xp.dtype.itemsize), h)
    cols = np.empty((i_ch * k * k, chunk * w), dtype=xp.dtype)
    for y0 in range(0, h, chunk):
        rows = min(chunk, h - y0)
        block = cols[:, : rows * w]
        _fill_cols(block, xp, k, y0, rows, w)
        out[:, y0 : y0 + rows, :] = (w2d @ block).reshape(-1, rows, w)
    out += params.bias[:, None, None]
    return out


def conv2d_backward(
    x: np.ndarray, params: ConvLayerParams, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic gradients of conv2d_forward.

    Returns (grad_weights, grad_bias, grad_input) for the given input
    and upstream gradient (same shape as the forward output).
    """
    k = params.kernel_size
    pad = (k - 1) // 2
    i_ch, h, w = x.shape
    if upstream.shape != (params.out_channels, h, w):
        raise ConfigurationError(
            f"upstream gradient shape {upstream.shape} does not match "
            f"conv output ({params.out_channels}, {h}, {w})"
        )
    dtype = np.result_type(x.dtype, params.weights.dtype, upstream.dtype)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    w2d = params.weights.reshape(params.out_channels, -1)
    grad_w2d = np.zeros((params.out_channels, i_ch * k * k), dtype=dtype)
    grad_xp = np.zeros(xp.shape, dtype=dtype)
    chunk = min(_rows_per_chunk(i_ch, k, w, xp.dtype.itemsize), h)
    cols = np.empty((i_ch * k * k, chunk * w), dtype=xp.dtype)
    for y0 in range(0, h, chunk):
        rows = min(chunk, h - y0)
        block = cols[:, : rows * w]
        _fill_cols(block, xp, k, y0, rows, w)
        up_block = upstream[:, y0 : y0 + rows, :].reshape(params.out_channels, -1)
        grad_w2d += up_block @ block.T
        grad_cols = (w2d.T @ up_block).reshape(i_ch, k * k, rows, w)
        for dy in range(k):
            for dx in range(k):
                grad_xp[:, y0 + dy : y0 + dy + rows, dx : dx + w] += grad_cols[
                    :, dy * k + dx
                ]
    grad_b = upstream.sum(axis=(1, 2))
    grad_x = grad_xp[:, pad : pad + h, pad : pad + w] if pad else grad_xp
    return grad_w2d.reshape(params.weights.shape), grad_b, np.ascontiguousarray(grad_x)


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Pass the gradient where the forward input was > 0, else 0."""
    return upstream * (x > 0)


def maxpool2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping 2x2 max-pool with ceiling semantics.

    Odd trailing rows/columns form 1-wide windows.  Returns the pooled
    (C, ceil(H/2), ceil(W/2)) array and the per-window argmax indices
    (flat index 0..3 in row-major window order) needed by the backward
    pass.  Ties go to the first maximal element in row-major order.
    """
    c, h, w = x.shape
    h2, w2 = (h + 1) // 2, (w + 1) // 2
    padded = np.full((c, 2 * h2, 2 * w2), -np.inf, dtype=x.dtype)
    padded[:, :h, :w] = x
    windows = (
        padded.reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
    )
    argmax = windows.argmax(axis=3)
    pooled = np.take_along_axis(windows, argmax[..., None], axis=3)[..., 0]
    return pooled, argmax


def maxpool2_backward(
    upstream: np.ndarray, argmax: np.ndarray, input_shape: tuple[int, int, int]
) -> np.ndarray:
    """Route the upstream gradient to the stored argmax positions."""
    c, h, w = input_shape
    c2, h2, w2 = upstream.shape
    scattered = np.zeros((c2, h2, w2, 4), dtype=upstream.dtype)
    np.put_along_axis(scattered, argmax[..., None], upstream[..., None], axis=3)
    grid = (
        scattered.reshape(c2, h2, w2, 2, 2)
        .transpose(0, 1, 3, 2, 4)
        .reshape(c2, 2 * h2, 2 * w2)
    )
    return np.ascontiguousarray(grid[:, :h, :w])


def gaussian_init(
    dims: tuple[int, ...], std: float = 0.01, seed: int = 0
) -> np.ndarray:
    """Seeded i.i.d. normal(0, std^2) float32 tensor."""
    if std <= 0:
        raise ConfigurationError(f"init std must be > 0, got {std}")
    rng = np.random.default_rng(seed)
    return draw_gaussian(rng, dims, std)


def draw_gaussian(
    rng: np.random.Generator, dims: tuple[int, ...], std: float
) -> np.ndarray:
    """Draw from an existing generator stream (used for multi-layer init)."""
    if std <= 0:
        raise ConfigurationError(f"init std must be > 0, got {std}")
    return rng.normal(0.0, std, size=dims).astype(np.float32)


def sgd_step(
    params: ConvLayerParams,
    grad_weights: np.ndarray,
    grad_bias: np.ndarray,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0005,
) -> ConvLayerParams:
    """Heavy-ball SGD update, in place.

    v <- momentum * v + lr * (grad + weight_decay * param)
    param <- param - v

    Bias terms are weight-decayed like the weights.
    """
    if grad_weights.shape != params.weights.shape:
        raise ConfigurationError(
            f"weight gradient shape {grad_weights.shape} != {params.weights.shape}"
        )
    if grad_bias.shape != params.bias.shape:
        raise ConfigurationError(
            f"bias gradient shape {grad_bias.shape} != {params.bias.shape}"
        )
    params.vel_weights *= momentum
    params.vel_weights += lr * (grad_weights + weight_decay * params.weights)
    params.weights -= params.vel_weights
    params.vel_bias *= momentum
    params.vel_bias += lr * (grad_bias + weight_decay * params.bias)
    params.bias -= params.vel_bias
    return params
