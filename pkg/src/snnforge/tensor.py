"""Dense tensor kernels for small convolutional networks.

Activations are float64 arrays laid out N x C x H x W, convolution kernels
Cout x Cin x Kh x Kw.  Every operation validates its operands and raises
:class:`ShapeError` naming the offending dimension; nothing broadcasts
silently.  Forward and backward passes are pure functions so the same
kernels serve conventional training, spiking simulation and the accumulated
flow backward pass.

The convolutions are evaluated through an im2col/matmul route.  Their
reference semantics (plain six-deep loops) live in the test suite and every
kernel is checked against those loops and against finite differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

Tensor = np.ndarray

_MAGIC = b"SNNT"

# Padding is stored per side (top, bottom, left, right).  Even kernels with
# "same" output need one more cell on the trailing side, which a single
# symmetric integer cannot express.
Padding = tuple[int, int, int, int]


def normalize_padding(padding) -> Padding:
    """Accept an int, an (h, w) pair or a 4-tuple and return (pt, pb, pl, pr)."""
    if isinstance(padding, (int, np.integer)):
        pads = (int(padding),) * 4
    else:
        pads = tuple(int(p) for p in padding)
        if len(pads) == 2:
            pads = (pads[0], pads[0], pads[1], pads[1])
        elif len(pads) != 4:
            raise ShapeError(f"padding must be an int, 2-tuple or 4-tuple, got {padding!r}")
    if any(p < 0 for p in pads):
        raise ShapeError(f"padding must be non-negative, got {pads}")
    return pads


@dataclass
class ConvParams:
    """Weights of one 2-D convolution layer.

    kernel : (Cout, Cin, Kh, Kw) float array
    bias   : (Cout,) float array
    stride : positive int, same for both spatial axes
    padding: zero padding per side, see :func:`normalize_padding`
    """

    kernel: Tensor
    bias: Tensor
    stride: int = 1
    padding: Padding = field(default=(0, 0, 0, 0))

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must have rank 4, got rank {self.kernel.ndim}")
        if self.bias.ndim != 1 or self.bias.shape[0] != self.kernel.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape} does not match kernel output channels "
                f"{self.kernel.shape[0]}"
            )
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        self.padding = normalize_padding(self.padding)

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]


def _require_nchw(x: Tensor, name: str) -> Tensor:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be N x C x H x W (rank 4), got rank {x.ndim}")
    return x


def conv_output_shape(in_shape, params: ConvParams) -> tuple[int, int, int, int]:
    n, c, h, w = in_shape
    if c != params.in_channels:
        raise ShapeError(
            f"input channels {c} do not match kernel input channels {params.in_channels}"
        )
    pt, pb, pl, pr = params.padding
    kh, kw = params.kernel.shape[2], params.kernel.shape[3]
    hp, wp = h + pt + pb, w + pl + pr
    if hp < kh or wp < kw:
        raise ShapeError(
            f"padded input {hp}x{wp} is smaller than the kernel {kh}x{kw}"
        )
    ho = (hp - kh) // params.stride + 1
    wo = (wp - kw) // params.stride + 1
    return n, params.out_channels, ho, wo


def _pad_input(x: Tensor, padding: Padding) -> Tensor:
    pt, pb, pl, pr = padding
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))


def _im2col(xp: Tensor, kh: int, kw: int, stride: int, ho: int, wo: int) -> Tensor:
    """Rearrange padded input into an (N*Ho*Wo, C*Kh*Kw) patch matrix."""
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (N, C, Ho, Wo, Kh, Kw) -> (N, Ho, Wo, C, Kh, Kw)
    patches = windows.transpose(0, 2, 3, 1, 4, 5)
    n = xp.shape[0]
    c = xp.shape[1]
    return np.ascontiguousarray(patches).reshape(n * ho * wo, c * kh * kw)


def conv2d_forward(x: Tensor, params: ConvParams) -> Tensor:
    """Cross-correlate x with the kernel and add the bias per output channel."""
    x = _require_nchw(x, "input")
    n, cout, ho, wo = conv_output_shape(x.shape, params)
    kh, kw = params.kernel.shape[2], params.kernel.shape[3]
    xp = _pad_input(x, params.padding)
    cols = _im2col(xp, kh, kw, params.stride, ho, wo)
    wmat = params.kernel.reshape(cout, -1)
    y = cols @ wmat.T + params.bias
    return y.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)


def conv2d_backward(
    x: Tensor, params: ConvParams, grad_out: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients of a conv2d_forward call.

    Returns (grad_input, grad_kernel, grad_bias) for the upstream gradient
    grad_out, which must have the forward output's shape.
    """
    x = _require_nchw(x, "input")
    grad_out = _require_nchw(grad_out, "grad_out")
    out_shape = conv_output_shape(x.shape, params)
    if grad_out.shape != out_shape:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match forward output {out_shape}"
        )
    n, cout, ho, wo = out_shape
    cin = params.in_channels
    kh, kw = params.kernel.shape[2], params.kernel.shape[3]
    pt, pb, pl, pr = params.padding
    s = params.stride

    grad_bias = grad_out.sum(axis=(0, 2, 3))

    xp = _pad_input(x, params.padding)
    cols = _im2col(xp, kh, kw, s, ho, wo)
    gmat = grad_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
    grad_kernel = (gmat.T @ cols).reshape(cout, cin, kh, kw)

    # grad wrt input: dilate grad_out by the stride, then run a full
    # correlation with the spatially flipped kernel (channels transposed).
    hd, wd = (ho - 1) * s + 1, (wo - 1) * s + 1
    if s == 1:
        gd = grad_out
    else:
        gd = np.zeros((n, cout, hd, wd), dtype=grad_out.dtype)
        gd[:, :, ::s, ::s] = grad_out
    flipped = params.kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    full = ConvParams(
        kernel=flipped,
        bias=np.zeros(cin),
        stride=1,
        padding=(kh - 1, kh - 1, kw - 1, kw - 1),
    )
    gfull = conv2d_forward(gd, full)  # (N, Cin, Hd + Kh - 1, Wd + Kw - 1)
    hp, wp = xp.shape[2], xp.shape[3]
    grad_xp = np.zeros((n, cin, hp, wp), dtype=grad_out.dtype)
    grad_xp[:, :, : hd + kh - 1, : wd + kw - 1] = gfull
    grad_x = grad_xp[:, :, pt : pt + x.shape[2], pl : pl + x.shape[3]]
    return np.ascontiguousarray(grad_x), grad_kernel, grad_bias


def avgpool2d_forward(x: Tensor, window: int) -> Tensor:
    """Non-overlapping mean pooling; spatial dims must divide by the window."""
    x = _require_nchw(x, "input")
    if window < 1:
        raise ShapeError(f"pool window must be >= 1, got {window}")
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(
            f"spatial dims {h}x{w} are not divisible by pool window {window}"
        )
    return x.reshape(n, c, h // window, window, w // window, window).mean(axis=(3, 5))


def avgpool2d_backward(grad_out: Tensor, window: int) -> Tensor:
    """Spread each pooled gradient uniformly over its window."""
    grad_out = _require_nchw(grad_out, "grad_out")
    g = np.repeat(np.repeat(grad_out, window, axis=2), window, axis=3)
    return g / float(window * window)


def upsample2x_forward(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling (each pixel becomes a 2x2 block)."""
    x = _require_nchw(x, "input")
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2x_backward(grad_out: Tensor) -> Tensor:
    """Sum gradients over each 2x2 block (adjoint of nearest upsampling)."""
    grad_out = _require_nchw(grad_out, "grad_out")
    n, c, h, w = grad_out.shape
    if h % 2 or w % 2:
        raise ShapeError(f"grad_out spatial dims {h}x{w} must be even")
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def concat_channels(parts: list[Tensor]) -> Tensor:
    """Concatenate along the channel axis; batch and spatial dims must agree."""
    if not parts:
        raise ShapeError("concat needs at least one part")
    parts = [_require_nchw(p, f"part {i}") for i, p in enumerate(parts)]
    head = parts[0]
    for i, p in enumerate(parts[1:], start=1):
        if p.shape[0] != head.shape[0] or p.shape[2:] != head.shape[2:]:
            raise ShapeError(
                f"concat part {i} shape {p.shape} does not match part 0 {head.shape} "
                "outside the channel axis"
            )
    return np.concatenate(parts, axis=1)


def split_channels(x: Tensor, sizes: list[int]) -> list[Tensor]:
    """Exact inverse of :func:`concat_channels` for the given channel sizes."""
    x = _require_nchw(x, "input")
    if sum(sizes) != x.shape[1]:
        raise ShapeError(
            f"split sizes {sizes} sum to {sum(sizes)} but input has {x.shape[1]} channels"
        )
    out, at = [], 0
    for s in sizes:
        out.append(np.ascontiguousarray(x[:, at : at + s]))
        at += s
    return out


def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(np.asarray(x), 0.0)


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    """Pass gradient where the forward input was strictly positive."""
    x = np.asarray(x)
    grad_out = np.asarray(grad_out)
    if x.shape != grad_out.shape:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match input shape {x.shape}"
        )
    return grad_out * (x > 0.0)


def save_tensor(path, x: Tensor) -> None:
    """Write a tensor: magic 'SNNT', u32 rank, u32 extents, little-endian f64 data."""
    x = np.asarray(x, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", x.ndim))
        fh.write(struct.pack(f"<{x.ndim}I", *x.shape))
        fh.write(np.ascontiguousarray(x).astype("<f8").tobytes())


def load_tensor(path) -> Tensor:
    """Read a tensor written by :func:`save_tensor`; validates magic and length."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    (rank,) = struct.unpack_from("<I", blob, 4)
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    if data.size != count:
        raise ValueError(f"{path}: truncated payload, expected {count} values")
    return data.reshape(shape).astype(np.float64)
