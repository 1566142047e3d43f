"""Group convolution: XNOR-popcount on packed bits, plus the float reference.

The compiled kernels (``groupbnn._kernels``) are used when they were built;
otherwise the numpy fallback is selected at import. Set
``GROUPBNN_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from groupbnn import _kernels_numpy
from groupbnn.tensor_core import DTYPE, BitTensor, pack_bool, words_for

try:
    if os.environ.get("GROUPBNN_PURE_PYTHON"):
        raise ImportError("pure python requested")
    from groupbnn import _kernels as _compiled
except ImportError:
    _compiled = None

kernel = _compiled if _compiled is not None else _kernels_numpy
BACKEND = kernel.NAME


def available_backends() -> dict:
    backends = {"numpy": _kernels_numpy}
    if _compiled is not None:
        backends["cython"] = _compiled
    return backends


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass(frozen=True)
class ConvGeometry:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        if self.in_channels < 1 or self.out_channels < 1 or self.groups < 1:
            raise ValueError(f"channels and groups must be positive: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError(f"invalid kernel/stride/padding: {self}")

    @property
    def in_per_group(self) -> int:
        return self.in_channels // self.groups

    @property
    def out_per_group(self) -> int:
        return self.out_channels // self.groups

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_per_group) + self.kernel

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        ho = (h + 2 * ph - kh) // sh + 1
        wo = (w + 2 * pw - kw) // sw + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"input {h}x{w} too small for {self}")
        return ho, wo

    def with_groups(self, groups: int) -> "ConvGeometry":
        return ConvGeometry(self.in_channels, self.out_channels, self.kernel,
                            self.stride, self.padding, groups)


def scaling_factor(w) -> np.ndarray:
    """Per-filter scale minimizing ||w - a*sign(w)||^2: the mean absolute value.

    ``w`` holds one filter per leading index; any trailing shape is allowed.
    """
    w = np.asarray(w, dtype=DTYPE)
    flat = w.reshape(w.shape[0], -1)
    return np.abs(flat).mean(axis=1, dtype=np.float64).astype(DTYPE)


def _words(v) -> np.ndarray:
    if isinstance(v, BitTensor):
        return v.words
    return np.ascontiguousarray(v, dtype=np.uint64)


def xnor_popcount_dot(a, b, n: int) -> int:
    """Sum of a_i*b_i over n +-1 elements, as n - 2*popcount(a XOR b).

    ``a`` and ``b`` are packed word arrays (or BitTensors) holding ``n``
    logical elements each.
    """
    a, b = _words(a), _words(b)
    assert a.shape == b.shape == (words_for(n),), (
        f"operands must hold exactly {n} elements: {a.shape} vs {b.shape}"
    )
    tail = n % 64
    if tail:
        mask = np.uint64((1 << tail) - 1)
        a = a.copy()
        b = b.copy()
        a[-1] &= mask
        b[-1] &= mask
    return n - 2 * int(kernel.popcount_xor(a, b))


def pack_activations(bits: np.ndarray, groups: int) -> np.ndarray:
    """(n, c, h, w) bool -> (n, groups, h, w, words) channel-packed uint64."""
    n, c, h, w = bits.shape
    grouped = bits.reshape(n, groups, c // groups, h, w)
    return np.ascontiguousarray(pack_bool(grouped, axis=2))


def pack_weights(bits: np.ndarray) -> np.ndarray:
    """(out, c_per_group, kh, kw) bool -> (out, kh, kw, words) uint64."""
    return np.ascontiguousarray(pack_bool(bits, axis=1))


def binary_conv_counts(x_bits: np.ndarray, w_bits: np.ndarray, geom: ConvGeometry,
                       backend=None) -> np.ndarray:
    """Integer XNOR-popcount group convolution of bool operands (True = +1)."""
    backend = backend or kernel
    n, c, h, w = x_bits.shape
    if c != geom.in_channels:
        raise ValueError(f"input has {c} channels, geometry expects {geom.in_channels}")
    if tuple(w_bits.shape) != geom.weight_shape:
        raise ValueError(f"weight shape {tuple(w_bits.shape)} != {geom.weight_shape}")
    ho, wo = geom.output_hw(h, w)
    xw = pack_activations(x_bits, geom.groups)
    ww = pack_weights(w_bits)
    (sh, sw), (ph, pw) = geom.stride, geom.padding
    return backend.xnor_conv_counts(xw, ww, geom.in_per_group, sh, sw, ph, pw, ho, wo)


def binary_group_conv2d(x: BitTensor, w: BitTensor, geom: ConvGeometry, scale=None,
                        backend=None) -> np.ndarray:
    """Binary group convolution: ``scale[o]`` times the XNOR-popcount sum.

    Padded border taps contribute nothing, matching zero padding in
    :func:`float_group_conv2d`. ``scale=None`` means unit scale.
    """
    counts = binary_conv_counts(x.to_bool(), w.to_bool(), geom, backend)
    if scale is None:
        return counts.astype(DTYPE)
    scale = np.asarray(scale, dtype=DTYPE)
    if scale.shape != (geom.out_channels,):
        raise ValueError(f"scale must have shape ({geom.out_channels},), got {scale.shape}")
    return counts.astype(DTYPE) * scale[None, :, None, None]


# --- float reference / full-precision path -------------------------------------------------


def _im2col(x: np.ndarray, geom: ConvGeometry) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    (kh, kw), (sh, sw), (ph, pw) = geom.kernel, geom.stride, geom.padding
    ho, wo = geom.output_hw(h, w)
    g, cg = geom.groups, geom.in_per_group
    if (kh, kw) == (1, 1) and (ph, pw) == (0, 0):
        xs = x[:, :, ::sh, ::sw] if (sh, sw) != (1, 1) else x
        cols = xs.reshape(n, g, cg, ho * wo).transpose(1, 2, 0, 3)
        return cols.reshape(g, cg, n * ho * wo), ho, wo
    cols = kernel.im2col(np.ascontiguousarray(x), g, kh, kw, sh, sw, ph, pw, ho, wo)
    return cols, ho, wo


def _check_float_operands(x, w, geom):
    if x.ndim != 4 or x.shape[1] != geom.in_channels:
        raise ValueError(f"input shape {x.shape} does not match {geom}")
    if tuple(w.shape) != geom.weight_shape:
        raise ValueError(f"weight shape {tuple(w.shape)} != {geom.weight_shape}")


def float_group_conv2d(x, w, geom: ConvGeometry, *, return_cols: bool = False):
    """Direct group convolution with zero padding (cross-correlation)."""
    x = np.asarray(x, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    _check_float_operands(x, w, geom)
    n = x.shape[0]
    g, og = geom.groups, geom.out_per_group
    cols, ho, wo = _im2col(x, geom)
    wmat = w.reshape(g, og, -1)
    out = np.matmul(wmat, cols)  # (g, og, n*ho*wo)
    out = out.reshape(g * og, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if return_cols:
        return out, cols
    return out


def float_group_conv2d_backward(grad_out, x_shape, w, geom: ConvGeometry, cols,
                                need_input_grad: bool = True):
    """Gradients of :func:`float_group_conv2d` w.r.t. input and weight.

    ``cols`` is the column buffer returned by the forward pass.
    """
    n, c, h, wd = x_shape
    (kh, kw), (sh, sw), (ph, pw) = geom.kernel, geom.stride, geom.padding
    g, og, cg = geom.groups, geom.out_per_group, geom.in_per_group
    _, _, ho, wo = grad_out.shape
    dy = np.ascontiguousarray(
        grad_out.reshape(n, g, og, ho * wo).transpose(1, 2, 0, 3)
    ).reshape(g, og, n * ho * wo)
    dw = np.matmul(dy, cols.transpose(0, 2, 1)).reshape(geom.weight_shape)
    if not need_input_grad:
        return None, dw
    wmat = np.asarray(w, dtype=DTYPE).reshape(g, og, -1)
    if og == 1:
        # outer product per group; broadcasting beats a batch of rank-1 matmuls
        dcols = wmat.transpose(0, 2, 1) * dy
    else:
        dcols = np.matmul(wmat.transpose(0, 2, 1), dy)  # (g, cg*kh*kw, n*ho*wo)
    if (kh, kw) == (1, 1) and (ph, pw) == (0, 0):
        dxs = dcols.reshape(g, cg, n, ho, wo).transpose(2, 0, 1, 3, 4).reshape(n, c, ho, wo)
        if (sh, sw) == (1, 1):
            return np.ascontiguousarray(dxs), dw
        dx = np.zeros(x_shape, dtype=DTYPE)
        dx[:, :, ::sh, ::sw][:, :, :ho, :wo] = dxs
        return dx, dw
    dx = kernel.col2im(dcols, n, c, h, wd, kh, kw, sh, sw, ph, pw, ho, wo)
    return dx, dw
