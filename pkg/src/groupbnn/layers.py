"""Layers with explicit forward/backward passes.

Each layer caches what its backward pass needs during a training-mode
forward call. Layers do not own their Parameters; they hold references to
Parameters that live in a :class:`~groupbnn.architecture.ParameterStore`.
"""

from __future__ import annotations

import numpy as np

from groupbnn import binary_ops
from groupbnn.binary_ops import ConvGeometry, float_group_conv2d, float_group_conv2d_backward
from groupbnn.tensor_core import DTYPE, sign_values
from groupbnn.training_engine import (
    Parameter,
    approx_sign_grad,
    batchnorm_backward,
    batchnorm_forward,
    binary_weight_backward,
)


def crop_indices(out_channels: int, in_channels: int, groups: int):
    """Row/column index arrays selecting the block-diagonal crop for ``groups``.

    Indexing a (out, in, kh, kw) master with them yields (out, in/groups, kh, kw).
    """
    og, cg = out_channels // groups, in_channels // groups
    rows = np.arange(out_channels)[:, None]
    cols = (np.arange(out_channels) // og)[:, None] * cg + np.arange(cg)[None, :]
    return rows, cols


class FixedWeight:
    """Weight stored directly in its grouped shape."""

    def __init__(self, param: Parameter, groups: int):
        self.param = param
        self.groups = groups

    def weight(self, groups: int) -> np.ndarray:
        if groups != self.groups:
            raise ValueError(f"weight was built for groups={self.groups}, not {groups}")
        return self.param.value

    def accumulate(self, grad: np.ndarray, groups: int):
        self.param.grad += grad


class SharedWeight:
    """Views into a full (groups=1) master tensor, one crop per group choice."""

    def __init__(self, master: Parameter):
        if not master.sparse:
            raise ValueError("shared master weights must be sparse Parameters")
        self.param = master
        self._index = {}

    def _crop(self, groups: int):
        if groups not in self._index:
            out_c, in_c = self.param.shape[:2]
            if out_c % groups or in_c % groups:
                raise ValueError(f"groups={groups} does not divide ({out_c}, {in_c})")
            self._index[groups] = crop_indices(out_c, in_c, groups)
        return self._index[groups]

    def weight(self, groups: int) -> np.ndarray:
        rows, cols = self._crop(groups)
        return self.param.value[rows, cols]

    def accumulate(self, grad: np.ndarray, groups: int):
        rows, cols = self._crop(groups)
        self.param.grad[rows, cols] += grad
        self.param.touched[rows, cols] = True


class Conv:
    """Group convolution; binary convs binarize the weight and scale by mean |w|.

    The input of a binary conv is expected to be +-1 already (see :class:`Sign`).
    """

    def __init__(self, source, base: ConvGeometry, groups: int, binary: bool):
        self.source = source
        self.base = base
        self.groups = groups
        self.binary = binary
        self.use_xnor = False
        self._cache = None

    @property
    def geometry(self) -> ConvGeometry:
        return self.base.with_groups(self.groups)

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        geom = self.geometry
        w = self.source.weight(self.groups)
        if not self.binary:
            y, cols = float_group_conv2d(x, w, geom, return_cols=True)
            self._cache = (x.shape, w, cols) if training else None
            return y
        alpha = binary_ops.scaling_factor(w)
        wb = sign_values(w)
        if self.use_xnor and not training:
            counts = binary_ops.binary_conv_counts(x > 0, wb > 0, geom)
            return counts.astype(DTYPE) * alpha[None, :, None, None]
        y, cols = float_group_conv2d(x, wb, geom, return_cols=True)
        y *= alpha[None, :, None, None]
        self._cache = (x.shape, w, wb, alpha, cols) if training else None
        return y

    def backward(self, dy: np.ndarray, need_input_grad: bool = True):
        geom = self.geometry
        if not self.binary:
            x_shape, w, cols = self._cache
            dx, dw = float_group_conv2d_backward(dy, x_shape, w, geom, cols, need_input_grad)
        else:
            x_shape, w, wb, alpha, cols = self._cache
            dy = dy * alpha[None, :, None, None]
            dx, dwb = float_group_conv2d_backward(dy, x_shape, wb, geom, cols, need_input_grad)
            dw = binary_weight_backward(dwb, w)
        self.source.accumulate(dw, self.groups)
        self._cache = None
        return dx


class BatchNorm:
    def __init__(self, gamma: Parameter, beta: Parameter, running_mean, running_var,
                 momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = gamma
        self.beta = beta
        self.running_mean = running_mean
        self.running_var = running_var
        self.momentum = momentum
        self.eps = eps
        self._cache = None

    def forward(self, x, training: bool):
        y, cache = batchnorm_forward(
            x, self.gamma.value, self.beta.value, self.running_mean, self.running_var,
            training=training, momentum=self.momentum, eps=self.eps,
        )
        self._cache = cache
        return y

    def backward(self, dy):
        dx, dgamma, dbeta = batchnorm_backward(dy, self._cache)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        self._cache = None
        return dx


class Sign:
    """sign() forward, derivative of the quadratic approximation backward."""

    def __init__(self):
        self._saved = None

    def forward(self, x, training: bool):
        if training:
            self._saved = x
        return sign_values(x)

    def backward(self, dy):
        dx = dy * approx_sign_grad(self._saved)
        self._saved = None
        return dx


class GlobalAvgPool:
    def forward(self, x, training: bool):
        self._shape = x.shape
        return x.mean(axis=(2, 3), dtype=np.float64).astype(DTYPE)

    def backward(self, dy):
        n, c, h, w = self._shape
        return np.broadcast_to((dy / DTYPE(h * w))[:, :, None, None], self._shape).astype(DTYPE)


class Linear:
    def __init__(self, weight: Parameter, bias: Parameter):
        self.weight = weight
        self.bias = bias
        self._x = None

    def forward(self, x, training: bool):
        if training:
            self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, dy):
        self.weight.grad += dy.T @ self._x
        self.bias.grad += dy.sum(axis=0)
        dx = dy @ self.weight.value
        self._x = None
        return dx
