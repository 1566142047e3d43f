"""Forward/backward building blocks for training binary networks.

Activations are binarized with ``sign`` in the forward pass; the backward
pass substitutes the derivative of the piecewise-quadratic approximation
``approx_sign``. Latent weights get a clipped straight-through gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from groupbnn.tensor_core import DTYPE, BitTensor, sign_binarize


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    total_steps: int = 1
    batch_size: int = 64
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be positive")

    def lr_at(self, step: int) -> float:
        """Linearly decayed learning rate; base rate at step 0, zero at total_steps."""
        return self.learning_rate * max(0.0, 1.0 - step / self.total_steps)


@dataclass(eq=False)
class Parameter:
    """A trainable tensor with its gradient and Adam moments.

    ``touched`` marks entries that received gradient since the last
    :meth:`zero_grad`; when set, Adam leaves all other entries (value and
    moments) alone. Weight-shared master tensors use this so that entries
    outside the active crop stay frozen for the step.
    """

    value: np.ndarray
    grad: np.ndarray = field(default=None)
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    step: int = 0
    sparse: bool = False
    touched: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        for name in ("grad", "m", "v"):
            arr = getattr(self, name)
            if arr is None:
                arr = np.zeros_like(self.value)
            elif arr.shape != self.value.shape:
                raise ValueError(f"{name} shape {arr.shape} != value shape {self.value.shape}")
            setattr(self, name, np.ascontiguousarray(arr, dtype=DTYPE))
        if self.sparse and self.touched is None:
            self.touched = np.zeros(self.value.shape, dtype=bool)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0)
        if self.sparse:
            self.touched.fill(False)


def adam_step(p: Parameter, cfg: TrainConfig, step: int) -> Parameter:
    """One Adam update (bias-corrected) with the linearly decayed rate for ``step``.

    ``step`` counts from 1. Updates ``p`` in place and returns it.
    """
    if step < 1:
        raise ValueError("adam step counter starts at 1")
    lr = cfg.learning_rate * max(0.0, 1.0 - step / cfg.total_steps)
    b1, b2 = cfg.beta1, cfg.beta2
    g = p.grad
    if cfg.weight_decay:
        g = g + DTYPE(cfg.weight_decay) * p.value
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    if p.sparse:
        idx = p.touched
        gi = g[idx]
        p.m[idx] = b1 * p.m[idx] + (1 - b1) * gi
        p.v[idx] = b2 * p.v[idx] + (1 - b2) * gi * gi
        upd = (p.m[idx] / c1) / (np.sqrt(p.v[idx] / c2) + cfg.epsilon)
        p.value[idx] -= DTYPE(lr) * upd.astype(DTYPE)
    else:
        p.m *= DTYPE(b1)
        p.m += DTYPE(1 - b1) * g
        p.v *= DTYPE(b2)
        p.v += DTYPE(1 - b2) * g * g
        upd = (p.m / DTYPE(c1)) / (np.sqrt(p.v / DTYPE(c2)) + DTYPE(cfg.epsilon))
        p.value -= DTYPE(lr) * upd
    p.step = step
    return p


# --- sign and its surrogate -------------------------------------------------------------


def approx_sign(x):
    """Piecewise-quadratic approximation of sign: -1, 2x+x^2, 2x-x^2, 1."""
    x = np.asarray(x)
    return np.select(
        [x < -1, x < 0, x < 1],
        [-np.ones_like(x), 2 * x + x * x, 2 * x - x * x],
        np.ones_like(x),
    )


def approx_sign_grad(x):
    """Derivative of :func:`approx_sign`: 2+2x on [-1,0), 2-2x on [0,1), else 0."""
    x = np.asarray(x)
    # both quadratic pieces reduce to 2 - 2|x|, which is <= 0 outside (-1, 1)
    return np.maximum(2 - 2 * np.abs(x), 0)


def ste_activation_forward(x) -> tuple[BitTensor, np.ndarray]:
    x = np.asarray(x, dtype=DTYPE)
    return sign_binarize(x), x


def ste_activation_backward(grad_out, saved) -> np.ndarray:
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    saved = np.asarray(saved, dtype=DTYPE)
    if grad_out.shape != saved.shape:
        raise ValueError(f"grad shape {grad_out.shape} != saved shape {saved.shape}")
    return grad_out * approx_sign_grad(saved).astype(DTYPE)


def binary_weight_backward(grad_out_wrt_binary, latent) -> np.ndarray:
    """Straight-through gradient for latent weights, zero where |w| > 1."""
    grad = np.asarray(grad_out_wrt_binary, dtype=DTYPE)
    latent = np.asarray(latent, dtype=DTYPE)
    if grad.shape != latent.shape:
        raise ValueError(f"grad shape {grad.shape} != latent shape {latent.shape}")
    return np.where(np.abs(latent) <= 1, grad, DTYPE(0))


# --- batch normalization ------------------------------------------------------------------


def batchnorm_forward(x, gamma, beta, running_mean, running_var, *, training: bool,
                      momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel batch norm over (n, h, w). Updates running stats in place when training.

    Returns ``(y, cache)``; ``cache`` is None in eval mode.
    """
    x = np.asarray(x, dtype=DTYPE)
    c = x.shape[1]
    if gamma.shape != (c,):
        raise ValueError(f"batchnorm expects {gamma.shape[0]} channels, got {c}")
    if training:
        n, _, h, w = x.shape
        count = n * h * w
        if count < 2:
            raise ValueError("batch norm in training mode needs more than one value per channel")
        x3 = x.reshape(n, c, h * w)
        mean = np.einsum("nck->c", x3) / DTYPE(count)
        xc = x - mean[None, :, None, None]
        xc3 = xc.reshape(n, c, h * w)
        var = np.einsum("nck,nck->c", xc3, xc3) / DTYPE(count)
        inv_std = (1.0 / np.sqrt(var + DTYPE(eps))).astype(DTYPE)
        xhat = xc * inv_std[None, :, None, None]
        y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
        unbiased = var * DTYPE(count / (count - 1))
        running_mean *= DTYPE(1 - momentum)
        running_mean += DTYPE(momentum) * mean
        running_var *= DTYPE(1 - momentum)
        running_var += DTYPE(momentum) * unbiased
        return y, (xhat, inv_std, gamma)
    inv_std = (1.0 / np.sqrt(running_var + DTYPE(eps))).astype(DTYPE)
    scale = gamma * inv_std
    shift = beta - running_mean * scale
    return x * scale[None, :, None, None] + shift[None, :, None, None], None


def batchnorm_backward(dy, cache):
    """Returns ``(dx, dgamma, dbeta)`` for a training-mode forward pass."""
    xhat, inv_std, gamma = cache
    dy = np.asarray(dy, dtype=DTYPE)
    n, c, h, w = dy.shape
    count = n * h * w
    dy3 = dy.reshape(n, c, h * w)
    dbeta = np.einsum("nck->c", dy3)
    dgamma = np.einsum("nck,nck->c", dy3, xhat.reshape(n, c, h * w))
    scale = (gamma * inv_std)[None, :, None, None]
    dx = scale * (dy - (dbeta / DTYPE(count))[None, :, None, None]
                  - xhat * (dgamma / DTYPE(count))[None, :, None, None])
    return dx.astype(DTYPE), dgamma, dbeta


# --- loss -----------------------------------------------------------------------------------


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    logits = logits.reshape(logits.shape[0], -1)
    labels = np.asarray(labels, dtype=np.int64)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch of {n}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= classes:
        raise ValueError(f"labels must lie in [0, {classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = float(-log_p[np.arange(n), labels].mean())
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad.astype(DTYPE)
