"""Dense array kernels with hand-written backward passes.

Every differentiable op comes as a pair: ``op(...)`` computes the forward
value from its inputs and ``op_backward(dout, ...)`` returns gradients with
respect to those same inputs. Backwards recompute whatever intermediate
values they need, so forward functions stay pure and cache-free.

Arrays are plain ``numpy.ndarray``. Model code runs in float32; every op
preserves its input dtype, which lets the finite-difference checks run the
same code in float64. Statistics (means, variances) are accumulated in
float64 regardless of the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyInputError, ShapeError

LAYER_NORM_EPS = 1e-5


@dataclass(eq=False)
class Tensor:
    """Parameter buffer: values plus an optional same-shape gradient."""

    data: np.ndarray
    grad: np.ndarray | None = field(default=None)

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        self.data = np.ascontiguousarray(data)
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != data shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g: np.ndarray):
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), None if self.grad is None else self.grad.copy())


# ---------------------------------------------------------------------------
# matmul


def _check_matmul(a: np.ndarray, b: np.ndarray):
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` for ``a`` of shape [..., M, K] and a 2-D ``b`` of shape [K, N]."""
    _check_matmul(a, b)
    return a @ b


def matmul_backward(dout: np.ndarray, a: np.ndarray, b: np.ndarray):
    _check_matmul(a, b)
    da = dout @ b.T
    db = a.reshape(-1, a.shape[-1]).T @ dout.reshape(-1, b.shape[1])
    return da, db


# ---------------------------------------------------------------------------
# causal convolutions


def _causal_cols(x: np.ndarray, k: int, dilation: int) -> np.ndarray:
    # [..., C, T] -> [..., C*K, T]; tap j reads x[t - (K-1-j)*dilation]
    t = x.shape[-1]
    pad = (k - 1) * dilation
    xp = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(pad, 0)])
    cols = np.stack([xp[..., j * dilation : j * dilation + t] for j in range(k)], axis=-2)
    return cols.reshape(*x.shape[:-2], -1, t)


def _check_conv(x, kernel, bias, dilation):
    if dilation < 1:
        raise ConfigError(f"dilation must be >= 1, got {dilation}")
    if kernel.ndim != 3 or kernel.shape[2] < 1:
        raise ShapeError(f"kernel must be [C_out, C_in, K], got {kernel.shape}")
    if x.ndim < 2 or x.shape[-2] != kernel.shape[1]:
        raise ShapeError(f"input {x.shape} does not match kernel {kernel.shape}")
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias {bias.shape} does not match kernel {kernel.shape}")
    if x.shape[-1] == 0:
        raise EmptyInputError("conv1d_causal got a zero-length sequence")


def conv1d_causal(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, dilation: int = 1) -> np.ndarray:
    """Dilated causal convolution.

    ``x`` is [..., C_in, T], ``kernel`` is [C_out, C_in, K]. The input is
    left-padded with ``(K - 1) * dilation`` zeros so the output at time t
    only sees inputs at times <= t. The last kernel tap aligns with the
    current frame.
    """
    _check_conv(x, kernel, bias, dilation)
    c_out, _, k = kernel.shape
    cols = _causal_cols(x, k, dilation)
    out = np.matmul(kernel.reshape(c_out, -1), cols)
    out += bias[:, None]
    return out


def conv1d_causal_backward(dout: np.ndarray, x: np.ndarray, kernel: np.ndarray, dilation: int = 1):
    """Returns ``(dx, dkernel, dbias)``."""
    c_out, c_in, k = kernel.shape
    t = x.shape[-1]
    cols = _causal_cols(x, k, dilation)
    d2 = dout.reshape(-1, c_out, t).transpose(1, 0, 2).reshape(c_out, -1)
    c2 = cols.reshape(-1, c_in * k, t).transpose(1, 0, 2).reshape(c_in * k, -1)
    dkernel = (d2 @ c2.T).reshape(kernel.shape)
    dbias = d2.sum(axis=1)

    dcols = np.matmul(kernel.reshape(c_out, -1).T, dout).reshape(*x.shape[:-1], k, t)
    pad = (k - 1) * dilation
    dxp = np.zeros(x.shape[:-1] + (t + pad,), dtype=dout.dtype)
    for j in range(k):
        dxp[..., j * dilation : j * dilation + t] += dcols[..., j, :]
    return dxp[..., pad:], dkernel.astype(kernel.dtype), dbias.astype(kernel.dtype)


def depthwise_conv1d_causal(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, dilation: int = 1) -> np.ndarray:
    """Per-channel causal convolution in time-major layout.

    ``x`` is [..., T, C], ``kernel`` is [C, K], ``bias`` is [C].
    """
    if x.ndim < 2 or kernel.ndim != 2 or x.shape[-1] != kernel.shape[0] or bias.shape != (kernel.shape[0],):
        raise ShapeError(f"depthwise conv: input {x.shape}, kernel {kernel.shape}, bias {bias.shape}")
    t = x.shape[-2]
    if t == 0:
        raise EmptyInputError("depthwise_conv1d_causal got a zero-length sequence")
    k = kernel.shape[1]
    pad = (k - 1) * dilation
    xp = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(pad, 0), (0, 0)])
    out = np.broadcast_to(bias, x.shape).copy()
    for j in range(k):
        out += xp[..., j * dilation : j * dilation + t, :] * kernel[:, j]
    return out


def depthwise_conv1d_causal_backward(dout: np.ndarray, x: np.ndarray, kernel: np.ndarray, dilation: int = 1):
    """Returns ``(dx, dkernel, dbias)``."""
    t = x.shape[-2]
    k = kernel.shape[1]
    pad = (k - 1) * dilation
    xp = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(pad, 0), (0, 0)])
    d2 = dout.reshape(-1, kernel.shape[0])
    dkernel = np.empty_like(kernel)
    dxp = np.zeros(xp.shape, dtype=dout.dtype)
    for j in range(k):
        sl = slice(j * dilation, j * dilation + t)
        dkernel[:, j] = np.einsum("nc,nc->c", d2, xp[..., sl, :].reshape(-1, kernel.shape[0]))
        dxp[..., sl, :] += dout * kernel[:, j]
    dbias = d2.sum(axis=0).astype(kernel.dtype)
    return dxp[..., pad:, :], dkernel, dbias


# ---------------------------------------------------------------------------
# layer norm


def _ln_stats(x: np.ndarray, eps: float):
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mean) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return (x64 - mean) * inv_std, inv_std


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if x.shape[-1:] != gamma.shape or gamma.shape != beta.shape:
        raise ShapeError(f"layer_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    xhat, _ = _ln_stats(x, eps)
    return (xhat * gamma + beta).astype(x.dtype)


def layer_norm_backward(dout: np.ndarray, x: np.ndarray, gamma: np.ndarray, eps: float = LAYER_NORM_EPS):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv_std = _ln_stats(x, eps)
    d64 = dout.astype(np.float64)
    red = tuple(range(x.ndim - 1))
    dgamma = (d64 * xhat).sum(axis=red)
    dbeta = d64.sum(axis=red)
    dxhat = d64 * gamma
    n = x.shape[-1]
    dx = inv_std / n * (
        n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx.astype(x.dtype), dgamma.astype(gamma.dtype), dbeta.astype(gamma.dtype)


# ---------------------------------------------------------------------------
# elementwise activations


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return dout * (s * (1.0 + x * (1.0 - s)))


def softplus(x: np.ndarray) -> np.ndarray:
    # logaddexp(0, x) = log(1 + e^x) without overflow for large x
    return np.logaddexp(np.zeros((), dtype=np.result_type(x, np.float32)), x)


def softplus_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * sigmoid(x)


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(dout: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of tanh given its *output* ``y``."""
    return dout * (1.0 - y * y)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


# ---------------------------------------------------------------------------
# dropout


def dropout_mask(shape, rate: float, training: bool, rng: np.random.Generator | None, dtype=np.float32):
    """Scaled keep-mask for inverted dropout, or ``None`` when dropout is a no-op."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return None
    if rng is None:
        raise ConfigError("training-mode dropout needs a random generator")
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) * dtype(1.0 / (1.0 - rate))


def dropout(x: np.ndarray, rate: float, training: bool, rng: np.random.Generator | None = None) -> np.ndarray:
    mask = dropout_mask(x.shape, rate, training, rng, dtype=x.dtype.type)
    return x if mask is None else x * mask
