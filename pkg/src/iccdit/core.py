"""Dense numeric building blocks shared by every other module.

Tensors are plain numpy arrays. Model state is float32 by default; the
kernels in :mod:`iccdit.kernels` accumulate reductions in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernels import matmul, softmax_rows

__all__ = [
    "Rng", "matmul", "softmax_rows", "gelu", "gelu_grad", "mlp_forward",
    "mlp_backward", "layer_norm", "layer_norm_backward", "finite_diff_grad",
    "check_finite", "sigmoid",
]

# SplitMix64 (Steele, Lea & Flood 2014): state advances by the golden gamma,
# output is the state pushed through two xor-shift-multiply rounds.
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """SplitMix64 generator.

    Draw ``i`` (1-based) is ``mix(seed + i * 0x9E3779B97F4A7C15 mod 2**64)``, so
    blocks of draws are computed vectorised and the stream is identical on
    every platform. Uniforms take the top 53 bits; normals use Box-Muller
    on consecutive uniform pairs.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def next_u64(self, n: int | None = None):
        count = 1 if n is None else int(n)
        idx = np.arange(self.counter + 1, self.counter + count + 1, dtype=np.uint64)
        self.counter += count
        with np.errstate(over="ignore"):
            out = _mix(np.uint64(self.seed) + idx * _GAMMA)
        return int(out[0]) if n is None else out

    def uniform(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        bits = self.next_u64(n)
        return ((bits >> np.uint64(11)).astype(np.float64) * 2.0**-53).reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = self.uniform((n + 1) // 2 * 2).reshape(-1, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).ravel()
        return z[:n].reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        span = high - low
        if span <= 0:
            raise ValueError("empty integer range")
        n = int(np.prod(shape, dtype=np.int64))
        return (low + (self.next_u64(n) % np.uint64(span)).astype(np.int64)).reshape(shape)

    def spawn(self) -> "Rng":
        return Rng(self.next_u64())


def check_finite(x, what: str = "tensor"):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


# tanh approximation of GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x**3)))


def gelu_grad(x):
    th = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class MLPCache:
    x: np.ndarray
    pre: np.ndarray
    act: np.ndarray


def mlp_forward(x, w1, b1, w2, b2, return_cache: bool = False):
    """Two-layer perceptron ``gelu(x w1 + b1) w2 + b2``."""
    if x.shape[1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise ValueError(f"mlp shape mismatch: x{x.shape} w1{w1.shape} w2{w2.shape}")
    pre = matmul(x, w1) + b1
    act = gelu(pre)
    out = matmul(act, w2) + b2
    if return_cache:
        return out, MLPCache(x, pre, act)
    return out


def mlp_backward(dout, cache: MLPCache, w1, w2):
    """Returns (dx, dw1, db1, dw2, db2)."""
    dw2 = matmul(cache.act.T, dout)
    db2 = dout.sum(axis=0)
    dpre = matmul(dout, w2.T) * gelu_grad(cache.pre)
    dw1 = matmul(cache.x.T, dpre)
    db1 = dpre.sum(axis=0)
    dx = matmul(dpre, w1.T)
    return dx, dw1, db1, dw2, db2


LN_EPS = 1e-5


def layer_norm(x, gain):
    """Row-wise normalisation with a learned gain and no bias. Returns (y, xhat, inv_std)."""
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = ((x64 - mu) * inv).astype(x.dtype)
    return xhat * gain, xhat, inv


def layer_norm_backward(dy, xhat, inv, gain):
    dgain = (dy * xhat).sum(axis=0)
    dxh = dy * gain
    d = xhat.shape[1]
    dx = inv * (dxh - dxh.sum(axis=1, keepdims=True) / d
                - xhat * (dxh * xhat).sum(axis=1, keepdims=True) / d)
    return dx.astype(dy.dtype), dgain


def finite_diff_grad(f, x, eps: float = 1e-4):
    """Central-difference gradient of scalar ``f`` at ``x`` (evaluated on a float64 copy)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * eps)
    return grad
