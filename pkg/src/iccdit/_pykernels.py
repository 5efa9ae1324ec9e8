"""Pure-numpy fallback for the hot kernels.

Mirrors the signatures of the compiled ``_ckernels`` module exactly. Every
function takes and returns C-contiguous float64 arrays.
"""
import numpy as np

BACKEND = "python"

MASK_VALUE = -1e9


def matmul(a, b, strict=False):
    if strict:
        # broadcast-and-reduce avoids BLAS thread-dependent summation order
        return (a[:, :, None] * b[None, :, :]).sum(axis=1)
    return a @ b


def softmax_rows(s):
    out = s - s.max(axis=1, keepdims=True) if s.shape[1] else s.copy()
    np.exp(out, out=out)
    if s.shape[1]:
        out /= out.sum(axis=1, keepdims=True)
    return out


def attention(q, k, v, scale, mask_row0, mask_col1, strict=False):
    """softmax(q k^T * scale) v with rows >= mask_row0 blind to cols < mask_col1."""
    s = matmul(q, np.ascontiguousarray(k.T), strict) * scale
    if mask_row0 < s.shape[0] and mask_col1 > 0:
        s[mask_row0:, :mask_col1] = MASK_VALUE
    p = softmax_rows(s)
    return matmul(p, v, strict), p
