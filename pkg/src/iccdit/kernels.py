"""Kernel backend selection and the attention interaction counter.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy fallback in ``_pykernels`` takes over. ``FDT2_KERNELS=python`` forces
the fallback, ``FDT2_KERNELS=compiled`` makes a missing extension an error.
``FDT2_STRICT=1`` requests bit-reproducible serial arithmetic.

All public kernels accumulate in float64 and return the promoted input dtype
(float32 stays float32, float64 stays float64).
"""
from __future__ import annotations

import contextlib
import contextvars
import os
from dataclasses import dataclass

import numpy as np

from . import _pykernels


def _load_backend(choice: str):
    if choice == "python":
        return _pykernels
    try:
        from . import _ckernels
    except ImportError:
        if choice == "compiled":
            raise
        return _pykernels
    return _ckernels


_backend = _load_backend(os.environ.get("FDT2_KERNELS", "auto"))
STRICT = os.environ.get("FDT2_STRICT", "0") not in ("", "0")


def backend_name() -> str:
    return _backend.BACKEND


def compiled_available() -> bool:
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        return False
    return True


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily switch kernel backend ("python" or "compiled")."""
    global _backend
    prev = _backend
    _backend = _load_backend(name)
    try:
        yield _backend
    finally:
        _backend = prev


@dataclass
class CostCounter:
    """Accumulates query-key logits (and optionally matmul flops) for one run."""

    logits: int = 0
    attention_calls: int = 0
    matmul_flops: int = 0


_counter: contextvars.ContextVar[CostCounter | None] = contextvars.ContextVar(
    "iccdit_cost_counter", default=None
)


@contextlib.contextmanager
def counting():
    """Install a fresh CostCounter for the dynamic extent of the block."""
    ctr = CostCounter()
    token = _counter.set(ctr)
    try:
        yield ctr
    finally:
        _counter.reset(token)


def _f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def _out_dtype(*arrays):
    dt = np.result_type(*arrays)
    return dt if dt in (np.float32, np.float64) else np.dtype(np.float64)


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ctr = _counter.get()
    if ctr is not None:
        ctr.matmul_flops += 2 * a.shape[0] * a.shape[1] * b.shape[1]
    return _backend.matmul(_f64(a), _f64(b), STRICT).astype(_out_dtype(a, b), copy=False)


def softmax_rows(s):
    s = np.asarray(s)
    if s.ndim != 2:
        raise ValueError(f"softmax_rows expects a matrix, got shape {s.shape}")
    return _backend.softmax_rows(_f64(s)).astype(_out_dtype(s), copy=False)


def attention(q, k, v, scale: float, mask_row0: int | None = None, mask_col1: int = 0):
    """Scaled dot-product attention; returns (output, weights) as float64-accurate arrays.

    Query rows at index >= ``mask_row0`` cannot see key columns < ``mask_col1``.
    Every computed logit, masked or not, is charged to the active counter.
    """
    m, n = q.shape[0], k.shape[0]
    if q.shape[1] != k.shape[1] or v.shape[0] != n:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    ctr = _counter.get()
    if ctr is not None:
        ctr.logits += m * n
        ctr.attention_calls += 1
    if mask_row0 is None:
        mask_row0 = m
    dt = _out_dtype(q, k, v)
    if m == 0 or n == 0:
        return np.zeros((m, v.shape[1]), dtype=dt), np.zeros((m, n))
    out, w = _backend.attention(_f64(q), _f64(k), _f64(v), float(scale), int(mask_row0),
                                int(mask_col1), STRICT)
    return out.astype(dt, copy=False), w
