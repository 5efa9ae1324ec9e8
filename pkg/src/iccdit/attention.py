"""Attention variants over a [noisy; context] sequence.

Three ways to attend over the same inputs:

* ``attn_icc_full``: plain joint attention, every query sees every key.
* ``attn_masked_oracle``: joint attention with the context-query/noisy-key
  score block masked out before the softmax.
* ``attn_decoupled``: two ordinary attention calls (context self-attention and
  noisy-to-all attention) that reproduce the masked pattern without a mask,
  which is what makes context K/V cacheable across sampling steps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .kernels import matmul


@dataclass(frozen=True)
class SequenceLayout:
    """Noisy segment first, then named context segments in declared order."""

    n_z: int
    contexts: tuple[tuple[str, int], ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.n_z < 1:
            raise ValueError("noisy segment needs at least one token")
        object.__setattr__(self, "contexts", tuple((str(n), int(k)) for n, k in self.contexts))
        if any(k < 0 for _, k in self.contexts):
            raise ValueError("context lengths must be non-negative")

    @property
    def n_c(self) -> int:
        return sum(k for _, k in self.contexts)

    @property
    def total(self) -> int:
        return self.n_z + self.n_c

    def segment_ids(self) -> np.ndarray:
        """Segment index (0-based over contexts) of each context row."""
        return np.repeat(np.arange(len(self.contexts)), [k for _, k in self.contexts]).astype(np.int64)

    def split(self, seq):
        """Split rows into {"noisy": ..., name: ...} following the layout."""
        if seq.shape[0] != self.total:
            raise ValueError(f"sequence has {seq.shape[0]} rows, layout expects {self.total}")
        parts = {"noisy": seq[: self.n_z]}
        off = self.n_z
        for name, k in self.contexts:
            parts[name] = seq[off: off + k]
            off += k
        return parts


@dataclass
class AttentionInputs:
    Q_z: np.ndarray
    K_z: np.ndarray
    V_z: np.ndarray
    Q_c: np.ndarray
    K_c: np.ndarray
    V_c: np.ndarray
    d_k: int | None = None

    def __post_init__(self):
        d = self.Q_z.shape[1]
        for name in ("K_z", "V_z", "Q_c", "K_c", "V_c"):
            if getattr(self, name).shape[1] != d:
                raise ValueError(f"{name} width differs from Q_z width {d}")
        if not (self.Q_z.shape[0] == self.K_z.shape[0] == self.V_z.shape[0]):
            raise ValueError("noisy Q/K/V row counts differ")
        if not (self.Q_c.shape[0] == self.K_c.shape[0] == self.V_c.shape[0]):
            raise ValueError("context Q/K/V row counts differ")
        if self.d_k is None:
            self.d_k = d
        if self.d_k <= 0:
            raise ValueError("d_k must be positive")

    @property
    def n_z(self):
        return self.Q_z.shape[0]

    @property
    def n_c(self):
        return self.Q_c.shape[0]

    def full(self):
        return (np.concatenate([self.Q_z, self.Q_c]), np.concatenate([self.K_z, self.K_c]),
                np.concatenate([self.V_z, self.V_c]))


def attn_dense(Q, K, V, d_k=None, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d_k)) V."""
    d_k = Q.shape[1] if d_k is None else d_k
    out, w = kernels.attention(Q, K, V, 1.0 / math.sqrt(d_k))
    return (out, w) if return_weights else out


def attn_icc_full(inp: AttentionInputs, return_weights: bool = False):
    q, k, v = inp.full()
    out, w = kernels.attention(q, k, v, 1.0 / math.sqrt(inp.d_k))
    res = (out[: inp.n_z], out[inp.n_z:])
    return (*res, w) if return_weights else res


def attn_masked_oracle(inp: AttentionInputs, return_weights: bool = False):
    """Joint attention with the S_cz block (context queries x noisy keys) masked."""
    q, k, v = inp.full()
    out, w = kernels.attention(q, k, v, 1.0 / math.sqrt(inp.d_k), mask_row0=inp.n_z,
                               mask_col1=inp.n_z)
    res = (out[: inp.n_z], out[inp.n_z:])
    return (*res, w) if return_weights else res


def attn_noisy_to_all(Q_z, K_z, V_z, K_c, V_c, d_k=None, return_weights: bool = False):
    """Noisy queries over [K_z; K_c]; the half of decoupled attention that survives caching."""
    return attn_dense(Q_z, np.concatenate([K_z, K_c]), np.concatenate([V_z, V_c]), d_k,
                      return_weights)


def attn_decoupled(inp: AttentionInputs, return_weights: bool = False):
    """Context self-attention plus noisy-to-all attention.

    With ``return_weights`` also returns (P_z, P_c), the two weight matrices.
    """
    O_c, P_c = attn_dense(inp.Q_c, inp.K_c, inp.V_c, inp.d_k, return_weights=True)
    O_z, P_z = attn_noisy_to_all(inp.Q_z, inp.K_z, inp.V_z, inp.K_c, inp.V_c, inp.d_k,
                                 return_weights=True)
    return (O_z, O_c, (P_z, P_c)) if return_weights else (O_z, O_c)


def attention_backward(dO, Q, K, V, P, scale):
    """Gradients (dQ, dK, dV) of O = softmax(scale Q K^T [+mask]) V given weights P.

    Masked entries have P == 0 and therefore receive no gradient.
    """
    P = P.astype(dO.dtype, copy=False)
    dV = matmul(P.T, dO)
    dP = matmul(dO, V.T)
    dS = P * (dP - (dP * P).sum(axis=1, keepdims=True)) * scale
    dQ = matmul(dS, K)
    dK = matmul(dS.T, Q)
    return dQ, dK, dV


def random_instance(seed: int, max_nz: int = 16, max_nc: int = 16, max_d: int = 32):
    """Seeded random AttentionInputs with n_z in [1, max_nz], n_c in [0, max_nc], d in [2, max_d]."""
    from .core import Rng

    rng = Rng(seed)
    n_z, n_c, d = (int(x) for x in (rng.integers(1, max_nz + 1), rng.integers(0, max_nc + 1),
                                    rng.integers(2, max_d + 1)))
    scale = 1.0 + 2.0 * float(rng.uniform())
    mats = [rng.normal((n, d)) * scale for n in (n_z, n_z, n_z, n_c, n_c, n_c)]
    return AttentionInputs(*mats)


def max_decoupled_error(inp: AttentionInputs) -> float:
    """Largest |decoupled - masked oracle| over both output blocks."""
    dz, dc = attn_decoupled(inp)
    mz, mc = attn_masked_oracle(inp)
    err = float(np.max(np.abs(dz - mz))) if dz.size else 0.0
    if dc.size:
        err = max(err, float(np.max(np.abs(dc - mc))))
    return err


def equivalence_suite(seeds, tol: float = 1e-6):
    """Run the decoupled-vs-oracle check per seed; returns (worst error, failing seeds)."""
    worst, failing = 0.0, []
    for s in seeds:
        err = max_decoupled_error(random_instance(s))
        worst = max(worst, err)
        if not err < tol:
            failing.append(s)
    return worst, failing
