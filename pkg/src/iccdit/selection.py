"""Learned top-k selection of context tokens.

Each layer scores its context tokens with a small MLP over value-derived
features, keeps the k best, and lets the rest bypass the block untouched.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import SequenceLayout
from .core import Rng, mlp_backward, mlp_forward


@dataclass
class ImportanceScorer:
    """Per-layer scoring MLP; input width d + 1 (value norm plus the value row)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, d: int, hidden: int, rng: Rng, dtype=np.float32):
        w1 = rng.normal((d + 1, hidden)) / np.sqrt(d + 1)
        w2 = rng.normal((hidden, 1)) / np.sqrt(hidden)
        return cls(w1.astype(dtype), np.zeros(hidden, dtype), w2.astype(dtype), np.zeros(1, dtype))

    @classmethod
    def zeros(cls, d: int, hidden: int, b2: float = 0.0, dtype=np.float32):
        return cls(np.zeros((d + 1, hidden), dtype), np.zeros(hidden, dtype),
                   np.zeros((hidden, 1), dtype), np.full(1, b2, dtype))


@dataclass
class SelectionResult:
    scores: np.ndarray
    kept: np.ndarray
    skipped: np.ndarray

    @property
    def k(self) -> int:
        return int(self.kept.size)


def kept_count(n_c: int, ratio: float) -> int:
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"selection ratio must lie in (0, 1], got {ratio}")
    if n_c == 0:
        return 0
    return max(1, int(np.floor(ratio * n_c + 1e-12)))


def value_features(V_c):
    """Feature map: L2 norm of each value row, followed by the row itself."""
    norms = np.sqrt((V_c.astype(np.float64) ** 2).sum(axis=1, keepdims=True)).astype(V_c.dtype)
    return np.concatenate([norms, V_c], axis=1)


def score_tokens(scorer: ImportanceScorer, V_c, return_cache: bool = False):
    feats = value_features(V_c)
    if V_c.shape[0] == 0:
        out = np.zeros((0, 1), dtype=V_c.dtype)
        return (out, None) if return_cache else out
    out, cache = mlp_forward(feats, scorer.w1, scorer.b1, scorer.w2, scorer.b2, return_cache=True)
    return (out, (feats, cache)) if return_cache else out


def score_tokens_backward(dscores, V_c, cache, scorer: ImportanceScorer):
    """Returns (dV_c, grads) where grads mirrors the scorer fields."""
    feats, mcache = cache
    dfeat, dw1, db1, dw2, db2 = mlp_backward(dscores, mcache, scorer.w1, scorer.w2)
    norms = feats[:, :1]
    safe = np.where(norms > 0, norms, 1.0)
    dV = dfeat[:, 1:] + dfeat[:, :1] * V_c / safe
    return dV, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def select_topk(scores, ratio: float) -> SelectionResult:
    """Keep the k highest scores; ties go to the lower index; both lists ascending."""
    s = np.asarray(scores).reshape(-1)
    k = kept_count(s.size, ratio)
    order = np.argsort(-s.astype(np.float64), kind="stable")
    kept = np.sort(order[:k])
    skipped = np.sort(order[k:])
    return SelectionResult(np.asarray(scores).reshape(-1, 1), kept.astype(np.int64),
                           skipped.astype(np.int64))


def gather_rows(t, idx):
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= t.shape[0]):
        raise IndexError(f"row index out of range for {t.shape[0]} rows")
    if idx.size > 1 and np.any(np.diff(idx) <= 0):
        raise ValueError("gather indices must be strictly ascending")
    return t[idx]


def scatter_merge(processed, bypassed, layout: SequenceLayout, sel: SelectionResult):
    """Rebuild the full sequence: noisy rows, then context rows in original order."""
    n_z, n_c = layout.n_z, layout.n_c
    if processed.shape[0] != n_z + sel.k or bypassed.shape[0] != n_c - sel.k:
        raise ValueError(
            f"scatter_merge shapes: processed {processed.shape[0]} rows (want {n_z + sel.k}), "
            f"bypassed {bypassed.shape[0]} rows (want {n_c - sel.k})")
    if processed.shape[1:] != bypassed.shape[1:] and bypassed.shape[0]:
        raise ValueError("processed and bypassed widths differ")
    out = np.empty((n_z + n_c,) + processed.shape[1:], dtype=processed.dtype)
    out[:n_z] = processed[:n_z]
    out[n_z + sel.kept] = processed[n_z:]
    out[n_z + sel.skipped] = bypassed
    return out
