"""Layer importance, layer plans, and the per-session context K/V cache."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import attn_dense, attn_noisy_to_all
from .selection import SelectionResult


class ProtocolError(RuntimeError):
    """Cache used out of order: double population, inactive layer, or missing entry."""


@dataclass(frozen=True)
class LayerPlan:
    """Layers that process context tokens. Layer 0 is always among them."""

    active: tuple[int, ...]
    L: int

    def __post_init__(self):
        act = tuple(sorted(set(int(i) for i in self.active)))
        if not act or act[0] != 0:
            raise ValueError("layer 0 must be active")
        if act[-1] >= self.L:
            raise ValueError(f"active layer {act[-1]} out of range for L={self.L}")
        object.__setattr__(self, "active", act)

    @property
    def L_s(self) -> int:
        return len(self.active)

    @classmethod
    def all_layers(cls, L: int) -> "LayerPlan":
        return cls(tuple(range(L)), L)


@dataclass
class BIReport:
    bi: np.ndarray
    n_samples: int
    cosines: list[np.ndarray] = field(default_factory=list)

    @property
    def L(self) -> int:
        return int(self.bi.size)

    def to_rows(self):
        return [{"layer": i, "bi": float(v), "mean_cosine": float(1.0 - v)}
                for i, v in enumerate(self.bi)]


def _row_cosine(a, b):
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    num = (a * b).sum(axis=1)
    den = np.sqrt((a * a).sum(axis=1)) * np.sqrt((b * b).sum(axis=1))
    safe = np.where(den > 0, den, 1.0)
    return np.where(den > 0, num / safe, 1.0)


def importance_from_dumps(dumps) -> tuple[float, np.ndarray]:
    """BI from saved per-head Q/K/V of one layer over a set of probes.

    Each dump maps "Q_z", "K_z", "V_z", "K_c", "V_c" to lists of per-head
    arrays. Cosine is taken per noisy row on the head-concatenated outputs,
    then averaged over rows and probes. Returns (bi, per-probe mean cosines).
    """
    if not dumps:
        raise ValueError("block importance needs at least one probe")
    cos = []
    for dump in dumps:
        no_ref, with_ref = [], []
        for qz, kz, vz, kc, vc in zip(dump["Q_z"], dump["K_z"], dump["V_z"], dump["K_c"],
                                      dump["V_c"]):
            no_ref.append(attn_dense(qz, kz, vz))
            with_ref.append(attn_noisy_to_all(qz, kz, vz, kc, vc))
        cos.append(_row_cosine(np.concatenate(no_ref, axis=1), np.concatenate(with_ref, axis=1)))
    per_probe = np.array([c.mean() for c in cos])
    return float(np.clip(1.0 - np.concatenate(cos).mean(), 0.0, 2.0)), per_probe


def block_importance(model, probe_batch, layer: int) -> float:
    dumps = [model.attention_dump(state, layer) for state in probe_batch]
    return importance_from_dumps(dumps)[0]


def bi_report(model, probe_batch) -> BIReport:
    if not probe_batch:
        raise ValueError("block importance needs at least one probe")
    L = model.config.L
    vals, cosines = [], []
    per_layer = model.attention_dumps_all(probe_batch)
    for layer in range(L):
        bi, per_probe = importance_from_dumps(per_layer[layer])
        vals.append(bi)
        cosines.append(per_probe)
    return BIReport(np.array(vals), len(probe_batch), cosines)


def choose_layers(bi, L_s_extra: int) -> LayerPlan:
    """Layer 0 plus the ``L_s_extra`` highest-BI layers among 1..L-1 (ties to lower index)."""
    values = np.asarray(bi.bi if isinstance(bi, BIReport) else bi, dtype=np.float64)
    L = values.size
    if L_s_extra < 0 or L_s_extra + 1 > L:
        raise ValueError(f"cannot pick {L_s_extra} extra layers out of {L - 1}")
    order = np.argsort(-values[1:], kind="stable")[:L_s_extra] + 1
    return LayerPlan((0, *order.tolist()), L)


@dataclass(frozen=True)
class CacheEntry:
    K: np.ndarray
    V: np.ndarray
    selection: SelectionResult
    context_out: np.ndarray
    step: int


class SessionCache:
    """Context K/V of the selected tokens for each active layer of one sampling run.

    Written once (at the first step), read-only afterwards.
    """

    def __init__(self, plan: LayerPlan):
        self.plan = plan
        self._entries: dict[int, CacheEntry] = {}

    def populated(self, layer: int) -> bool:
        return layer in self._entries

    @property
    def complete(self) -> bool:
        return all(l in self._entries for l in self.plan.active)

    def populate(self, layer: int, K, V, sel: SelectionResult, step: int, context_out=None):
        if layer not in self.plan.active:
            raise ProtocolError(f"layer {layer} is not active; nothing to cache")
        if layer in self._entries:
            raise ProtocolError(f"layer {layer} already cached at step {self._entries[layer].step}")
        arrays = []
        for a in (K, V, context_out if context_out is not None else np.zeros((0, K.shape[1]))):
            a = np.array(a, copy=True)
            a.flags.writeable = False
            arrays.append(a)
        self._entries[layer] = CacheEntry(arrays[0], arrays[1], sel, arrays[2], int(step))

    def lookup(self, layer: int):
        try:
            e = self._entries[layer]
        except KeyError:
            raise ProtocolError(f"no cache entry for layer {layer}") from None
        return e.K, e.V, e.selection

    def entry(self, layer: int) -> CacheEntry:
        self.lookup(layer)
        return self._entries[layer]


def cache_populate(cache: SessionCache, layer, K_sel, V_sel, sel, step, context_out=None):
    cache.populate(layer, K_sel, V_sel, sel, step, context_out)


def cache_lookup(cache: SessionCache, layer):
    return cache.lookup(layer)
