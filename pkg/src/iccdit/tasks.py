"""Synthetic conditioning tasks where the clean latents are a function of the context."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Rng

TASK_KINDS = ("copy", "linear-map", "masked-reconstruction")


@dataclass(frozen=True)
class SyntheticTask:
    """Draws (clean latents, context) pairs.

    The first context segment ("reference") carries the signal; remaining
    segments are filler whose role depends on the kind:

    * copy: target = reference rows.
    * linear-map: target = reference rows times a fixed seeded matrix.
    * masked-reconstruction: the reference has a quarter of its rows zeroed,
      the second segment holds a noisy copy of the target.
    """

    kind: str
    d_latent: int
    n_z: int
    contexts: tuple[tuple[str, int], ...]
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; choose from {TASK_KINDS}")
        object.__setattr__(self, "contexts", tuple((str(n), int(k)) for n, k in self.contexts))
        if not self.contexts:
            raise ValueError("synthetic tasks need at least one context segment")

    @property
    def n_c(self) -> int:
        return sum(k for _, k in self.contexts)

    def _map(self):
        return Rng(self.seed ^ 0x5EED).normal((self.d_latent, self.d_latent)) / np.sqrt(self.d_latent)

    def target_from_reference(self, ref_full):
        if self.kind == "linear-map":
            return ref_full @ self._map()
        return ref_full

    def draw(self, rng: Rng):
        dl, n_z = self.d_latent, self.n_z
        ref_full = rng.normal((n_z, dl))
        z1 = self.target_from_reference(ref_full)
        segs = []
        for i, (_, k) in enumerate(self.contexts):
            if i == 0:
                seg = np.resize(ref_full, (k, dl)) if k != n_z else ref_full.copy()
                if self.kind == "masked-reconstruction":
                    drop = rng.uniform(k) < 0.25
                    seg[drop] = 0.0
            elif self.kind == "masked-reconstruction" and i == 1:
                seg = np.resize(z1 + 0.5 * rng.normal(z1.shape), (k, dl))
            else:
                seg = rng.normal((k, dl))
            segs.append(seg)
        ctx = np.concatenate(segs) if segs else np.zeros((0, dl))
        return z1.astype(np.float32), ctx.astype(np.float32)

    def batch(self, n: int, rng: Rng):
        return [self.draw(rng) for _ in range(n)]
