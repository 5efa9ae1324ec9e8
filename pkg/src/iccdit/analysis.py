"""Redundancy diagnostics: frame differences, attention concentration,
cross-step feature similarity, and per-layer divergence of context attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Rng
from .model import DiffusionState, ToyDiT, sample


def frame_diff(frames) -> np.ndarray:
    """L1 norm of the difference between consecutive frame-mean token vectors.

    ``frames`` has shape (F, tokens_per_frame, d) with F >= 2.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] < 2:
        raise ValueError("frame_diff needs an (F, tokens, d) array with F >= 2")
    means = frames.mean(axis=1)
    return np.abs(np.diff(means, axis=0)).sum(axis=1)


@dataclass
class ConcentrationCurve:
    fractions: np.ndarray
    cumulative: np.ndarray

    def mass_at(self, fraction: float) -> float:
        """Attention mass captured by the top ``fraction`` of tokens (linear interpolation)."""
        xs = np.concatenate([[0.0], self.fractions])
        ys = np.concatenate([[0.0], self.cumulative])
        return float(np.interp(fraction, xs, ys))

    def rows(self):
        return [{"fraction_of_tokens": float(f), "cumulative_mass": float(c)}
                for f, c in zip(self.fractions, self.cumulative)]


def concentration_from_mass(mass) -> ConcentrationCurve:
    """Sort per-token mass descending, normalise to 1 and accumulate."""
    mass = np.asarray(mass, dtype=np.float64).reshape(-1)
    if mass.size == 0:
        raise ValueError("no context tokens")
    total = mass.sum()
    if total <= 0:
        raise ValueError("context received no attention mass")
    srt = np.sort(mass / total)[::-1]
    cum = np.cumsum(srt)
    cum[-1] = 1.0 if abs(cum[-1] - 1.0) < 1e-9 else cum[-1]
    return ConcentrationCurve(np.arange(1, mass.size + 1) / mass.size, cum)


def context_attention_mass(model: ToyDiT, states, layers) -> np.ndarray:
    """Noisy-to-context attention mass per context token, averaged over
    noisy rows, heads, the given layers and the states; normalised to sum 1."""
    layers = list(layers)
    n_c = model.config.layout.n_c
    if n_c == 0 or not model.flags.use_context:
        raise ValueError("model has no context tokens")
    acc = np.zeros(n_c)
    for st in states:
        cap: dict = {}
        model.velocity(st, capture=cap)
        for l in layers:
            if not cap[l]["ctx_on"]:
                raise ValueError(f"layer {l} does not process context under mode {model.config.mode}")
            acc += cap[l]["ctx_mass"]
    return acc / acc.sum()


def attention_concentration(model: ToyDiT, states, layers) -> ConcentrationCurve:
    return concentration_from_mass(context_attention_mass(model, states, layers))


def _mean_row_cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    num = (a * b).sum(axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    return float(np.mean(np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)))


def stepwise_similarity(model: ToyDiT, context, T: int, layer: int = 0, seed: int = 0):
    """Cosine similarity of a layer's context and noisy output rows at each step vs step 0.

    Runs an uncached trajectory. Returns (rows, hidden) where ``hidden`` holds
    the captured layer outputs per step for offline checks.
    """
    if T < 2:
        raise ValueError("stepwise similarity needs T >= 2")
    caps: list = []
    sample(model, context, T, Rng(seed), captures=caps, use_cache=False)
    n_z = model.config.n_z
    hidden = [c[layer]["out"] for c in caps]
    ref = hidden[0]
    rows = []
    for i, h in enumerate(hidden):
        row = {"step": i, "noisy_cosine": _mean_row_cosine(h[:n_z], ref[:n_z])}
        row["context_cosine"] = _mean_row_cosine(h[n_z:], ref[n_z:]) if h.shape[0] > n_z else 1.0
        rows.append(row)
    return rows, hidden


def js_divergence(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p, q = p / p.sum(), q / q.sum()
    m = 0.5 * (p + q)

    def kl(a, b):
        nz = a > 0
        return float((a[nz] * np.log(a[nz] / b[nz])).sum())

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def layer_divergence(model: ToyDiT, states) -> np.ndarray:
    """Pairwise Jensen-Shannon divergence between layers' context-mass distributions.

    An interpretation, not a standard metric: it quantifies how differently
    layers spread noisy-query attention over the context tokens.
    """
    layers = [l for l in range(model.config.L) if l in model.config.context_layers]
    masses = [context_attention_mass(model, states, [l]) for l in layers]
    out = np.zeros((len(layers), len(layers)))
    for i in range(len(layers)):
        for j in range(i + 1, len(layers)):
            out[i, j] = out[j, i] = js_divergence(masses[i], masses[j])
    return out


def probe_states(model: ToyDiT, task, n: int, seed: int, t: float = 0.5):
    """Fixed synthetic probe inputs at a single diffusion time (default mid-trajectory)."""
    rng = Rng(seed)
    cfg = model.config
    states = []
    for z1, c in task.batch(n, rng):
        z0 = rng.normal((cfg.n_z, cfg.d_latent))
        z_t = ((1.0 - t) * z0 + t * z1).astype(cfg.np_dtype)
        states.append(DiffusionState(z_t, t, c))
    return states
