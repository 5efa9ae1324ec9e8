"""Toy in-context-conditioned diffusion transformer.

The sequence is ``[noisy latents; context tokens]``. Each block is
pre-norm attention plus a GELU MLP. Depending on the mode a block may score
and keep only the top-k context tokens, use decoupled attention, read
context K/V from a session cache, or skip context processing altogether.

Gradients are hand-written (``ToyDiT.backward``) and checked against finite
differences in the test-suite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import (AttentionInputs, SequenceLayout, attention_backward, attn_decoupled,
                        attn_dense, attn_icc_full, attn_masked_oracle, attn_noisy_to_all)
from .caching import LayerPlan, SessionCache
from .core import (Rng, check_finite, layer_norm, layer_norm_backward, matmul, mlp_backward,
                   mlp_forward, sigmoid)
from .selection import (ImportanceScorer, SelectionResult, score_tokens, score_tokens_backward,
                        scatter_merge, select_topk)


@dataclass(frozen=True)
class ModeFlags:
    use_context: bool
    dts: bool
    step_cache: bool
    layer_cache: bool
    style: str


# Canonical attention style per mode is the one the cost model charges for.
MODES: dict[str, ModeFlags] = {
    "no_condition": ModeFlags(False, False, False, False, "full"),
    "baseline_icc": ModeFlags(True, False, False, False, "full"),
    "dts_only": ModeFlags(True, True, False, False, "full"),
    "step_cache_only": ModeFlags(True, False, True, False, "decoupled"),
    "layer_cache_only": ModeFlags(True, False, False, True, "full"),
    "fulldit2": ModeFlags(True, True, True, True, "decoupled"),
    "fulldit2_no_dts": ModeFlags(True, False, True, True, "decoupled"),
    "fulldit2_no_step_cache": ModeFlags(True, True, False, True, "decoupled"),
    "fulldit2_no_layer_cache": ModeFlags(True, True, True, False, "decoupled"),
}
STYLES = ("full", "decoupled", "masked")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    L: int = 4
    d: int = 32
    heads: int = 2
    d_latent: int = 8
    n_z: int = 16
    contexts: tuple[tuple[str, int], ...] = (("ref", 16), ("traj", 16))
    ratio: float = 0.5
    active_layers: tuple[int, ...] | None = None
    mode: str = "fulldit2"
    attention_style: str | None = None
    mlp_hidden: int = 64
    scorer_hidden: int = 16
    time_dim: int = 16
    soft_gate: bool = True
    context_positions: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "contexts", tuple((str(n), int(k)) for n, k in self.contexts))
        if self.active_layers is not None:
            object.__setattr__(self, "active_layers", tuple(int(i) for i in self.active_layers))
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {sorted(MODES)}")
        if self.attention_style is not None and self.attention_style not in STYLES:
            raise ValueError(f"unknown attention style {self.attention_style!r}")
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError("ratio must lie in (0, 1]")
        if self.flags.step_cache and self.flags.style == "full":
            raise ValueError(f"mode {self.mode} caches context K/V and needs decoupled attention")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        self.plan  # validates active_layers

    @property
    def layout(self) -> SequenceLayout:
        return SequenceLayout(self.n_z, self.contexts)

    @property
    def flags(self) -> ModeFlags:
        f = MODES[self.mode]
        return replace(f, style=self.attention_style) if self.attention_style else f

    @property
    def plan(self) -> LayerPlan:
        if self.active_layers is None:
            return LayerPlan.all_layers(self.L)
        return LayerPlan(self.active_layers, self.L)

    @property
    def context_layers(self) -> tuple[int, ...]:
        """Layers that touch context tokens under the current mode."""
        f = self.flags
        if not f.use_context:
            return ()
        return self.plan.active if f.layer_cache else tuple(range(self.L))

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class DiffusionState:
    z_t: np.ndarray
    t: float
    context: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {self.t}")


BLOCK_KEYS = ("ln1", "wq", "wk", "wv", "wo", "bo", "ln2", "mlp.w1", "mlp.b1", "mlp.w2",
              "mlp.b2", "scorer.w1", "scorer.b1", "scorer.w2", "scorer.b2")


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = Rng(seed)
    dt = cfg.np_dtype
    d, dl = cfg.d, cfg.d_latent

    def gauss(shape, std):
        return (rng.normal(shape) * std).astype(dt)

    p = {
        "in.w": gauss((dl, d), 1.0 / math.sqrt(dl)),
        "in.b": np.zeros(d, dt),
        "pos": gauss((cfg.n_z, d), 1.0),
        "type": gauss((max(1, len(cfg.contexts)), d), 0.5),
        "time.w": gauss((cfg.time_dim, d), 1.0 / math.sqrt(cfg.time_dim)),
        "time.b": np.zeros(d, dt),
    }
    for l in range(cfg.L):
        b = f"blocks.{l}."
        p[b + "ln1"] = np.ones(d, dt)
        for name in ("wq", "wv", "wo"):
            p[b + name] = gauss((d, d), 1.0 / math.sqrt(d))
        # tied query/key init makes q.k positive for matching rows, so position
        # lookup into the context works from the first step
        p[b + "wk"] = p[b + "wq"].copy()
        p[b + "bo"] = np.zeros(d, dt)
        p[b + "ln2"] = np.ones(d, dt)
        p[b + "mlp.w1"] = gauss((d, cfg.mlp_hidden), 1.0 / math.sqrt(d))
        p[b + "mlp.b1"] = np.zeros(cfg.mlp_hidden, dt)
        p[b + "mlp.w2"] = gauss((cfg.mlp_hidden, d), 0.5 / math.sqrt(cfg.mlp_hidden))
        p[b + "mlp.b2"] = np.zeros(d, dt)
        sc = ImportanceScorer.init(d, cfg.scorer_hidden, rng, dt)
        p[b + "scorer.w1"], p[b + "scorer.b1"] = sc.w1, sc.b1
        p[b + "scorer.w2"], p[b + "scorer.b2"] = sc.w2, sc.b2
    p["final.ln"] = np.ones(d, dt)
    p["out.w"] = gauss((d, dl), 0.1 / math.sqrt(d))
    p["out.b"] = np.zeros(dl, dt)
    return p


def time_features(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = 1000.0 * t * freqs
    return np.concatenate([np.cos(arg), np.sin(arg)])[None, :]


@dataclass
class _BlockRecord:
    layer: int
    h: np.ndarray
    n_z: int
    ctx_on: bool
    kept: np.ndarray
    skipped: np.ndarray
    x_z: np.ndarray
    xh_z: np.ndarray
    inv_z: np.ndarray
    qkv: tuple
    att: list
    O: np.ndarray
    h1: np.ndarray
    xh2: np.ndarray
    inv2: np.ndarray
    mcache: object
    ctx: dict = field(default_factory=dict)


@dataclass
class _Tape:
    state: DiffusionState
    layout: SequenceLayout
    h0: np.ndarray
    tfeat: np.ndarray
    seg_ids: np.ndarray
    blocks: list = field(default_factory=list)
    final: tuple = ()


class ToyDiT:
    """Parameters plus configuration. ``with_mode`` shares parameters across modes."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig | None = None, seed: int = 0) -> "ToyDiT":
        config = config or ModelConfig()
        return cls(config, init_params(config, seed))

    def with_mode(self, mode: str | None = None, attention_style: str | None = None,
                  **overrides) -> "ToyDiT":
        cfg = replace(self.config, mode=mode or self.config.mode, attention_style=attention_style,
                      **overrides)
        return ToyDiT(cfg, self.params)

    def astype(self, dtype) -> "ToyDiT":
        dt = np.dtype(dtype)
        return ToyDiT(replace(self.config, dtype=dt.name),
                      {k: v.astype(dt) for k, v in self.params.items()})

    def copy(self) -> "ToyDiT":
        return ToyDiT(self.config, {k: v.copy() for k, v in self.params.items()})

    @property
    def flags(self) -> ModeFlags:
        return self.config.flags

    def _block(self, l: int) -> dict:
        b = f"blocks.{l}."
        return {k: self.params[b + k] for k in BLOCK_KEYS}

    def scorer(self, l: int) -> ImportanceScorer:
        b = self._block(l)
        return ImportanceScorer(b["scorer.w1"], b["scorer.b1"], b["scorer.w2"], b["scorer.b2"])

    # ------------------------------------------------------------------ forward

    def assemble_sequence(self, state: DiffusionState, tape: _Tape | None = None):
        """Project and embed ``[z_t; context]``; returns (hidden, layout)."""
        cfg, p = self.config, self.params
        dt = cfg.np_dtype
        z = np.asarray(state.z_t, dtype=dt)
        if z.shape != (cfg.n_z, cfg.d_latent):
            raise ValueError(f"z_t shape {z.shape}, expected {(cfg.n_z, cfg.d_latent)}")
        tfeat = time_features(state.t, cfg.time_dim).astype(dt)
        h_z = matmul(z, p["in.w"]) + p["in.b"] + p["pos"] + (matmul(tfeat, p["time.w"]) + p["time.b"])
        if self.flags.use_context:
            layout = cfg.layout
            c = np.asarray(state.context, dtype=dt)
            if c.shape != (layout.n_c, cfg.d_latent):
                raise ValueError(f"context shape {c.shape}, expected {(layout.n_c, cfg.d_latent)}")
            seg = layout.segment_ids()
            h_c = matmul(c, p["in.w"]) + p["in.b"] + p["type"][seg]
            if cfg.context_positions:
                h_c = h_c + p["pos"][self._context_pos_index(layout)]
        else:
            layout = SequenceLayout(cfg.n_z, ())
            seg = np.zeros(0, np.int64)
            h_c = np.zeros((0, cfg.d), dt)
        h = np.concatenate([h_z, h_c]).astype(dt, copy=False)
        if tape is not None:
            tape.layout, tape.h0, tape.tfeat, tape.seg_ids = layout, h, tfeat, seg
        return h, layout

    def _context_pos_index(self, layout):
        idx = [np.arange(k) % self.config.n_z for _, k in layout.contexts]
        return np.concatenate(idx) if idx else np.zeros(0, np.int64)

    def _mha(self, Qz, Kz, Vz, Qc, Kc, Vc, ctx_on: bool):
        """Multi-head attention as independent head slices; returns (O, records)."""
        cfg = self.config
        dh = cfg.head_dim
        style = self.flags.style
        outs, recs = [], []
        for i in range(cfg.heads):
            sl = slice(i * dh, (i + 1) * dh)
            if not ctx_on:
                o, P = attn_dense(Qz[:, sl], Kz[:, sl], Vz[:, sl], dh, return_weights=True)
                outs.append(o)
                recs.append(("plain", P))
                continue
            inp = AttentionInputs(Qz[:, sl], Kz[:, sl], Vz[:, sl], Qc[:, sl], Kc[:, sl], Vc[:, sl], dh)
            if style == "decoupled":
                oz, oc, (Pz, Pc) = attn_decoupled(inp, return_weights=True)
                recs.append(("decoupled", Pz, Pc))
            else:
                fn = attn_masked_oracle if style == "masked" else attn_icc_full
                oz, oc, P = fn(inp, return_weights=True)
                recs.append(("joint", P))
            outs.append(np.concatenate([oz, oc]))
        return np.concatenate(outs, axis=1), recs

    def block_forward(self, l: int, h, layout: SequenceLayout, cache: SessionCache | None = None,
                      step: int = 0, tape: _Tape | None = None, capture: dict | None = None):
        cfg, fl = self.config, self.flags
        p = self._block(l)
        dt = cfg.np_dtype
        n_z, n_c = layout.n_z, layout.n_c
        h_z, h_c = h[:n_z], h[n_z:]
        ctx_on = n_c > 0 and l in cfg.context_layers
        if ctx_on and cache is not None and cache.populated(l):
            return self._cached_block(l, p, h, n_z, cache, capture)

        x_z, xh_z, inv_z = layer_norm(h_z, p["ln1"])
        Qz, Kz, Vz = matmul(x_z, p["wq"]), matmul(x_z, p["wk"]), matmul(x_z, p["wv"])
        ctx = {}
        if ctx_on:
            x_c, xh_c, inv_c = layer_norm(h_c, p["ln1"])
            Vc_all = matmul(x_c, p["wv"])
            if fl.dts:
                scores, score_cache = score_tokens(self.scorer(l), Vc_all, return_cache=True)
                sel = select_topk(scores, cfg.ratio)
            else:
                scores, score_cache = None, None
                sel = SelectionResult(np.zeros((n_c, 1), dt), np.arange(n_c), np.zeros(0, np.int64))
            kept = sel.kept
            x_ck = x_c[kept]
            Qc, Kc, V_raw = matmul(x_ck, p["wq"]), matmul(x_ck, p["wk"]), Vc_all[kept]
            gate = None
            if fl.dts and cfg.soft_gate:
                gate = sigmoid(scores[kept]).astype(dt)
                Vc = V_raw * gate
            else:
                Vc = V_raw
            ctx = dict(x_c=x_c, xh_c=xh_c, inv_c=inv_c, Vc_all=Vc_all, scores=scores,
                       score_cache=score_cache, x_ck=x_ck, V_raw=V_raw, gate=gate, sel=sel)
        else:
            kept = np.zeros(0, np.int64)
            sel = None
            Qc = Kc = Vc = np.zeros((0, cfg.d), dt)
        skipped = (sel.skipped if sel is not None else np.arange(n_c)).astype(np.int64)

        O, recs = self._mha(Qz, Kz, Vz, Qc, Kc, Vc, ctx_on)
        h_a = np.concatenate([h_z, h_c[kept]])
        h1 = h_a + (matmul(O, p["wo"]) + p["bo"])
        y, xh2, inv2 = layer_norm(h1, p["ln2"])
        m, mcache = mlp_forward(y, p["mlp.w1"], p["mlp.b1"], p["mlp.w2"], p["mlp.b2"],
                                return_cache=True)
        h2 = (h1 + m).astype(dt, copy=False)
        if ctx_on:
            out = scatter_merge(h2, h_c[sel.skipped], layout, sel)
        else:
            out = np.concatenate([h2, h_c])

        if ctx_on and cache is not None:
            cache.populate(l, Kc, Vc, sel, step, context_out=out[n_z:])
        if capture is not None:
            self._capture(capture, l, h, out, n_z, n_c, kept, (Qz, Kz, Vz, Qc, Kc, Vc), recs, ctx_on)
        if tape is not None:
            tape.blocks.append(_BlockRecord(l, h, n_z, ctx_on, kept, skipped, x_z, xh_z, inv_z,
                                            (Qz, Kz, Vz, Qc, Kc, Vc), recs, O, h1, xh2, inv2,
                                            mcache, ctx))
        return out

    def _cached_block(self, l, p, h, n_z, cache: SessionCache, capture):
        """Later sampling steps: noisy rows attend to cached context K/V; context is not recomputed."""
        cfg = self.config
        dh = cfg.head_dim
        entry = cache.entry(l)
        h_z = h[:n_z]
        x_z, _, _ = layer_norm(h_z, p["ln1"])
        Qz, Kz, Vz = matmul(x_z, p["wq"]), matmul(x_z, p["wk"]), matmul(x_z, p["wv"])
        outs, recs = [], []
        for i in range(cfg.heads):
            sl = slice(i * dh, (i + 1) * dh)
            o, P = attn_noisy_to_all(Qz[:, sl], Kz[:, sl], Vz[:, sl], entry.K[:, sl],
                                     entry.V[:, sl], dh, return_weights=True)
            outs.append(o)
            recs.append(("decoupled", P, None))
        O = np.concatenate(outs, axis=1)
        h1 = h_z + (matmul(O, p["wo"]) + p["bo"])
        y, _, _ = layer_norm(h1, p["ln2"])
        h2 = h1 + mlp_forward(y, p["mlp.w1"], p["mlp.b1"], p["mlp.w2"], p["mlp.b2"])
        out = np.concatenate([h2.astype(cfg.np_dtype, copy=False), entry.context_out])
        if capture is not None:
            self._capture(capture, l, h, out, n_z, h.shape[0] - n_z, entry.selection.kept,
                          (Qz, Kz, Vz, None, entry.K, entry.V), recs, True)
        return out

    def _capture(self, capture, l, h_in, out, n_z, n_c, kept, qkv, recs, ctx_on):
        dh = self.config.head_dim
        H = self.config.heads
        rec = {"in": h_in, "out": out, "kept": kept, "ctx_on": ctx_on}
        if ctx_on:
            Qz, Kz, Vz, _, Kc, Vc = qkv
            mass = np.zeros(n_c)
            for r in recs:
                P = r[1]
                mass[kept] += P[:n_z, n_z:].mean(axis=0)
            rec["ctx_mass"] = mass / H
            rec["heads"] = {
                name: [a[:, i * dh:(i + 1) * dh] for i in range(H)]
                for name, a in (("Q_z", Qz), ("K_z", Kz), ("V_z", Vz), ("K_c", Kc), ("V_c", Vc))
            }
        capture[l] = rec

    def velocity(self, state: DiffusionState, cache: SessionCache | None = None, step: int = 0,
                 tape: _Tape | None = None, capture: dict | None = None):
        """Predicted velocity for the noisy tokens; context rows are dropped at the output."""
        h, layout = self.assemble_sequence(state, tape)
        for l in range(self.config.L):
            h = self.block_forward(l, h, layout, cache, step, tape, capture)
        p = self.params
        hz = h[: layout.n_z]
        y, xh, inv = layer_norm(hz, p["final.ln"])
        vel = matmul(y, p["out.w"]) + p["out.b"]
        if tape is not None:
            tape.final = (hz, y, xh, inv)
        return vel

    # ----------------------------------------------------------------- backward

    def backward(self, tape: _Tape, dvel) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every parameter given d(loss)/d(velocity)."""
        p = self.params
        g = {k: np.zeros_like(v) for k, v in p.items()}
        hz, y, xh, inv = tape.final
        g["out.w"] += matmul(y.T, dvel)
        g["out.b"] += dvel.sum(axis=0)
        dy = matmul(dvel, p["out.w"].T)
        dhz, dgain = layer_norm_backward(dy, xh, inv, p["final.ln"])
        g["final.ln"] += dgain
        dh = np.zeros_like(tape.h0)
        dh[: tape.layout.n_z] = dhz
        for rec in reversed(tape.blocks):
            dh = self._block_backward(rec, dh, g)
        self._assembly_backward(tape, dh, g)
        return g

    def _mha_backward(self, dO, rec: _BlockRecord):
        cfg = self.config
        dh = cfg.head_dim
        scale = 1.0 / math.sqrt(dh)
        Qz, Kz, Vz, Qc, Kc, Vc = rec.qkv
        n_z = rec.n_z
        grads = [np.zeros_like(a) for a in rec.qkv]
        for i, r in enumerate(rec.att):
            sl = slice(i * dh, (i + 1) * dh)
            dOh = dO[:, sl]
            if r[0] == "plain":
                dq, dk, dv = attention_backward(dOh, Qz[:, sl], Kz[:, sl], Vz[:, sl], r[1], scale)
                grads[0][:, sl] += dq
                grads[1][:, sl] += dk
                grads[2][:, sl] += dv
            elif r[0] == "joint":
                q = np.concatenate([Qz[:, sl], Qc[:, sl]])
                k = np.concatenate([Kz[:, sl], Kc[:, sl]])
                v = np.concatenate([Vz[:, sl], Vc[:, sl]])
                for j, dj in enumerate(attention_backward(dOh, q, k, v, r[1], scale)):
                    grads[j][:, sl] += dj[:n_z]
                    grads[j + 3][:, sl] += dj[n_z:]
            else:
                _, Pz, Pc = r
                dqc, dkc, dvc = attention_backward(dOh[n_z:], Qc[:, sl], Kc[:, sl], Vc[:, sl], Pc,
                                                   scale)
                k = np.concatenate([Kz[:, sl], Kc[:, sl]])
                v = np.concatenate([Vz[:, sl], Vc[:, sl]])
                dqz, dk, dv = attention_backward(dOh[:n_z], Qz[:, sl], k, v, Pz, scale)
                grads[0][:, sl] += dqz
                grads[1][:, sl] += dk[:n_z]
                grads[2][:, sl] += dv[:n_z]
                grads[3][:, sl] += dqc
                grads[4][:, sl] += dkc + dk[n_z:]
                grads[5][:, sl] += dvc + dv[n_z:]
        return grads

    def _block_backward(self, rec: _BlockRecord, dout, g):
        l = rec.layer
        b = f"blocks.{l}."
        p = self._block(l)
        n_z, kept = rec.n_z, rec.kept
        dh = np.zeros_like(rec.h)
        if rec.ctx_on:
            dh[n_z + rec.skipped] = dout[n_z + rec.skipped]
            dh2 = np.concatenate([dout[:n_z], dout[n_z + kept]])
        else:
            dh[n_z:] = dout[n_z:]
            dh2 = dout[:n_z]

        dy, dw1, db1, dw2, db2 = mlp_backward(dh2, rec.mcache, p["mlp.w1"], p["mlp.w2"])
        g[b + "mlp.w1"] += dw1
        g[b + "mlp.b1"] += db1
        g[b + "mlp.w2"] += dw2
        g[b + "mlp.b2"] += db2
        dh1_ln, dln2 = layer_norm_backward(dy, rec.xh2, rec.inv2, p["ln2"])
        g[b + "ln2"] += dln2
        dh1 = dh2 + dh1_ln
        g[b + "wo"] += matmul(rec.O.T, dh1)
        g[b + "bo"] += dh1.sum(axis=0)
        dO = matmul(dh1, p["wo"].T)
        dQz, dKz, dVz, dQc, dKc, dVc = self._mha_backward(dO, rec)

        g[b + "wq"] += matmul(rec.x_z.T, dQz)
        g[b + "wk"] += matmul(rec.x_z.T, dKz)
        g[b + "wv"] += matmul(rec.x_z.T, dVz)
        dx_z = matmul(dQz, p["wq"].T) + matmul(dKz, p["wk"].T) + matmul(dVz, p["wv"].T)
        dhz_ln, dln1 = layer_norm_backward(dx_z, rec.xh_z, rec.inv_z, p["ln1"])
        g[b + "ln1"] += dln1
        dh[:n_z] += dhz_ln + dh1[:n_z]

        if rec.ctx_on:
            c = rec.ctx
            n_c = c["x_c"].shape[0]
            gate = c["gate"]
            dVc_all = np.zeros_like(c["Vc_all"])
            if gate is not None:
                dV_raw = dVc * gate
                dgate = (dVc * c["V_raw"]).sum(axis=1, keepdims=True)
                dscores = np.zeros((n_c, 1), dtype=dVc.dtype)
                dscores[kept] = dgate * gate * (1.0 - gate)
                dVs, sg = score_tokens_backward(dscores, c["Vc_all"], c["score_cache"],
                                                self.scorer(l))
                dVc_all += dVs
                for k, v in sg.items():
                    g[b + "scorer." + k] += v
            else:
                dV_raw = dVc
            dVc_all[kept] += dV_raw
            g[b + "wv"] += matmul(c["x_c"].T, dVc_all)
            g[b + "wq"] += matmul(c["x_ck"].T, dQc)
            g[b + "wk"] += matmul(c["x_ck"].T, dKc)
            dx_c = matmul(dVc_all, p["wv"].T)
            dx_c[kept] += matmul(dQc, p["wq"].T) + matmul(dKc, p["wk"].T)
            dhc_ln, dln1c = layer_norm_backward(dx_c, c["xh_c"], c["inv_c"], p["ln1"])
            g[b + "ln1"] += dln1c
            dh[n_z:] += dhc_ln
            dh[n_z + kept] += dh1[n_z:]
        return dh

    def _assembly_backward(self, tape: _Tape, dh, g):
        cfg = self.config
        n_z = tape.layout.n_z
        dhz, dhc = dh[:n_z], dh[n_z:]
        z = np.asarray(tape.state.z_t, dtype=cfg.np_dtype)
        g["in.w"] += matmul(z.T, dhz)
        g["in.b"] += dhz.sum(axis=0)
        g["pos"] += dhz
        dtemb = dhz.sum(axis=0, keepdims=True)
        g["time.w"] += matmul(tape.tfeat.T, dtemb)
        g["time.b"] += dtemb[0]
        if dhc.shape[0]:
            c = np.asarray(tape.state.context, dtype=cfg.np_dtype)
            g["in.w"] += matmul(c.T, dhc)
            g["in.b"] += dhc.sum(axis=0)
            np.add.at(g["type"], tape.seg_ids, dhc)
            if cfg.context_positions:
                np.add.at(g["pos"], self._context_pos_index(tape.layout), dhc)

    # -------------------------------------------------------------- diagnostics

    def attention_dump(self, state: DiffusionState, layer: int) -> dict:
        """Per-head Q/K/V of ``layer`` under plain joint attention over every context token."""
        return self.attention_dumps_all([state])[layer][0]

    def attention_dumps_all(self, states) -> list[list[dict]]:
        probe = self.with_mode("baseline_icc", active_layers=None)
        out: list[list[dict]] = [[] for _ in range(self.config.L)]
        for st in states:
            cap: dict = {}
            probe.velocity(st, capture=cap)
            for l in range(self.config.L):
                out[l].append(cap[l]["heads"])
        return out


# ---------------------------------------------------------------------- loss


def flow_interpolate(z0, z1, t):
    """Linear path: z_t = (1 - t) z0 + t z1; target velocity z1 - z0."""
    return (1.0 - t) * z0 + t * z1, z1 - z0


def fm_loss_at(model: ToyDiT, z0, z1, t: float, context, with_grad: bool = False):
    dt = model.config.np_dtype
    z_t, v_t = flow_interpolate(z0.astype(dt), z1.astype(dt), t)
    state = DiffusionState(z_t.astype(dt), t, context)
    tape = _Tape(state, None, None, None, None) if with_grad else None
    vel = model.velocity(state, tape=tape)
    diff = vel.astype(np.float64) - v_t.astype(np.float64)
    loss = float((diff**2).mean())
    if not with_grad:
        return loss
    dvel = (2.0 * diff / diff.size).astype(dt)
    return loss, model.backward(tape, dvel)


def draw_noise_and_time(model: ToyDiT, rng: Rng):
    cfg = model.config
    z0 = rng.normal((cfg.n_z, cfg.d_latent)).astype(cfg.np_dtype)
    t = float(rng.uniform())
    return z0, t


def fm_loss(model: ToyDiT, z1, context, rng: Rng, with_grad: bool = False):
    """Flow-matching MSE with z0 ~ N(0, I), t ~ U(0, 1) drawn from ``rng``."""
    z0, t = draw_noise_and_time(model, rng)
    return fm_loss_at(model, z0, z1, t, context, with_grad)


# ------------------------------------------------------------------ sampling


def sample(model: ToyDiT, context, T: int, rng: Rng, z0=None, captures: list | None = None,
           use_cache: bool | None = None, on_step=None):
    """Euler integration of the velocity field from t=0 to t=1 in T steps.

    With step caching on, step 0 fills a SessionCache and later steps read it.
    ``captures`` (if given) receives one per-layer capture dict per step.
    ``on_step(i)`` is called after each step.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    cfg = model.config
    z = rng.normal((cfg.n_z, cfg.d_latent)).astype(cfg.np_dtype) if z0 is None else \
        np.array(z0, dtype=cfg.np_dtype)
    if use_cache is None:
        use_cache = model.flags.step_cache
    cache = SessionCache(LayerPlan(cfg.context_layers or (0,), cfg.L)) \
        if use_cache and cfg.context_layers else None
    for i in range(T):
        cap = {} if captures is not None else None
        v = model.velocity(DiffusionState(z, i / T, context), cache=cache, step=i, capture=cap)
        z = (z + v * (1.0 / T)).astype(cfg.np_dtype)
        if captures is not None:
            captures.append(cap)
        if on_step is not None:
            on_step(i)
    return check_finite(z, "sample")


# ------------------------------------------------------------------ training


def batch_loss_and_grad(model: ToyDiT, batch, rng: Rng):
    total = 0.0
    acc = {k: np.zeros(v.shape, np.float64) for k, v in model.params.items()}
    for z1, c in batch:
        loss, g = fm_loss(model, z1, c, rng, with_grad=True)
        total += loss
        for k, v in g.items():
            acc[k] += v
    n = len(batch)
    return total / n, {k: v / n for k, v in acc.items()}


def train_toy(model: ToyDiT, task, iters: int, lr: float, rng: Rng, batch_size: int = 4,
              clip: float | None = None, log_every: int = 0, log=None):
    """Plain gradient descent on the flow-matching loss; updates ``model`` in place.

    ``clip`` bounds the global gradient norm (None disables it). Returns the
    per-iteration batch losses.
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    losses = []
    for it in range(iters):
        batch = task.batch(batch_size, rng)
        loss, grads = batch_loss_and_grad(model, batch, rng)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at iteration {it}")
        if clip is not None:
            norm = math.sqrt(sum(float((g**2).sum()) for g in grads.values()))
            scale = min(1.0, clip / norm) if norm > 0 else 1.0
        else:
            scale = 1.0
        for k, g in grads.items():
            p = model.params[k]
            p -= (lr * scale * g).astype(p.dtype)
        losses.append(loss)
        if log_every and log is not None and (it % log_every == 0 or it == iters - 1):
            log(it, loss)
    return losses


def evaluate_loss(model: ToyDiT, task, n: int, seed: int, zero_context: bool = False) -> float:
    """Mean flow-matching loss on ``n`` fixed draws (same draws for every call with ``seed``)."""
    rng = Rng(seed)
    batch = task.batch(n, rng)
    total = 0.0
    for z1, c in batch:
        if zero_context:
            c = np.zeros_like(c)
        total += fm_loss(model, z1, c, rng)
    return total / n
