"""Attention cost calculus: closed-form interaction counts for the nine configurations.

One unit is one query-key logit. Projection and MLP work are not counted.

Two routes are provided. ``interaction_count`` is the general form, exact for
any context length and selection ratio, and is what the instrumented kernels
must reproduce. ``SIMPLIFIED`` holds the short per-N_x^2 expressions that
the general form collapses to when N_c = 2 N_x and half the context is kept.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .model import MODES
from .selection import kept_count

CONFIGS = tuple(MODES)

LABELS = {
    "no_condition": "noisy tokens only",
    "baseline_icc": "joint attention over all tokens",
    "fulldit2": "selection + step cache + layer cache",
    "step_cache_only": "step cache",
    "layer_cache_only": "layer cache",
    "dts_only": "token selection",
    "fulldit2_no_dts": "step cache + layer cache",
    "fulldit2_no_step_cache": "selection + layer cache",
    "fulldit2_no_layer_cache": "selection + step cache",
}

# Cost / N_x^2 at N_c = 2 N_x with half the context kept.
SIMPLIFIED = {
    "no_condition": lambda T, L, Ls: T * L,
    "baseline_icc": lambda T, L, Ls: 9 * T * L,
    "fulldit2": lambda T, L, Ls: T * L + (T + 1) * Ls,
    "step_cache_only": lambda T, L, Ls: (3 * T + 4) * L,
    "layer_cache_only": lambda T, L, Ls: T * (L + 8 * Ls),
    "dts_only": lambda T, L, Ls: 4 * T * L,
    "fulldit2_no_dts": lambda T, L, Ls: T * L + (2 * T + 4) * Ls,
    "fulldit2_no_step_cache": lambda T, L, Ls: T * (L + 2 * Ls),
    "fulldit2_no_layer_cache": lambda T, L, Ls: (2 * T + 1) * L,
}

FORMULAS = {
    "no_condition": "T*L*Nx^2",
    "baseline_icc": "T*L*(Nx+Nc)^2",
    "dts_only": "T*L*(Nx+k)^2",
    "layer_cache_only": "T*(Ls*(Nx+Nc)^2 + (L-Ls)*Nx^2)",
    "step_cache_only": "L*(Nx*(Nx+Nc)+Nc^2) + (T-1)*L*Nx*(Nx+Nc)",
    "fulldit2": "Ls*(Nx*(Nx+k)+k^2) + (L-Ls)*Nx^2 + (T-1)*(Ls*Nx*(Nx+k) + (L-Ls)*Nx^2)",
    "fulldit2_no_dts": "Ls*(Nx*(Nx+Nc)+Nc^2) + (L-Ls)*Nx^2 + (T-1)*(Ls*Nx*(Nx+Nc) + (L-Ls)*Nx^2)",
    "fulldit2_no_step_cache": "T*(Ls*(Nx*(Nx+k)+k^2) + (L-Ls)*Nx^2)",
    "fulldit2_no_layer_cache": "L*(Nx*(Nx+k)+k^2) + (T-1)*L*Nx*(Nx+k)",
}


@dataclass(frozen=True)
class CostSpec:
    T: int = 30
    L: int = 28
    L_s: int = 5
    N_x: int = 1
    N_c: int = 2
    ratio: float = 0.5
    config: str = "fulldit2"

    def __post_init__(self):
        if self.config not in MODES:
            raise ValueError(f"unknown configuration {self.config!r}; choose from {CONFIGS}")
        if not 1 <= self.L_s <= self.L:
            raise ValueError("need 1 <= L_s <= L")
        if self.T < 1 or self.N_x < 1 or self.N_c < 0:
            raise ValueError("need T >= 1, N_x >= 1, N_c >= 0")
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError("ratio must lie in (0, 1]")


@dataclass(frozen=True)
class CostReport:
    config: str
    interactions: int
    baseline: int
    formula: str

    @property
    def speedup(self) -> float:
        return self.baseline / self.interactions if self.interactions else float("inf")

    @property
    def speedup_exact(self) -> Fraction:
        return Fraction(self.baseline, self.interactions)


def interaction_count(T, L, L_s, N_x, N_c, ratio, config, style: str | None = None,
                      heads: int = 1) -> int:
    """Logits computed by a T-step sampling run of ``config``.

    ``style`` overrides the configuration's canonical attention style
    ("full"/"masked" charge the joint square, "decoupled" the two halves).
    Each attention head computes its own score matrix, so the count scales
    with ``heads``.
    """
    f = MODES[config]
    style = style or f.style
    if not f.use_context or N_c == 0:
        return heads * T * L * N_x * N_x
    k = kept_count(N_c, ratio) if f.dts else N_c
    active = L_s if f.layer_cache else L
    skipped = (L - active) * N_x * N_x
    if style == "decoupled":
        first = N_x * (N_x + k) + k * k
        later = N_x * (N_x + k) if f.step_cache else first
    else:
        first = later = (N_x + k) ** 2
    return heads * (active * first + skipped + (T - 1) * (active * later + skipped))


def analytic_cost(spec: CostSpec) -> CostReport:
    args = (spec.T, spec.L, spec.L_s, spec.N_x, spec.N_c, spec.ratio)
    return CostReport(spec.config, interaction_count(*args, spec.config),
                      interaction_count(*args, "baseline_icc"), FORMULAS[spec.config])


def cost_table(T, L, L_s, N_x, N_c, ratio, configs=CONFIGS) -> list[CostReport]:
    return [analytic_cost(CostSpec(T, L, L_s, N_x, N_c, ratio, c)) for c in configs]


def scaling_curve(configs, n_x_values, nc_per_nx: float = 2.0, T=30, L=28, L_s=5, ratio=0.5):
    """Rows of (N_x, config, interactions) with N_c = round(nc_per_nx * N_x)."""
    n_x_values = list(n_x_values)
    if not n_x_values:
        raise ValueError("empty N_x range")
    rows = []
    for nx in n_x_values:
        nc = int(round(nc_per_nx * nx))
        row = {"N_x": nx, "N_c": nc}
        for c in configs:
            row[c] = interaction_count(T, L, L_s, nx, nc, ratio, c)
        rows.append(row)
    return rows


def model_interaction_count(model, T: int) -> int:
    """Closed-form count for a model's own mode, sizes and layer plan."""
    cfg = model.config
    return interaction_count(T, cfg.L, cfg.plan.L_s, cfg.n_z, cfg.layout.n_c, cfg.ratio, cfg.mode,
                             cfg.flags.style, cfg.heads)


def measured_cost(model, context, T: int, seed: int = 0) -> int:
    """Logits actually computed by one instrumented sampling run of ``model``."""
    from .core import Rng
    from .kernels import counting
    from .model import sample

    with counting() as ctr:
        sample(model, context, T, Rng(seed))
    return ctr.logits
