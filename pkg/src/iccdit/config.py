"""Run configuration: flat ``key = value`` files with ``#`` comments.

Unknown keys are rejected. Values are coerced to the type of the field's
default. ``--set key=value`` overrides are applied after the file.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .costs import CostSpec
from .model import ModelConfig
from .tasks import SyntheticTask


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # model
    L: int = 4
    d: int = 32
    heads: int = 2
    d_latent: int = 8
    n_z: int = 16
    contexts: str = "ref:16,traj:16"
    ratio: float = 0.5
    active_layers: str = "all"
    mode: str = "fulldit2"
    attention_style: str = "auto"
    mlp_hidden: int = 64
    scorer_hidden: int = 16
    time_dim: int = 16
    soft_gate: bool = True
    context_positions: bool = True
    # task / training
    task: str = "copy"
    task_seed: int = 0
    seed: int = 0
    iters: int = 200
    lr: float = 0.5
    batch_size: int = 4
    # sampling / evaluation
    T: int = 30
    eval_samples: int = 4
    # block importance / analysis
    bi_probes: int = 8
    bi_extra_layers: int = 1
    tokens_per_frame: int = 4
    # cost model (28-layer, 30-step reference scale)
    cost_T: int = 30
    cost_L: int = 28
    cost_Ls: int = 5
    cost_Nx: int = 1
    cost_Nc: int = 2
    # outputs
    out_dir: str = "runs/default"
    checkpoint: str = ""

    def contexts_tuple(self):
        segs = []
        for part in filter(None, (s.strip() for s in self.contexts.split(","))):
            name, _, n = part.partition(":")
            try:
                segs.append((name.strip(), int(n)))
            except ValueError:
                raise ConfigError(f"bad context segment {part!r}; expected name:length") from None
        return tuple(segs)

    def active_layers_tuple(self):
        if self.active_layers.strip().lower() in ("all", ""):
            return None
        try:
            return tuple(int(x) for x in self.active_layers.split(","))
        except ValueError:
            raise ConfigError(f"bad active_layers {self.active_layers!r}") from None

    def model_config(self, mode: str | None = None) -> ModelConfig:
        style = None if self.attention_style == "auto" else self.attention_style
        try:
            return ModelConfig(L=self.L, d=self.d, heads=self.heads, d_latent=self.d_latent,
                               n_z=self.n_z, contexts=self.contexts_tuple(), ratio=self.ratio,
                               active_layers=self.active_layers_tuple(), mode=mode or self.mode,
                               attention_style=style, mlp_hidden=self.mlp_hidden,
                               scorer_hidden=self.scorer_hidden, time_dim=self.time_dim,
                               soft_gate=self.soft_gate, context_positions=self.context_positions)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def synthetic_task(self) -> SyntheticTask:
        try:
            return SyntheticTask(self.task, self.d_latent, self.n_z, self.contexts_tuple(),
                                 self.task_seed)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def cost_spec(self, config: str = "fulldit2") -> CostSpec:
        try:
            return CostSpec(self.cost_T, self.cost_L, self.cost_Ls, self.cost_Nx, self.cost_Nc,
                            self.ratio, config)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out_dir) / "model.fdt2"

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(key: str, raw: str):
    default = _FIELDS[key].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_pairs(lines, source: str = "<config>") -> dict:
    out = {}
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{no}: unknown key {key!r}")
        out[key] = _coerce(key, val)
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_pairs(p.read_text().splitlines(), str(p)))
    values.update(parse_pairs(list(overrides), "--set"))
    cfg = replace(RunConfig(), **values)
    cfg.model_config()  # surface invalid combinations early
    cfg.synthetic_task()
    return cfg
