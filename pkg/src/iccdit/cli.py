"""iccdit command line: cost tables, attention checks, training, sampling,
benchmarks, analysis and layer-importance reports.

Exit codes: 0 success, 1 validation failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, checkpoint
from .attention import equivalence_suite
from .caching import bi_report, choose_layers
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .core import Rng
from .costs import CONFIGS, cost_table, model_interaction_count, scaling_curve
from .kernels import backend_name, counting
from .model import MODES, ToyDiT, TrainingError, evaluate_loss, init_params, sample, train_toy

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_csv(dest, header, rows) -> str:
    """Header row then one line per row dict; floats in shortest round-trip form."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(r[h]) for h in header])
    text = buf.getvalue()
    if dest is None:
        sys.stdout.write(text)
    else:
        Path(dest).parent.mkdir(parents=True, exist_ok=True)
        Path(dest).write_text(text)
    return text


# ---------------------------------------------------------------- cost


def _parse_sweep(text):
    try:
        parts = [int(x) for x in text.split(":")]
    except ValueError:
        raise UsageError(f"--sweep expects START:STOP[:STEP], got {text!r}") from None
    if len(parts) not in (2, 3):
        raise UsageError(f"--sweep expects START:STOP[:STEP], got {text!r}")
    start, stop = parts[:2]
    step = parts[2] if len(parts) == 3 else 1
    if start < 1 or stop < start or step < 1:
        raise UsageError("--sweep needs 1 <= START <= STOP and STEP >= 1")
    return list(range(start, stop + 1, step))


def cmd_cost(args) -> int:
    configs = tuple(c.strip() for c in args.configs.split(",")) if args.configs else CONFIGS
    unknown = [c for c in configs if c not in MODES]
    if unknown:
        raise UsageError(f"unknown configuration(s): {', '.join(unknown)}")
    if args.Nc is not None and args.ncx_ratio is not None:
        raise UsageError("give either --Nc or --ncx-ratio, not both")
    ncx = 2.0 if args.ncx_ratio is None else args.ncx_ratio
    if args.sweep:
        if args.Nc is not None:
            raise UsageError("--sweep scales N_c with N_x; use --ncx-ratio instead of --Nc")
        nxs = _parse_sweep(args.sweep)
        try:
            rows = scaling_curve(configs, nxs, ncx, args.T, args.L, args.Ls, args.sel_ratio)
        except ValueError as e:
            raise UsageError(str(e)) from None
        write_csv(args.out, ["N_x", "N_c", *configs], rows)
        return EXIT_OK
    nc = args.Nc if args.Nc is not None else int(round(ncx * args.Nx))
    try:
        reports = cost_table(args.T, args.L, args.Ls, args.Nx, nc, args.sel_ratio, configs)
    except ValueError as e:
        raise UsageError(str(e)) from None
    rows = [{"config": r.config, "interaction_count": r.interactions,
             "speedup_vs_baseline": r.speedup} for r in reports]
    write_csv(args.out, ["config", "interaction_count", "speedup_vs_baseline"], rows)
    return EXIT_OK


# ---------------------------------------------------------------- attention check


def cmd_attn_check(args) -> int:
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    seeds = range(args.seed0, args.seed0 + args.seeds)
    worst, failing = equivalence_suite(seeds, args.tol)
    status = "PASS" if not failing else "FAIL"
    print(f"{status} decoupled vs masked oracle: {args.seeds} instances, "
          f"max abs diff {worst:.3e}, tol {args.tol:g}, backend {backend_name()}")
    if failing:
        print("failing seeds: " + ",".join(str(s) for s in failing))
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------- model runs


def _load_model(cfg: RunConfig, mode: str | None = None) -> ToyDiT:
    mc = cfg.model_config(mode)
    tensors = checkpoint.load(cfg.checkpoint_path())
    ref = init_params(mc, 0)
    if set(tensors) != set(ref):
        missing = sorted(set(ref) - set(tensors))
        extra = sorted(set(tensors) - set(ref))
        raise CheckpointError(f"checkpoint does not match config (missing {missing[:3]}, "
                              f"unexpected {extra[:3]})")
    for k, v in ref.items():
        if tensors[k].shape != v.shape:
            raise CheckpointError(f"{k}: checkpoint shape {tensors[k].shape} != config {v.shape}")
    return ToyDiT(mc, {k: tensors[k].copy() for k in ref})


def _eval_pairs(cfg: RunConfig):
    """Fixed (target, context) draws used by sample, bench and analyze."""
    return cfg.synthetic_task().batch(max(1, cfg.eval_samples), Rng(cfg.seed + 1000))


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = ToyDiT.init(cfg.model_config(), seed=cfg.seed)
    losses = train_toy(model, cfg.synthetic_task(), cfg.iters, cfg.lr, Rng(cfg.seed + 1),
                       cfg.batch_size)
    ckpt = cfg.checkpoint_path()
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(ckpt, model.params)
    write_csv(out / "loss.csv", ["iter", "loss"],
              [{"iter": i, "loss": l} for i, l in enumerate(losses)])
    (out / "config.txt").write_text(cfg.to_text())
    final = losses[-1] if losses else float("nan")
    print(f"trained {cfg.iters} iterations, final batch loss {final:.6g}; wrote {ckpt}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = load_config(args.config, args.set)
    model = _load_model(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    z1, ctx = _eval_pairs(cfg)[0]
    marks = [time.perf_counter()]
    z = sample(model, ctx, cfg.T, Rng(cfg.seed + 2000),
               on_step=lambda i: marks.append(time.perf_counter()))
    checkpoint.save(out / "sample.fdt2", {"z": z, "target": z1, "context": ctx})
    write_csv(out / "sample_timing.csv", ["step", "seconds"],
              [{"step": i, "seconds": marks[i + 1] - marks[i]} for i in range(cfg.T)])
    mse = float(np.mean((z.astype(np.float64) - z1) ** 2))
    print(f"sampled {cfg.T} steps in mode {cfg.mode}; mse to target {mse:.6g}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args.config, args.set)
    base = _load_model(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = _eval_pairs(cfg)
    rows, timing = [], []
    for mode in MODES:
        model = base.with_mode(mode)
        errs = []
        t0 = time.perf_counter()
        with counting() as ctr:
            for j, (z1, ctx) in enumerate(pairs):
                z = sample(model, ctx, cfg.T, Rng(cfg.seed + 2000 + j))
                errs.append(float(np.mean((z.astype(np.float64) - z1) ** 2)))
        wall = time.perf_counter() - t0
        measured, rem = divmod(ctr.logits, len(pairs))
        if rem:
            raise ValidationError(f"{mode}: interaction count differs between runs")
        analytic = model_interaction_count(model, cfg.T)
        rows.append({"mode": mode, "measured_interactions": measured,
                     "analytic_interactions": analytic, "match": measured == analytic,
                     "final_loss_proxy": float(np.mean(errs))})
        timing.append({"mode": mode, "wall_seconds": wall,
                       "seconds_per_sample": wall / len(pairs)})
    write_csv(out / "bench.csv", ["mode", "measured_interactions", "analytic_interactions",
                                  "match", "final_loss_proxy"], rows)
    write_csv(out / "bench_timing.csv", ["mode", "wall_seconds", "seconds_per_sample"], timing)
    for r, t in zip(rows, timing):
        print(f"{r['mode']:<26} {r['measured_interactions']:>10} {r['analytic_interactions']:>10} "
              f"{t['wall_seconds']:8.3f}s  mse {r['final_loss_proxy']:.4g}")
    bad = [r["mode"] for r in rows if not r["match"]]
    if bad:
        print("measured != analytic for: " + ", ".join(bad))
        return EXIT_FAIL
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    full = _load_model(cfg, "baseline_icc")
    task = cfg.synthetic_task()
    pairs = _eval_pairs(cfg)

    # consecutive-frame differences of each context segment's raw tokens
    rows = []
    tpf = cfg.tokens_per_frame
    _, ctx = pairs[0]
    off = 0
    for name, k in cfg.contexts_tuple():
        seg = ctx[off: off + k]
        off += k
        F = k // tpf
        if F < 2:
            continue
        diffs = analysis.frame_diff(seg[: F * tpf].reshape(F, tpf, -1))
        rows.extend({"segment": name, "frame": i + 1, "l1_diff": v} for i, v in enumerate(diffs))
    write_csv(out / "frame_diff.csv", ["segment", "frame", "l1_diff"], rows)

    probes = analysis.probe_states(full, task, cfg.bi_probes, cfg.seed + 3000)
    curve = analysis.attention_concentration(full, probes, range(cfg.L))
    write_csv(out / "concentration.csv", ["fraction_of_tokens", "cumulative_mass"], curve.rows())

    step_model = full.with_mode("fulldit2_no_step_cache", active_layers=None)
    srows, _ = analysis.stepwise_similarity(step_model, pairs[0][1], cfg.T, 0, cfg.seed + 2000)
    write_csv(out / "stepwise.csv", ["step", "noisy_cosine", "context_cosine"], srows)

    div = analysis.layer_divergence(full, probes)
    write_csv(out / "layer_divergence.csv", ["layer_a", "layer_b", "js_divergence"],
              [{"layer_a": i, "layer_b": j, "js_divergence": div[i, j]}
               for i in range(div.shape[0]) for j in range(div.shape[1])])
    print(f"wrote analysis CSVs to {out}; top 50% of context tokens hold "
          f"{curve.mass_at(0.5):.3f} of the attention mass")
    return EXIT_OK


def cmd_bi(args) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(cfg)
    probes = analysis.probe_states(model, cfg.synthetic_task(), cfg.bi_probes, cfg.seed + 3000)
    report = bi_report(model, probes)
    if not np.all((report.bi >= 0.0) & (report.bi <= 2.0)):
        raise ValidationError("block importance outside [0, 2]")
    try:
        plan = choose_layers(report, cfg.bi_extra_layers)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    write_csv(out / "bi.csv", ["layer", "bi", "mean_cosine"], report.to_rows())
    line = "active_layers = " + ",".join(str(l) for l in plan.active) + "\n"
    (out / "layer_plan.txt").write_text(line)
    print(line.strip())
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iccdit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("cost", help="closed-form attention interaction counts")
    c.add_argument("--T", type=int, default=30)
    c.add_argument("--L", type=int, default=28)
    c.add_argument("--Ls", type=int, default=5)
    c.add_argument("--Nx", type=int, default=1)
    c.add_argument("--Nc", type=int, default=None)
    c.add_argument("--ncx-ratio", type=float, default=None, help="N_c / N_x (default 2)")
    c.add_argument("--sel-ratio", type=float, default=0.5)
    c.add_argument("--configs", default="", help="comma-separated subset (default: all nine)")
    c.add_argument("--sweep", default="", help="N_x range START:STOP[:STEP] for a scaling table")
    c.add_argument("--out", default=None, help="CSV path (default stdout)")
    c.set_defaults(func=cmd_cost)

    a = sub.add_parser("attn-check", help="decoupled vs masked attention on random instances")
    a.add_argument("--seeds", type=int, default=1000)
    a.add_argument("--seed0", type=int, default=0)
    a.add_argument("--tol", type=float, default=1e-6)
    a.set_defaults(func=cmd_attn_check)

    for name, fn, text in (("train", cmd_train, "train the toy model on a synthetic task"),
                           ("sample", cmd_sample, "sample latents from a checkpoint"),
                           ("bench", cmd_bench, "run every mode on one checkpoint"),
                           ("analyze", cmd_analyze, "redundancy diagnostics as CSV"),
                           ("bi", cmd_bi, "block importance and the chosen layer plan")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", default=None, help="key = value config file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        s.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"iccdit {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, CheckpointError, TrainingError) as e:
        print(f"iccdit {args.command}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
