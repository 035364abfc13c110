"""Command-line harness: train, eval, sweep, report.

All results are written under --out:

    results.csv    deterministic aggregate rows (no timing columns)
    timing.csv     wall-clock medians and speed-up vs dense
    pareto.csv     non-dominated (flops_pct, success_rate) points (sweep)
    traces/        one JSON-lines file per episode: header line, then steps
    token_maps/    per-step token keep-score grids (eval, routed modes)
    manifest.json  seed, config hash, code version, exact command

results.csv is reproducible bit-for-bit from the trace files; `report`
performs exactly that re-aggregation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import statistics
import sys
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .costmodel import dense_step_macs
from .engine import (EngineConfig, EpisodeResult, PolicyBundle, build_policy,
                     evaluate, run_episode)
from .numerics import ConfigError, InputError
from .training import (bc_pretrain, collect_expert_dataset,
                       collect_teacher_rollouts, distill_train)

RESULT_COLUMNS = (
    "mode", "keep_ratio", "n_lay", "tau_cache", "disabled", "episodes", "seed",
    "success_rate", "flops_per_step", "flops_pct", "kept_tokens_mean",
    "layers_mean", "reuse_request_rate", "cache_hit_rate", "steps_mean",
)


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".4g")
    return str(value)


def _config_descriptor(cfg: EngineConfig, disabled: list[str]) -> dict:
    return {
        "mode": cfg.mode,
        "keep_ratio": cfg.keep_ratio,
        "n_lay": cfg.n_lay if cfg.n_lay is not None else "-",
        "tau_cache": cfg.tau_cache,
        "disabled": "+".join(sorted(disabled)) if disabled else "-",
    }


# ---------------------------------------------------------------------------
# aggregation (shared by eval and report so they agree bit-for-bit)
# ---------------------------------------------------------------------------


def aggregate(episodes: list[dict]) -> dict:
    """Reduce per-episode dicts {success, steps, step_rows} to result fields."""
    n_steps = sum(ep["steps"] for ep in episodes)
    all_rows = [row for ep in episodes for row in ep["step_rows"]]
    successes = sum(1 for ep in episodes if ep["success"])
    return {
        "episodes": len(episodes),
        "success_rate": 100.0 * successes / len(episodes),
        "flops_per_step": sum(r["flops_total"] for r in all_rows) / n_steps,
        "kept_tokens_mean": sum(r["kept_tokens"] for r in all_rows) / n_steps,
        "layers_mean": sum(sum(r["executed_layers"]) for r in all_rows) / n_steps,
        "reuse_request_rate": 100.0 * sum(r["reuse_requested"] for r in all_rows) / n_steps,
        "cache_hit_rate": 100.0 * sum(r["cache_hit"] for r in all_rows) / n_steps,
        "steps_mean": n_steps / len(episodes),
    }


def episode_payload(seed: int, result: EpisodeResult) -> dict:
    step_rows = result.trace if result.trace is not None else [
        {
            "step": i,
            "kept_tokens": s.kept_tokens,
            "executed_layers": s.executed_layers,
            "reuse_requested": s.reuse_requested,
            "cache_hit": s.cache_hit,
            "flops_total": s.flops_total,
            "flops_backbone": s.flops_backbone,
        }
        for i, s in enumerate(result.stats)
    ]
    return {"seed": seed, "success": result.success,
            "steps": result.steps_used, "step_rows": step_rows}


def result_row(bundle: PolicyBundle, cfg: EngineConfig, run_cfg: RunConfig,
               disabled: list[str], base_seed: int, episodes: list[dict]) -> dict:
    row = dict(_config_descriptor(cfg, disabled))
    row["seed"] = base_seed
    agg = aggregate(episodes)
    dense = dense_step_macs(bundle.backbone.cfg, bundle.router.cfg,
                            bundle.head.cfg, bundle.cache_cfg)
    row.update(agg)
    row["flops_pct"] = 100.0 * agg["flops_per_step"] / (2 * dense["total"])
    return {k: row[k] for k in RESULT_COLUMNS}


def write_results_csv(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in RESULT_COLUMNS])


def write_manifest(out: Path, seed: int, run_cfg: RunConfig, argv: list[str]) -> None:
    cfg_hash = hashlib.sha256(repr(run_cfg).encode()).hexdigest()[:16]
    payload = {
        "seed": seed,
        "config_hash": cfg_hash,
        "code_version": __version__,
        "command": argv,
    }
    (out / "manifest.json").write_text(json.dumps(payload, indent=2) + "\n")


def write_traces(out: Path, payloads: list[dict]) -> None:
    trace_dir = out / "traces"
    trace_dir.mkdir(parents=True, exist_ok=True)
    for ep in payloads:
        path = trace_dir / f"ep{ep['seed']:05d}.jsonl"
        with path.open("w") as fh:
            header = {"seed": ep["seed"], "success": ep["success"], "steps": ep["steps"]}
            fh.write(json.dumps(header) + "\n")
            for row in ep["step_rows"]:
                fh.write(json.dumps(row) + "\n")


def write_token_maps(out: Path, payloads: list[dict], grid: int) -> None:
    map_dir = out / "token_maps"
    map_dir.mkdir(parents=True, exist_ok=True)
    for ep in payloads:
        rows = [r for r in ep["step_rows"] if "token_scores" in r]
        if not rows:
            continue
        path = map_dir / f"ep{ep['seed']:05d}.csv"
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step"] + [f"p{i}" for i in range(grid * grid)])
            for r in rows:
                writer.writerow([r["step"]] + [_fmt(float(v)) for v in r["token_scores"]])


def read_traces(out: Path) -> list[dict]:
    trace_dir = out / "traces"
    payloads = []
    for path in sorted(trace_dir.glob("ep*.jsonl")):
        with path.open() as fh:
            header = json.loads(fh.readline())
            step_rows = [json.loads(line) for line in fh if line.strip()]
        payloads.append({"seed": header["seed"], "success": header["success"],
                         "steps": header["steps"], "step_rows": step_rows})
    if not payloads:
        raise InputError(f"no trace files under {trace_dir}")
    return payloads


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------


def median_step_seconds(results: list[EpisodeResult], warmup: int = 10) -> float:
    walls = [s.wall_time for r in results for s in r.stats]
    walls = walls[warmup:] if len(walls) > warmup else walls
    return statistics.median(walls)


def write_timing(out: Path, bundle: PolicyBundle, cfg: EngineConfig,
                 run_cfg: RunConfig, results: list[EpisodeResult],
                 base_seed: int) -> None:
    routed_med = median_step_seconds(results)
    if cfg.mode == "dense":
        dense_med, speedup = routed_med, 1.0
    else:
        n_ref = min(len(results), 12)
        dense_cfg = EngineConfig(mode="dense")
        dense_results = evaluate(bundle, dense_cfg, n_ref, base_seed, run_cfg.env)
        dense_med = median_step_seconds(dense_results)
        speedup = dense_med / routed_med
    with (out / "timing.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "median_step_ms", "dense_median_step_ms", "speedup"])
        writer.writerow([cfg.mode, _fmt(routed_med * 1e3), _fmt(dense_med * 1e3),
                         _fmt(speedup)])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _engine_config(args, run_cfg: RunConfig) -> tuple[EngineConfig, list[str]]:
    base = run_cfg.engine
    disabled = sorted(set(args.disable or []))
    cfg = EngineConfig(
        mode=args.mode if args.mode else base.mode,
        keep_ratio=args.keep_ratio if args.keep_ratio is not None else base.keep_ratio,
        n_lay=args.n_lay if args.n_lay is not None else base.n_lay,
        layer_floor=base.layer_floor,
        tau_cache=args.tau_cache if args.tau_cache is not None else base.tau_cache,
        use_cache=base.use_cache and "cache" not in disabled,
        use_tokens=base.use_tokens and "tokens" not in disabled,
        use_layers=base.use_layers and "layers" not in disabled,
    )
    return cfg, disabled


def cmd_train(args) -> int:
    run_cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bc_cfg, distill_cfg = run_cfg.bc, run_cfg.distill
    if args.seed is not None:
        bc_cfg.seed = args.seed
        distill_cfg.seed = args.seed

    bundle = build_policy(bc_cfg.seed, run_cfg.backbone, run_cfg.router,
                          run_cfg.head, run_cfg.cache)
    print(f"collecting expert data: {bc_cfg.episodes} episodes", flush=True)
    dataset = collect_expert_dataset(bc_cfg, run_cfg.env, bundle.head.cfg.horizon)
    print(f"behavior cloning on {len(dataset)} samples, {bc_cfg.steps} steps", flush=True)
    bc_losses = bc_pretrain(bundle, dataset, bc_cfg)
    save_checkpoint(out / "checkpoint_bc.npz", bundle,
                    {"phase": "bc", "seed": bc_cfg.seed})

    print(f"teacher rollouts: {distill_cfg.teacher_episodes} episodes", flush=True)
    teacher_ds = collect_teacher_rollouts(bundle, distill_cfg, run_cfg.env)
    print(f"distilling router on {len(teacher_ds)} timesteps, "
          f"{distill_cfg.steps} steps", flush=True)
    history = distill_train(bundle, teacher_ds, distill_cfg)
    save_checkpoint(out / "checkpoint.npz", bundle,
                    {"phase": "distill", "seed": distill_cfg.seed})

    with (out / "bc_loss.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(bc_losses):
            writer.writerow([i, _fmt(loss)])
    with (out / "distill_loss.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        keys = list(history[0].keys())
        writer.writerow(["step"] + keys)
        for i, entry in enumerate(history):
            writer.writerow([i] + [_fmt(entry[k]) for k in keys])
    write_manifest(out, bc_cfg.seed, run_cfg, sys.argv[1:])
    print(f"final bc loss {bc_losses[-1]:.4f}; "
          f"final distill loss {history[-1]['total']:.4f}", flush=True)
    return 0


def cmd_eval(args) -> int:
    if args.episodes < 1:
        raise InputError("episodes must be >= 1")
    run_cfg = load_config(args.config)
    bundle, _ = load_checkpoint(args.checkpoint)
    cfg, disabled = _engine_config(args, run_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    results = evaluate(bundle, cfg, args.episodes, args.seed, run_cfg.env,
                       record_trace=True)
    payloads = [episode_payload(args.seed + i, r) for i, r in enumerate(results)]
    row = result_row(bundle, cfg, run_cfg, disabled, args.seed, payloads)
    write_results_csv(out / "results.csv", [row])
    write_traces(out, payloads)
    write_token_maps(out, payloads, run_cfg.env.grid)
    write_timing(out, bundle, cfg, run_cfg, results, args.seed)
    write_manifest(out, args.seed, run_cfg, sys.argv[1:])
    print(f"success_rate {row['success_rate']:.1f}%  "
          f"flops {row['flops_pct']:.1f}% of dense", flush=True)
    return 0


SWEEP_AXES = ("keep_ratio", "n_lay", "tau_cache")


def _sweep_config(axis: str, value: float, run_cfg: RunConfig) -> tuple[EngineConfig, list[str]]:
    """One efficiency component active per point; the other two disabled."""
    if axis == "keep_ratio":
        return EngineConfig(mode="routed", keep_ratio=value, use_cache=False,
                            use_layers=False), ["cache", "layers"]
    if axis == "n_lay":
        return EngineConfig(mode="fixed", n_lay=int(value), use_cache=False,
                            use_tokens=False), ["cache", "tokens"]
    return EngineConfig(mode="routed", tau_cache=value, use_tokens=False,
                        use_layers=False), ["layers", "tokens"]


def pareto_front(points: list[dict]) -> list[dict]:
    """Non-dominated rows: no other point has lower FLOPs and higher success."""
    front = []
    for p in points:
        dominated = any(
            q["flops_pct"] <= p["flops_pct"] and q["success_rate"] >= p["success_rate"]
            and (q["flops_pct"] < p["flops_pct"] or q["success_rate"] > p["success_rate"])
            for q in points)
        if not dominated:
            front.append(p)
    return front


def cmd_sweep(args) -> int:
    if args.episodes < 1:
        raise InputError("episodes must be >= 1")
    axis = args.axis.replace("-", "_")
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    values = [float(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise InputError("sweep needs at least one value")
    run_cfg = load_config(args.config)
    bundle, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for value in values:
        cfg, disabled = _sweep_config(axis, value, run_cfg)
        results = evaluate(bundle, cfg, args.episodes, args.seed, run_cfg.env)
        payloads = [episode_payload(args.seed + i, r) for i, r in enumerate(results)]
        row = result_row(bundle, cfg, run_cfg, disabled, args.seed, payloads)
        rows.append(row)
        print(f"{axis}={value}: success {row['success_rate']:.1f}%  "
              f"flops {row['flops_pct']:.1f}%", flush=True)

    write_results_csv(out / "results.csv", rows)
    front = pareto_front(rows)
    write_results_csv(out / "pareto.csv", front)
    write_manifest(out, args.seed, run_cfg, sys.argv[1:])
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    payloads = read_traces(out)
    agg = aggregate(payloads)
    print(f"episodes {agg['episodes']}  success_rate {agg['success_rate']:.1f}%  "
          f"mean flops/step {agg['flops_per_step']:.3e}")
    existing = out / "results.csv"
    if existing.exists():
        with existing.open() as fh:
            reader = csv.DictReader(fh)
            stored = next(iter(reader), None)
        if stored is not None:
            mismatches = [
                key for key in ("success_rate", "flops_per_step", "kept_tokens_mean")
                if stored.get(key) is not None and stored[key] != _fmt(agg[key])
            ]
            if mismatches:
                print(f"REAGGREGATION MISMATCH in columns: {', '.join(mismatches)}")
                return 1
            print("re-aggregation matches results.csv")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adavla",
        description="Train and benchmark the adaptive-computation policy.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint: bool):
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--episodes", type=int, default=100)

    p_train = sub.add_parser("train", help="behavior cloning + router distillation")
    common(p_train, checkpoint=False)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="run seeded episodes for one engine config")
    common(p_eval, checkpoint=True)
    p_eval.add_argument("--mode", choices=("dense", "routed", "fixed"), default=None)
    p_eval.add_argument("--keep-ratio", type=float, default=None)
    p_eval.add_argument("--n-lay", type=int, default=None)
    p_eval.add_argument("--tau-cache", type=float, default=None)
    p_eval.add_argument("--disable", action="append",
                        choices=("cache", "tokens", "layers"))
    p_eval.set_defaults(func=cmd_eval)

    p_sweep = sub.add_parser("sweep", help="vary one efficiency axis, others disabled")
    common(p_sweep, checkpoint=True)
    p_sweep.add_argument("--axis", required=True,
                         choices=("keep-ratio", "n-lay", "tau-cache"))
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated sweep values")
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="re-aggregate an output directory")
    p_report.add_argument("--out", required=True)
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
