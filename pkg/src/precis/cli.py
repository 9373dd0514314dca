"""Command-line experiment runner.

    precis train --problem regression --policy mixed --seeds 10
    precis compare --problem heat --seeds 3
    precis landscape --problem heat --policy pure16 --iteration 1
    precis theorem --problem diffusion_validation --policy mixed
    precis cast --checkpoint runs/train/regression/full32/seed_00
    precis fp16 inspect 0.1

Outputs go under ``--out`` (default ``$PRECIS_OUT_DIR`` or ``./runs``).
Exit status: 0 success, 2 configuration error, 3 training aborted.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import diagnostics, fp16, models, theory
from .autodiff import B16, B32
from .tasks import TASKS, get_task
from .trainer import (
    AdamConfig,
    ConfigError,
    PrecisionPolicy,
    TrainingAborted,
    TrainRecord,
    _atomic_write,
    _jsonable,
    evaluate_loss,
    train,
)

SUMMARY_SCHEMA = 1
COMPARE_SCHEMA = 1
COMPARE_COLUMNS = (
    "policy",
    "mean_error",
    "std_error",
    "bytes_f32_equiv",
    "bytes_actual",
    "byte_ratio",
    "iters_per_second",
)
EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3

DEFAULTS = {
    "problem": "regression",
    "policy": "full32",
    "loss_scale": None,
    "seeds": 1,
    "iters": None,
    "lr": None,
    "scale": "desk",
    "jobs": 1,
    "eval_every": 100,
    "out": None,
}


def out_root(value=None) -> Path:
    return Path(value or os.environ.get("PRECIS_OUT_DIR") or "runs")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# configuration


def resolve_config(args) -> dict:
    """Merge defaults, the optional JSON config file and explicit flags, then validate."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"config: cannot read {args.config}: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config: top level must be a JSON object")
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"config: unknown fields {sorted(unknown)}")
        cfg.update(loaded)
    for key in DEFAULTS:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if cfg["problem"] not in TASKS:
        raise ConfigError(f"problem: unknown id {cfg['problem']!r}; choose from {sorted(TASKS)}")
    try:
        PrecisionPolicy.parse(str(cfg["policy"]), cfg["loss_scale"])
    except ConfigError as e:
        raise ConfigError(f"policy: {e}") from None
    for key, low in (("seeds", 1), ("jobs", 1), ("iters", 1), ("eval_every", 0)):
        v = cfg[key]
        if v is None and key == "iters":
            continue
        if not isinstance(v, int) or isinstance(v, bool) or v < low:
            raise ConfigError(f"{key}: must be an integer >= {low}, got {v!r}")
    if cfg["lr"] is not None and not (isinstance(cfg["lr"], (int, float)) and cfg["lr"] > 0):
        raise ConfigError(f"lr: must be positive, got {cfg['lr']!r}")
    if cfg["scale"] not in ("desk", "paper"):
        raise ConfigError(f"scale: must be 'desk' or 'paper', got {cfg['scale']!r}")


# ---------------------------------------------------------------------------
# runs


def run_seed(cfg: dict, policy_name: str, seed: int, reference=None) -> dict:
    """One training run. Returns plain data so it can cross process boundaries."""
    task = get_task(cfg["problem"], cfg["scale"])
    policy = PrecisionPolicy.parse(policy_name, cfg["loss_scale"] if policy_name == "mixed" else None)
    iters = cfg["iters"] or task.iters
    lr = cfg["lr"] or task.lr
    aborted = None
    try:
        rec = train(task, policy, AdamConfig(lr=lr), iters=iters, seed=seed, eval_every=cfg["eval_every"], reference_format=reference)
    except TrainingAborted as e:
        rec, aborted = e.record, str(e)
    return {
        "seed": seed,
        "summary": rec.summary(),
        "csv": rec.to_csv(),
        "theta": rec.theta,
        "aborted": aborted,
        "task": task.describe(),
        "network": models.config_to_dict(task.model.config),
    }


def _dispatch(cfg: dict, policy_name: str, seeds, reference=None) -> list[dict]:
    if cfg["jobs"] > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
            futs = [pool.submit(run_seed, cfg, policy_name, s, reference) for s in seeds]
            return [f.result() for f in futs]
    return [run_seed(cfg, policy_name, s, reference) for s in seeds]


def _save_runs(directory: Path, cfg: dict, policy_name: str, results: list[dict]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for r in results:
        stem = f"seed_{r['seed']:02d}"
        _atomic_write(directory / f"{stem}.csv", r["csv"])
        _write_json(directory / f"{stem}.json", r["summary"])
        if r["theta"] is not None:
            policy = PrecisionPolicy.parse(policy_name, cfg["loss_scale"] if policy_name == "mixed" else None)
            store = models.ParameterStore(r["theta"], policy.master_format)
            models.save_checkpoint(
                directory / stem,
                models.config_from_dict(r["network"]),
                store,
                seed=r["seed"],
                extra={"problem": cfg["problem"], "scale": cfg["scale"], "policy": policy_name},
            )


def aggregate(cfg: dict, policy_name: str, results: list[dict]) -> dict:
    errors = np.array([r["summary"]["final_error"] for r in results], dtype=np.float64)
    finite = errors[np.isfinite(errors)]
    first = results[0]["summary"]
    seconds = sum(r["summary"]["timing"]["seconds"] for r in results)
    iters_total = sum(r["summary"]["iterations"] for r in results)
    return {
        "schema": SUMMARY_SCHEMA,
        "problem": cfg["problem"],
        "policy": policy_name,
        "loss_scale": cfg["loss_scale"] if policy_name == "mixed" else None,
        "scale": cfg["scale"],
        "task": results[0]["task"],
        "iters": first["iterations"],
        "seeds": [r["seed"] for r in results],
        "error": {
            "mean": float(np.mean(errors)),
            "std": float(np.std(errors, ddof=1)) if len(errors) > 1 else 0.0,
            "per_seed": errors.tolist(),
            "n_finite": int(finite.size),
        },
        "bytes": first["bytes"],
        "aborted": [r["seed"] for r in results if r["aborted"]],
        "timing": {
            "seconds": seconds,
            "iters_per_second": iters_total / seconds if seconds else None,
            "note": "CPU binary16 emulation; not comparable to GPU timings",
        },
    }


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    root = out_root(cfg["out"]) / "train" / cfg["problem"] / cfg["policy"]
    results = _dispatch(cfg, cfg["policy"], list(range(cfg["seeds"])))
    _save_runs(root, cfg, cfg["policy"], results)
    summary = aggregate(cfg, cfg["policy"], results)
    _write_json(root / "summary.json", summary)
    err = summary["error"]
    print(f"{cfg['problem']} {cfg['policy']}: error {err['mean']:.4g} +- {err['std']:.2g} over {len(results)} seeds -> {root}")
    if summary["aborted"]:
        print(f"training aborted for seeds {summary['aborted']}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


def compare_table(rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(f"# schema={COMPARE_SCHEMA}; iters_per_second is CPU emulation throughput, not comparable to GPU\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARE_COLUMNS)
    for r in rows:
        w.writerow(tuple(r[c] for c in COMPARE_COLUMNS))
    return buf.getvalue()


def read_compare(path) -> list[dict]:
    with open(path, newline="") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def cmd_compare(args) -> int:
    cfg = resolve_config(args)
    root = out_root(cfg["out"]) / "compare" / cfg["problem"]
    seeds = list(range(cfg["seeds"]))
    rows, summaries = [], {}
    for name in ("full32", "pure16", "mixed"):
        results = _dispatch(cfg, name, seeds)
        _save_runs(root / name, cfg, name, results)
        s = aggregate(cfg, name, results)
        summaries[name] = s
        rows.append(
            {
                "policy": name,
                "mean_error": s["error"]["mean"],
                "std_error": s["error"]["std"],
                "bytes_f32_equiv": s["bytes"]["f32_equiv"],
                "bytes_actual": s["bytes"]["actual"],
                "byte_ratio": s["bytes"]["byte_ratio"],
                "iters_per_second": s["timing"]["iters_per_second"],
            }
        )
    _atomic_write(root / "compare.csv", compare_table(rows))
    _write_json(root / "summary.json", {"schema": SUMMARY_SCHEMA, "scale": cfg["scale"], "policies": summaries})
    sys.stdout.write(compare_table(rows))
    return EXIT_OK


# ---------------------------------------------------------------------------
# landscape / theorem / cast


def _load_run_checkpoint(path):
    config, store, arch = models.load_checkpoint(path)
    if "problem" not in arch:
        raise ConfigError("checkpoint: missing problem id")
    return config, store, arch


def cmd_landscape(args) -> int:
    if args.checkpoint:
        _, store, arch = _load_run_checkpoint(args.checkpoint)
        cfg = resolve_config(
            argparse.Namespace(problem=arch["problem"], policy=arch["policy"], scale=arch.get("scale"), out=args.out)
        )
        task = get_task(cfg["problem"], cfg["scale"])
        policy = PrecisionPolicy.parse(cfg["policy"])
        theta = store.master.astype(np.float64)
        recorded, iteration = None, None
    else:
        cfg = resolve_config(args)
        task = get_task(cfg["problem"], cfg["scale"])
        policy = PrecisionPolicy.parse(cfg["policy"], cfg["loss_scale"])
        iteration = args.iteration
        seen = {}
        rec = train(
            task,
            policy,
            AdamConfig(lr=cfg["lr"] or task.lr),
            iters=iteration + 1,
            seed=args.seed,
            eval_every=0,
            callback=lambda it, th: seen.__setitem__(it, th.copy()),
        )
        theta = seen[iteration].astype(np.float64)
        recorded = rec.loss[iteration]
    mf, cf = policy.master_format, policy.compute_format
    directions = None
    if args.directions:
        d = np.load(args.directions)
        directions = (d["delta"], d["eta"])
    sl = diagnostics.landscape_slice(
        lambda p: evaluate_loss(task, mf.round(p), cf, policy),
        theta,
        seed=args.direction_seed,
        half_width=args.half_width,
        resolution=args.resolution,
        blocks=task.model.blocks,
        directions=directions,
        meta={"policy": policy.name, "iteration": iteration, "problem": cfg["problem"], "recorded_loss": recorded},
    )
    root = out_root(cfg["out"]) / "landscape" / cfg["problem"] / policy.name
    sl.save(root)
    np.savez(root / "directions.npz", delta=sl.delta, eta=sl.eta)
    print(f"nan fraction {sl.nan_fraction:.3f}, f(0,0) = {sl.center!r} -> {root}")
    return EXIT_OK


def cmd_theorem(args) -> int:
    root = out_root(args.out) / "theorem"
    if args.testbed:
        rec = theory.quadratic_testbed(iters=args.iters or 10000, seed=args.seed)
        result = theory.check_testbed(rec)
        body = {"kind": "testbed", "config": rec.config}
        series = {"E": rec.extras["E"], "grad_norm": rec.grad_norm, "in_region": rec.extras["in_region"]}
        _write_json(root / "testbed.json", {"schema": theory.REPORT_SCHEMA, "summary": result, **body, "series": series})
        print(f"testbed: descent {result['descent_ok']}, decay {result['decay_ok']}, corollary {result['corollary']['dist_ok']}/{result['corollary']['gap_ok']}")
        return EXIT_OK
    if args.run:
        path = Path(args.run)
        if path.is_dir():
            path = path / "seed_00.csv"
        rec = TrainRecord.read_csv(path)
        label = str(path)
    else:
        args.problem = args.problem or "diffusion_validation"
        args.policy = args.policy or "mixed"
        cfg = resolve_config(args)
        task = get_task(cfg["problem"], cfg["scale"])
        policy = PrecisionPolicy.parse(cfg["policy"], cfg["loss_scale"])
        try:
            rec = train(task, policy, AdamConfig(lr=cfg["lr"] or task.lr), iters=cfg["iters"] or task.iters, seed=args.seed, eval_every=0, reference_format=B32)
        except TrainingAborted as e:
            print(str(e), file=sys.stderr)
            return EXIT_ABORT
        rec.save(root, f"{cfg['problem']}_{policy.name}")
        label = f"{cfg['problem']}/{policy.name}"
    result = theory.check_theorem1(rec)
    theory.write_report(root / "theorem.json", result, {"run": label})
    print(f"{label}: first hit {result['first_hit_iteration']}, satisfied at end {result['satisfied_at_end']}")
    return EXIT_OK


def cmd_cast(args) -> int:
    if args.checkpoint:
        _, store, arch = _load_run_checkpoint(args.checkpoint)
        task = get_task(arch["problem"], arch.get("scale", "desk"))
        problem = arch["problem"]
    else:
        args.policy = "full32"
        cfg = resolve_config(args)
        task = get_task(cfg["problem"], cfg["scale"])
        rec = train(task, PrecisionPolicy.parse("full32"), AdamConfig(lr=cfg["lr"] or task.lr), iters=cfg["iters"] or task.iters, seed=args.seed, eval_every=0)
        store = models.ParameterStore(rec.theta, B32)
        problem = cfg["problem"]
    result = cast_experiment(task, store)
    result["problem"] = problem
    _write_json(out_root(args.out) / "cast" / problem / "cast.json", result)
    print(f"error before {result['error_before']:.4%}, after binary16 cast {result['error_after']:.4%} ({result['delta_pp']:+.3f} pp)")
    return EXIT_OK


def cast_experiment(task, store) -> dict:
    """Test error in the stored format and after casting the weights to binary16."""
    before = task.test_error(store.master, store.master_format)
    cast = models.cast_weights(store, B16)
    after = task.test_error(cast.master, B16)
    return {
        "schema": SUMMARY_SCHEMA,
        "format_before": store.master_format.value,
        "error_before": before,
        "error_after": after,
        "delta_pp": 100.0 * (after - before),
    }


def cmd_fp16(args) -> int:
    info = fp16.inspect(args.value)
    print(json.dumps(_jsonable(info), indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _run_options(p: argparse.ArgumentParser, policy: bool = True) -> None:
    p.add_argument("--config", help="JSON file with run settings; flags override it")
    p.add_argument("--problem", choices=sorted(TASKS))
    if policy:
        p.add_argument("--policy", choices=["oracle64", "full32", "pure16", "mixed"])
        p.add_argument("--loss-scale", dest="loss_scale", type=float, help="power of two, mixed policy only")
    p.add_argument("--seeds", type=int, help="number of seeds (0..n-1)")
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--scale", choices=["desk", "paper"])
    p.add_argument("--jobs", type=int, help="worker processes for seeds")
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--out", help="output root (default $PRECIS_OUT_DIR or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="precis", description="Precision-policy training experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one policy over several seeds")
    _run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="full32, pure16 and mixed on identical seeds")
    _run_options(p, policy=False)
    p.add_argument("--loss-scale", dest="loss_scale", type=float, help="loss scale for the mixed run")
    p.set_defaults(func=cmd_compare, policy="full32")

    p = sub.add_parser("landscape", help="2D loss slice around an iterate or checkpoint")
    _run_options(p)
    p.add_argument("--checkpoint")
    p.add_argument("--iteration", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--direction-seed", dest="direction_seed", type=int, default=0)
    p.add_argument("--directions", help="npz with delta/eta from an earlier slice")
    p.add_argument("--half-width", dest="half_width", type=float, default=1.0)
    p.add_argument("--resolution", type=int, default=51)
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("theorem", help="critical-region check on a run or the quadratic testbed")
    _run_options(p)
    p.add_argument("--run", help="record CSV or run directory")
    p.add_argument("--testbed", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_theorem)

    p = sub.add_parser("cast", help="test error before and after a binary16 weight cast")
    _run_options(p, policy=False)
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_cast)

    p = sub.add_parser("fp16", help="binary16 utilities")
    fsub = p.add_subparsers(dest="fp16_command", required=True)
    q = fsub.add_parser("inspect", help="bit pattern and rounding error of a value")
    q.add_argument("value", type=float)
    q.set_defaults(func=cmd_fp16)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
