"""Command-line entry point: preprocess | train | evaluate | sweep | synthetic | explain-dump.

Outputs go under ``$EC4SREC_OUT`` (default ``./runs``) unless ``--out`` names a directory.
Config values come from an optional ``key=value`` file, overridden by ``--dotted.key value`` flags.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .data import (
    DataError,
    SyntheticConfig,
    apply_k_core,
    generate_synthetic,
    load_interactions,
    save_interactions,
    split_leave_one_out,
    subsample_users,
)

logger = logging.getLogger("ec4srec")

SWEEP_DEFAULTS = {
    "mu_e": [round(0.1 * i, 1) for i in range(1, 10)],
    "p": [1, 2, 3, 4, 5],
    "losses": [",".join(c) for r in (1, 2, 3) for c in itertools.combinations(("cl+", "cl-", "sl+"), r)],
    "explanation": ["occlusion", "saliency", "integrated_gradients", "attention"],
    "augment-removal": ["none", "rord", "mask", "crop"],
}


# helpers -------------------------------------------------------------------

def output_root() -> Path:
    return Path(os.environ.get("EC4SREC_OUT", "runs"))


def resolve_out(out: str | None, default_name: str) -> Path:
    if out is None:
        return output_root() / default_name
    path = Path(out)
    return path if path.is_absolute() or path.parent != Path(".") else output_root() / path


def parse_overrides(extra: list[str]) -> dict[str, str]:
    """``--encoder.d 32`` / ``--encoder.d=32`` pairs into a flat dict."""
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for --{key}")
            value = extra[i + 1]
            i += 2
        out[key.replace("-", "_")] = value
    return out


def parse_seeds(text: str | None, fallback: int) -> list[int]:
    if not text:
        return [fallback]
    return [int(s) for s in text.split(",") if s.strip()]


def code_hash(config_text: str) -> str:
    """sha256 over the package sources and the config text."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    h.update(config_text.encode())
    return h.hexdigest()


def load_split(args, config: ExperimentConfig):
    if args.data and args.synthetic is not None:
        raise DataError("use either --data or --synthetic, not both")
    if args.data:
        ds = load_interactions(args.data)
        source = {"data": str(args.data)}
    else:
        seed = 0 if args.synthetic is None else args.synthetic
        ds = generate_synthetic(seed, SyntheticConfig(n_users=args.synthetic_users)).dataset
        source = {"synthetic": seed, "synthetic_users": args.synthetic_users}
    if args.max_users:
        ds = subsample_users(ds, args.max_users, args.subsample_seed)
        source.update(max_users=args.max_users, subsample_seed=args.subsample_seed)
    return split_leave_one_out(ds, train_samples=config.train_samples), source


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=list) + "\n", encoding="utf-8")


def write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def metric_rows(metrics: dict[str, float], seed: int) -> list[tuple]:
    rows = []
    for key, value in metrics.items():
        name, k = key.split("@")
        rows.append((name, int(k), value, seed))
    return rows


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def averaged(rows: list[tuple]) -> list[tuple]:
    groups: dict[tuple, list[float]] = {}
    for name, k, value, _ in rows:
        groups.setdefault((name, k), []).append(value)
    return [(name, k, statistics.fmean(v), statistics.pstdev(v), len(v)) for (name, k), v in groups.items()]


# training ------------------------------------------------------------------

def run_training(config: ExperimentConfig, split, out_dir: Path, seeds: list[int], source: dict) -> list[tuple]:
    """Train once per seed into ``out_dir/seed-<s>``; returns metric rows of all seeds."""
    from .trainer import Trainer

    out_dir.mkdir(parents=True, exist_ok=True)
    text = dump_config(config)
    (out_dir / "config.txt").write_text(text, encoding="utf-8")
    write_json(out_dir / "manifest.json", {
        "version": __version__, "config": config.to_flat(), "config_digest": config.digest(),
        "content_hash": code_hash(text), "output_dir": str(out_dir), "seeds": seeds, "source": source,
    })
    all_rows = []
    for seed in seeds:
        cfg = config.replace(seed=seed)
        run_dir = out_dir / f"seed-{seed}"
        run_dir.mkdir(exist_ok=True)
        steps: list[dict] = []
        trainer = Trainer(cfg, split, step_callback=steps.append)
        trainer.run()
        trainer.checkpoint(run_dir / "checkpoint.safetensors")
        write_jsonl(run_dir / "history.jsonl", trainer.state.history)
        write_jsonl(run_dir / "steps.jsonl", steps)
        write_json(run_dir / "refresh_log.json", trainer.state.refresh_log)
        rows = metric_rows(trainer.test_metrics(), seed)
        write_csv(run_dir / "metrics.csv", ("metric", "k", "value", "seed"), rows)
        all_rows.extend(rows)
        logger.info("seed %d: %s", seed, {f"{n}@{k}": round(v, 4) for n, k, v, _ in rows})
    write_csv(out_dir / "metrics.csv", ("metric", "k", "value", "seed"), all_rows)
    write_csv(out_dir / "metrics_mean.csv", ("metric", "k", "mean", "std", "n"), averaged(all_rows))
    return all_rows


def cmd_preprocess(args, extra) -> int:
    ds = load_interactions(args.input)
    if args.k > 1:
        ds = apply_k_core(ds, args.k, dedup=not args.keep_repeats)
    out = resolve_out(args.out, f"preprocessed-k{args.k}")
    save_interactions(ds, out)
    st = ds.stats()
    lines = [f"users {st['users']}", f"items {st['items']}", f"interactions {st['interactions']}",
             f"avg_length {st['avg_length']:.4f}", f"sparsity {st['sparsity']:.4f}"]
    (out / "stats.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    print(f"wrote {out}")
    return 0


def _config_from(args, extra) -> ExperimentConfig:
    return load_config(args.config, parse_overrides(extra))


def cmd_train(args, extra) -> int:
    config = _config_from(args, extra)
    split, source = load_split(args, config)
    out = resolve_out(args.out, f"train-{config.mode}-{config.digest()}")
    rows = run_training(config, split, out, parse_seeds(args.seeds, config.seed), source)
    for name, k, mean, std, n in averaged(rows):
        print(f"{name}@{k} {mean:.4f} (std {std:.4f}, n={n})")
    print(f"wrote {out}")
    return 0


def cmd_evaluate(args, extra) -> int:
    from .trainer import evaluate, load_model

    model, config = load_model(args.checkpoint)
    split, _ = load_split(args, config)
    ks = tuple(int(k) for k in args.ks.split(","))
    samples = split.test if args.part == "test" else split.valid
    metrics = evaluate(model, samples, ks, config.encoder.max_len)
    rows = metric_rows(metrics, config.seed)
    if args.out:
        out = resolve_out(args.out, "evaluate")
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / f"metrics_{args.part}.csv", ("metric", "k", "value", "seed"), rows)
    for name, k, value, _ in rows:
        print(f"{name}@{k} {value:.4f}")
    return 0


# sweeps --------------------------------------------------------------------

def sweep_overrides(axis: str, value: str) -> dict[str, str]:
    if axis == "mu_e":
        return {"augment.mu_e": value}
    if axis == "p":
        return {"p": value}
    if axis == "losses":
        return {"losses": value}
    if axis == "explanation":
        return {"explain.method": value}
    if axis == "augment-removal":
        return {"augment.exclude": "" if value == "none" else value}
    raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_DEFAULTS)}")


def _sweep_job(job):
    base_flat, overrides, split_args, out_dir, seeds = job
    try:
        config = ExperimentConfig().replace(**base_flat).replace(**overrides)
        split, source = load_split(argparse.Namespace(**split_args), config)
        rows = run_training(config, split, Path(out_dir), seeds, source)
        return {f"{n}@{k}": mean for n, k, mean, _, _ in averaged(rows)}, None
    except Exception as exc:  # reported per run; the sweep keeps going
        return None, f"{type(exc).__name__}: {exc}"


def _plot(path: Path, axis: str, values: list[str], series: dict[str, list[float]]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = np.arange(len(values))
    numeric = axis in ("mu_e", "p")
    for i, (name, ys) in enumerate(series.items()):
        if numeric:
            ax.plot([float(v) for v in values], ys, marker="o", label=name)
        else:
            width = 0.8 / max(len(series), 1)
            ax.bar(x + i * width, ys, width, label=name)
    if not numeric:
        ax.set_xticks(x + 0.4 - 0.4 / max(len(series), 1), values, rotation=20)
    ax.set_xlabel(axis)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_sweep(args, extra) -> int:
    if args.values is None:
        values = [str(v) for v in SWEEP_DEFAULTS[args.axis]]
    else:
        values = [v.strip() for v in args.values.split(";" if args.axis == "losses" else ",") if v.strip()]
    if not values:
        raise ConfigError("sweep needs at least one value")
    base = _config_from(args, extra)
    for v in values:
        base.replace(**sweep_overrides(args.axis, v))  # validate every value before running anything
    out = resolve_out(args.out, f"sweep-{args.axis}-{base.digest()}")
    out.mkdir(parents=True, exist_ok=True)
    seeds = parse_seeds(args.seeds, base.seed)
    split_args = {k: getattr(args, k) for k in ("data", "synthetic", "synthetic_users", "max_users", "subsample_seed")}
    jobs = [(base.to_flat(), sweep_overrides(args.axis, v), split_args, str(out / f"value-{i}"), seeds)
            for i, v in enumerate(values)]
    if args.parallel > 1:
        with ProcessPoolExecutor(args.parallel) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]

    metric_names = sorted({m for res, _ in results if res for m in res})
    rows, failures = [], []
    for v, (res, err) in zip(values, results):
        if err:
            failures.append((v, err))
            rows.append((v, *["" for _ in metric_names], err))
        else:
            rows.append((v, *[res[m] for m in metric_names], ""))
    write_csv(out / "sweep.csv", (args.axis, *metric_names, "error"), rows)
    ok = [(v, res) for v, (res, _) in zip(values, results) if res]
    if ok and metric_names:
        series = {m: [res[m] for _, res in ok] for m in metric_names if m.startswith("NDCG")}
        _plot(out / "sweep.png", args.axis, [v for v, _ in ok], series)
    for row in rows:
        print(" ".join(str(c) if not isinstance(c, float) else f"{c:.4f}" for c in row))
    for v, err in failures:
        print(f"run {args.axis}={v} failed: {err}", file=sys.stderr)
    print(f"wrote {out}")
    return 1 if failures else 0


# synthetic and explanation dump -----------------------------------------------

def cmd_synthetic(args, extra) -> int:
    from .experiments import run_oracle_experiment

    overrides = parse_overrides(extra)
    seeds = parse_seeds(args.seeds, 0)
    out = resolve_out(args.out, "synthetic")
    out.mkdir(parents=True, exist_ok=True)
    reports = [run_oracle_experiment(seed, **overrides) for seed in seeds]
    rows = [(r.seed, name, metric, value) for r in reports for name, metric, value in r.rows()]
    write_csv(out / "report.csv", ("seed", "masking", "metric", "value"), rows)
    lines = ["masking  HR@3    NDCG@3"]
    for name in ("random", "oracle"):
        hr = statistics.fmean(getattr(r, name)["HR@3"] for r in reports)
        nd = statistics.fmean(getattr(r, name)["NDCG@3"] for r in reports)
        lines.append(f"{name:<8} {hr:.4f}  {nd:.4f}")
    rand = statistics.fmean(r.random["NDCG@3"] for r in reports)
    orac = statistics.fmean(r.oracle["NDCG@3"] for r in reports)
    gap = (orac - rand) / rand if rand else float("inf")
    lines.append(f"relative NDCG@3 gap {gap:+.1%} over seeds {seeds}")
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


def cmd_explain_dump(args, extra) -> int:
    from .augment import sample_negative_view, sample_view_pair
    from .explain import normalize_scores, refresh_store
    from .trainer import load_model

    model, config = load_model(args.checkpoint)
    method = args.method or config.explain.method
    split, _ = load_split(args, config)
    store = refresh_store(None, method, model, split, epoch=0, max_len=config.encoder.max_len,
                          steps=config.explain.steps)
    out = resolve_out(args.out, f"explain-{method}")
    out.mkdir(parents=True, exist_ok=True)
    store.save_text(out / "scores.txt")
    if args.views:
        rng = np.random.default_rng(args.view_seed)
        max_len = config.encoder.max_len
        rows = []
        for user in list(split.explain_inputs)[: args.views]:
            s = list(split.explain_inputs[user].inputs[-max_len:])
            scores = normalize_scores(store.get(user)[-len(s):])
            pair = sample_view_pair(s, scores, config.augment, rng, user)
            neg = sample_negative_view(s, scores, config.augment, rng, user)
            for v in (*pair, neg):
                rows.append({"user": user, "operator": v.operator, "polarity": v.polarity, "items": list(v.items)})
        write_jsonl(out / "views.jsonl", rows)
    print(f"wrote {out} ({len(store)} users, method {method})")
    return 0


# parser --------------------------------------------------------------------

def _add_data_args(p):
    p.add_argument("--data", help="preprocessed dataset.txt (one user per line)")
    p.add_argument("--synthetic", type=int, default=None, metavar="SEED", help="use the synthetic dataset")
    p.add_argument("--synthetic-users", type=int, default=500)
    p.add_argument("--max-users", type=int, default=0, help="random user subsample (0 keeps all)")
    p.add_argument("--subsample-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ec4srec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="k-core filter a raw interaction file")
    p.add_argument("input")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--keep-repeats", action="store_true", help="skip consecutive-repeat removal")
    p.add_argument("--out")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one config for one or more seeds (extra --key value pairs override)")
    p.add_argument("--config")
    p.add_argument("--seeds", help="comma-separated seeds, e.g. 1,2,3")
    p.add_argument("--out")
    _add_data_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the valid or test split")
    p.add_argument("checkpoint")
    p.add_argument("--part", choices=("valid", "test"), default="test")
    p.add_argument("--ks", default="5,10")
    p.add_argument("--out")
    _add_data_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="one run per value along an ablation axis")
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_DEFAULTS))
    p.add_argument("--values", help="comma-separated values (losses: ';'-separated lists)")
    p.add_argument("--config")
    p.add_argument("--seeds")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--out")
    _add_data_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synthetic", help="random vs oracle masking on the synthetic dataset")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out")
    p.set_defaults(func=cmd_synthetic)

    p = sub.add_parser("explain-dump", help="write importance scores (and sample views) for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--method")
    p.add_argument("--views", type=int, default=0, help="also dump augmented views for the first N users")
    p.add_argument("--view-seed", type=int, default=0)
    p.add_argument("--out")
    _add_data_args(p)
    p.set_defaults(func=cmd_explain_dump)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if extra and args.command in ("preprocess", "evaluate", "explain-dump"):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    try:
        return args.func(args, extra)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
