"""Command-line entry point: ``fedau run|compare|validate-stats|population``.

Exit codes: 0 ok, 2 configuration error, 3 numerical divergence,
4 statistical validation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as configmod
from . import rng as rngmod
from .engine import load_checkpoint, run_experiment
from .errors import ConfigError, DivergenceError
from .metrics import (
    CSV_COLUMNS,
    cutoff_geometric_fourth_central,
    cutoff_geometric_moments,
    read_csv,
    simulate_intervals,
)
from .participation import generate_population
from .svg import write_line_chart

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_STATS = 0, 2, 3, 4
OUT_ENV = "FEDAU_OUT"
WINDOW_FRACTION = 0.1
LOG_METRICS = ("grad_norm_f", "dist_f", "dist_h", "weight_error_cum", "step_norm")

log = logging.getLogger("fedau")


def _default_out(*parts: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "runs")).joinpath(*parts)


def _write_run_outputs(out: Path, cfg, trace, population, manifest: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(trace.csv())
    doc = population.to_dict()
    doc["config_sha256"] = cfg.hash()
    (out / "population.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def execute_run(cfg, out: Path, resume: str | None = None, config_path: str | None = None) -> tuple[int, str]:
    """Run one config into ``out``. Returns (exit code, message)."""
    started = time.time()
    population = configmod.build_population(cfg)
    checkpoint_dir = out / "checkpoints" if cfg.checkpoint_every > 0 else None
    manifest = {
        "config_path": config_path,
        "config_sha256": cfg.hash(),
        "seed": cfg.seed,
        "strategy": cfg.strategy,
        "output_dir": str(out),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    status, message = EXIT_OK, "ok"
    try:
        trace = run_experiment(
            cfg,
            population=population,
            checkpoint_dir=checkpoint_dir,
            resume=load_checkpoint(resume) if resume else None,
        )
    except DivergenceError as exc:
        trace = exc.trace
        status, message = EXIT_DIVERGED, str(exc)
    manifest.update(status=message, wall_clock_seconds=round(time.time() - started, 3))
    if trace is not None:
        _write_run_outputs(out, cfg, trace, population, manifest)
    return status, message


def cmd_run(args) -> int:
    cfg = configmod.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.workers is not None:
        cfg = cfg.replace(workers=args.workers)
    out = Path(args.out) if args.out else _default_out(f"{cfg.strategy}-seed{cfg.seed}")
    status, message = execute_run(cfg, out, resume=args.resume, config_path=str(args.config))
    if status != EXIT_OK:
        print(f"error: {message} (partial outputs in {out})", file=sys.stderr)
    else:
        print(f"wrote {out / 'metrics.csv'}")
    return status


def _compare_job(job):
    raw, strategy, seed, out, path = job
    cfg = configmod.from_dict(raw).with_strategy(strategy).with_seed(seed)
    status, message = execute_run(cfg, Path(out), config_path=path)
    return strategy, seed, status, message


def window_mean(rows: list[dict], column: str) -> float:
    """Mean of ``column`` over the last 10% of sampled rows (at least one row)."""
    if not rows:
        return math.nan
    k = max(1, math.ceil(WINDOW_FRACTION * len(rows)))
    return float(np.mean([r[column] for r in rows[-k:]]))


def summarize(results: dict[str, dict[int, list[dict]]]) -> list[dict]:
    """Per strategy and metric: mean and std over seeds of the final-window mean."""
    table = []
    for strategy, by_seed in results.items():
        for column in CSV_COLUMNS[1:]:
            values = [window_mean(rows, column) for rows in by_seed.values()]
            values = [v for v in values if math.isfinite(v)]
            table.append(
                {
                    "strategy": strategy,
                    "metric": column,
                    "mean": float(np.mean(values)) if values else math.nan,
                    "std": float(np.std(values)) if values else math.nan,
                    "seeds": len(values),
                }
            )
    return table


def _plot_compare(out: Path, results, cfg_hash: str) -> None:
    for column in CSV_COLUMNS[1:]:
        series = []
        for strategy, by_seed in results.items():
            runs = [rows for rows in by_seed.values() if rows]
            if not runs:
                continue
            length = min(len(r) for r in runs)
            xs = [runs[0][i]["t"] for i in range(length)]
            ys = [float(np.mean([r[i][column] for r in runs])) for i in range(length)]
            series.append((strategy, xs, ys))
        path = out / f"{column}.svg"
        write_line_chart(path, series, title=column, y_label=column, log_y=column in LOG_METRICS)
        text = path.read_text()
        path.write_text(text.replace("<svg ", f"<!-- config_sha256={cfg_hash} -->\n<svg ", 1))


def cmd_compare(args) -> int:
    cfg = configmod.load(args.config)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()] if args.strategies else [cfg.strategy]
    bad = [s for s in strategies if s not in configmod.ALL_STRATEGIES]
    if bad:
        raise ConfigError(
            f"unknown strategies {', '.join(bad)}; valid: {', '.join(configmod.ALL_STRATEGIES)}", "--strategies"
        )
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    if not strategies or not seeds:
        raise ConfigError("need at least one strategy and one seed", "--strategies")
    for s in strategies:
        cfg.with_strategy(s)  # validate overrides before launching anything
    out = Path(args.out) if args.out else _default_out("compare")
    started = time.time()
    jobs = [(cfg.raw, s, seed, str(out / s / f"seed-{seed}"), str(args.config)) for s in strategies for seed in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(_compare_job, jobs))
    else:
        outcomes = [_compare_job(j) for j in jobs]

    results: dict[str, dict[int, list[dict]]] = {s: {} for s in strategies}
    failures = []
    for strategy, seed, status, message in outcomes:
        if status != EXIT_OK:
            failures.append((strategy, seed, message))
            continue
        text = (out / strategy / f"seed-{seed}" / "metrics.csv").read_text()
        results[strategy][seed] = read_csv(text)

    table = summarize(results)
    cfg_hash = cfg.hash()
    lines = [f"# config_sha256={cfg_hash}", f"# seeds={','.join(map(str, seeds))}", "strategy,metric,mean,std,seeds"]
    for r in table:
        lines.append(f"{r['strategy']},{r['metric']},{r['mean']!r},{r['std']!r},{r['seeds']}")
    (out / "summary.csv").write_text("\n".join(lines) + "\n")

    md = [f"<!-- config_sha256={cfg_hash} seeds={','.join(map(str, seeds))} -->", ""]
    header = ["strategy"] + list(CSV_COLUMNS[1:])
    md.append("| " + " | ".join(header) + " |")
    md.append("|" + "---|" * len(header))
    for s in strategies:
        cells = [s]
        for column in CSV_COLUMNS[1:]:
            r = next(r for r in table if r["strategy"] == s and r["metric"] == column)
            cells.append(f"{r['mean']:.4g} ± {r['std']:.2g}")
        md.append("| " + " | ".join(cells) + " |")
    (out / "summary.md").write_text("\n".join(md) + "\n")
    _plot_compare(out, results, cfg_hash)
    manifest = {
        "config_path": str(args.config),
        "config_sha256": cfg_hash,
        "seeds": seeds,
        "strategies": strategies,
        "output_dir": str(out),
        "failures": [{"strategy": s, "seed": seed, "error": m} for s, seed, m in failures],
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print("\n".join(md[2:]))
    for strategy, seed, message in failures:
        print(f"failed: {strategy} seed {seed}: {message}", file=sys.stderr)
    return EXIT_DIVERGED if failures else EXIT_OK


def validate_moments(p: float, K: int, samples: int, seed: int) -> dict:
    """Closed-form vs Monte Carlo moments of the cutoff interval with z-scores."""
    mean, var = cutoff_geometric_moments(p, K)
    draws = simulate_intervals(p, K, samples, rngmod.stream(seed, rngmod.MONTE_CARLO, int(p * 1e9), K))
    mc_mean = float(draws.mean())
    mc_var = float(draws.var())
    if var == 0.0:
        z_mean = 0.0 if mc_mean == mean else math.inf
        z_var = 0.0 if mc_var == 0.0 else math.inf
    else:
        z_mean = (mc_mean - mean) / math.sqrt(var / samples)
        mu4 = cutoff_geometric_fourth_central(p, K)
        z_var = (mc_var - var) / math.sqrt(max(mu4 - var**2, 1e-300) / samples)
    return {"p": p, "K": K, "mean": mean, "mc_mean": mc_mean, "z_mean": z_mean,
            "var": var, "mc_var": mc_var, "z_var": z_var}


def cmd_validate_stats(args) -> int:
    worst = 0.0
    print(f"{'p':>8} {'K':>6} {'mean':>12} {'mc_mean':>12} {'z':>7} {'var':>12} {'mc_var':>12} {'z':>7}")
    for p in args.p:
        for K in args.K:
            if not 0 < p <= 1 or K < 1:
                raise ConfigError(f"need 0 < p <= 1 and K >= 1, got p={p}, K={K}", "--p/--K")
            r = validate_moments(p, K, args.samples, args.seed)
            worst = max(worst, abs(r["z_mean"]), abs(r["z_var"]))
            print(f"{p:>8g} {K:>6d} {r['mean']:>12.6f} {r['mc_mean']:>12.6f} {r['z_mean']:>7.2f} "
                  f"{r['var']:>12.6f} {r['mc_var']:>12.6f} {r['z_var']:>7.2f}")
    if worst > 4:
        print(f"validation failed: max |z| = {worst:.2f} > 4", file=sys.stderr)
        return EXIT_STATS
    return EXIT_OK


def cmd_population(args) -> int:
    if args.config:
        cfg = configmod.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        pop = configmod.build_population(cfg)
    else:
        pop = generate_population(args.N, args.C, args.alpha_d, args.alpha_p, args.mu, args.p_min, seed=args.seed or 0)
    p = pop.p
    print(f"N={p.size} min={p.min():.4f} mean={p.mean():.4f} median={np.median(p):.4f} max={p.max():.4f}")
    if pop.q is not None:
        print("q = [" + ", ".join(f"{v:.2f}" for v in pop.q) + "]")
    if args.out:
        pop.dump(args.out)
        print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedau", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("config")
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument("--workers", type=int, help="threads for client updates (does not change results)")
    run.add_argument("--resume", help="checkpoint JSON to continue from")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="strategies x seeds with summary table and plots")
    cmp_.add_argument("config")
    cmp_.add_argument("--strategies", help="comma-separated strategy names")
    cmp_.add_argument("--seeds", help="comma-separated seeds")
    cmp_.add_argument("--out")
    cmp_.add_argument("--jobs", type=int, default=1)
    cmp_.set_defaults(func=cmd_compare)

    val = sub.add_parser("validate-stats", help="closed-form vs Monte Carlo interval moments")
    val.add_argument("--p", type=float, nargs="+", default=[0.02, 0.1, 0.5])
    val.add_argument("--K", type=int, nargs="+", default=[1, 10, 100])
    val.add_argument("--samples", type=int, default=10**6)
    val.add_argument("--seed", type=int, default=0)
    val.set_defaults(func=cmd_validate_stats)

    pop = sub.add_parser("population", help="generate or inspect participation probabilities")
    pop.add_argument("config", nargs="?")
    pop.add_argument("--seed", type=int)
    pop.add_argument("--N", type=int, default=100)
    pop.add_argument("--C", type=int, default=10)
    pop.add_argument("--alpha-d", dest="alpha_d", type=float, default=0.1)
    pop.add_argument("--alpha-p", dest="alpha_p", type=float, default=0.1)
    pop.add_argument("--mu", type=float, default=0.1)
    pop.add_argument("--p-min", dest="p_min", type=float, default=0.02)
    pop.add_argument("--out")
    pop.set_defaults(func=cmd_population)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
