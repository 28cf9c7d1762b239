"""fedvg command line: run, sweep, check, heatmap.

Exit codes: 0 success, 1 audit failure, 2 configuration or input error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .config import dump_config, load_config
from .diagnostics import audit_suite
from .errors import ConfigError, FedVGError, InputError, NumericError
from .federated import ExperimentConfig, ExperimentResult, RoundContext, run_experiment
from .scoring import NormKind, heatmap_csv, norm_heatmap, validation_gradient

log = logging.getLogger("fedvg")

EXIT_OK, EXIT_AUDIT, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def fmt(x) -> str:
    return format(float(x), ".17g")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_run_outputs(config: ExperimentConfig, result: ExperimentResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_snapshot.ini").write_text(dump_config(config))
    _write_csv(out_dir / "rounds.csv", ["round", "val_loss", "test_acc", "n_sampled"],
               ([r.round, fmt(r.val_loss), fmt(r.test_acc), len(r.sampled)] for r in result.records))
    score_rows = []
    for r in result.records:
        for k in r.sampled:
            norm = "" if r.mean_norms is None else fmt(r.mean_norms[k])
            score_rows.append([r.round, k, norm, fmt(r.scores[k])])
    _write_csv(out_dir / "scores.csv", ["round", "client_id", "mean_norm", "score"], score_rows)
    summary = {
        "best_acc": result.best_acc,
        "best_round": result.best_round,
        "final_acc": result.final_acc,
        "rounds": len(result.records),
        "seed": config.seed,
        "strategy": config.strategy,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    # wall time is kept apart so the files above stay byte-deterministic
    timing = {"wall_time": result.wall_time, "round_times": [r.wall_time for r in result.records]}
    (out_dir / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")


def cmd_run(config_path, out_dir, seed: int | None = None) -> int:
    config = load_config(config_path)
    if seed is not None:
        config = replace(config, seed=seed)
    result = run_experiment(config)
    write_run_outputs(config, result, Path(out_dir))
    print(f"best_acc {result.best_acc:.4f} at round {result.best_round}")
    return EXIT_OK


def _sweep_one(config: ExperimentConfig, run_dir: str):
    try:
        result = run_experiment(config)
    except NumericError as exc:
        return None, str(exc)
    write_run_outputs(config, result, Path(run_dir))
    return (result.best_acc, result.best_round), None


def cmd_sweep(config_path, alphas, strategies, seeds, out_dir, jobs: int = 1) -> int:
    if not alphas or not strategies or not seeds:
        raise ConfigError("alphas, strategies and seeds must be non-empty")
    base = load_config(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = []
    for strategy in strategies:
        for alpha in alphas:
            for seed in seeds:
                cfg = replace(base, strategy=strategy, alpha=float(alpha), seed=int(seed))
                cfg.validate()
                run_dir = out / "runs" / f"{strategy}_alpha{float(alpha)!r}_seed{seed}"
                grid.append((cfg, str(run_dir)))

    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            outcomes = list(pool.map(_sweep_one, *zip(*grid)))
    else:
        outcomes = [_sweep_one(cfg, d) for cfg, d in grid]

    rows, failures = [], []
    by_cell: dict[tuple[str, float], list[float]] = {}
    for (cfg, _), (res, err) in zip(grid, outcomes):
        if err is not None:
            log.warning("run %s alpha=%s seed=%s failed: %s", cfg.strategy, cfg.alpha, cfg.seed, err)
            failures.append([cfg.strategy, fmt(cfg.alpha), cfg.seed, err])
            continue
        rows.append([cfg.strategy, fmt(cfg.alpha), cfg.seed, fmt(res[0]), res[1]])
        by_cell.setdefault((cfg.strategy, cfg.alpha), []).append(res[0])
    _write_csv(out / "sweep.csv", ["strategy", "alpha", "seed", "best_acc", "best_round"], rows)
    summary = []
    for (strategy, alpha), accs in by_cell.items():
        std = fmt(statistics.stdev(accs)) if len(accs) > 1 else ""
        summary.append([strategy, fmt(alpha), len(accs), fmt(statistics.fmean(accs)), std])
    _write_csv(out / "sweep_summary.csv", ["strategy", "alpha", "n", "mean_best_acc", "std_best_acc"], summary)
    if failures:
        _write_csv(out / "failures.csv", ["strategy", "alpha", "seed", "error"], failures)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_check(out_dir, inject_fault: bool = False) -> int:
    reports = audit_suite(inject_fault=inject_fault)
    passed = all(r.passed for r in reports)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"passed": passed, "audits": [r.to_dict() for r in reports]}
    (out / "diagnostics.json").write_text(json.dumps(doc, indent=2) + "\n")
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} max_rel_error={r.max_rel_error:.3e}")
    return EXIT_OK if passed else EXIT_AUDIT


def heatmap_for_round(config: ExperimentConfig, round_index: int) -> str:
    if not 1 <= round_index <= config.rounds:
        raise InputError(f"round {round_index} outside 1..{config.rounds}")
    if config.val_frac <= 0:
        raise InputError("the heatmap needs a validation set")
    kind = NormKind(config.norm)
    if kind is NormKind.DELTA:
        kind = NormKind.L1
    captured: dict = {}

    def grab(ctx: RoundContext) -> None:
        if ctx.round == round_index:
            captured["grads"] = {k: validation_gradient(p, ctx.topology, ctx.val)[1]
                                 for k, p in sorted(ctx.client_params.items())}

    run_experiment(config, callback=grab, rounds=round_index)
    return heatmap_csv(*norm_heatmap(captured["grads"], kind))


def cmd_heatmap(config_path, round_index: int, out_path, seed: int | None = None) -> int:
    config = load_config(config_path)
    if seed is not None:
        config = replace(config, seed=seed)
    text = heatmap_for_round(config, round_index)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    return EXIT_OK


def _list(conv):
    return lambda s: [conv(v) for v in s.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedvg", description="Federated learning simulator with validation-gradient weighting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("config")
    run.add_argument("--out", required=True)
    run.add_argument("--seed", type=int)

    sweep = sub.add_parser("sweep", help="strategy x alpha x seed grid")
    sweep.add_argument("config")
    sweep.add_argument("--alphas", type=_list(float), required=True)
    sweep.add_argument("--strategies", type=_list(str), required=True)
    sweep.add_argument("--seeds", type=_list(int), required=True)
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--jobs", type=int, default=1)

    check = sub.add_parser("check", help="gradient and Fisher audits")
    check.add_argument("--out", required=True)
    check.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)

    heat = sub.add_parser("heatmap", help="per-client per-layer gradient norms at one round")
    heat.add_argument("config")
    heat.add_argument("--round", type=int, required=True, dest="round_index")
    heat.add_argument("--out", required=True)
    heat.add_argument("--seed", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, args.seed)
        if args.command == "sweep":
            return cmd_sweep(args.config, args.alphas, args.strategies, args.seeds, args.out, args.jobs)
        if args.command == "check":
            return cmd_check(args.out, args.inject_fault)
        return cmd_heatmap(args.config, args.round_index, args.out, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FedVGError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
