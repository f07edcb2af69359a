"""Command-line entry point: simulate, fit, diagnose, select, evaluate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Every output directory gets a ``manifest.json`` that records
everything needed to rerun the command; wall-clock times go to a separate
``timestamps.json`` so the manifest stays byte-identical across reruns.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .diagnostics import diagnose
from .errors import BalmError, ConfigError, DataError, NonFiniteError
from .formats import (config_to_dict, dump_json, fingerprint, layout_descriptor, load_config,
                      read_chain_stats, read_dataset, read_draws, read_truth, write_chain_stats,
                      write_dataset, write_draws, write_truth)
from .sampler import SamplerConfig, adapt_and_sample
from .selection import (auc, mask_edges, predict_edge_probs, stability_score, summarize,
                        waic_from_draws)
from .simgen import SimConfig, evaluate_fit, format_table, generate
from .types import ModelSpec

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SELECT_COLUMNS = ["M", "WAIC", "p_waic", "AUC", "Stability"]


def _write_timestamps(out: Path, start: float) -> None:
    dump_json({"started_unix": start, "finished_unix": time.time(),
               "elapsed_seconds": time.time() - start}, out / "timestamps.json")


def _sampler_config(args) -> SamplerConfig:
    cfg = load_config(args.sampler, SamplerConfig) if args.sampler else SamplerConfig()
    overrides = {"seed": args.seed, "chains": args.chains,
                 "warmup_iters": args.warmup, "sampling_iters": args.samples}
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def _fit_report(draws) -> str:
    lines = [
        f"chains = {draws.chains}",
        f"draws_per_chain = {draws.draws_per_chain}",
        f"divergences = {draws.n_divergent}",
        f"divergence_fraction = {draws.divergence_fraction:.6g}",
        f"unreliable = {str(draws.unreliable).lower()}",
        f"max_tree_depth_hits = {int((draws.depth >= draws.max_tree_depth).sum())}",
    ]
    for c in range(draws.chains):
        lines.append(f"chain{c}.step_size = {draws.step_size[c]:.6g}")
        lines.append(f"chain{c}.mean_accept_stat = {np.mean(draws.accept_stat[c]):.6g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(config_path, out_dir, seed: Optional[int] = None,
                 mask_fraction: Optional[float] = None) -> Path:
    start = time.time()
    cfg = load_config(config_path, SimConfig, required=("n", "L", "M", "K"))
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if mask_fraction is not None:
        cfg = replace(cfg, mask_fraction=mask_fraction)
    data, truth = generate(cfg)
    out = Path(out_dir)
    write_dataset(out, data, extra={
        "command": "simulate",
        "generator": config_to_dict(cfg),
        "realized_density": data.density,
        "software_version": __version__,
        "truth": "truth",
    })
    write_truth(out / "truth", truth)
    _write_timestamps(out, start)
    return out


def cmd_fit(data_dir, spec_path, out_dir, sampler: Optional[SamplerConfig] = None,
            threads: int = 1):
    start = time.time()
    spec = load_config(spec_path, ModelSpec)
    sampler = sampler or SamplerConfig()
    data, _ = read_dataset(data_dir)
    spec.check_data(data)
    draws = adapt_and_sample(data, spec, sampler, threads=threads)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_draws(out / "draws.csv", draws)
    write_chain_stats(out / "chain_stats.csv", draws)
    report = _fit_report(draws)
    (out / "fit_report.txt").write_text(report, encoding="utf-8")
    dump_json({
        "command": "fit",
        "data_dir": str(data_dir),
        "data_fingerprint": fingerprint(data_dir),
        "spec": config_to_dict(spec),
        "sampler": config_to_dict(sampler),
        "seed": sampler.seed,
        "threads": threads,
        "layout": layout_descriptor(draws.layout),
        "unreliable": draws.unreliable,
        "software_version": __version__,
    }, out / "manifest.json")
    _write_timestamps(out, start)
    return draws, report


def load_fit(draws_dir):
    root = Path(draws_dir)
    stats = root / "chain_stats.csv"
    step, mass = read_chain_stats(stats) if stats.exists() else (None, None)
    return read_draws(root / "draws.csv", step, mass)


def cmd_diagnose(draws_dir, out_path=None) -> str:
    draws = load_fit(draws_dir)
    text = diagnose(draws).to_text()
    if out_path:
        Path(out_path).write_text(text, encoding="utf-8")
    return text


def cmd_evaluate(draws_dir, data_dir, out_path=None) -> str:
    draws = load_fit(draws_dir)
    data, manifest = read_dataset(data_dir)
    draws.covariates = data.covariates
    truth_dir = Path(data_dir) / manifest.get("truth", "truth")
    if not truth_dir.exists():
        raise DataError(f"no ground truth directory at {truth_dir}")
    truth = read_truth(truth_dir)
    if truth.templates.Q.shape[1] != data.P or truth.W.shape[0] != data.L:
        raise DataError("ground truth does not match the dataset dimensions")
    if draws.layout is not None and draws.layout.M != truth.templates.M:
        raise DataError(f"fit has M={draws.layout.M} but truth has M={truth.templates.M}")
    metrics = evaluate_fit(draws, data, truth)
    text = format_table([metrics], list(metrics))
    if out_path:
        Path(out_path).write_text(text, encoding="utf-8")
    return text


def _derived_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, np.uint64)[0])


def cmd_select(data_dir, spec_path, out_dir, grid, runs_per_m: int = 3,
               mask_fraction: float = 0.15, sampler: Optional[SamplerConfig] = None,
               threads: int = 1) -> str:
    """Per-M table of WAIC, held-out AUC and consensus stability."""
    start = time.time()
    if runs_per_m < 2:
        raise ConfigError("runs-per-m must be at least 2 for stability")
    if not grid:
        raise ConfigError("empty grid")
    base = load_config(spec_path, ModelSpec)
    sampler = sampler or SamplerConfig()
    data, _ = read_dataset(data_dir)
    rows = []
    for M in grid:
        spec = replace(base, M=int(M))
        spec.check_data(data)
        runs = []
        for r in range(runs_per_m):
            cfg = replace(sampler, seed=_derived_seed(sampler.seed, M, r))
            runs.append(adapt_and_sample(data, spec, cfg, threads=threads))
        crit = waic_from_draws(data, runs[0], spec)
        stability = stability_score([summarize(d).templates for d in runs])
        masked, heldout = mask_edges(data, mask_fraction, _derived_seed(sampler.seed, M, 10**6))
        cfg = replace(sampler, seed=_derived_seed(sampler.seed, M, 10**6 + 1))
        fit = adapt_and_sample(masked, spec, cfg, threads=threads)
        labels = data.Z[heldout[:, 0], heldout[:, 1]]
        held_auc = (auc(predict_edge_probs(fit, heldout), labels)
                    if 0 < labels.sum() < labels.size else float("nan"))
        rows.append({"M": int(M), "WAIC": crit.waic, "p_waic": crit.p_waic,
                     "AUC": held_auc, "Stability": stability})
    text = format_table(rows, SELECT_COLUMNS)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "selection.tsv").write_text(text, encoding="utf-8")
    dump_json({
        "command": "select",
        "data_dir": str(data_dir),
        "data_fingerprint": fingerprint(data_dir),
        "spec": config_to_dict(base),
        "grid": [int(m) for m in grid],
        "runs_per_m": runs_per_m,
        "mask_fraction": mask_fraction,
        "sampler": config_to_dict(sampler),
        "threads": threads,
        "software_version": __version__,
    }, out / "manifest.json")
    _write_timestamps(out, start)
    return text


# ---------------------------------------------------------------------------
# argument parsing


def _parse_grid(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError("grid must list positive integers, e.g. 2,3,4 or 2-6")
    return out


def _sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sampler", help="sampler config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--warmup", type=int, help="warm-up iterations per chain")
    p.add_argument("--samples", type=int, help="post-warm-up draws per chain")
    p.add_argument("--threads", type=int, default=1, help="worker processes for chains")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="balm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset directory")
    p.add_argument("config")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--mask-fraction", type=float)

    p = sub.add_parser("fit", help="run adaptive NUTS on a dataset")
    p.add_argument("data_dir")
    p.add_argument("spec")
    p.add_argument("out_dir")
    _sampler_flags(p)

    p = sub.add_parser("diagnose", help="convergence report for a fit directory")
    p.add_argument("draws_dir")
    p.add_argument("--out")

    p = sub.add_parser("select", help="compare template counts")
    p.add_argument("data_dir")
    p.add_argument("spec")
    p.add_argument("out_dir")
    p.add_argument("--grid", type=_parse_grid, default=[2, 3, 4, 5, 6])
    p.add_argument("--runs-per-m", type=int, default=3)
    p.add_argument("--mask-fraction", type=float, default=0.15)
    _sampler_flags(p)

    p = sub.add_parser("evaluate", help="recovery metrics against ground truth")
    p.add_argument("draws_dir")
    p.add_argument("data_dir", help="simulated dataset directory with a truth/ subdirectory")
    p.add_argument("--out")
    return parser


def _run(args) -> int:
    if args.command == "simulate":
        out = cmd_simulate(args.config, args.out_dir, args.seed, args.mask_fraction)
        print(f"wrote dataset to {out}")
    elif args.command == "fit":
        if args.threads < 1:
            raise ConfigError("threads must be >= 1")
        _, report = cmd_fit(args.data_dir, args.spec, args.out_dir,
                            _sampler_config(args), args.threads)
        print(report, end="")
    elif args.command == "diagnose":
        print(cmd_diagnose(args.draws_dir, args.out), end="")
    elif args.command == "select":
        if args.threads < 1:
            raise ConfigError("threads must be >= 1")
        print(cmd_select(args.data_dir, args.spec, args.out_dir, args.grid, args.runs_per_m,
                         args.mask_fraction, _sampler_config(args), args.threads), end="")
    elif args.command == "evaluate":
        print(cmd_evaluate(args.draws_dir, args.data_dir, args.out), end="")
    return EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BalmError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
