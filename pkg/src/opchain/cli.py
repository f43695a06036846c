"""Command-line entry point: ``opchain {simulate,train,run,bounds,report}``.

Exit codes: 0 success, 2 falsified bound, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bounds
from .experiment import (VARIANT_LABELS, VARIANTS, ExperimentConfig, build_dataset, emit_report,
                         read_results_csv, run_experiment, run_variant, simulate_to_disk,
                         summary_markdown, write_manifest)

EXIT_OK = 0
EXIT_FALSIFIED = 2
EXIT_DIVERGED = 3

log = logging.getLogger("opchain")


def _load_config(args) -> ExperimentConfig:
    data = json.loads(Path(args.config).read_text()) if args.config else {}
    if getattr(args, "seed", None) is not None:
        data["seeds"] = [args.seed]
    if getattr(args, "no_noise", False):
        data["noise"] = False
    if getattr(args, "out_dir", None):
        data["out_dir"] = args.out_dir
    return ExperimentConfig.from_dict(data)


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    root = Path(cfg.out_dir)
    for seed in cfg.seeds:
        ds = simulate_to_disk(cfg, seed, root / f"seed{seed}" / "dataset")
        print(f"seed {seed}: {ds.features.height}x{ds.features.width} pixels, "
              f"{ds.features.channels} acquisitions, flat field {ds.i0_per_bin.tolist()}")
    write_manifest(root, cfg)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    root = Path(cfg.out_dir)
    results = []
    for seed in cfg.seeds:
        ds = build_dataset(cfg, seed)
        res = run_variant(ds, args.variant, cfg, seed, root / f"seed{seed}" / args.variant, root)
        results.append(res)
        print(f"seed {seed} {VARIANT_LABELS[args.variant]}: status={res.status} "
              f"r={res.pearson_r:.4f} ssim={res.ssim:.4f}")
    emit_report(results, root)
    write_manifest(root, cfg)
    return EXIT_OK if all(r.ok for r in results) else EXIT_DIVERGED


def cmd_run(args) -> int:
    cfg = _load_config(args)
    results, _ = run_experiment(cfg)
    print(summary_markdown(results), end="")
    return EXIT_OK if all(r.ok for r in results) else EXIT_DIVERGED


def cmd_report(args) -> int:
    root = Path(args.out_dir or "results")
    results = read_results_csv(root / "results.csv")
    emit_report(results, root)
    print(summary_markdown(results), end="")
    return EXIT_OK


def cmd_bounds(args) -> int:
    out = Path(args.out_dir or "results") / "bounds"
    out.mkdir(parents=True, exist_ok=True)
    g_values = [0.5, -0.5, 1.0, -1.0, 3.0, -3.0]
    worst, _ = bounds.sweep_inequality_grid(g_values, (-10, 10), (-10, 10), args.step, out_dir=out)
    print(f"sigmoid inequality: max residual {worst:.3e} over g in {g_values}")
    seed = args.seed if args.seed is not None else 0
    reports = bounds.verify_random_pairs(args.pairs, args.samples, seed=seed)
    rows = []
    falsified = worst > 1e-12
    for k, reps in enumerate(reports):
        falsified |= any(r.falsified for r in reps.values())
        falsified |= not (reps["F_u"].theoretical_bound <= reps["F"].theoretical_bound
                          and reps["F_g"].theoretical_bound <= reps["F"].theoretical_bound)
        rows.append({"pair_seed": seed + k, **{lab: r.to_dict() for lab, r in reps.items()}})
    summary = {
        "max_sigmoid_residual": worst,
        "pairs": args.pairs,
        "samples_per_pair": args.samples,
        "falsified": bool(falsified),
        "min_margin": float(min(r.margin for reps in reports for r in reps.values())) if reports else None,
        "reports": rows,
    }
    (out / "bounds.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"{args.pairs} random pairs, {args.samples} samples each: "
          f"min margin {summary['min_margin']:.3e}, falsified={summary['falsified']}")
    write_manifest(out)
    return EXIT_FALSIFIED if falsified else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opchain", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, variant=False):
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
        p.add_argument("--out-dir", help="output directory (default: results)")
        p.add_argument("--no-noise", action="store_true", help="disable Poisson noise")
        if variant:
            p.add_argument("--variant", choices=VARIANTS, required=True)

    common(sub.add_parser("simulate", help="simulate datasets only"))
    common(sub.add_parser("train", help="train and evaluate one variant"), variant=True)
    common(sub.add_parser("run", help="full four-variant study"))
    p = sub.add_parser("bounds", help="sigmoid inequality sweep and random-pair bound checks")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--pairs", type=int, default=50)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--step", type=float, default=0.05)
    p = sub.add_parser("report", help="re-aggregate results.csv into summary.md")
    p.add_argument("--out-dir")
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "run": cmd_run,
    "bounds": cmd_bounds,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", under="ignore")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
