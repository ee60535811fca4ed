"""Command-line harness.

Subcommands:
  run     train one experiment, writing metrics CSV/JSON, trajectory JSONL,
          and a checkpoint into the output directory
  ablate  run every method variant over a seed set, one cell directory per
          (variant, seed) plus a combined ablation.csv
  probe   flatness probe on a checkpoint
  gen     emit the benchmark dataset file for a config

All subcommands take --config (flat key=value file), --seed, and --out.
Exit code 0 on success; 1 with a one-line diagnostic otherwise.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import metrics, net, probe as probe_mod, taxdata, train
from .config import VARIANTS, ExperimentConfig, load_config
from .errors import ValidationError


def _base_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.out is not None:
        config = replace(config, out_dir=args.out)
    return config


def _run_cell(config: ExperimentConfig) -> metrics.MetricsReport:
    result = train.train(config)
    out = config.resolved_out_dir() / f"{config.variant}_seed{config.seed}"
    train.write_run_outputs(result, out)
    return result.report


def cmd_run(args) -> int:
    config = _base_config(args)
    report = _run_cell(config)
    out = config.resolved_out_dir() / f"{config.variant}_seed{config.seed}"
    print(
        f"{config.variant} seed={config.seed}: mAcc={report.m_acc:.2f} "
        f"mAcc*={report.m_acc_star:.2f} mF1={report.m_f1:.2f} "
        f"mF1*={report.m_f1_star:.2f} -> {out}"
    )
    return 0


def cmd_ablate(args) -> int:
    config = _base_config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    cells = [
        replace(config, variant=v, seed=s) for v in VARIANTS for s in seeds
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(pool.map(_run_cell, cells))
    else:
        reports = [_run_cell(c) for c in cells]
    out_dir = config.resolved_out_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics.write_csv(out_dir / "ablation.csv", reports)
    for r in reports:
        print(
            f"{r.variant} seed={r.seed}: mAcc={r.m_acc:.2f} mAcc*={r.m_acc_star:.2f}"
        )
    print(f"wrote {out_dir / 'ablation.csv'}")
    return 0


def cmd_probe(args) -> int:
    config = _base_config(args)
    params = net.load_checkpoint(args.checkpoint)
    dataset = taxdata.generate(config.resolved_benchmark())
    rho_list = [float(r) for r in args.rho.split(",")]
    result = probe_mod.flatness_probe(
        params, dataset, rho_list, n_samples=args.n_samples, seed=config.seed
    )
    out_dir = config.resolved_out_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "probe.json"
    out_path.write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    pairs = " ".join(
        f"F({rho:g})={f:+.4f}" for rho, f in zip(result.rho_values, result.f_rho)
    )
    print(f"base_acc={result.base_acc:.4f} {pairs} -> {out_path}")
    return 0


def cmd_gen(args) -> int:
    config = _base_config(args)
    dataset = taxdata.generate(config.resolved_benchmark())
    out_dir = config.resolved_out_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "dataset.txt"
    taxdata.save_dataset(dataset, out_path)
    print(f"wrote {out_path} ({len(dataset.class_ids)} samples)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajdist", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override run seed")
        p.add_argument("--out", default=None, help="override output directory")

    p_run = sub.add_parser("run", help="train a single experiment")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_abl = sub.add_parser("ablate", help="run all variants over a seed set")
    common(p_abl)
    p_abl.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
    p_abl.add_argument("--jobs", type=int, default=1, help="parallel cells")
    p_abl.set_defaults(func=cmd_ablate)

    p_probe = sub.add_parser("probe", help="flatness probe on a checkpoint")
    common(p_probe)
    p_probe.add_argument("--checkpoint", required=True)
    p_probe.add_argument("--rho", default="0.0,0.01,0.02,0.03,0.04,0.05")
    p_probe.add_argument("--n-samples", type=int, default=50)
    p_probe.set_defaults(func=cmd_probe)

    p_gen = sub.add_parser("gen", help="emit the benchmark dataset file")
    common(p_gen)
    p_gen.set_defaults(func=cmd_gen)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
