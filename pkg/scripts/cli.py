#!/usr/bin/env python3
"""
density-match command line.

Usage:
    densitymatch gen-data --out data/desk_source --count 200
    densitymatch gen-data --out data/desk_target --count 100 --shift texture --domain target --seed 1
    densitymatch train --config runs/jsd.cfg
    densitymatch eval --checkpoint runs/x/checkpoints/split0.dmck --manifest data/desk_target/manifest.tsv
    densitymatch matrix --preset desk --workers 4
    densitymatch ablate --axis bw-frequency --preset smoke
    densitymatch multisite --protocol multi-source --preset smoke
    densitymatch gradcheck

Exit codes: 0 ok, 1 usage error, 2 numerical failure, 3 I/O error.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import pandas as pd

from engine import settings
from engine.config import (
    PRESETS, DivergenceConfig, DivergenceKind, ExperimentConfig, RunSpec, load_run_spec, preset_config,
)
from engine.errors import DensityMatchError, GradcheckFailure, UsageError, exit_code_for
from engine.trainer import fit
from sources.dataset import Dataset
from sources.external import export, load_external
from sources.synthetic import SHIFT_PRESETS, SceneSpec, SyntheticSource, desk_domains, shift_preset
from validation.ablation import AXES, AblationGrid, run_ablation, standard_grid
from validation.evaluate import evaluate
from validation.gradcheck_suite import SUITE, run_suite
from validation.matrix import DEFAULT_FRACTIONS, NO_ADAPT, run_matrix
from validation.multisite import PROTOCOLS, run_multisite
from warehouse.loader import write_table
from warehouse.schema import EVAL_COLUMNS, GRADCHECK_COLUMNS

logger = logging.getLogger("densitymatch")


class _Parser(argparse.ArgumentParser):
    """argparse, but bad usage raises UsageError (exit 1) instead of exiting with 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ─── SHARED HELPERS ───

def _experiment(args) -> RunSpec:
    if getattr(args, "config", None):
        return load_run_spec(args.config)
    return RunSpec(config=preset_config(args.preset), preset=args.preset)


def _domains(spec: RunSpec, args) -> tuple[Dataset, Dataset]:
    """Source/target from the config's manifests, or the cached synthetic desk pair."""
    cfg = spec.config
    if spec.source_manifest or spec.target_manifest:
        if not (spec.source_manifest and spec.target_manifest):
            raise UsageError("give both source_manifest and target_manifest, or neither")
        return (
            load_external(spec.source_manifest, cfg.unet.num_classes, "source"),
            load_external(spec.target_manifest, cfg.unet.num_classes, "target"),
        )
    return desk_domains(args.source_count, args.target_count, cfg.unet.input_size, seed=args.data_seed,
                        source=SyntheticSource())


def _method(name: str, weight: float, mmd_sigma: float) -> DivergenceConfig:
    kind = DivergenceKind(name)
    if kind is DivergenceKind.NONE:
        return NO_ADAPT
    return DivergenceConfig(kind=kind, weight=weight, mmd_constant_sigma=mmd_sigma)


def _methods(args, cfg: ExperimentConfig) -> list[DivergenceConfig]:
    return [_method(m, cfg.divergence.weight, cfg.divergence.mmd_constant_sigma) for m in args.methods]


def _print_table(title: str, df: pd.DataFrame):
    print(f"\n{'=' * 60}\n  {title}\n{'=' * 60}")
    print(df.to_string(index=False))


# ─── SUBCOMMANDS ───

def cmd_gen_data(args) -> int:
    scene = SceneSpec(image_size=args.size, num_blobs=tuple(args.blobs), radius=tuple(args.radius),
                      seed=args.seed)
    shift = shift_preset(args.shift)
    overrides = {k: v for k, v in {
        "intensity_gain": args.gain, "intensity_offset": args.offset, "noise_std": args.noise,
        "blur_radius": args.blur, "texture_freq": args.texture_freq, "texture_amp": args.texture_amp,
    }.items() if v is not None}
    if overrides:
        shift = replace(shift, **overrides)
    dataset = SyntheticSource().fetch(scene, shift, args.count, args.domain, use_cache=not args.no_cache)
    if args.unlabeled:
        dataset = dataset.unlabeled()
    manifest = export(dataset, args.out)
    print(f"Wrote {len(dataset)} {args.domain} items → {manifest}")
    return 0


def cmd_train(args) -> int:
    spec = load_run_spec(args.config)
    source, target = _domains(spec, args)
    run_dir = args.run_dir or spec.output_dir
    artifacts = fit(spec.config, source, target, run_dir=run_dir, progress=not args.no_progress,
                    resume=args.resume)
    _print_table(f"TRAINED {spec.config.divergence.label} → {artifacts.run_dir}", artifacts.summary)
    return 0


def cmd_eval(args) -> int:
    dataset = load_external(args.manifest, args.num_classes, args.domain)
    report = evaluate(args.checkpoint, dataset, split=args.split, class_id=args.class_id, workers=args.workers)
    if args.out:
        write_table(report.per_image, args.out, EVAL_COLUMNS)
    _print_table(f"DICE ({dataset.domain_tag}, checkpoint {report.fingerprint})", report.summary())
    return 0


def cmd_matrix(args) -> int:
    spec = _experiment(args)
    source, target = _domains(spec, args)
    result = run_matrix(_methods(args, spec.config), args.fractions, spec.config, source, target,
                        out_dir=args.out, workers=args.workers, progress=not args.no_progress)
    _print_table("TARGET DICE (mean ± std over splits)", result.pivot)
    if not result.sign_tests.empty:
        _print_table("PAIRED SIGN TEST vs No Adapt", result.sign_tests)
    return 0


def cmd_ablate(args) -> int:
    spec = _experiment(args)
    source, target = _domains(spec, args)
    if args.values:
        cast = str if args.axis == "feature-space" else float if args.axis == "target-fraction" else int
        grid = AblationGrid(args.axis, [cast(v) for v in args.values], spec.config)
    else:
        grid = standard_grid(args.axis, spec.config)
    result = run_ablation(grid, source, target, out_dir=args.out, workers=args.workers,
                          progress=not args.no_progress)
    _print_table(f"ABLATION: {args.axis}", result.table)
    return 0


def cmd_multisite(args) -> int:
    spec = _experiment(args)
    result = run_multisite(args.protocol, _methods(args, spec.config), spec.config,
                           per_site=args.per_site, seed=args.data_seed, out_dir=args.out,
                           progress=not args.no_progress)
    _print_table(f"MULTISITE {args.protocol} (mean Dice)", result.table)
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(cases=args.cases, seed=args.seed, only=args.ops)
    table = pd.DataFrame([
        {"op": r.name, "cases": r.cases, "max_rel_error": r.max_rel_error,
         "tolerance": r.tolerance, "passed": r.passed}
        for r in results
    ], columns=GRADCHECK_COLUMNS)
    if args.out:
        write_table(table, args.out, GRADCHECK_COLUMNS)
    _print_table("GRADIENT CHECK", table)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise GradcheckFailure(f"gradient check failed for: {', '.join(failed)}")
    return 0


# ─── PARSER ───

def _add_experiment_args(p: argparse.ArgumentParser, with_data: bool = True):
    p.add_argument("--preset", default="desk", choices=list(PRESETS), help="named experiment preset")
    p.add_argument("--config", type=Path, help="flat key=value config file (overrides --preset)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--workers", type=int, default=1, help="cells to run in parallel processes")
    p.add_argument("--no-progress", action="store_true")
    if with_data:
        _add_data_args(p)


def _add_data_args(p: argparse.ArgumentParser):
    p.add_argument("--source-count", type=int, default=200)
    p.add_argument("--target-count", type=int, default=100)
    p.add_argument("--data-seed", type=int, default=0)


def _add_methods(p: argparse.ArgumentParser):
    p.add_argument("--methods", nargs="+", default=["none", "mmd-c", "mmd-b", "jsd"],
                   choices=[k.value for k in DivergenceKind])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="densitymatch", description="Density-matching domain adaptation for segmentation")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic dataset to PGM + manifest")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blobs", type=int, nargs=2, default=[2, 5], metavar=("MIN", "MAX"))
    p.add_argument("--radius", type=float, nargs=2, default=[5.0, 12.0], metavar=("MIN", "MAX"))
    p.add_argument("--domain", default="source", choices=["source", "target", "heldout"])
    p.add_argument("--shift", default="identity", choices=list(SHIFT_PRESETS))
    p.add_argument("--gain", type=float)
    p.add_argument("--offset", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--blur", type=int)
    p.add_argument("--texture-freq", type=float)
    p.add_argument("--texture-amp", type=float)
    p.add_argument("--unlabeled", action="store_true", help="export images only")
    p.add_argument("--no-cache", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train every split of one config")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--run-dir", type=Path)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--no-progress", action="store_true")
    _add_data_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Dice of a checkpoint on a manifest dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--domain", default="target", choices=["source", "target", "heldout"])
    p.add_argument("--num-classes", type=int, default=2)
    p.add_argument("--class-id", type=int, default=1)
    p.add_argument("--split", type=int, default=0)
    p.add_argument("--workers", type=int, default=1, help="evaluation threads")
    p.add_argument("--out", type=Path, help="per-image Dice CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("matrix", help="methods × target fractions comparison")
    _add_experiment_args(p)
    _add_methods(p)
    p.add_argument("--fractions", type=float, nargs="+", default=list(DEFAULT_FRACTIONS))
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("ablate", help="sweep one knob of the method")
    _add_experiment_args(p)
    p.add_argument("--axis", required=True, choices=list(AXES))
    p.add_argument("--values", nargs="+", help="override the standard grid")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("multisite", help="multi-site protocol with a held-out site")
    _add_experiment_args(p, with_data=False)
    _add_methods(p)
    p.add_argument("--protocol", default="multi-source", choices=list(PROTOCOLS))
    p.add_argument("--per-site", type=int, default=60)
    p.add_argument("--data-seed", type=int, default=0)
    p.set_defaults(func=cmd_multisite)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="results CSV")
    p.add_argument("--ops", nargs="+", choices=list(SUITE), help="check only these ops")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        settings.configure_logging(args.verbose)
        return args.func(args)
    except (DensityMatchError, OSError, ValueError) as e:
        logger.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
