"""Command-line entry point: ``anesgan synth | train | report | verify``.

Settings come from the YAML config file, then ``--set key=value`` overrides,
then the dedicated flags (``--variant``, ``--seed``, ``--steps``, ``--out``),
later sources winning. The output root falls back to ``$ANESGAN_OUT`` and then
``./anesgan-out``.

Exit codes: 0 success, 1 verify mismatch, 2 config error, 3 numerical halt,
4 missing artifact.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .container import ContainerError
from .harness import NumericalHalt, run_experiment
from .losses import VARIANTS, VariantConfig
from .pkpd import file_hash, load_dataset, save_dataset, synth_dataset
from .report import MissingArtifact, build_report, verify_run

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG, EXIT_HALT, EXIT_MISSING = 0, 1, 2, 3, 4


def _out(msg: str) -> None:
    print(msg, flush=True)


def _err(msg: str) -> None:
    print(f"anesgan: {msg}", file=sys.stderr, flush=True)


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.set or [])
    training = cfg.training
    if getattr(args, "steps", None) is not None:
        try:
            training = replace(training, steps=args.steps)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    seeds = tuple(args.seed) if getattr(args, "seed", None) else cfg.seeds
    return replace(cfg, training=training, seeds=seeds)


def _dataset_path(args, cfg: ExperimentConfig) -> Path:
    if getattr(args, "dataset", None):
        return Path(args.dataset)
    return cfg.output_dir(args.out) / "dataset.bin"


# -- synth ---------------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _experiment(args)
    d = cfg.dataset
    path = _dataset_path(args, cfg)
    ds = synth_dataset(d.patients, d.T, d.seed, d.profile_config(), d.patient_model(), d.n_families)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = save_dataset(path, ds)
    _out(f"dataset {digest} {path} ({len(ds)} patients, T={ds.T})")
    return EXIT_OK


# -- train ---------------------------------------------------------------------------------

def _run_dir(root: Path, label: str, seed: int) -> Path:
    return root / "runs" / f"{label}_seed{seed}"


def _train_one(job: dict) -> tuple[int, str]:
    cfg: ExperimentConfig = job["cfg"]
    dataset = load_dataset(job["dataset"])
    run_dir = Path(job["run_dir"])
    train = replace(cfg.training, seed=job["seed"])
    materialized = cfg.to_dict()
    materialized["training"].update(seed=job["seed"], seeds=list(cfg.seeds))
    try:
        run_experiment(dataset, cfg.variant, train, run_dir, job["hash"], job["label"],
                       job["registry"], extra_manifest={"config": materialized})
    except NumericalHalt as halt:
        return EXIT_HALT, f"numerical halt in {run_dir}: {halt} (see halt.json)"
    mhash = file_hash(run_dir / "manifest.json")
    return EXIT_OK, f"run {run_dir} manifest {mhash}"


def cmd_train(args) -> int:
    cfg = _experiment(args)
    names = args.variant or [cfg.variant.variant]
    bad = [n for n in names if n not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown variant(s) {', '.join(bad)}; valid: {', '.join(VARIANTS)}")
    if args.label and len(names) > 1:
        raise ConfigError("--label applies to a single variant")
    ds_path = _dataset_path(args, cfg)
    if not ds_path.exists():
        raise MissingArtifact(f"dataset not found: {ds_path} (run `anesgan synth` first)")
    digest = file_hash(ds_path)
    _out(f"dataset {digest} {ds_path}")
    root = cfg.output_dir(args.out)
    jobs = []
    for name in names:
        try:
            variant = VariantConfig.from_dict({**cfg.variant.to_dict(), "variant": name})
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        vcfg = replace(cfg, variant=variant)
        label = args.label or name
        for seed in vcfg.seeds:
            run_dir = _run_dir(root, label, seed)
            if run_dir.exists():
                raise ConfigError(f"run directory {run_dir} already exists; refusing to modify it")
            jobs.append({"cfg": vcfg, "dataset": str(ds_path), "hash": digest, "label": label,
                         "seed": int(seed), "run_dir": str(run_dir),
                         "registry": root / "registry.jsonl"})
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]
    code = EXIT_OK
    for rc, msg in results:
        (_out if rc == EXIT_OK else _err)(msg)
        code = max(code, rc)
    return code


# -- report / verify -------------------------------------------------------------------------

def cmd_report(args) -> int:
    out = Path(args.out) if args.out else ExperimentConfig().output_dir(None) / "report"
    try:
        written = build_report(args.runs, out, with_ground_truth=args.with_ground_truth)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for run_dir, mhash in written["manifests"].items():
        _out(f"run {run_dir} manifest {mhash}")
    if "comparison" in written:
        _out(f"comparison {written['comparison']}")
    _out(f"figure {written['figure']}")
    return EXIT_OK


def cmd_verify(args) -> int:
    code = EXIT_OK
    for run_dir in args.runs:
        run_dir = Path(run_dir)
        problems = verify_run(run_dir)
        mhash = file_hash(run_dir / "manifest.json")
        if problems:
            for p in problems:
                _err(f"{run_dir}: {p}")
            _out(f"FAIL {run_dir} manifest {mhash}")
            code = EXIT_MISMATCH
        else:
            _out(f"ok {run_dir} manifest {mhash}")
    return code


# -- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anesgan", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. training.batch=64")
        sp.add_argument("--out", help="output root (default $ANESGAN_OUT or ./anesgan-out)")
        sp.add_argument("--dataset", help="dataset file (default <out>/dataset.bin)")

    sp = sub.add_parser("synth", help="synthesize the PK-PD ground-truth dataset")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train one or more (variant, seed) runs")
    common(sp)
    sp.add_argument("--variant", action="append", help=f"one of: {', '.join(VARIANTS)}")
    sp.add_argument("--seed", action="append", type=int, help="training seed (repeatable)")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--label", help="run label (default: variant name)")
    sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("report", help="comparison table and figure from run directories")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--out", help="report directory (default <out root>/report)")
    sp.add_argument("--with-ground-truth", action="store_true",
                    help="add the held-out real probe as the first panel")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("verify", help="recompute logged metrics from the probe dumps")
    sp.add_argument("runs", nargs="+")
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    except (MissingArtifact, FileNotFoundError, ContainerError) as exc:
        _err(str(exc))
        return EXIT_MISSING
    except NumericalHalt as exc:
        _err(str(exc))
        return EXIT_HALT


if __name__ == "__main__":
    sys.exit(main())
