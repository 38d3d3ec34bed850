"""Comparison tables and vector figures built from persisted run directories only."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from .harness import read_csv
from .metrics import AugmentationScore, RunScore, SCORE_FIELDS, compare_runs, format_report
from .pkpd import DoseHistory, PatientModel, file_hash, simulate_bis

# panel order follows the usual presentation: reference first, then by family
PANEL_ORDER = ("ground truth", "vanilla-saturating", "vanilla-nonsaturating", "lsgan", "wgan",
               "vaegan", "acgan", "acvae", "acgan-entropy")
PANEL_SAMPLES = 3


class MissingArtifact(FileNotFoundError):
    pass


def require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing run artifact: {path}")
    return path


@dataclass
class RunView:
    """What the report needs from one completed run directory."""

    run_dir: Path
    manifest: dict
    manifest_hash: str
    final: dict  # last metrics.csv row
    probe: dict  # final probe dump arrays
    real: dict  # held-out real probe arrays

    @property
    def label(self) -> str:
        return self.manifest["label"]

    @property
    def seed(self) -> int:
        return int(self.manifest["train"]["seed"])

    @property
    def model(self) -> PatientModel:
        return PatientModel.from_dict(self.manifest["patient_model"])

    def score(self) -> AugmentationScore:
        return AugmentationScore(**{k: float(self.final[k]) for k in SCORE_FIELDS})


def final_probe_path(run_dir: Path) -> Path:
    dumps = sorted(require(run_dir / "probe").glob("step_*.bin"))
    if not dumps:
        raise MissingArtifact(f"missing run artifact: {run_dir / 'probe' / 'step_*.bin'}")
    return dumps[-1]


def load_run(run_dir) -> RunView:
    run_dir = Path(run_dir)
    mpath = require(run_dir / "manifest.json")
    manifest = json.loads(mpath.read_text())
    rows = read_csv(require(run_dir / "metrics.csv"))
    if not rows:
        raise MissingArtifact(f"missing run artifact: no rows in {run_dir / 'metrics.csv'}")
    probe, _ = container.read_container(final_probe_path(run_dir), kind="probe")
    real, _ = container.read_container(require(run_dir / "probe" / "real.bin"), kind="probe")
    return RunView(run_dir, manifest, file_hash(mpath), rows[-1], probe, real)


def ranking(views: list[RunView]) -> str | None:
    """CSV comparison table, or None for a single run."""
    if len(views) < 2:
        return None
    runs = [RunScore(v.label, v.seed, v.manifest["dataset_hash"], v.score(),
                     int(v.manifest["train"]["probe_seed"])) for v in views]
    return format_report(compare_runs(runs))


def _panel_key(label: str):
    return (PANEL_ORDER.index(label) if label in PANEL_ORDER else len(PANEL_ORDER), label)


def panels(views: list[RunView], with_ground_truth: bool) -> list[tuple[str, np.ndarray, np.ndarray, PatientModel]]:
    """(title, doses (n, 2, T), covariates, model) per panel; the lowest seed represents a variant."""
    chosen: dict[str, RunView] = {}
    for v in sorted(views, key=lambda v: (v.label, v.seed)):
        chosen.setdefault(v.label, v)
    out = []
    if with_ground_truth and views:
        ref = min(views, key=lambda v: (v.label, v.seed))
        out.append(("ground truth", ref.real["doses"][:PANEL_SAMPLES],
                    ref.real["covariates"][:PANEL_SAMPLES], ref.model))
    for label in sorted(chosen, key=_panel_key):
        v = chosen[label]
        out.append((label, v.probe["doses"][:PANEL_SAMPLES], v.probe["covariates"][:PANEL_SAMPLES],
                    v.model))
    return out


def row_layout(n: int) -> list[int]:
    """Panels per row, at most three, with the shorter row on top (five gives 2 + 3)."""
    rows = max(1, math.ceil(n / 3))
    first = n - 3 * (rows - 1)
    return [first] + [3] * (rows - 1)


def write_figure(path: Path, panel_data) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "anesgan"
    plt.rcParams["svg.fonttype"] = "none"  # keep labels as searchable text
    layout = row_layout(len(panel_data))
    fig = plt.figure(figsize=(4.2 * max(layout), 5.6 * len(layout)))
    rows = fig.subfigures(len(layout), 1, squeeze=False)[:, 0]
    letters = "abcdefghijklmnopqrstuvwxyz"
    k = 0
    for row, count in zip(rows, layout):
        cells = row.subfigures(1, count, squeeze=False)[0]
        for cell in cells:
            title, doses, cov, model = panel_data[k]
            bis = simulate_bis(DoseHistory(doses[:, 0], doses[:, 1]), model, cov)
            bis = np.atleast_2d(bis)
            axes = cell.subplots(3, 1, sharex=True)
            t = np.arange(doses.shape[-1])
            for i in range(len(doses)):
                axes[0].plot(t, doses[i, 0], lw=0.8)
                axes[1].plot(t, doses[i, 1], lw=0.8)
                axes[2].plot(t, bis[i], lw=0.8)
            axes[0].set_ylabel("PPF (dose/10sec)")
            axes[1].set_ylabel("RFTN (dose/10sec)")
            axes[2].set_ylabel("BIS")
            axes[2].axhline(50.0, color="0.5", lw=0.5, ls="--")
            axes[2].set_ylim(0, 100)
            axes[2].set_xlabel("time step (10 sec)")
            cell.suptitle(f"({letters[k]}) {title}")
            k += 1
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def build_report(run_dirs, out_dir, with_ground_truth: bool = False) -> dict:
    """Write ``comparison.csv`` (two or more runs) and ``figure.svg`` into ``out_dir``."""
    views = [load_run(d) for d in run_dirs]
    if not views:
        raise ValueError("report needs at least one run directory")
    out_dir = Path(out_dir)
    for v in views:
        if out_dir.resolve() == v.run_dir.resolve() or v.run_dir.resolve() in out_dir.resolve().parents:
            raise ValueError(f"report directory {out_dir} lies inside run {v.run_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    table = ranking(views)
    if table is not None:
        (out_dir / "comparison.csv").write_text(table)
        written["comparison"] = out_dir / "comparison.csv"
    write_figure(out_dir / "figure.svg", panels(views, with_ground_truth))
    written["figure"] = out_dir / "figure.svg"
    written["manifests"] = {str(v.run_dir): v.manifest_hash for v in views}
    return written


def verify_run(run_dir, tol: float = 0.0) -> list[str]:
    """Recompute the dose/BIS statistics of every metrics row from its probe dump.

    Returns a list of mismatch descriptions (empty when the run checks out).
    """
    from .metrics import score_batch

    run_dir = Path(run_dir)
    manifest = json.loads(require(run_dir / "manifest.json").read_text())
    model = PatientModel.from_dict(manifest["patient_model"])
    rows = read_csv(require(run_dir / "metrics.csv"))
    problems = []
    for row in rows:
        step = int(row["step"])
        arrays, meta = container.read_container(
            require(run_dir / "probe" / f"step_{step:06d}.bin"), kind="probe")
        if meta["step"] != step:
            problems.append(f"probe dump for step {step} claims step {meta['step']}")
            continue
        score = score_batch(arrays["doses"], arrays["covariates"], model)
        for name in ("bis_stability", "bis_drift", "peak_score", "dose_dispersion"):
            logged = float(row[name])
            got = getattr(score, name)
            if not abs(logged - got) <= tol * max(1.0, abs(logged)):
                problems.append(f"step {step} {name}: logged {logged!r}, recomputed {got!r}")
    log = run_dir / "log.csv"
    if log.exists() and rows:
        n_log = len(read_csv(log))
        last = int(rows[-1]["step"])
        if n_log != last:
            problems.append(f"log.csv has {n_log} rows but metrics end at step {last}")
    return problems
