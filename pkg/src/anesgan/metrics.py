"""Numeric scores for augmented dose histories and cross-run comparison."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np

from .pkpd import DoseHistory, PatientModel, simulate_bis

INDUCTION_STEPS = 12  # first 2 minutes at 10 s per step
SCORE_FIELDS = ("bis_stability", "bis_drift", "peak_score", "dose_dispersion", "d_accuracy")


@dataclass(frozen=True)
class AugmentationScore:
    bis_stability: float
    bis_drift: float
    peak_score: float
    dose_dispersion: float
    d_accuracy: float = math.nan  # nan when no discriminator was supplied

    def __post_init__(self):
        if self.bis_stability < 0 or self.peak_score < 0:
            raise ValueError("bis_stability and peak_score must be non-negative")
        if not math.isnan(self.d_accuracy) and not 0.0 <= self.d_accuracy <= 1.0:
            raise ValueError("d_accuracy must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def default_window(T: int) -> tuple[int, int]:
    return 15, int(round(0.9 * T))


def _slope(y: np.ndarray) -> np.ndarray:
    """Least-squares slope per row of ``y`` against 0..n-1."""
    t = np.arange(y.shape[-1], dtype=np.float64)
    tc = t - t.mean()
    return (y - y.mean(axis=-1, keepdims=True)) @ tc / np.dot(tc, tc)


def discriminator_accuracy(s_real, s_fake, mode: str = "prob", linear_threshold: float = 0.5) -> float:
    """Balanced accuracy of calling real samples real and generated samples fake.

    Probabilistic heads threshold at 0.5, least-squares heads at the label
    midpoint, critics at the midpoint of the two mean scores.
    """
    s_real, s_fake = np.asarray(s_real), np.asarray(s_fake)
    if mode == "prob":
        thr = 0.5
    elif mode == "linear":
        thr = linear_threshold
    else:
        thr = 0.5 * (s_real.mean() + s_fake.mean())
    return 0.5 * (float(np.mean(s_real > thr)) + float(np.mean(s_fake < thr)))


def score_bis(bis: np.ndarray, doses: np.ndarray, window: tuple[int, int],
              d_accuracy: float = math.nan) -> AugmentationScore:
    """Aggregate statistics from precomputed BIS ``(B, T)`` and doses ``(B, 2, T)``."""
    lo, hi = window
    wb = bis[:, lo:hi]
    ppf = doses[:, 0, :]
    maint = ppf[:, lo:hi]
    m_mean = maint.mean(axis=1)
    peak = ppf[:, :INDUCTION_STEPS].max(axis=1)
    safe = np.where(m_mean > 0, m_mean, 1.0)
    peak_score = np.where(m_mean > 0, peak / safe, 0.0)
    dispersion = np.where(m_mean > 0, maint.std(axis=1) / safe, 0.0)
    return AugmentationScore(
        bis_stability=float(np.mean(np.abs(wb - 50.0))),
        bis_drift=float(np.mean(_slope(wb))),
        peak_score=float(np.mean(peak_score)),
        dose_dispersion=float(np.mean(dispersion)),
        d_accuracy=float(d_accuracy),
    )


def score_batch(generated, covariates, model: PatientModel, window: tuple[int, int] | None = None,
                d_accuracy: float = math.nan, inner_dt: float = 1.0) -> AugmentationScore:
    """Simulate BIS for each generated history and average the five statistics.

    ``generated`` is ``(B, 2, T)`` in physical dose units; ``covariates`` are
    raw ``(B, 4)`` (age, weight, height, sex) or ``None`` for the reference
    patient. Peak score and dispersion use the propofol channel.
    """
    x = np.asarray(generated, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] == 0 or x.shape[1] != 2:
        raise ValueError(f"generated must be a non-empty (B, 2, T) array, got {x.shape}")
    T = x.shape[2]
    window = window or default_window(T)
    lo, hi = window
    if not (INDUCTION_STEPS <= lo < hi <= T):
        raise ValueError(f"maintenance window {window} outside [{INDUCTION_STEPS}, {T}]")
    bis = simulate_bis(DoseHistory(x[:, 0], x[:, 1]), model, covariates, inner_dt=inner_dt)
    return score_bis(bis, x, window, d_accuracy)


# -- comparison -------------------------------------------------------------------------

@dataclass(frozen=True)
class RunScore:
    label: str
    seed: int
    dataset_hash: str
    score: AugmentationScore
    probe_seed: int = 0


REPORT_HEADER = ("rank", "variant", "seed", "n_seeds", *SCORE_FIELDS,
                 "variant_mean_bis_stability", "variant_spread_bis_stability")


def compare_runs(runs: list[RunScore]) -> list[dict]:
    """Rank variants by mean bis_stability (ties broken by name); one row per (variant, seed).

    ``variant_spread_bis_stability`` is max - min over that variant's seeds.
    """
    if len(runs) < 2:
        raise ValueError("compare_runs needs at least two runs")
    hashes = {r.dataset_hash for r in runs}
    if len(hashes) > 1:
        raise ValueError(f"runs use different datasets ({sorted(hashes)}); not comparable")
    if len({r.probe_seed for r in runs}) > 1:
        raise ValueError("runs use different probe seeds; not comparable")
    by_variant: dict[str, list[RunScore]] = {}
    for r in runs:
        by_variant.setdefault(r.label, []).append(r)
    summary = {}
    for label, rs in by_variant.items():
        vals = [r.score.bis_stability for r in rs]
        summary[label] = (float(np.mean(vals)), float(max(vals) - min(vals)))
    order = sorted(by_variant, key=lambda k: (summary[k][0], k))
    rows = []
    for rank, label in enumerate(order, start=1):
        for r in sorted(by_variant[label], key=lambda r: r.seed):
            row = {"rank": rank, "variant": label, "seed": r.seed,
                   "n_seeds": len(by_variant[label])}
            row.update(r.score.to_dict())
            row["variant_mean_bis_stability"] = summary[label][0]
            row["variant_spread_bis_stability"] = summary[label][1]
            rows.append(row)
    return rows


def format_report(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for row in rows:
        w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in REPORT_HEADER])
    return buf.getvalue()
