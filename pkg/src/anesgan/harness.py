"""Adversarial training loop, run directories and pathology detectors.

A run directory contains::

    manifest.json          every hyperparameter, model configs, dataset hash (written once)
    log.csv                one row per training step (LOG_FIELDS)
    metrics.csv            one row per evaluation (EVAL_FIELDS), step 0 is the baseline
    probe/step_NNNNNN.bin  generated probe doses (physical units) at each evaluation
    probe/real.bin         held-out real probe doses and covariates
    checkpoints/step_NNNNNN.ckpt   models, optimizer moments, rng state
    diagnostics.json       detector results recomputed from log.csv and probe dumps
    halt.json              only after a numerical halt: step, losses, max |gradient|
"""
from __future__ import annotations

import csv
import fcntl
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import container, losses as L
from .losses import VariantConfig
from .metrics import AugmentationScore, discriminator_accuracy, score_batch
from .nets import Discriminator, Generator, VAEGenerator, load_checkpoint, save_checkpoint
from .pkpd import Dataset, dataset_model, normalize_covariates
from .tensor import SGD, Adam, NonFiniteError, Tensor, clip_weights, no_grad

LOG_FIELDS = ("step", "d_loss", "g_loss", "d_acc", "d_grad_norm", "g_grad_norm", "s_real",
              "s_fake", "wdist", "rec", "kld")
EVAL_FIELDS = ("step", "bis_stability", "bis_drift", "peak_score", "dose_dispersion",
               "d_accuracy")


class NumericalHalt(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch: int = 32
    seed: int = 0
    hidden: tuple = (128, 128)
    z_dim: int = 16
    placement: str = "both"
    n_classes: int = 2
    g_lr: float = 2e-4
    d_lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    critic_lr: float = 5e-5
    critic_optimizer: str = "adam"
    d_steps: int = 1
    eval_every: int = 100
    checkpoint_every: int = 1000
    probe_every: int = 4  # every 4th patient is held out
    probe_size: int = 64
    probe_seed: int = 12345
    vanish_window: int = 50
    vanish_grad: float = 1e-6
    vanish_acc: float = 0.95
    collapse_ratio: float = 0.05
    nonconv_slope: float = 1e-3
    nonconv_acf: float = -0.3
    nonconv_max_lag: int = 20

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.eval_every < 1 or self.checkpoint_every < 1:
            raise ValueError("steps >= 0, batch >= 1, eval_every >= 1, checkpoint_every >= 1")
        if self.critic_optimizer not in ("sgd", "adam"):
            raise ValueError("critic_optimizer must be sgd or adam")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


# -- data plumbing ------------------------------------------------------------------

@dataclass
class Split:
    """Normalized network-facing arrays for the train and probe partitions."""

    x: np.ndarray  # (N, 2, T) normalized doses
    cov: np.ndarray  # (N, 4) normalized covariates
    cov_raw: np.ndarray  # (N, 4)
    labels: np.ndarray  # (N,)


def split_dataset(ds: Dataset, probe_every: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(len(ds))
    probe = idx[idx % probe_every == probe_every - 1] if probe_every > 1 else idx[:0]
    train = np.setdiff1d(idx, probe)
    if len(train) == 0:
        raise ValueError("dataset too small: no training records after holding out the probe")
    if len(probe) == 0:
        probe = train
    return train, probe


def dose_scales(ds: Dataset, train_idx) -> np.ndarray:
    x = ds.doses()[train_idx]
    scales = x.max(axis=(0, 2))
    return np.where(scales > 0, scales, 1.0)


def one_hot(labels, n: int) -> np.ndarray:
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), np.asarray(labels, dtype=int)] = 1.0
    return out


# -- the run ---------------------------------------------------------------------------

class TrainRun:
    """Models, optimizers, rng and the step log for one (variant, seed) pair."""

    def __init__(self, dataset: Dataset, variant: VariantConfig, train: TrainConfig,
                 dataset_hash: str = "", label: str | None = None):
        self.variant = variant
        self.train_cfg = train
        self.dataset = dataset
        self.dataset_hash = dataset_hash
        self.label = label or variant.variant
        self.patient_model = dataset_model(dataset)
        T = dataset.T
        self.T = T
        train_idx, probe_idx = split_dataset(dataset, train.probe_every)
        self.train_idx, self.probe_idx = train_idx, probe_idx[:train.probe_size]
        self.scales = dose_scales(dataset, train_idx)
        self.train = self._split(train_idx)
        self.probe = self._split(self.probe_idx)

        seed = train.seed
        self.n_classes = train.n_classes if (variant.conditional or variant.variant == "acgan-entropy") else 0
        g_classes = self.n_classes if variant.conditional else 0
        if variant.uses_vae:
            self.G = VAEGenerator(T, latent=train.z_dim, hidden=train.hidden, n_classes=g_classes,
                                  placement=train.placement, seed=seed * 2 + 1)
        else:
            self.G = Generator(T, z_dim=train.z_dim, hidden=train.hidden, n_classes=g_classes,
                               seed=seed * 2 + 1)
        self.D = Discriminator(T, hidden=train.hidden, n_classes=self.n_classes,
                               mode=variant.disc_mode, seed=seed * 2 + 2)
        betas = (train.beta1, train.beta2)
        self.opt_g = Adam(self.G.parameters(), lr=train.g_lr, betas=betas)
        if variant.variant == "wgan":
            self.opt_d = (SGD(self.D.parameters(), lr=train.critic_lr)
                          if train.critic_optimizer == "sgd"
                          else Adam(self.D.parameters(), lr=train.critic_lr, betas=betas))
        else:
            self.opt_d = Adam(self.D.parameters(), lr=train.d_lr, betas=betas)
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
        probe_rng = np.random.default_rng(train.probe_seed)
        n_probe = len(self.probe_idx)
        self.probe_z = probe_rng.standard_normal((n_probe, self.G.z_dim))
        self.probe_c = (one_hot(self.probe.labels, g_classes) if g_classes else None)
        self.step = 0
        self.records: list[dict] = []
        self.evals: list[dict] = []

    def _split(self, idx) -> Split:
        ds = self.dataset
        x = ds.doses()[idx] / self.scales[None, :, None]
        return Split(x=x, cov=normalize_covariates(ds.covariates[idx]) if len(idx) else
                     np.zeros((0, 4)), cov_raw=ds.covariates[idx], labels=ds.labels[idx])

    # -- sampling helpers --
    def sample_batch(self) -> np.ndarray:
        return self.rng.integers(0, len(self.train_idx), self.train_cfg.batch)

    def _classes(self, n: int) -> np.ndarray | None:
        if not self.variant.conditional:
            return None
        return one_hot(self.rng.integers(0, self.n_classes, n), self.n_classes)

    def _fake(self, idx: np.ndarray):
        """Generated batch for the given real indices: (x_fake, c_fake, vae_parts)."""
        x_real, cov = self.train.x[idx], self.train.cov[idx]
        n = len(idx)
        if self.variant.uses_vae:
            c = one_hot(self.train.labels[idx], self.n_classes) if self.variant.conditional else None
            eps = self.rng.standard_normal((n, self.G.latent))
            z_hat, mu, sigma, _ = self.G.encode_sample(x_real, cov, c, eps=eps)
            return self.G.decode(z_hat, cov, c), c, (mu, sigma)
        c = self._classes(n)
        z = self.rng.standard_normal((n, self.G.z_dim))
        return self.G.generate(cov, z, c), c, None

    def generate_probe(self) -> np.ndarray:
        """Physical-unit doses for the fixed probe covariates and noise."""
        with no_grad():
            x = self.G.generate(self.probe.cov, self.probe_z, self.probe_c).data
        return x * self.scales[None, :, None]

    # -- checkpoint state --
    def optimizer_state(self) -> dict:
        return {"G": self.opt_g.state_dict(), "D": self.opt_d.state_dict()}

    def rng_state(self) -> dict:
        return self.rng.bit_generator.state


def _grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def _max_abs_grad(params) -> float:
    vals = [float(np.max(np.abs(p.grad))) for p in params if p.grad is not None and p.grad.size]
    return max(vals) if vals else 0.0


def _d_loss(run: TrainRun, s_real, s_fake, p_real, p_fake, c_real, c_fake) -> Tensor:
    v = run.variant
    kind = v.variant
    if kind == "lsgan":
        return L.lsgan_d_loss(s_real, s_fake, v)
    if kind == "wgan":
        return L.wgan_critic_loss(s_real, s_fake)
    if kind in ("acgan", "acvae"):
        return L.acgan_d_loss(s_real, s_fake, p_real, p_fake, c_real, c_fake, v)
    if kind == "acgan-entropy":
        loss = L.d_loss_vanilla(s_real, s_fake)
        if v.lambda_dc:
            loss = loss + v.lambda_dc * L.entropy_class_loss(p_real, "minimize")
        return loss
    return L.d_loss_vanilla(s_real, s_fake)


def _g_loss(run: TrainRun, x_real, x_fake, s_fake, p_fake, c_fake, vae_parts) -> tuple[Tensor, dict]:
    v = run.variant
    kind = v.variant
    extra: dict = {}
    if kind == "vanilla-saturating":
        return L.g_loss_saturating(s_fake), extra
    if kind == "lsgan":
        return L.lsgan_g_loss(s_fake, v), extra
    if kind == "wgan":
        return L.wgan_g_loss(s_fake), extra
    if kind == "acgan":
        return L.acgan_g_loss(s_fake, p_fake, c_fake, v), extra
    if kind == "acgan-entropy":
        loss = L.g_loss_nonsaturating(s_fake)
        if v.lambda_gc:
            loss = loss + v.lambda_gc * L.entropy_class_loss(p_fake, v.entropy_direction)
        return loss, extra
    if kind in ("vaegan", "acvae"):
        mu, sigma = vae_parts
        rec = L.reconstruction_loss(x_real, x_fake)
        kld = L.kl_gaussian(mu, sigma)
        extra = {"rec": rec.item(), "kld": kld.item()}
        g_src = L.g_loss_nonsaturating(s_fake)
        if kind == "vaegan":
            return L.vaegan_vae_loss(g_src, rec, kld, v), extra
        return L.acvae_vae_loss(g_src, L.class_nll(p_fake, c_fake), rec, kld, v), extra
    return L.g_loss_nonsaturating(s_fake), extra


def _finite_or_halt(run: TrainRun, what: str, values: dict, params) -> None:
    if all(math.isfinite(v) for v in values.values()):
        return
    snapshot = {"step": run.step + 1, "where": what, "losses": values,
                "max_abs_grad": _max_abs_grad(params)}
    raise NumericalHalt(f"non-finite loss at step {run.step + 1} ({what})", snapshot)


def train_step(run: TrainRun, idx: np.ndarray | None = None) -> dict:
    """One discriminator phase then one generator update; appends and returns the log record."""
    v = run.variant
    D, G = run.D, run.G
    n_d = v.n_critic if v.variant == "wgan" else run.train_cfg.d_steps
    want_classes = run.n_classes > 0
    try:
        for k in range(n_d):
            batch = idx if (k == 0 and idx is not None) else run.sample_batch()
            x_real = run.train.x[batch]
            cov = run.train.cov[batch]
            c_real = one_hot(run.train.labels[batch], run.n_classes) if want_classes else None
            with no_grad():
                x_fake, c_fake, _ = run._fake(batch)
            x_fake = Tensor(x_fake.data)
            s_real, p_real = D.discriminate(x_real, cov, with_classes=want_classes)
            s_fake, p_fake = D.discriminate(x_fake, cov, with_classes=want_classes)
            d_loss = _d_loss(run, s_real, s_fake, p_real, p_fake, c_real, c_fake)
            _finite_or_halt(run, "discriminator", {"d_loss": float(d_loss.data)}, D.parameters())
            d_loss.backward()
            d_grad = _grad_norm(D.parameters())
            run.opt_d.step()
            if v.variant == "wgan":
                clip_weights(D.parameters(), v.clip)
        d_acc = discriminator_accuracy(s_real.data, s_fake.data, D.mode, 0.5 * (v.a + v.b))
        wdist = float(L.wgan_distance(s_real.data, s_fake.data).data) if v.variant == "wgan" else ""

        # generator phase: D is only read, its gradients are discarded
        gidx = batch
        x_real = run.train.x[gidx]
        cov = run.train.cov[gidx]
        x_gen, c_gen, vae_parts = run._fake(gidx)
        s_gen, p_gen = D.discriminate(x_gen, cov, with_classes=want_classes)
        g_loss, extra = _g_loss(run, x_real, x_gen, s_gen, p_gen, c_gen, vae_parts)
        _finite_or_halt(run, "generator", {"g_loss": float(g_loss.data)}, G.parameters())
        g_loss.backward()
        g_grad = _grad_norm(G.parameters())
        run.opt_g.step()
        run.opt_d.zero_grad()
    except NonFiniteError as exc:
        snapshot = {"step": run.step + 1, "where": str(exc), "losses": {},
                    "max_abs_grad": max(_max_abs_grad(D.parameters()), _max_abs_grad(G.parameters()))}
        raise NumericalHalt(f"non-finite value at step {run.step + 1}: {exc}", snapshot) from exc

    run.step += 1
    record = {"step": run.step, "d_loss": float(d_loss.data), "g_loss": float(g_loss.data),
              "d_acc": d_acc, "d_grad_norm": d_grad, "g_grad_norm": g_grad,
              "s_real": float(s_real.data.mean()), "s_fake": float(s_gen.data.mean()),
              "wdist": wdist, "rec": extra.get("rec", ""), "kld": extra.get("kld", "")}
    run.records.append(record)
    return record


# -- evaluation ------------------------------------------------------------------------

def heldout_d_accuracy(run: TrainRun, gen: np.ndarray | None = None) -> float:
    """Discriminator accuracy on the held-out real probe vs the probe generation."""
    if gen is None:
        gen = run.generate_probe()
    with no_grad():
        s_real, _ = run.D.discriminate(run.probe.x, run.probe.cov, with_classes=False)
        s_fake, _ = run.D.discriminate(gen / run.scales[None, :, None], run.probe.cov,
                                       with_classes=False)
    return discriminator_accuracy(s_real.data, s_fake.data, run.D.mode,
                                  0.5 * (run.variant.a + run.variant.b))


def evaluate(run: TrainRun) -> tuple[dict, np.ndarray]:
    """Score the probe generation; returns (eval record, generated physical doses)."""
    gen = run.generate_probe()
    d_acc = heldout_d_accuracy(run, gen)
    score = score_batch(gen, run.probe.cov_raw, run.patient_model, d_accuracy=d_acc)
    rec = {"step": run.step, **score.to_dict()}
    run.evals.append(rec)
    return rec, gen


# -- detectors ---------------------------------------------------------------------------

@dataclass
class Diagnosis:
    kind: str
    step: int
    statistic: float
    threshold: float


def detect_vanishing_gradient(records: list[dict], window: int = 50, grad_thr: float = 1e-6,
                              acc_thr: float = 0.95) -> Diagnosis | None:
    """Fires on the last ``window`` records when the median generator gradient norm is
    below ``grad_thr`` while the median discriminator accuracy exceeds ``acc_thr``."""
    if len(records) < window:
        return None
    win = records[-window:]
    g = float(np.median([float(r["g_grad_norm"]) for r in win]))
    acc = float(np.median([float(r["d_acc"]) for r in win]))
    if g < grad_thr and acc > acc_thr:
        return Diagnosis("vanishing-gradient", int(win[-1]["step"]), g, grad_thr)
    return None


def first_vanishing_step(records: list[dict], window: int = 50, grad_thr: float = 1e-6,
                         acc_thr: float = 0.95) -> int | None:
    for end in range(window, len(records) + 1):
        diag = detect_vanishing_gradient(records[:end], window, grad_thr, acc_thr)
        if diag is not None:
            return diag.step
    return None


def mean_pairwise_distance(x: np.ndarray) -> float:
    # direct differences rather than the Gram trick: identical samples give exactly 0
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    dists = [np.sqrt(np.sum((x[i + 1:] - x[i]) ** 2, axis=1)) for i in range(len(x) - 1)]
    return float(np.mean(np.concatenate(dists))) if dists else 0.0


def detect_mode_collapse(generated: np.ndarray, real: np.ndarray, ratio: float = 0.05,
                         step: int = 0) -> Diagnosis | None:
    """Fires when generated spread < ``ratio`` times the spread of an equal-size real sample."""
    if len(generated) < 64:
        raise ValueError(f"mode-collapse probe needs >= 64 samples, got {len(generated)}")
    real = real[:len(generated)]
    spread_real = mean_pairwise_distance(real)
    spread_gen = mean_pairwise_distance(generated)
    stat = spread_gen / spread_real if spread_real > 0 else math.inf
    if stat < ratio:
        return Diagnosis("mode-collapse", step, stat, ratio)
    return None


def collapse_sensitivity(generated, real, ratios=(0.01, 0.05, 0.10)) -> dict:
    out = {}
    for r in ratios:
        out[f"{r:g}"] = detect_mode_collapse(generated, real, r) is not None
    return out


def autocorrelation(x: np.ndarray, lag: int) -> float:
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean()
    denom = float(np.dot(xc, xc))
    if denom == 0.0 or lag >= len(x):
        return 0.0
    return float(np.dot(xc[:-lag], xc[lag:]) / denom)


def detect_non_convergence(series, slope_eps: float = 1e-3, acf_thr: float = -0.3,
                           max_lag: int = 20) -> Diagnosis | None:
    """Over the last half of the series: flat least-squares trend plus a lag-k
    autocorrelation below ``acf_thr`` for some k in 1..max_lag."""
    series = np.asarray(series, dtype=np.float64)
    if len(series) < 200:
        raise ValueError(f"non-convergence check needs >= 200 steps, got {len(series)}")
    half = series[len(series) // 2:]
    t = np.arange(len(half), dtype=np.float64)
    slope = float(np.polyfit(t, half, 1)[0])
    if abs(slope) >= slope_eps:
        return None
    acf = [autocorrelation(half, k) for k in range(1, max_lag + 1)]
    lowest = min(acf)
    if lowest < acf_thr:
        return Diagnosis("non-convergence", len(series), lowest, acf_thr)
    return None


# -- run directories ---------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _append_csv(path: Path, fieldnames, row: dict) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(fieldnames)
        w.writerow([_fmt(row.get(k, "")) for k in fieldnames])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _ckpt_path(run_dir: Path, step: int) -> Path:
    return run_dir / "checkpoints" / f"step_{step:06d}.ckpt"


def write_checkpoint(run: TrainRun, run_dir: Path) -> Path:
    path = _ckpt_path(run_dir, run.step)
    save_checkpoint(path, {"G": run.G, "D": run.D}, run.optimizer_state(),
                    {"step": run.step, "rng": run.rng_state()})
    return path


def restore_checkpoint(run: TrainRun, path) -> None:
    ck = load_checkpoint(path)
    run.G.load_state_dict(ck.models["G"].state_dict())
    run.D.load_state_dict(ck.models["D"].state_dict())
    run.opt_g.load_state_dict(ck.optim["G"])
    run.opt_d.load_state_dict(ck.optim["D"])
    run.rng.bit_generator.state = ck.meta["rng"]
    run.step = int(ck.meta["step"])


def write_probe_dump(path: Path, run: TrainRun, gen: np.ndarray) -> None:
    container.write_container(path, "probe", {
        "doses": gen, "covariates": run.probe.cov_raw, "labels": run.probe.labels,
        "z": run.probe_z}, {"step": run.step, "T": run.T})


def register_run(registry: Path, entry: dict) -> None:
    """Append one JSON line to the run registry under an exclusive advisory lock."""
    registry.parent.mkdir(parents=True, exist_ok=True)
    with open(registry, "a") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
            fh.flush()
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def build_manifest(run: TrainRun) -> dict:
    return {
        "format": 1,
        "label": run.label,
        "variant": run.variant.to_dict(),
        "train": run.train_cfg.to_dict(),
        "dataset_hash": run.dataset_hash,
        "dataset_meta": {k: run.dataset.meta.get(k) for k in ("T", "seed", "n_records",
                                                               "n_families")},
        "patient_model": run.patient_model.to_dict(),
        "dose_scales": [float(s) for s in run.scales],
        "probe_indices": [int(i) for i in run.probe_idx],
        "models": {"G": run.G.config(), "D": run.D.config()},
        "optimizers": {"G": run.opt_g.kind, "D": run.opt_d.kind},
    }


def _eval_and_dump(run: TrainRun, run_dir: Path) -> dict:
    rec, gen = evaluate(run)
    _append_csv(run_dir / "metrics.csv", EVAL_FIELDS, rec)
    write_probe_dump(run_dir / "probe" / f"step_{run.step:06d}.bin", run, gen)
    return rec


def _train_loop(run: TrainRun, run_dir: Path, until: int) -> None:
    cfg = run.train_cfg
    try:
        while run.step < until:
            rec = train_step(run)
            _append_csv(run_dir / "log.csv", LOG_FIELDS, rec)
            if run.step % cfg.eval_every == 0 or run.step == until:
                _eval_and_dump(run, run_dir)
            if run.step % cfg.checkpoint_every == 0 or run.step == until:
                write_checkpoint(run, run_dir)
    except NumericalHalt as halt:
        (run_dir / "halt.json").write_text(json.dumps(halt.snapshot, sort_keys=True, indent=2))
        raise


def diagnose(run_dir) -> dict:
    """Detector results computed purely from the persisted log and probe dumps."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    cfg = TrainConfig.from_dict(manifest["train"])
    records = read_csv(run_dir / "log.csv") if (run_dir / "log.csv").exists() else []
    out: dict = {"steps": len(records)}
    first = first_vanishing_step(records, cfg.vanish_window, cfg.vanish_grad, cfg.vanish_acc)
    out["vanishing_gradient"] = {"first_step": first, "window": cfg.vanish_window,
                                 "grad_threshold": cfg.vanish_grad, "acc_threshold": cfg.vanish_acc}
    g_series = [float(r["g_loss"]) for r in records]
    if len(g_series) >= 200:
        diag = detect_non_convergence(g_series, cfg.nonconv_slope, cfg.nonconv_acf,
                                      cfg.nonconv_max_lag)
        out["non_convergence"] = asdict(diag) if diag else None
    else:
        out["non_convergence"] = "skipped: fewer than 200 steps"
    dumps = sorted((run_dir / "probe").glob("step_*.bin"))
    if dumps:
        gen, meta = container.read_container(dumps[-1], kind="probe")
        real, _ = container.read_container(run_dir / "probe" / "real.bin", kind="probe")
        if len(gen["doses"]) >= 64:
            diag = detect_mode_collapse(gen["doses"], real["doses"], cfg.collapse_ratio,
                                        meta["step"])
            out["mode_collapse"] = asdict(diag) if diag else None
            out["mode_collapse_sensitivity"] = collapse_sensitivity(gen["doses"], real["doses"])
        else:
            out["mode_collapse"] = "skipped: probe smaller than 64"
    return out


def run_experiment(dataset: Dataset, variant: VariantConfig, train: TrainConfig, out_dir,
                   dataset_hash: str = "", label: str | None = None,
                   registry: Path | None = None, extra_manifest: dict | None = None) -> TrainRun:
    """Train one run and persist everything under ``out_dir``.

    Evaluation (step 0 baseline, every ``eval_every`` steps and the final step)
    writes a metrics row and a probe dump; checkpoints land every
    ``checkpoint_every`` steps and at the end. ``extra_manifest`` (for example
    the fully materialized experiment config) is merged into the manifest.
    """
    run_dir = Path(out_dir)
    (run_dir / "probe").mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    run = TrainRun(dataset, variant, train, dataset_hash, label)
    manifest = build_manifest(run)
    manifest.update(extra_manifest or {})
    (run_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    container.write_container(run_dir / "probe" / "real.bin", "probe", {
        "doses": run.probe.x * run.scales[None, :, None], "covariates": run.probe.cov_raw,
        "labels": run.probe.labels, "z": run.probe_z}, {"step": 0, "T": run.T})
    _eval_and_dump(run, run_dir)
    if train.steps == 0:
        write_checkpoint(run, run_dir)
    try:
        _train_loop(run, run_dir, train.steps)
    finally:
        (run_dir / "diagnostics.json").write_text(
            json.dumps(diagnose(run_dir), sort_keys=True, indent=2) + "\n")
        if registry is not None:
            register_run(registry, {"run_dir": str(run_dir), "label": run.label,
                                    "seed": train.seed, "dataset_hash": dataset_hash,
                                    "steps": run.step})
    return run


def resume_experiment(dataset: Dataset, run_dir, checkpoint, until: int | None = None,
                      out_dir=None) -> TrainRun:
    """Rebuild a run from its manifest, restore ``checkpoint`` and keep training.

    Records go to ``out_dir`` (a fresh directory) so the source run stays untouched.
    """
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    variant = VariantConfig.from_dict(manifest["variant"])
    train = TrainConfig.from_dict(manifest["train"])
    run = TrainRun(dataset, variant, train, manifest["dataset_hash"], manifest["label"])
    restore_checkpoint(run, checkpoint)
    target = Path(out_dir) if out_dir is not None else run_dir
    (target / "probe").mkdir(parents=True, exist_ok=True)
    (target / "checkpoints").mkdir(exist_ok=True)
    _train_loop(run, target, train.steps if until is None else until)
    return run
