"""Two-drug PK-PD patient simulator and synthetic surgical dose profiles.

Each drug follows a three-compartment mammillary model with zero-order
infusion into the central compartment and a first-order effect site. The two
effect-site concentrations feed a sigmoid response surface with a linear
interaction term that yields BIS.

Dose units are abstract: one unit per 10-second step for each channel
(mg-like for propofol, ug-like for remifentanil). Concentrations are
amount / litre. Rates are per second.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import container

STEP_SECONDS = 10.0
COVARIATE_NAMES = ("age", "weight", "height", "sex")
COVARIATE_BOUNDS = {"age": (18.0, 90.0), "weight": (40.0, 150.0), "height": (140.0, 200.0),
                    "sex": (0.0, 1.0)}


class PKError(FloatingPointError):
    pass


class CalibrationError(RuntimeError):
    pass


# -- model parameters ----------------------------------------------------------------

@dataclass(frozen=True)
class DrugPK:
    """Compartment volumes (L) and rate constants (1/s)."""

    v1: float
    v2: float
    v3: float
    k10: float
    k12: float
    k21: float
    k13: float
    k31: float
    ke0: float

    def __post_init__(self):
        for name, val in asdict(self).items():
            if not val > 0:
                raise ValueError(f"{name} must be positive, got {val}")

    @classmethod
    def from_clearances(cls, v1, v2, v3, cl1, cl2, cl3, ke0, per_minute=True) -> "DrugPK":
        s = 60.0 if per_minute else 1.0
        return cls(v1=v1, v2=v2, v3=v3, k10=cl1 / v1 / s, k12=cl2 / v1 / s, k21=cl2 / v2 / s,
                   k13=cl3 / v1 / s, k31=cl3 / v3 / s, ke0=ke0 / s)

    def rate_matrix(self) -> np.ndarray:
        """Linear system matrix for amounts (A1, A2, A3) plus effect-site concentration."""
        return np.array([
            [-(self.k10 + self.k12 + self.k13), self.k21, self.k31, 0.0],
            [self.k12, -self.k21, 0.0, 0.0],
            [self.k13, 0.0, -self.k31, 0.0],
            [self.ke0 / self.v1, 0.0, 0.0, -self.ke0],
        ])


# Schnider-like propofol and Minto-like remifentanil reference values for a 70 kg adult
PROPOFOL_PK = DrugPK.from_clearances(4.27, 18.9, 238.0, 1.89, 1.29, 0.836, 0.456)
REMIFENTANIL_PK = DrugPK.from_clearances(5.1, 9.82, 5.42, 2.6, 2.05, 0.076, 0.595)


@dataclass(frozen=True)
class PatientModel:
    ppf: DrugPK = PROPOFOL_PK
    rftn: DrugPK = REMIFENTANIL_PK
    e0: float = 95.0
    emax: float = 85.0
    ec50_ppf: float = 4.0
    ec50_rftn: float = 8.0
    gamma: float = 2.0
    beta: float = 1.0

    def __post_init__(self):
        if not (0 < self.emax <= self.e0):
            raise ValueError(f"need 0 < emax <= e0, got emax={self.emax}, e0={self.e0}")
        if self.gamma <= 0 or self.ec50_ppf <= 0 or self.ec50_rftn <= 0 or self.beta < 0:
            raise ValueError("gamma and EC50s must be positive, beta non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PatientModel":
        d = dict(d)
        for drug in ("ppf", "rftn"):
            if isinstance(d.get(drug), dict):
                d[drug] = DrugPK(**d[drug])
        return cls(**d)

    def for_patient(self, covariates) -> "PatientModel":
        """Scale volumes and clearances by weight and age.

        volume factor    1 + 0.8 (weight - 70) / 70
        clearance factor (1 + 0.6 (weight - 70) / 70) (1 - 0.005 (age - 50)) (1 + 0.05 sex)

        Rate constants are clearance / volume, so they scale by the ratio. These
        are illustrative scalings, not a clinical covariate model.
        """
        age, weight, _height, sex = (float(v) for v in covariates)
        fv = max(0.3, 1.0 + 0.8 * (weight - 70.0) / 70.0)
        fc = max(0.3, (1.0 + 0.6 * (weight - 70.0) / 70.0) * (1.0 - 0.005 * (age - 50.0))
                 * (1.0 + 0.05 * sex))
        r = fc / fv

        def scale(pk: DrugPK) -> DrugPK:
            return DrugPK(v1=pk.v1 * fv, v2=pk.v2 * fv, v3=pk.v3 * fv, k10=pk.k10 * r,
                          k12=pk.k12 * r, k21=pk.k21 * r, k13=pk.k13 * r, k31=pk.k31 * r,
                          ke0=pk.ke0)

        return replace(self, ppf=scale(self.ppf), rftn=scale(self.rftn))


@dataclass
class DoseHistory:
    """Per-step doses for both drugs; arrays shaped (T,) or (batch, T)."""

    ppf: np.ndarray
    rftn: np.ndarray

    def __post_init__(self):
        self.ppf = np.asarray(self.ppf, dtype=np.float64)
        self.rftn = np.asarray(self.rftn, dtype=np.float64)
        if self.ppf.shape != self.rftn.shape:
            raise ValueError(f"channel shapes differ: {self.ppf.shape} vs {self.rftn.shape}")
        for name, arr in (("ppf", self.ppf), ("rftn", self.rftn)):
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ValueError(f"{name} doses must be finite and non-negative")

    @property
    def T(self) -> int:
        return self.ppf.shape[-1]

    @classmethod
    def from_array(cls, x: np.ndarray) -> "DoseHistory":
        """From an array shaped (..., 2, T)."""
        x = np.asarray(x)
        return cls(ppf=x[..., 0, :], rftn=x[..., 1, :])

    def to_array(self) -> np.ndarray:
        return np.stack([self.ppf, self.rftn], axis=-2)


# -- integration ---------------------------------------------------------------------

def _pk_rhs(state: np.ndarray, rate: np.ndarray, pk: DrugPK) -> np.ndarray:
    a1, a2, a3 = state[..., 0], state[..., 1], state[..., 2]
    d1 = rate - (pk.k10 + pk.k12 + pk.k13) * a1 + pk.k21 * a2 + pk.k31 * a3
    d2 = pk.k12 * a1 - pk.k21 * a2
    d3 = pk.k13 * a1 - pk.k31 * a3
    return np.stack([d1, d2, d3], axis=-1)


def pk_step(state, rate, pk: DrugPK, dt: float, step_index: int | None = None) -> np.ndarray:
    """One RK4 step of the mammillary model.

    ``state`` holds compartment amounts ``(..., 3)``; ``rate`` is the zero-order
    infusion into the central compartment in amount per second.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    state = np.asarray(state, dtype=np.float64)
    rate = np.asarray(rate, dtype=np.float64)
    k1 = _pk_rhs(state, rate, pk)
    k2 = _pk_rhs(state + 0.5 * dt * k1, rate, pk)
    k3 = _pk_rhs(state + 0.5 * dt * k2, rate, pk)
    k4 = _pk_rhs(state + dt * k3, rate, pk)
    out = state + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(out)):
        where = "" if step_index is None else f" at step {step_index}"
        raise PKError(f"non-finite compartment state{where}")
    return out


def effect_site_step(ce, cp, ke0: float, dt: float):
    """One RK4 step of dCe/dt = ke0 (Cp - Ce) with Cp held constant over the step."""
    if ke0 <= 0:
        raise ValueError("ke0 must be positive")
    ce = np.asarray(ce, dtype=np.float64)
    h = ke0 * dt
    # RK4 applied to a linear scalar ODE collapses to its degree-4 Taylor factor
    factor = 1.0 - h + h * h / 2.0 - h ** 3 / 6.0 + h ** 4 / 24.0
    return cp + (ce - cp) * factor


def bis_response(ce_ppf, ce_rftn, model: PatientModel):
    """Sigmoid response surface with a multiplicative interaction term."""
    up = np.asarray(ce_ppf, dtype=np.float64) / model.ec50_ppf
    ur = np.asarray(ce_rftn, dtype=np.float64) / model.ec50_rftn
    u = up + ur + model.beta * up * ur
    ug = u ** model.gamma
    return model.e0 - model.emax * ug / (1.0 + ug)


def rk4_propagator(pk: DrugPK, dt: float, n_inner: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact composition of ``n_inner`` RK4 steps for the augmented linear system.

    For x' = K x + b u with u constant over a step, one RK4 step is
    x <- M x + h S b u with M = sum_{j<=4} (hK)^j / j! and S = sum_{j<=3} (hK)^j / (j+1)!.
    Returns (P, q) so that one dose step is x <- P x + q u.
    """
    K = pk.rate_matrix()
    hK = dt * K
    eye = np.eye(4)
    hK2 = hK @ hK
    hK3 = hK2 @ hK
    M = eye + hK + hK2 / 2.0 + hK3 / 6.0 + hK3 @ hK / 24.0
    S = eye + hK / 2.0 + hK2 / 6.0 + hK3 / 24.0
    b = np.array([1.0, 0.0, 0.0, 0.0])
    step_in = dt * (S @ b)
    P = eye.copy()
    q = np.zeros(4)
    for _ in range(n_inner):
        q = M @ q + step_in
        P = M @ P
    return P, q


def _models_for(covariates, model: PatientModel, n: int) -> list[PatientModel]:
    if covariates is None:
        return [model] * n
    cov = np.atleast_2d(np.asarray(covariates, dtype=np.float64))
    if cov.shape[0] != n:
        raise ValueError(f"{cov.shape[0]} covariate rows for {n} dose histories")
    return [model.for_patient(row) for row in cov]


def simulate_pk(doses: DoseHistory, model: PatientModel, covariates=None, inner_dt: float = 1.0,
                step_seconds: float = STEP_SECONDS) -> dict[str, np.ndarray]:
    """Integrate both drugs; returns states shaped ``(batch, T, 4)`` per drug.

    State columns are (A1, A2, A3, Ce) sampled at the end of each dose step.
    Doses are spread evenly over their step as a zero-order infusion.
    """
    n_inner = int(round(step_seconds / inner_dt))
    if n_inner < 1 or abs(n_inner * inner_dt - step_seconds) > 1e-9:
        raise ValueError(f"inner dt {inner_dt} must divide the {step_seconds} s dose step")
    ppf = np.atleast_2d(doses.ppf)
    rftn = np.atleast_2d(doses.rftn)
    n, T = ppf.shape
    models = _models_for(covariates, model, n)
    out = {}
    for drug, d in (("ppf", ppf), ("rftn", rftn)):
        P = np.empty((n, 4, 4))
        q = np.empty((n, 4))
        cache: dict[DrugPK, tuple] = {}
        for i, m in enumerate(models):
            pk = getattr(m, drug)
            if pk not in cache:
                cache[pk] = rk4_propagator(pk, inner_dt, n_inner)
            P[i], q[i] = cache[pk]
        rates = d / step_seconds
        x = np.zeros((n, 4))
        states = np.empty((n, T, 4))
        for t in range(T):
            x = np.einsum("nij,nj->ni", P, x) + q * rates[:, t:t + 1]
            if not np.all(np.isfinite(x)):
                raise PKError(f"non-finite {drug} state at step {t}")
            states[:, t] = x
        out[drug] = states
    return out


def simulate_bis(doses: DoseHistory, model: PatientModel, covariates=None, inner_dt: float = 1.0,
                 step_seconds: float = STEP_SECONDS) -> np.ndarray:
    """BIS at the end of every dose step; shape matches ``doses.ppf``."""
    states = simulate_pk(doses, model, covariates, inner_dt, step_seconds)
    n = states["ppf"].shape[0]
    models = _models_for(covariates, model, n)
    bis = np.empty(states["ppf"].shape[:2])
    for i, m in enumerate(models):
        bis[i] = bis_response(states["ppf"][i, :, 3], states["rftn"][i, :, 3], m)
    return bis.reshape(np.shape(doses.ppf))


# -- synthetic ground truth ---------------------------------------------------------

@dataclass(frozen=True)
class ProfileConfig:
    """Shape of a synthetic surgical dose profile (doses per 10 s step).

    family 0 is a single induction bolus; family 1 adds a mid-surgery
    propofol bolus and runs a heavier remifentanil share.
    """

    T: int = 180
    induction_steps: int = 6
    bolus_ppf_per_kg: float = 0.5
    bolus_rftn_per_kg: float = 0.25
    rftn_ratio: float = 2.0
    front_load: float = 0.6
    front_load_tau: float = 40.0
    noise_sd: float = 0.15
    taper_fraction: float = 0.1
    taper_level: float = 0.05
    maintenance_start: int = 15
    maintenance_end_fraction: float = 0.9
    target_bis: float = 50.0
    level_bounds: tuple = (0.01, 20.0)
    family: int = 0

    def __post_init__(self):
        if self.T < 30:
            raise ValueError(f"profiles need T >= 30, got {self.T}")

    def window(self) -> tuple[int, int]:
        return self.maintenance_start, int(round(self.maintenance_end_fraction * self.T))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["level_bounds"] = list(self.level_bounds)
        return d


def _profile_shape(covariates, rng: np.random.Generator, cfg: ProfileConfig):
    """Return (base_ppf, base_rftn, fixed_ppf, fixed_rftn): scaled by level / not scaled."""
    T = cfg.T
    weight = float(covariates[1])
    t = np.arange(T, dtype=np.float64)
    taper_start = T - max(1, int(round(cfg.taper_fraction * T)))
    ind = cfg.induction_steps

    front = cfg.front_load * rng.uniform(0.7, 1.3)
    tau = cfg.front_load_tau * rng.uniform(0.8, 1.25)
    shape = 1.0 + front * np.exp(-(t - ind) / tau)
    shape[:ind] = 0.0
    noise = np.exp(cfg.noise_sd * rng.standard_normal(T) - 0.5 * cfg.noise_sd ** 2)
    ratio = cfg.rftn_ratio * rng.uniform(0.85, 1.15)
    if cfg.family == 1:
        ratio *= 2.0
    base_ppf = shape * noise
    base_rftn = ratio * shape * np.exp(cfg.noise_sd * rng.standard_normal(T)
                                       - 0.5 * cfg.noise_sd ** 2)
    taper = np.ones(T)
    taper[taper_start:] = cfg.taper_level
    base_ppf *= taper
    base_rftn *= taper

    bolus = np.zeros(T)
    bolus[:ind] = 1.0 / ind
    amount_ppf = cfg.bolus_ppf_per_kg * weight * rng.uniform(0.85, 1.15)
    amount_rftn = cfg.bolus_rftn_per_kg * weight * rng.uniform(0.85, 1.15)
    fixed_ppf = amount_ppf * bolus
    fixed_rftn = amount_rftn * bolus
    if cfg.family == 1:
        mid = T // 2
        fixed_ppf = fixed_ppf.copy()
        fixed_ppf[mid:mid + 3] += 0.25 * amount_ppf / 3.0
    return base_ppf, base_rftn, fixed_ppf, fixed_rftn


def synth_ground_truth(covariates, seed: int, profile: ProfileConfig = ProfileConfig(),
                       model: PatientModel = PatientModel(), max_iter: int = 60) -> DoseHistory:
    """Induction bolus, noisy front-loaded plateau, taper to near zero.

    The plateau level is found by bisection so that the median maintenance BIS
    equals ``profile.target_bis``.
    """
    rng = np.random.default_rng(seed)
    base_ppf, base_rftn, fixed_ppf, fixed_rftn = _profile_shape(covariates, rng, profile)
    lo_w, hi_w = profile.window()
    pm = model.for_patient(covariates)

    def median_bis(level: float) -> float:
        d = DoseHistory(fixed_ppf + level * base_ppf, fixed_rftn + level * base_rftn)
        return float(np.median(simulate_bis(d, pm)[lo_w:hi_w]))

    lo, hi = profile.level_bounds
    f_lo, f_hi = median_bis(lo) - profile.target_bis, median_bis(hi) - profile.target_bis
    if not (f_lo > 0 > f_hi):
        raise CalibrationError(
            f"plateau search does not bracket BIS {profile.target_bis} "
            f"(median BIS {f_lo + profile.target_bis:.1f} at level {lo}, "
            f"{f_hi + profile.target_bis:.1f} at level {hi}); widen profile level_bounds")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if median_bis(mid) > profile.target_bis:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-6 * hi:
            break
    level = 0.5 * (lo + hi)
    return DoseHistory(fixed_ppf + level * base_ppf, fixed_rftn + level * base_rftn)


# -- datasets -------------------------------------------------------------------------

def sample_covariates(rng: np.random.Generator, n: int) -> np.ndarray:
    age = rng.uniform(20.0, 80.0, n)
    weight = np.clip(rng.normal(70.0, 12.0, n), 45.0, 120.0)
    height = np.clip(rng.normal(170.0, 9.0, n), 145.0, 195.0)
    sex = rng.integers(0, 2, n).astype(np.float64)
    return np.stack([age, weight, height, sex], axis=1)


def check_covariates(cov) -> None:
    cov = np.atleast_2d(cov)
    for j, name in enumerate(COVARIATE_NAMES):
        lo, hi = COVARIATE_BOUNDS[name]
        if np.any(cov[:, j] < lo) or np.any(cov[:, j] > hi):
            raise ValueError(f"{name} outside physiological bounds [{lo}, {hi}]")


def normalize_covariates(cov) -> np.ndarray:
    """Network-facing covariates: centred, roughly unit scale."""
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    return np.stack([(cov[:, 0] - 50.0) / 20.0, (cov[:, 1] - 70.0) / 20.0,
                     (cov[:, 2] - 170.0) / 15.0, 2.0 * cov[:, 3] - 1.0], axis=1)


@dataclass
class Dataset:
    covariates: np.ndarray  # (N, 4)
    seeds: np.ndarray  # (N,) int
    labels: np.ndarray  # (N,) int profile family
    ppf: np.ndarray  # (N, T)
    rftn: np.ndarray  # (N, T)
    bis: np.ndarray  # (N, T)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.covariates.shape[0]

    @property
    def T(self) -> int:
        return int(self.meta.get("T", self.ppf.shape[1]))

    def doses(self) -> np.ndarray:
        """(N, 2, T) dose array."""
        return np.stack([self.ppf, self.rftn], axis=1)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.covariates[idx], self.seeds[idx], self.labels[idx], self.ppf[idx],
                       self.rftn[idx], self.bis[idx], dict(self.meta))


def synth_dataset(n_patients: int, T: int = 180, seed: int = 0,
                  profile: ProfileConfig | None = None, model: PatientModel = PatientModel(),
                  n_families: int = 1) -> Dataset:
    profile = replace(profile or ProfileConfig(), T=T)
    rng = np.random.default_rng(seed)
    cov = sample_covariates(rng, n_patients)
    seeds = rng.integers(0, 2 ** 31 - 1, n_patients)
    # balanced families in shuffled order so a strided hold-out sees every family
    labels = np.random.default_rng([seed, 1]).permutation(np.arange(n_patients) % n_families)
    ppf = np.zeros((n_patients, T))
    rftn = np.zeros((n_patients, T))
    for i in range(n_patients):
        d = synth_ground_truth(cov[i], int(seeds[i]), replace(profile, family=int(labels[i])), model)
        ppf[i], rftn[i] = d.ppf, d.rftn
    bis = (simulate_bis(DoseHistory(ppf, rftn), model, cov) if n_patients
           else np.zeros((0, T)))
    meta = {"T": T, "seed": seed, "n_records": n_patients, "n_families": n_families,
            "step_seconds": STEP_SECONDS, "profile": profile.to_dict(), "model": model.to_dict(),
            "columns": {"covariates": list(COVARIATE_NAMES), "seeds": "per-patient profile seed",
                        "labels": "profile family", "ppf": "propofol dose per 10 s step",
                        "rftn": "remifentanil dose per 10 s step",
                        "bis": "simulated BIS at the end of each step"}}
    return Dataset(cov, seeds.astype(np.int64), labels.astype(np.int64), ppf, rftn, bis, meta)


def save_dataset(path, ds: Dataset) -> str:
    """Write the dataset container; returns its sha256 hash."""
    meta = dict(ds.meta)
    meta["n_records"] = len(ds)
    container.write_container(path, "dataset", {
        "covariates": ds.covariates.reshape(len(ds), 4), "seeds": ds.seeds, "labels": ds.labels,
        "ppf": ds.ppf.reshape(len(ds), ds.T), "rftn": ds.rftn.reshape(len(ds), ds.T),
        "bis": ds.bis.reshape(len(ds), ds.T)}, meta)
    return file_hash(path)


def load_dataset(path) -> Dataset:
    arrays, meta = container.read_container(path, kind="dataset")
    n = meta["n_records"]
    T = meta["T"]
    for name in ("ppf", "rftn", "bis"):
        if arrays[name].shape != (n, T):
            raise container.ContainerError(f"{path}: column {name} has shape {arrays[name].shape}, "
                                           f"header says ({n}, {T})")
    return Dataset(arrays["covariates"], arrays["seeds"], arrays["labels"], arrays["ppf"],
                   arrays["rftn"], arrays["bis"], meta)


def dataset_model(ds: Dataset) -> PatientModel:
    return PatientModel.from_dict(ds.meta["model"]) if "model" in ds.meta else PatientModel()


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
