"""Experiment configuration: one YAML file, strict keys, ``--set`` overrides."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .harness import TrainConfig
from .losses import VariantConfig
from .pkpd import PatientModel, ProfileConfig

OUT_ENV = "ANESGAN_OUT"
DEFAULT_OUT = "anesgan-out"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    patients: int = 256
    T: int = 180
    seed: int = 0
    n_families: int = 1
    profile: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)

    def profile_config(self) -> ProfileConfig:
        d = dict(self.profile)
        if "level_bounds" in d:
            d["level_bounds"] = tuple(d["level_bounds"])
        return replace(ProfileConfig(**d), T=self.T)

    def patient_model(self) -> PatientModel:
        base = PatientModel().to_dict()
        for k, v in self.model.items():
            if isinstance(v, dict):
                base[k] = {**base[k], **v}
            else:
                base[k] = v
        return PatientModel.from_dict(base)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = DatasetConfig()
    variant: VariantConfig = VariantConfig()
    training: TrainConfig = TrainConfig()
    seeds: tuple = (0,)
    output: str | None = None

    def output_dir(self, flag: str | None = None) -> Path:
        return Path(flag or self.output or os.environ.get(OUT_ENV) or DEFAULT_OUT)

    def to_dict(self) -> dict:
        """Fully materialized config, every default filled in."""
        return {
            "dataset": {"patients": self.dataset.patients, "T": self.dataset.T,
                        "seed": self.dataset.seed, "n_families": self.dataset.n_families,
                        "profile": self.dataset.profile_config().to_dict(),
                        "model": self.dataset.patient_model().to_dict()},
            "variant": self.variant.to_dict(),
            "training": {**self.training.to_dict(), "seeds": list(self.seeds)},
            "output": self.output,
        }


_SECTIONS = {"dataset", "variant", "training", "output"}


def _strict(section: str, d: dict, allowed: set) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")


def _coerce(text: str):
    return yaml.safe_load(text)


def apply_override(raw: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {p} is not a section")
    node[parts[-1]] = _coerce(value)


def parse_config(raw: dict | None) -> ExperimentConfig:
    raw = dict(raw or {})
    _strict("top level", raw, _SECTIONS)
    try:
        ds_raw = dict(raw.get("dataset") or {})
        _strict("dataset", ds_raw, {f.name for f in fields(DatasetConfig)})
        _strict("dataset.profile", ds_raw.get("profile") or {},
                {f.name for f in fields(ProfileConfig)} - {"T"})
        model_keys = {f.name for f in fields(PatientModel)}
        _strict("dataset.model", ds_raw.get("model") or {}, model_keys)
        ds = DatasetConfig(**ds_raw)
        ds.profile_config()
        ds.patient_model()
        variant = VariantConfig.from_dict(dict(raw.get("variant") or {}))
        tr_raw = dict(raw.get("training") or {})
        seeds = tr_raw.pop("seeds", None)
        training = TrainConfig.from_dict(tr_raw)
        if seeds is None:
            seeds = [training.seed]
        if isinstance(seeds, int):
            seeds = [seeds]
        out = raw.get("output")
        if isinstance(out, dict):
            _strict("output", out, {"dir"})
            out = out.get("dir")
        return ExperimentConfig(ds, variant, training, tuple(int(s) for s in seeds), out)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | os.PathLike | None, overrides: list[str] = ()) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    for item in overrides:
        apply_override(raw, item)
    return parse_config(raw)
