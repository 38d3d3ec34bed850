"""MLP realizations of the generator, discriminator and VAE generator.

All networks work on flattened dose histories of shape ``(batch, 2 * T)``
(propofol steps first, then remifentanil) in normalized dose units. Class
conditions are one-hot vectors concatenated onto the input.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import container
from .tensor import NonFiniteError, ShapeError, Tensor, concat

PLACEMENTS = ("encoder", "decoder", "both")


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class MLP:
    """tanh hidden layers, linear output; the owner applies the output mapping."""

    def __init__(self, widths: list[int], rng: np.random.Generator, name: str = "mlp"):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.widths = list(widths)
        self.name = name
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            self.weights.append(Tensor(xavier_uniform(rng, fi, fo), requires_grad=True,
                                       name=f"{name}.W{i}"))
            self.biases.append(Tensor(np.zeros(fo), requires_grad=True, name=f"{name}.b{i}"))

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.widths[0]:
            raise ShapeError(f"{self.name}: expected input width {self.widths[0]}, got {x.shape}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            try:
                h = h @ w + b
                if i < last:
                    h = h.tanh()
            except NonFiniteError as exc:
                raise NonFiniteError(f"{self.name} layer {i}: {exc}") from exc
        return h


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _flatten(x) -> Tensor:
    x = _as_tensor(x)
    return x.reshape(x.shape[0], -1) if x.data.ndim == 3 else x


class _Model:
    """Common parameter bookkeeping."""

    nets: dict[str, MLP]

    def parameters(self) -> list[Tensor]:
        out = []
        for net in self.nets.values():
            out += net.parameters()
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"missing parameter {p.name}")
            if state[p.name].shape != p.shape:
                raise ShapeError(f"{p.name}: checkpoint shape {state[p.name].shape} != {p.shape}")
            p.data[...] = state[p.name]

    def zero_parameters(self) -> None:
        for p in self.parameters():
            p.data[...] = 0.0


class Generator(_Model):
    """Maps (covariates, z[, c]) to a non-negative dose history ``(batch, 2, T)``."""

    def __init__(self, T: int, n_cov: int = 4, z_dim: int = 16, hidden=(128, 128),
                 n_classes: int = 0, seed: int = 0):
        self.T, self.n_cov, self.z_dim, self.n_classes = T, n_cov, z_dim, n_classes
        self.hidden = tuple(hidden)
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.net = MLP([n_cov + z_dim + n_classes, *hidden, 2 * T], rng, name="G")
        self.nets = {"G": self.net}

    def config(self) -> dict:
        return {"type": "generator", "T": self.T, "n_cov": self.n_cov, "z_dim": self.z_dim,
                "hidden": list(self.hidden), "n_classes": self.n_classes, "seed": self.seed}

    def __call__(self, covariates, z, c=None) -> Tensor:
        return self.generate(covariates, z, c)

    def generate(self, covariates, z, c=None) -> Tensor:
        cov, z = _as_tensor(covariates), _as_tensor(z)
        if cov.shape[-1] != self.n_cov:
            raise ShapeError(f"generator built for {self.n_cov} covariates, got {cov.shape[-1]}")
        parts = [cov, z]
        if self.n_classes:
            if c is None:
                raise ValueError("conditional generator needs a class vector")
            parts.append(_as_tensor(c))
        out = self.net(concat(parts, axis=1)).softplus()
        return out.reshape(out.shape[0], 2, self.T)


class Discriminator(_Model):
    """Source head (sigmoid, or linear in ``critic``/``linear`` mode) plus optional class head.

    ``mode="prob"`` gives D_S in (0, 1); ``"critic"`` (WGAN) and ``"linear"``
    (least squares) return the raw source output.
    """

    def __init__(self, T: int, n_cov: int = 4, hidden=(128, 128), n_classes: int = 0,
                 mode: str = "prob", seed: int = 0):
        if mode not in ("prob", "critic", "linear"):
            raise ValueError(f"unknown discriminator mode {mode!r}")
        self.T, self.n_cov, self.n_classes, self.mode = T, n_cov, n_classes, mode
        self.hidden = tuple(hidden)
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.net = MLP([2 * T + n_cov, *hidden, 1 + n_classes], rng, name="D")
        self.nets = {"D": self.net}

    def config(self) -> dict:
        return {"type": "discriminator", "T": self.T, "n_cov": self.n_cov,
                "hidden": list(self.hidden), "n_classes": self.n_classes, "mode": self.mode,
                "seed": self.seed}

    def __call__(self, x, covariates, with_classes: bool | None = None):
        return self.discriminate(x, covariates, with_classes)

    def discriminate(self, x, covariates, with_classes: bool | None = None):
        """Return ``(s, p)``; ``p`` is ``None`` unless the class head exists."""
        if with_classes and not self.n_classes:
            raise ValueError("discriminator was built without a class head")
        x = _flatten(x)
        cov = _as_tensor(covariates)
        if x.shape[-1] != 2 * self.T or cov.shape[-1] != self.n_cov:
            raise ShapeError(
                f"discriminator expects ({2 * self.T} dose, {self.n_cov} covariate) columns, "
                f"got {x.shape} and {cov.shape}")
        out = self.net(concat([x, cov], axis=1))
        src = out[:, 0]
        s = src.sigmoid() if self.mode == "prob" else src
        p = out[:, 1:].softmax() if self.n_classes and with_classes is not False else None
        return s, p


class VAEGenerator(_Model):
    """Encoder q and decoder G' with a configurable class-conditioning placement."""

    def __init__(self, T: int, n_cov: int = 4, latent: int = 16, hidden=(128, 128),
                 n_classes: int = 0, placement: str = "both", seed: int = 0):
        if placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}, got {placement!r}")
        self.T, self.n_cov, self.latent, self.n_classes = T, n_cov, latent, n_classes
        self.placement = placement
        self.hidden = tuple(hidden)
        self.seed = seed
        self.enc_c = n_classes if placement in ("encoder", "both") else 0
        self.dec_c = n_classes if placement in ("decoder", "both") else 0
        rng = np.random.default_rng(seed)
        self.encoder = MLP([2 * T + n_cov + self.enc_c, *hidden, 2 * latent], rng, name="q")
        self.decoder = MLP([latent + n_cov + self.dec_c, *hidden, 2 * T], rng, name="Gp")
        self.nets = {"q": self.encoder, "Gp": self.decoder}

    @property
    def z_dim(self) -> int:
        return self.latent

    def config(self) -> dict:
        return {"type": "vae", "T": self.T, "n_cov": self.n_cov, "latent": self.latent,
                "hidden": list(self.hidden), "n_classes": self.n_classes,
                "placement": self.placement, "seed": self.seed}

    def encode(self, x, covariates, c=None) -> tuple[Tensor, Tensor]:
        """Return (mu_q, log sigma_q), the latter clamped to [-20, 2]."""
        parts = [_flatten(x), _as_tensor(covariates)]
        if parts[0].shape[-1] != 2 * self.T:
            raise ShapeError(f"encoder expects {2 * self.T} dose columns, got {parts[0].shape}")
        if self.enc_c:
            if c is None:
                raise ValueError(f"placement {self.placement!r} needs a class vector to encode")
            parts.append(_as_tensor(c))
        h = self.encoder(concat(parts, axis=1))
        mu = h[:, :self.latent]
        log_sigma = h[:, self.latent:].clamp(-20.0, 2.0)
        return mu, log_sigma

    def encode_sample(self, x, covariates, c=None, eps=None, rng: np.random.Generator | None = None):
        """Reparameterized draw ``z_hat = mu + sigma * eps``.

        Returns ``(z_hat, mu, sigma, eps)``; pass ``eps`` back in to replay a draw.
        """
        mu, log_sigma = self.encode(x, covariates, c)
        sigma = log_sigma.exp()
        if eps is None:
            if rng is None:
                raise ValueError("encode_sample needs eps or an rng")
            eps = rng.standard_normal(mu.shape)
        eps = np.asarray(eps, dtype=np.float64)
        z_hat = mu + sigma * Tensor(eps)
        return z_hat, mu, sigma, eps

    def decode(self, z_hat, covariates, c=None) -> Tensor:
        z_hat = _as_tensor(z_hat)
        if z_hat.shape[-1] != self.latent:
            raise ShapeError(f"decoder expects latent width {self.latent}, got {z_hat.shape}")
        parts = [z_hat, _as_tensor(covariates)]
        if self.dec_c:
            if c is None:
                raise ValueError(f"placement {self.placement!r} needs a class vector to decode")
            parts.append(_as_tensor(c))
        out = self.decoder(concat(parts, axis=1)).softplus()
        return out.reshape(out.shape[0], 2, self.T)

    def generate(self, covariates, z, c=None) -> Tensor:
        """Sample from the prior path: decode a N(0, I) draw."""
        return self.decode(z, covariates, c)

    __call__ = generate


def build_model(cfg: dict) -> _Model:
    kind = cfg["type"]
    args = {k: v for k, v in cfg.items() if k != "type"}
    if "hidden" in args:
        args["hidden"] = tuple(args["hidden"])
    if kind == "generator":
        return Generator(**args)
    if kind == "discriminator":
        return Discriminator(**args)
    if kind == "vae":
        return VAEGenerator(**args)
    raise ValueError(f"unknown model type {kind!r}")


@dataclass
class Checkpoint:
    models: dict[str, _Model]
    optim: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, models: dict[str, _Model], optim: dict | None = None,
                    meta: dict | None = None) -> None:
    """Write model configs (shapes, seeds) and parameters, plus optional optimizer state."""
    arrays: dict[str, np.ndarray] = {}
    for role, model in models.items():
        for name, arr in model.state_dict().items():
            arrays[f"model/{role}/{name}"] = arr
    for role, state in (optim or {}).items():
        for name, arr in state.items():
            arrays[f"optim/{role}/{name}"] = np.asarray(arr)
    header = {"models": {role: m.config() for role, m in models.items()},
              "extra": meta or {}}
    container.write_container(path, "checkpoint", arrays, header)


def load_checkpoint(path) -> Checkpoint:
    arrays, header = container.read_container(path, kind="checkpoint")
    models = {}
    for role, cfg in header["models"].items():
        model = build_model(cfg)
        prefix = f"model/{role}/"
        model.load_state_dict({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
        models[role] = model
    optim: dict[str, dict[str, np.ndarray]] = {}
    for key, arr in arrays.items():
        if key.startswith("optim/"):
            _, role, name = key.split("/", 2)
            optim.setdefault(role, {})[name] = arr
    return Checkpoint(models=models, optim=optim, meta=header.get("extra", {}))
