"""Loss functions for the GAN variants, all as differentiable tensor expressions.

Scores produced by :meth:`Tensor.sigmoid` carry their logit, so ``log s`` and
``log(1 - s)`` are evaluated as log-sigmoids and stay finite at saturation.
Class probabilities from :meth:`Tensor.softmax` likewise carry their
log-softmax. Expectations are batch means.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .tensor import DomainError, ShapeError, Tensor

VARIANTS = (
    "vanilla-saturating",
    "vanilla-nonsaturating",
    "lsgan",
    "wgan",
    "vaegan",
    "acgan",
    "acvae",
    "acgan-entropy",
)


@dataclass(frozen=True)
class VariantConfig:
    variant: str = "vanilla-nonsaturating"
    a: float = -1.0  # LSGAN fake label
    b: float = 1.0  # LSGAN real label
    c: float | None = 0.0  # LSGAN generator target
    lambda_rec: float = 1.0
    lambda_kld: float = 1.0
    lambda_dc: float = 1.0
    lambda_gc: float = 1.0
    entropy_direction: str = "minimize"
    clip: float = 0.01
    n_critic: int = 5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; valid: {', '.join(VARIANTS)}")
        for name in ("lambda_rec", "lambda_kld", "lambda_dc", "lambda_gc"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.variant == "lsgan":
            if self.c is None:
                raise ValueError("lsgan needs the generator target c")
            if not self.a < self.b:
                raise ValueError(f"lsgan labels must satisfy a < b, got a={self.a}, b={self.b}")
        if self.entropy_direction not in ("minimize", "maximize"):
            raise ValueError("entropy_direction must be minimize or maximize")
        if self.clip <= 0 or self.n_critic < 1:
            raise ValueError("clip must be > 0 and n_critic >= 1")

    @property
    def conditional(self) -> bool:
        return self.variant in ("acgan", "acvae", "acgan-entropy")

    @property
    def uses_vae(self) -> bool:
        return self.variant in ("vaegan", "acvae")

    @property
    def disc_mode(self) -> str:
        return {"wgan": "critic", "lsgan": "linear"}.get(self.variant, "prob")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VariantConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown variant keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LatentPrior:
    mu: float = 0.0
    sigma: float = 1.0


STANDARD_PRIOR = LatentPrior()


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_prob(s: Tensor, what: str) -> None:
    if np.any(s.data <= 0.0) or np.any(s.data >= 1.0):
        if s._pre is None:
            raise DomainError(f"{what}: scores must lie in (0, 1)")


def log_score(s) -> Tensor:
    """log s for s in (0, 1), via log-sigmoid when the logit is known."""
    s = _t(s)
    if s._pre is not None and s._op == "sigmoid":
        return s._pre.log_sigmoid()
    _check_prob(s, "log score")
    return s.log()


def log_one_minus(s) -> Tensor:
    """log(1 - s) for s in (0, 1)."""
    s = _t(s)
    if s._pre is not None and s._op == "sigmoid":
        return (-s._pre).log_sigmoid()
    _check_prob(s, "log(1 - score)")
    return (1.0 - s).log()


def _mean(x: Tensor) -> Tensor:
    return x.mean(axis=None)


# -- vanilla -------------------------------------------------------------------

def d_loss_vanilla(s_real, s_fake) -> Tensor:
    return -_mean(log_score(s_real)) - _mean(log_one_minus(s_fake))


def g_loss_saturating(s_fake) -> Tensor:
    return _mean(log_one_minus(s_fake))


def g_loss_nonsaturating(s_fake) -> Tensor:
    return -_mean(log_score(s_fake))


# -- least squares -------------------------------------------------------------

def lsgan_d_loss(s_real, s_fake, cfg: VariantConfig) -> Tensor:
    s_real, s_fake = _t(s_real), _t(s_fake)
    return 0.5 * _mean((s_real - cfg.b).square()) + 0.5 * _mean((s_fake - cfg.a).square())


def lsgan_g_loss(s_fake, cfg: VariantConfig) -> Tensor:
    return 0.5 * _mean((_t(s_fake) - cfg.c).square())


# -- Wasserstein ---------------------------------------------------------------

def wgan_distance(s_real, s_fake) -> Tensor:
    """|mean(s_real) - mean(s_fake)|; a monitoring metric, not a training objective."""
    return (_mean(_t(s_real)) - _mean(_t(s_fake))).abs()


def wgan_critic_loss(s_real, s_fake) -> Tensor:
    return _mean(_t(s_fake)) - _mean(_t(s_real))


def wgan_g_loss(s_fake) -> Tensor:
    return -_mean(_t(s_fake))


# -- VAE pieces ------------------------------------------------------------------

def reconstruction_loss(x, x_hat) -> Tensor:
    """Unit-variance Gaussian NLL without constants: 0.5 * batch-mean of the squared error sum."""
    x, x_hat = _t(x), _t(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"reconstruction_loss: shapes {x.shape} and {x_hat.shape} differ")
    sq = (x - x_hat).square()
    per_sample = sq.reshape(sq.shape[0], -1).sum(axis=1)
    return 0.5 * per_sample.mean()


def kl_gaussian(mu_q, sigma_q, prior: LatentPrior = STANDARD_PRIOR) -> Tensor:
    """KL(N(mu_q, sigma_q^2) || prior), summed over latent dims, meaned over the batch."""
    mu_q, sigma_q = _t(mu_q), _t(sigma_q)
    if np.any(sigma_q.data <= 0):
        raise DomainError("kl_gaussian: sigma_q must be positive")
    sp2 = prior.sigma ** 2
    per_dim = (float(np.log(prior.sigma)) - sigma_q.log()
               + (sigma_q.square() + (mu_q - prior.mu).square()) * (0.5 / sp2) - 0.5)
    if per_dim.data.ndim == 1:
        return per_dim.sum()
    return per_dim.sum(axis=-1).mean()


def vaegan_vae_loss(g_adv, rec, kld, cfg: VariantConfig) -> Tensor:
    return _t(g_adv) + cfg.lambda_rec * _t(rec) + cfg.lambda_kld * _t(kld)


# -- auxiliary classifier ------------------------------------------------------------

def _check_classes(p: Tensor, c) -> np.ndarray:
    c = np.asarray(c.data if isinstance(c, Tensor) else c, dtype=np.float64)
    if p.shape != c.shape:
        raise ShapeError(f"class head shape {p.shape} does not match class vectors {c.shape}")
    return c


def log_class_prob(p, c) -> Tensor:
    """Per-sample log D_C(c, x) for one-hot ``c``."""
    p = _t(p)
    onehot = _check_classes(p, c)
    if p._pre is not None:
        logp = p._pre
    else:
        if np.any(p.data[onehot > 0] <= 0):
            raise DomainError("class probability of the target class must be positive")
        logp = p.clamp(1e-300, 1.0).log()
    return (logp * Tensor(onehot)).sum(axis=-1)


def class_nll(p, c) -> Tensor:
    return -_mean(log_class_prob(p, c))


def acgan_d_loss(s_real, s_fake, p_real, p_fake, c_real, c_fake, cfg: VariantConfig) -> Tensor:
    """Source term plus lambda_dc times the class term on both real and generated samples."""
    source = d_loss_vanilla(s_real, s_fake)
    if cfg.lambda_dc == 0:
        return source
    return source + cfg.lambda_dc * (class_nll(p_real, c_real) + class_nll(p_fake, c_fake))


def acgan_g_loss(s_fake, p_fake, c, cfg: VariantConfig) -> Tensor:
    source = g_loss_nonsaturating(s_fake)
    if cfg.lambda_gc == 0:
        return source
    return source + cfg.lambda_gc * class_nll(p_fake, c)


def entropy_class_loss(p, direction: str = "minimize") -> Tensor:
    """Mean row entropy of ``p``; negated when ``direction == "maximize"``."""
    p = _t(p)
    if np.any(p.data < 0):
        raise DomainError("entropy_class_loss: negative probability")
    if p._pre is not None:
        logp = p._pre
    else:
        logp = p.clamp(1e-300, 1.0).log()
    h = -(p * logp).sum(axis=-1).mean()
    if direction == "minimize":
        return h
    if direction == "maximize":
        return -h
    raise ValueError(f"direction must be minimize or maximize, got {direction!r}")


def acvae_vae_loss(g_source, g_class, rec, kld, cfg: VariantConfig) -> Tensor:
    total = _t(g_source)
    if cfg.lambda_gc != 0:
        total = total + cfg.lambda_gc * _t(g_class)
    return total + cfg.lambda_rec * _t(rec) + cfg.lambda_kld * _t(kld)
