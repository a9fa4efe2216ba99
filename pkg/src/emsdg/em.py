"""MixStyle and its higher-order extensions (EM1: +skewness, EM2: +kurtosis).

Statistics are treated as constants under differentiation, so the layer is a
pure feature-space augmentation: the only path from input to output is the
explicit ``x`` in ``(x - mu) / sigma``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .moments import DEFAULT_EPS, ChannelStats, compute_channel_stats

VARIANTS = ("none", "MixStyle", "EM1", "EM2")

# alpha/p per variant as used for the reported runs; MixStyle uses the
# competitor setting.
PAPER_DEFAULTS = {
    "MixStyle": dict(alpha=0.1, p=0.5),
    "EM1": dict(alpha=0.7, p=0.9),
    "EM2": dict(alpha=0.5, p=0.9),
}


@dataclass
class EMConfig:
    variant: str = "EM1"
    alpha: float = 0.7
    p: float = 0.9
    beta_skew: float = 0.3
    beta_kurt: float = 0.1
    eps: float = DEFAULT_EPS
    insertion_layers: tuple[int, ...] = (2,)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"em.variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.alpha > 0:
            raise ValueError(f"em.alpha must be > 0, got {self.alpha}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"em.p must lie in [0, 1], got {self.p}")
        if self.beta_skew < 0 or self.beta_kurt < 0:
            raise ValueError("em.beta_skew and em.beta_kurt must be >= 0")
        if self.eps < 0:
            raise ValueError(f"em.eps must be >= 0, got {self.eps}")
        self.insertion_layers = tuple(sorted(set(int(i) for i in self.insertion_layers)))
        bad = [i for i in self.insertion_layers if i not in (1, 2, 3, 4)]
        if bad:
            raise ValueError(f"em.layers must be a subset of {{1,2,3,4}}, got {bad}")

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "EMConfig":
        kw = dict(PAPER_DEFAULTS.get(variant, {}))
        kw.update(overrides)
        return cls(variant=variant, **kw)

    @property
    def enabled(self) -> bool:
        return self.variant != "none" and bool(self.insertion_layers)

    def effective_betas(self) -> tuple[float, float]:
        if self.variant == "EM2":
            return self.beta_skew, self.beta_kurt
        if self.variant == "EM1":
            return self.beta_skew, 0.0
        return 0.0, 0.0


@dataclass
class MixPlan:
    active: bool
    perm: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        self.perm = np.asarray(self.perm, dtype=np.int64)
        self.lam = np.asarray(self.lam, dtype=np.float64)
        B = self.perm.shape[0]
        if sorted(self.perm.tolist()) != list(range(B)):
            raise ValueError(f"perm is not a permutation of 0..{B - 1}: {self.perm.tolist()}")
        if self.lam.shape != (B,):
            raise ValueError(f"lambda must have shape ({B},), got {self.lam.shape}")
        if np.any(self.lam < 0) or np.any(self.lam > 1):
            raise ValueError("every lambda must lie in [0, 1]")

    @property
    def batch_size(self) -> int:
        return int(self.perm.shape[0])


@dataclass
class MixedStats:
    mu_mix: torch.Tensor
    sigma_mix: torch.Tensor
    gamma_mix: torch.Tensor
    kappa_mix: torch.Tensor


def sample_beta(alpha: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Beta(alpha, alpha) via the ratio of two Gamma(alpha, 1) draws."""
    a = rng.standard_gamma(alpha, size)
    b = rng.standard_gamma(alpha, size)
    total = a + b
    # both gammas can underflow to 0 for very small alpha
    safe = np.where(total > 0, total, 1.0)
    return np.where(total > 0, a / safe, rng.integers(0, 2, size).astype(np.float64))


def sample_mix_plan(B: int, cfg: EMConfig, rng: np.random.Generator) -> MixPlan:
    """One Bernoulli(p) activation per batch, a uniform shuffle, per-sample Beta weights.

    All three draws are always taken so the RNG stream advances the same way
    whether or not the plan ends up active.
    """
    if B < 1:
        raise ValueError(f"batch size must be >= 1, got {B}")
    active = bool(rng.random() < cfg.p)
    perm = rng.permutation(B)
    lam = sample_beta(cfg.alpha, B, rng)
    return MixPlan(active=active, perm=perm, lam=lam)


def mix_stats(own: ChannelStats, plan: MixPlan) -> MixedStats:
    B = own.mu.shape[0]
    if plan.batch_size != B:
        raise ValueError(f"plan is for batch size {plan.batch_size}, stats have B={B}")
    lam = torch.as_tensor(plan.lam, dtype=torch.float64).unsqueeze(1)
    perm = torch.as_tensor(plan.perm)

    def mix(m: torch.Tensor) -> torch.Tensor:
        return lam * m + (1.0 - lam) * m[perm]

    return MixedStats(mix(own.mu), mix(own.sigma), mix(own.gamma), mix(own.kappa))


def _bc(t: torch.Tensor) -> torch.Tensor:
    return t.reshape(t.shape[0], t.shape[1], 1, 1, 1)


def _check_shapes(x: torch.Tensor, own: ChannelStats):
    if x.dim() != 5 or tuple(x.shape[:2]) != tuple(own.mu.shape):
        raise ValueError(f"stats of shape {tuple(own.mu.shape)} do not match batch {tuple(x.shape)}")


def _normalized(x: torch.Tensor, own: ChannelStats) -> torch.Tensor:
    return (x - _bc(own.mu)) / _bc(own.sigma)


def apply_mixstyle(x: torch.Tensor, own: ChannelStats, mixed: MixedStats) -> torch.Tensor:
    _check_shapes(x, own)
    xn = _normalized(x, own)
    return xn * _bc(mixed.sigma_mix) + _bc(mixed.mu_mix)


def apply_em1(x: torch.Tensor, own: ChannelStats, mixed: MixedStats,
              beta_skew: float) -> torch.Tensor:
    _check_shapes(x, own)
    xn = _normalized(x, own)
    base = xn * _bc(mixed.sigma_mix) + _bc(mixed.mu_mix)
    return base + beta_skew * _bc(mixed.gamma_mix) * xn.pow(3) * _bc(mixed.sigma_mix)


def apply_em2(x: torch.Tensor, own: ChannelStats, mixed: MixedStats,
              beta_skew: float, beta_kurt: float) -> torch.Tensor:
    _check_shapes(x, own)
    xn = _normalized(x, own)
    return (apply_em1(x, own, mixed, beta_skew)
            + beta_kurt * _bc(mixed.kappa_mix) * xn.pow(4) * _bc(mixed.sigma_mix))


def _dispatch(x: torch.Tensor, own: ChannelStats, mixed: MixedStats, cfg: EMConfig) -> torch.Tensor:
    if cfg.variant == "MixStyle":
        return apply_mixstyle(x, own, mixed)
    if cfg.variant == "EM1":
        return apply_em1(x, own, mixed, cfg.beta_skew)
    if cfg.variant == "EM2":
        return apply_em2(x, own, mixed, cfg.beta_skew, cfg.beta_kurt)
    raise ValueError(f"no transform for variant {cfg.variant!r}")


def em_backward_local(x: torch.Tensor, own: ChannelStats, mixed: MixedStats,
                      cfg: EMConfig) -> torch.Tensor:
    """Elementwise d out / d x with every statistic held constant."""
    bs, bk = cfg.effective_betas()
    x = x.detach().to(torch.float64)
    xn = _normalized(x, own)
    poly = 1.0 + 3.0 * bs * _bc(mixed.gamma_mix) * xn.square() \
        + 4.0 * bk * _bc(mixed.kappa_mix) * xn.pow(3)
    return _bc(mixed.sigma_mix / own.sigma) * poly


class _DetachedEM(torch.autograd.Function):
    """Autograd wrapper whose backward is :func:`em_backward_local`."""

    @staticmethod
    def forward(ctx, x, own, mixed, cfg):
        ctx.save_for_backward(x)
        ctx.em = (own, mixed, cfg)
        out = _dispatch(x.detach().to(torch.float64), own, mixed, cfg)
        return out.to(x.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (x,) = ctx.saved_tensors
        own, mixed, cfg = ctx.em
        sens = em_backward_local(x, own, mixed, cfg)
        return (grad_out * sens).to(grad_out.dtype), None, None, None


def em_transform(x: torch.Tensor, cfg: EMConfig, plan: MixPlan,
                 own: ChannelStats | None = None,
                 mixed: MixedStats | None = None) -> torch.Tensor:
    """Apply ``cfg.variant`` under an explicit plan; differentiable in ``x``.

    ``own``/``mixed`` may be passed in to freeze the statistics (used for
    finite-difference checks and trace replay).
    """
    if not plan.active or not cfg.enabled:
        return x
    if own is None:
        own = compute_channel_stats(x, cfg.eps)
    if mixed is None:
        mixed = mix_stats(own, plan)
    return _DetachedEM.apply(x, own, mixed, cfg)


def em_forward(x: torch.Tensor, cfg: EMConfig, mode: str,
               rng: np.random.Generator) -> torch.Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or not cfg.enabled:
        return x
    plan = sample_mix_plan(x.shape[0], cfg, rng)
    return em_transform(x, cfg, plan)
