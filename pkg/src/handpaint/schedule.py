"""Noise schedule tables and the forward/reverse diffusion steps.

Conventions:

- Discrete timesteps t = 1..T index the noising chain; t = 0 denotes clean
  data, with the boundary value alpha_bar(0) = 1.
- beta[t] is the per-step variance, alpha[t] = 1 - beta[t], and
  alpha_bar(t) is the cumulative product of alpha up to t.
- All ops are pure functions; any stochastic noise is injected by the
  caller so that exact oracles are possible in tests.
- Tensors may be numpy arrays or torch tensors; per-sample timestep
  vectors broadcast over the leading batch dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

ALPHA_BAR_FLOOR = 1e-12


def _coef(value, like):
    """Turn a schedule coefficient (scalar or per-sample vector) into
    something that broadcasts against `like`."""
    if np.isscalar(value) or np.ndim(value) == 0:
        return float(value)
    arr = np.asarray(value, dtype=np.float64)
    shape = (-1,) + (1,) * (like.ndim - 1)
    if torch.is_tensor(like):
        return torch.as_tensor(arr, dtype=like.dtype, device=like.device).reshape(shape)
    return arr.reshape(shape).astype(like.dtype, copy=False)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta/alpha tables plus cumulative products.

    Arrays are float64 and 0-indexed internally; use the `*_at(t)`
    accessors with 1-based timesteps.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"step count must be positive, got {self.T}")
        for name in ("beta", "alpha", "alpha_bar"):
            arr = getattr(self, name)
            if arr.shape != (self.T,):
                raise ValueError(f"{name} must have shape ({self.T},)")
        if np.any(self.beta <= 0.0) or np.any(self.beta >= 1.0):
            raise ValueError("beta values must lie strictly inside (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")
        ref = np.cumprod(self.alpha)
        if not np.allclose(self.alpha_bar, ref, rtol=1e-12, atol=0.0):
            raise ValueError("alpha_bar inconsistent with cumprod(alpha)")

    def _check_t(self, t, lo: int):
        t_arr = np.asarray(t)
        if np.any(t_arr < lo) or np.any(t_arr > self.T):
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")

    def beta_at(self, t):
        self._check_t(t, 1)
        return self.beta[np.asarray(t) - 1]

    def alpha_at(self, t):
        self._check_t(t, 1)
        return self.alpha[np.asarray(t) - 1]

    def alpha_bar_at(self, t):
        """Cumulative product at timestep t, with alpha_bar(0) = 1."""
        self._check_t(t, 0)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[np.asarray(t)]


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule from beta_start to beta_end over T steps."""
    if T < 1:
        raise ValueError(f"step count must be positive, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


@dataclass
class SamplerConfig:
    """Reverse-sampler settings: trajectory length, stochasticity, seed.

    sigma_scale is the eta knob: 0 gives the deterministic sampler, 1
    recovers ancestral-sampling noise levels.
    """

    num_inference_steps: int = 50
    sigma_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_inference_steps < 1:
            raise ValueError("num_inference_steps must be >= 1")
        if not (0.0 <= self.sigma_scale <= 1.0):
            raise ValueError("sigma_scale must lie in [0, 1]")

    def timesteps(self, T: int) -> np.ndarray:
        """Strictly decreasing timesteps in [1, T], largest first."""
        S = self.num_inference_steps
        if S > T:
            raise ValueError(f"num_inference_steps {S} exceeds schedule length {T}")
        if S == 1:
            return np.array([T], dtype=np.int64)
        ts = np.round(np.linspace(T, 1, S)).astype(np.int64)
        if np.any(np.diff(ts) >= 0):
            raise ValueError("timestep spacing failed to be strictly decreasing")
        return ts


def forward_noise(x0, t, eps, s: NoiseSchedule):
    """Closed-form noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    ab = s.alpha_bar_at(t)
    return _coef(np.sqrt(ab), x0) * x0 + _coef(np.sqrt(1.0 - ab), x0) * eps


def predict_x0(xt, eps_hat, t, s: NoiseSchedule):
    """Invert the closed form: (xt - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)."""
    if xt.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: xt {xt.shape} vs eps_hat {eps_hat.shape}")
    ab = s.alpha_bar_at(t)
    if np.any(np.asarray(ab) < ALPHA_BAR_FLOOR):
        raise ValueError(
            f"alpha_bar({t}) below {ALPHA_BAR_FLOOR}; schedule is misconfigured"
        )
    return (xt - _coef(np.sqrt(1.0 - ab), xt) * eps_hat) * _coef(1.0 / np.sqrt(ab), xt)


def ddpm_mean(xt, eps_hat, t, s: NoiseSchedule):
    """Reverse-process mean: (xt - (1-a_t)/sqrt(1-abar_t) eps_hat) / sqrt(a_t)."""
    if xt.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: xt {xt.shape} vs eps_hat {eps_hat.shape}")
    a = s.alpha_at(t)
    ab = s.alpha_bar_at(t)
    inner = xt - _coef((1.0 - a) / np.sqrt(1.0 - ab), xt) * eps_hat
    return _coef(1.0 / np.sqrt(a), xt) * inner


def ddim_sigma(t: int, t_prev: int, s: NoiseSchedule, sigma_scale: float) -> float:
    """sigma_t = eta * sqrt((1-abar_prev)/(1-abar_t)) * sqrt(1 - abar_t/abar_prev)."""
    ab_t = float(s.alpha_bar_at(t))
    ab_p = float(s.alpha_bar_at(t_prev))
    return sigma_scale * math.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * math.sqrt(
        1.0 - ab_t / ab_p
    )


def ddim_step(xt, eps_hat, t: int, t_prev: int, s: NoiseSchedule,
              cfg: SamplerConfig, noise=None):
    """One reverse step to t_prev (cumulative-alpha convention).

    x_prev = sqrt(abar_prev) x0_hat + sqrt(1 - abar_prev - sigma^2) eps_hat
             + sigma * noise
    """
    if t_prev >= t:
        raise ValueError(f"t_prev {t_prev} must be < t {t}")
    ab_p = float(s.alpha_bar_at(t_prev))
    sigma = ddim_sigma(t, t_prev, s, cfg.sigma_scale)
    resid = 1.0 - ab_p - sigma * sigma
    if resid < -1e-12:
        raise ValueError(
            f"sigma^2 {sigma**2:.3e} exceeds 1 - alpha_bar({t_prev}); bad sampler config"
        )
    x0_hat = predict_x0(xt, eps_hat, t, s)
    out = math.sqrt(ab_p) * x0_hat + math.sqrt(max(resid, 0.0)) * eps_hat
    if sigma > 0.0:
        if noise is None:
            raise ValueError("sigma_scale > 0 requires caller-injected noise")
        out = out + sigma * noise
    return out


def sample(denoiser, cond, cfg: SamplerConfig, s: NoiseSchedule, shape) -> torch.Tensor:
    """Run the full reverse trajectory from pure Gaussian noise.

    `denoiser(xt, t, cond)` must return eps_hat, or a tuple whose first
    element is eps_hat (extra heads are ignored here). Deterministic for a
    fixed cfg.seed.
    """
    gen = torch.Generator().manual_seed(cfg.seed)
    x = torch.randn(shape, generator=gen)
    ts = cfg.timesteps(s.T)
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        out = denoiser(x, int(t), cond)
        eps_hat = out[0] if isinstance(out, tuple) else out
        noise = None
        if cfg.sigma_scale > 0.0:
            noise = torch.randn(shape, generator=gen)
        x = ddim_step(x, eps_hat, int(t), t_prev, s, cfg, noise)
    return x
