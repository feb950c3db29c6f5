"""Noise schedules, the closed-form forward process, and reverse samplers.

Timesteps are 1-based: t ranges over [1, T], with abar(0) := 1 so that the
final step of a deterministic sampler lands exactly on the clean signal.
Schedule tables are kept in fp64; the identities they satisfy are part of
the verification suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor, no_grad

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02

NULL_CLASS = 3  # reserved unconditional token for classifier-free guidance


@dataclass
class NoiseSchedule:
    """Per-timestep beta/alpha/alpha-bar/posterior-variance tables (fp64)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} out of range [1, {self.T}]")

    def abar(self, t: int) -> float:
        """alpha_bar at timestep t, with abar(0) := 1."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bar[t - 1])


def make_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Linear beta schedule inclusive of both endpoints (T=1 gives [beta_start])."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"invalid beta range ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    abar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = (1.0 - abar_prev) / (1.0 - alpha_bar) * beta
    posterior_var[0] = beta[0]
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, posterior_var=posterior_var)


def q_sample(x0: Tensor, t, eps: Tensor, s: NoiseSchedule) -> Tensor:
    """Forward process draw: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps.

    ``t`` may be a single int or one int per batch item.
    """
    if x0.shape != eps.shape:
        raise ValueError(f"q_sample: eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    if np.ndim(t) == 0:
        s._check_t(int(t))
        ab = s.abar(int(t))
        return T.add(T.mul(x0, float(np.sqrt(ab))), T.mul(eps, float(np.sqrt(1.0 - ab))))
    ts = np.asarray(t, dtype=np.int64)
    if ts.shape[0] != x0.shape[0]:
        raise ValueError("q_sample: per-item t length must match batch size")
    for ti in ts:
        s._check_t(int(ti))
    ab = s.alpha_bar[ts - 1]
    shape = (-1,) + (1,) * (x0.data.ndim - 1)
    c0 = Tensor(np.sqrt(ab).reshape(shape).astype(x0.dtype) * np.ones_like(x0.data))
    c1 = Tensor(np.sqrt(1.0 - ab).reshape(shape).astype(x0.dtype) * np.ones_like(x0.data))
    return T.add(T.mul(x0, c0), T.mul(eps, c1))


def predict_x0(x_t: Tensor, eps_hat: Tensor, t: int, s: NoiseSchedule) -> Tensor:
    """Algebraic inverse of q_sample: (x_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t)."""
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"predict_x0: shape mismatch {tuple(x_t.shape)} vs {tuple(eps_hat.shape)}")
    ab = s.abar(int(t))
    inv = 1.0 / float(np.sqrt(ab))
    return T.mul(T.add(x_t, T.mul(eps_hat, -float(np.sqrt(1.0 - ab)))), inv)


def ddpm_step(x_t: Tensor, eps_hat: Tensor, t: int, z: Tensor, s: NoiseSchedule) -> Tensor:
    """Ancestral step: posterior mean plus sqrt(posterior_var) noise (none at t=1)."""
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"ddpm_step: shape mismatch {tuple(x_t.shape)} vs {tuple(eps_hat.shape)}")
    s._check_t(int(t))
    t = int(t)
    beta = float(s.beta[t - 1])
    alpha = float(s.alpha[t - 1])
    ab = float(s.alpha_bar[t - 1])
    mean = T.mul(T.add(x_t, T.mul(eps_hat, -beta / float(np.sqrt(1.0 - ab)))), 1.0 / float(np.sqrt(alpha)))
    if t == 1:
        return mean
    sigma = float(np.sqrt(s.posterior_var[t - 1]))
    return T.add(mean, T.mul(z, sigma))


def ddim_step(x_t: Tensor, eps_hat: Tensor, t: int, t_prev: int, eta: float,
              s: NoiseSchedule, z: Tensor | None = None) -> Tensor:
    """Deterministic (eta=0) or partially stochastic jump from t to t_prev."""
    if not t_prev < t:
        raise ValueError(f"ddim_step: t_prev={t_prev} must be < t={t}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"ddim_step: eta={eta} outside [0, 1]")
    ab_t = s.abar(int(t))
    ab_p = s.abar(int(t_prev))
    x0 = predict_x0(x_t, eps_hat, t, s)
    sigma = eta * float(np.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_p))
    dir_coeff = float(np.sqrt(max(1.0 - ab_p - sigma * sigma, 0.0)))
    out = T.add(T.mul(x0, float(np.sqrt(ab_p))), T.mul(eps_hat, dir_coeff))
    if sigma > 0.0:
        if z is None:
            raise ValueError("ddim_step: eta > 0 requires a noise tensor")
        out = T.add(out, T.mul(z, sigma))
    return out


def diffusion_loss(eps: Tensor, eps_hat: Tensor) -> Tensor:
    """Epsilon-prediction objective: mean squared error."""
    return T.mse_loss(eps_hat, eps)


@dataclass
class SamplerConfig:
    kind: str = "ddim"  # "ddpm" | "ddim"
    steps: int = 50
    eta: float = 0.0
    guidance_scale: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.eta < 0.0 or self.eta > 1.0:
            raise ValueError(f"eta={self.eta} outside [0, 1]")
        if self.guidance_scale < 0.0:
            raise ValueError(f"guidance_scale={self.guidance_scale} must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def ddim_timesteps(T_total: int, steps: int) -> list[int]:
    """Evenly spaced descending subset of [1, T] including both T and 1."""
    if steps > T_total:
        raise ValueError(f"steps={steps} exceeds schedule length {T_total}")
    ts = np.unique(np.round(np.linspace(1, T_total, steps)).astype(np.int64))
    return [int(t) for t in ts[::-1]]


def sample(denoise_fn, s: NoiseSchedule, cfg: SamplerConfig, class_id: int,
           hint: Tensor | None = None, count: int = 1,
           latent_shape: tuple = (4, 8, 8)) -> Tensor:
    """Full reverse loop from z_T ~ N(0, I); deterministic given seed and cfg.

    ``denoise_fn(z_t, t, class_id, hint)`` returns the predicted noise.
    Guidance blends eps = eps_null + w (eps_cond - eps_null); w=0 is purely
    unconditional and w=1 purely conditional, so the extra network call is
    skipped in those cases.
    """
    if cfg.kind == "ddpm" and cfg.steps != s.T:
        raise ValueError(f"ddpm sampling requires steps == T ({s.T}), got {cfg.steps}")
    rng = Rng(cfg.seed).derive("sample")
    shape = (count,) + tuple(latent_shape)
    w = cfg.guidance_scale

    def guided_eps(z_t, t):
        if w == 0.0:
            return denoise_fn(z_t, t, NULL_CLASS, hint)
        if w == 1.0:
            return denoise_fn(z_t, t, class_id, hint)
        e_cond = denoise_fn(z_t, t, class_id, hint)
        e_null = denoise_fn(z_t, t, NULL_CLASS, hint)
        return T.add(e_null, T.mul(T.add(e_cond, T.mul(e_null, -1.0)), w))

    with no_grad():
        z = Tensor(rng.normal(shape))
        if cfg.kind == "ddpm":
            for t in range(s.T, 0, -1):
                eps_hat = guided_eps(z, t)
                noise = Tensor(rng.normal(shape)) if t > 1 else Tensor(np.zeros(shape, dtype=np.float32))
                z = ddpm_step(z, eps_hat, t, noise, s)
        else:
            ladder = ddim_timesteps(s.T, cfg.steps)
            for i, t in enumerate(ladder):
                t_prev = ladder[i + 1] if i + 1 < len(ladder) else 0
                eps_hat = guided_eps(z, t)
                noise = Tensor(rng.normal(shape)) if cfg.eta > 0.0 else None
                z = ddim_step(z, eps_hat, t, t_prev, cfg.eta, s, z=noise)
    return z
