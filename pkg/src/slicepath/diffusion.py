"""Diffusion core: cosine noise schedule, forward corruption, masked
channel-weighted x0-prediction loss with SNR timestep weighting, and the
ancestral reverse-time sampler.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as model_mod
from .autodiff import Tensor


class AllMasked(ValueError):
    """Loss mask has no valid positions."""


class NonFiniteState(ArithmeticError):
    """Sampler state became NaN/Inf; carries the failing step index."""

    def __init__(self, step: int):
        super().__init__(f"non-finite sampler state at step t={step}")
        self.step = step


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step noise schedule arrays, indexed t = 0 .. T-1."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray
    snr: np.ndarray

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bar", "snr"):
            if len(getattr(self, name)) != self.T:
                raise ValueError(f"{name} must have length T={self.T}")

    def snr_weight(self, gamma: float = 5.0) -> np.ndarray:
        """min(SNR, gamma) normalized to unit mean over timesteps."""
        clipped = np.minimum(self.snr, gamma)
        return clipped / clipped.mean()


def make_cosine_schedule(T: int, s: float = 0.008) -> DiffusionSchedule:
    """Cosine schedule: alpha_bar_t = f(t)/f(0), f(t) = cos^2(((t/T+s)/(1+s)) * pi/2),
    evaluated at steps t = 1..T with betas clipped to (0, 0.999]."""
    if T < 2:
        raise ValueError("schedule needs T >= 2")
    grid = np.arange(T + 1, dtype=float)
    f = np.cos(((grid / T + s) / (1 + s)) * np.pi / 2) ** 2
    alpha_bar_raw = f[1:] / f[0]
    betas = 1.0 - alpha_bar_raw / np.concatenate([[1.0], alpha_bar_raw[:-1]])
    betas = np.clip(betas, 1e-12, 0.999)
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    snr = alpha_bar / (1.0 - alpha_bar)
    return DiffusionSchedule(T, betas, alphas, alpha_bar, snr)


@dataclass(frozen=True)
class LossWeights:
    """Fixed per-channel weights for (X, Y, E) plus the SNR clipping point."""

    channel: tuple = (1.3, 1.3, 0.4)
    snr_gamma: float = 5.0

    def __post_init__(self):
        if len(self.channel) < 1 or any(w <= 0 for w in self.channel):
            raise ValueError("channel weights must be positive")


def q_sample(x0: np.ndarray, t, noise: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """Forward corruption x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.

    ``x0`` is (3, L) or (B, 3, L); ``t`` scalar or (B,).
    """
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    abar = schedule.alpha_bar[np.asarray(t)]
    if np.ndim(abar) == 1:  # per-item factors for a batch
        abar = abar.reshape(-1, *([1] * (x0.ndim - 1)))
    coef_signal = np.sqrt(abar).astype(x0.dtype)
    coef_noise = np.sqrt(1.0 - abar).astype(x0.dtype)
    return coef_signal * x0 + coef_noise * noise


def loss(
    x0,
    x0_hat,
    mask,
    weights: LossWeights,
    t,
    schedule: DiffusionSchedule,
) -> Tensor:
    """Masked, channel-weighted squared error on predicted clean keypoints.

    Per item: (1/sum m) * sum_i m_i * sum_c w_c (x0 - x0_hat)^2, then scaled
    by the SNR-based timestep weight and averaged over the batch.
    """
    x0_hat = ad.as_tensor(x0_hat)
    single = x0_hat.ndim == 2
    if single:
        x0_hat = ad.reshape(x0_hat, (1,) + x0_hat.shape)
    dtype = x0_hat.data.dtype
    x0 = np.asarray(x0, dtype=dtype).reshape(x0_hat.shape)
    mask = np.asarray(mask, dtype=dtype).reshape(x0_hat.shape[0], x0_hat.shape[2])
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise AllMasked("a batch item has no valid positions")

    channel = np.asarray(weights.channel, dtype=dtype).reshape(1, -1, 1)
    se = ad.square(x0_hat - Tensor(x0)) * Tensor(channel)
    per_step = ad.sum_(se, axis=1)  # (B, L)
    masked = ad.sum_(per_step * Tensor(mask), axis=1) * Tensor((1.0 / counts).astype(dtype))
    snr_w = schedule.snr_weight(weights.snr_gamma)[np.atleast_1d(t)].astype(dtype)
    if snr_w.shape[0] != masked.shape[0]:
        snr_w = np.broadcast_to(snr_w, masked.shape).copy()
    return ad.mean(masked * Tensor(snr_w))


def masked_mse(x0, x0_hat, mask) -> float:
    """Unweighted form of the loss (no channel or SNR weights); scalar metric."""
    x0_hat = np.asarray(x0_hat.data if isinstance(x0_hat, Tensor) else x0_hat, dtype=float)
    if x0_hat.ndim == 2:
        x0_hat = x0_hat[None]
    x0 = np.asarray(x0, dtype=float).reshape(x0_hat.shape)
    mask = np.asarray(mask, dtype=float).reshape(x0_hat.shape[0], x0_hat.shape[2])
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise AllMasked("a batch item has no valid positions")
    se = ((x0 - x0_hat) ** 2).sum(axis=1)
    return float((((se * mask).sum(axis=1)) / counts).mean())


def sample(
    tokens,
    length: int,
    schedule: DiffusionSchedule,
    params,
    unet_cfg,
    rng: np.random.Generator,
    denoise_fn=None,
    trace_path=None,
) -> np.ndarray:
    """Ancestral sampling from pure noise down to a clean (3, L) sequence.

    The posterior mean uses the x0-parameterization; sigma_t^2 is the DDPM
    posterior variance with z = 0 at the final step. Output is clamped to
    [-1, 1]. ``trace_path`` optionally records per-step x0_hat norms as CSV.
    """
    if denoise_fn is None:
        frozen = {name: Tensor(tensor.data) for name, tensor in params.items()}

        def denoise_fn(x_t, t, tok):
            return model_mod.denoise(x_t, t, tok, frozen, unet_cfg)

    tokens = ad.as_tensor(tokens)
    x = rng.standard_normal((3, length))
    trace = []
    for t in range(schedule.T - 1, -1, -1):
        x0_hat = np.asarray(denoise_fn(Tensor(x), t, tokens).data, dtype=float)
        if x0_hat.shape != x.shape:
            raise ValueError(f"denoiser returned {x0_hat.shape}, expected {x.shape}")
        abar_t = schedule.alpha_bar[t]
        abar_prev = schedule.alpha_bar[t - 1] if t > 0 else 1.0
        beta_t = schedule.betas[t]
        alpha_t = schedule.alphas[t]
        coef_x0 = np.sqrt(abar_prev) * beta_t / (1.0 - abar_t)
        coef_xt = np.sqrt(alpha_t) * (1.0 - abar_prev) / (1.0 - abar_t)
        mean = coef_x0 * x0_hat + coef_xt * x
        if t > 0:
            sigma = np.sqrt(beta_t * (1.0 - abar_prev) / (1.0 - abar_t))
            x = mean + sigma * rng.standard_normal(x.shape)
        else:
            x = mean
        if not np.isfinite(x).all():
            raise NonFiniteState(t)
        if trace_path is not None:
            trace.append((t, float(np.linalg.norm(x0_hat))))
    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "x0_hat_norm"])
            writer.writerows(trace)
    return np.clip(x, -1.0, 1.0)
