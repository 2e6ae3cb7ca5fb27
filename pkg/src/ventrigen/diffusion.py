"""Noise schedules, forward corruption, DDPM/DDIM samplers and classifier-free guidance.

Arrays are indexed by timestep with the convention that index 0 is the clean
signal (alpha_bar[0] == 1), so ``alpha_bar[t]`` for t in 1..T matches the
usual notation directly.

A *denoiser* is any callable ``denoiser(x_t, t, cond, spatial) -> eps_hat``
where ``x_t`` is a batch (N, ...), ``t`` an int array (N,), ``cond`` either
None or an (N, 2) array of (c, unconditional flag), and ``spatial`` an
optional (N, H, W) label batch. It may return a Tensor or an ndarray.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_sigma: np.ndarray
    sigma_mode: str = "beta"

    def check_t(self, t, lo: int = 1) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < lo) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [{lo}, {self.T}]: {t}")
        return t


def build_linear_schedule(
    T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02, sigma_mode: str = "beta"
) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if sigma_mode == "beta":
        var = beta.copy()
    elif sigma_mode == "beta_tilde":
        var = np.zeros_like(beta)
        var[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    else:
        raise ValueError(f"unknown sigma_mode {sigma_mode!r}")
    return NoiseSchedule(T, beta, alpha, alpha_bar, np.sqrt(var), sigma_mode)


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape((-1,) + (1,) * (ndim - 1))


def forward_sample(x0, t, eps, sched: NoiseSchedule):
    """sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, for a scalar t or one t per batch item.

    t = 0 is accepted and returns x0 (abar_0 = 1).
    """
    t = sched.check_t(t, lo=0)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} does not match x0 shape {x0.shape}")
    ab = sched.alpha_bar[t]
    if np.ndim(ab):
        ab = _bcast(ab, x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def loss_weight(t, sched: NoiseSchedule) -> np.ndarray:
    """beta_t^2 / (2 sigma_t^2 alpha_t (1 - abar_t)) per timestep."""
    t = np.asarray(t)
    sigma2 = sched.posterior_sigma[t] ** 2
    # beta_tilde vanishes at t=1; use the t=2 value there as a floor
    if sched.sigma_mode == "beta_tilde":
        sigma2 = np.maximum(sigma2, sched.posterior_sigma[2] ** 2)
    b = sched.beta[t]
    return b * b / (2.0 * sigma2 * sched.alpha[t] * (1.0 - sched.alpha_bar[t]))


def _to_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def training_loss(
    denoiser: Callable,
    x0: np.ndarray,
    cond: np.ndarray | None,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    weighting: str = "simplified",
    spatial: np.ndarray | None = None,
    t: np.ndarray | None = None,
    eps: np.ndarray | None = None,
) -> Tensor:
    """Noise-prediction objective: per-item squared error norm, averaged over the batch."""
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.shape[0]
    if n == 0:
        raise ValueError("training_loss: empty batch")
    if t is None:
        t = rng.integers(1, sched.T + 1, size=n)
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    xt = forward_sample(x0, t, eps, sched)
    pred = _to_tensor(denoiser(xt, t, cond, spatial))
    if pred.shape != x0.shape:
        raise ValueError(f"denoiser returned {pred.shape}, expected {x0.shape}")
    diff = pred - Tensor(eps)
    per_item = (diff * diff).reshape(n, -1).sum(axis=1)
    if weighting == "eq2":
        per_item = per_item * Tensor(loss_weight(t, sched))
    elif weighting != "simplified":
        raise ValueError(f"unknown loss weighting {weighting!r}")
    return per_item.mean()


def ddpm_step(x_t, t: int, eps_hat, sched: NoiseSchedule, z=None) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1}."""
    t = int(sched.check_t(t))
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if z is None:
        z = np.zeros_like(x_t)
    z = np.asarray(z, dtype=np.float64)
    if t == 1 and np.any(z != 0):
        raise ValueError("ddpm_step: noise must be zero at t=1")
    b = sched.beta[t]
    mean = (x_t - b / np.sqrt(1.0 - sched.alpha_bar[t]) * eps_hat) / np.sqrt(sched.alpha[t])
    return mean + sched.posterior_sigma[t] * z


def cfg_combine(eps_cond, eps_uncond, G: float):
    """G * eps_cond + (1 - G) * eps_uncond."""
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"cfg_combine: shapes {eps_cond.shape} and {eps_uncond.shape} differ")
    if G == 1.0:
        return eps_cond
    out = G * eps_cond + (1.0 - G) * eps_uncond
    # where the two predictions agree, the blend is that value exactly, free of rounding
    return np.where(eps_cond == eps_uncond, eps_cond, out)


@dataclass(frozen=True)
class Condition:
    c: float
    unconditional: bool = False

    def as_row(self) -> tuple[float, float]:
        return (float(self.c), 1.0 if self.unconditional else 0.0)


def condition_dropout(cond: Condition, p: float, rng: np.random.Generator) -> Condition:
    """With probability p, switch to the unconditional case with c redrawn from U[0, 1]."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1], got {p}")
    if rng.random() < p:
        return Condition(float(rng.random()), True)
    return cond


def dropout_batch(c: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Vectorised ``condition_dropout``: returns an (N, 2) (c, flag) array."""
    c = np.asarray(c, dtype=np.float64)
    drop = rng.random(c.shape[0]) < p
    fresh = rng.random(c.shape[0])
    return np.stack([np.where(drop, fresh, c), drop.astype(np.float64)], axis=1)


def _chain_start(shape: tuple[int, ...], seed) -> tuple[np.ndarray, np.ndarray, list]:
    """Initial x_T, unconditional-pass c values and noise generators.

    ``seed`` is one seed for the whole batch or one seed per chain; with
    per-chain seeds a chain's trajectory does not depend on its batch-mates.
    """
    if np.ndim(seed) == 0:
        rng = np.random.default_rng(int(seed))
        return rng.standard_normal(shape), rng.random(shape[0]), [rng]
    seeds = [int(s) for s in seed]
    if len(seeds) != shape[0]:
        raise ValueError(f"got {len(seeds)} chain seeds for batch of {shape[0]}")
    rngs = [np.random.default_rng(s) for s in seeds]
    x = np.stack([r.standard_normal(shape[1:]) for r in rngs])
    return x, np.array([r.random() for r in rngs]), rngs


def _step_noise(rngs: list, shape: tuple[int, ...]) -> np.ndarray:
    if len(rngs) == 1:
        return rngs[0].standard_normal(shape)
    return np.stack([r.standard_normal(shape[1:]) for r in rngs])


class GuidedDenoiser:
    """Wraps a conditional denoiser so each call performs the (optional) CFG double pass."""

    def __init__(self, denoiser, c, guidance: float, n: int, uncond_c: np.ndarray | None = None):
        self.denoiser = denoiser
        self.guidance = float(guidance)
        if guidance < 0:
            raise ValueError(f"guidance must be >= 0, got {guidance}")
        if c is None:
            self.cond = None
        else:
            cvec = np.broadcast_to(np.asarray(c, dtype=np.float64), (n,))
            self.cond = np.stack([cvec, np.zeros(n)], axis=1)
        u = np.full(n, 0.5) if uncond_c is None else uncond_c
        self.uncond = np.stack([u, np.ones(n)], axis=1)

    def __call__(self, x, t, spatial=None):
        eps_c = _as_array(self.denoiser(x, t, self.cond, spatial))
        if self.cond is None or self.guidance == 1.0:
            return eps_c
        eps_u = _as_array(self.denoiser(x, t, self.uncond, spatial))
        return cfg_combine(eps_c, eps_u, self.guidance)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Uniform-stride decreasing subsequence from T down to 1."""
    if steps < 1 or steps > T:
        raise ValueError(f"DDIM steps must lie in [1, {T}], got {steps}")
    if steps == 1:
        return np.array([T])
    return np.unique(np.round(np.linspace(1, T, steps)).astype(int))[::-1]


def ddim_sample(
    denoiser: Callable,
    shape: tuple[int, ...],
    sched: NoiseSchedule,
    steps: int = 50,
    c=None,
    guidance: float = 1.0,
    seed=0,
    spatial: np.ndarray | None = None,
    x_T: np.ndarray | None = None,
) -> np.ndarray:
    """Deterministic (eta = 0) DDIM sampling; returns the final clean estimate."""
    ts = ddim_timesteps(sched.T, steps)
    n = shape[0]
    x, u, _ = _chain_start(shape, seed)
    if x_T is not None:
        x = np.array(x_T, dtype=np.float64)
    guided = GuidedDenoiser(denoiser, c, guidance, n, u)
    with ag.no_grad():
        for i, t in enumerate(ts):
            t_next = ts[i + 1] if i + 1 < len(ts) else 0
            tb = np.full(n, t)
            eps = guided(x, tb, spatial)
            ab, ab_next = sched.alpha_bar[t], sched.alpha_bar[t_next]
            x0_hat = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
            x = np.sqrt(ab_next) * x0_hat + np.sqrt(1.0 - ab_next) * eps
    return x


def ddpm_sample(
    denoiser: Callable,
    shape: tuple[int, ...],
    sched: NoiseSchedule,
    c=None,
    guidance: float = 1.0,
    seed=0,
    spatial: np.ndarray | None = None,
) -> np.ndarray:
    """Full ancestral sampling over all T steps."""
    n = shape[0]
    x, u, rngs = _chain_start(shape, seed)
    guided = GuidedDenoiser(denoiser, c, guidance, n, u)
    with ag.no_grad():
        for t in range(sched.T, 0, -1):
            eps = guided(x, np.full(n, t), spatial)
            z = _step_noise(rngs, shape) if t > 1 else None
            x = ddpm_step(x, t, eps, sched, z)
    return x

