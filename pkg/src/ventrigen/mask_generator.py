"""First-stage latent diffusion: label autoencoder plus a c-conditioned latent denoiser."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import diffusion as df
from . import nn
from .autograd import Tensor
from .phantoms import NUM_CLASSES, VENTRICLE, LabeledVolume, compute_ratio

log = logging.getLogger(__name__)

LOGVAR_RANGE = (-30.0, 20.0)
KL_WEIGHT = 1e-6


def embed_labels(labels: np.ndarray, table: Tensor) -> Tensor:
    """(N, H, W) integer labels -> (N, E, H, W) learned features."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= table.shape[0]):
        raise ValueError(f"labels must lie in [0, {table.shape[0] - 1}], got [{labels.min()}, {labels.max()}]")
    feats = ag.embedding(labels, table)
    return ag.transpose(feats, (0, 3, 1, 2))


def kl_loss(mu: Tensor, logvar: Tensor) -> Tensor:
    """Mean over elements of 0.5 (mu^2 + exp(logvar) - 1 - logvar)."""
    mu, logvar = ag.as_tensor(mu), ag.as_tensor(logvar)
    return ((mu * mu + ag.exp(logvar) - 1.0 - logvar) * 0.5).mean()


def ce_reconstruction_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax(logits)[target]; logits (N, K, H, W)."""
    logits = ag.as_tensor(logits)
    if logits.ndim == 3:
        logits = logits.reshape((1,) + logits.shape)
        target = np.asarray(target)[None]
    logp = ag.log_softmax(logits, axis=1)
    onehot = np.eye(logits.shape[1])[np.asarray(target)].transpose(0, 3, 1, 2)
    return -(logp * Tensor(onehot)).sum(axis=1).mean()


def reparameterize(mu: Tensor, logvar: Tensor, rng: np.random.Generator | None) -> Tensor:
    """z = mu + exp(logvar / 2) * xi; ``rng=None`` is the deterministic mode z = mu."""
    if rng is None:
        return mu
    xi = rng.standard_normal(mu.shape)
    return mu + ag.exp(logvar * 0.5) * Tensor(xi)


class MaskAutoencoder(nn.Module):
    """Embedding -> strided conv encoder -> (mu, logvar) at 1/4 resolution -> logits decoder."""

    def __init__(self, rng: np.random.Generator, embed_dim: int = 16, latent_ch: int = 4, width: int = 32):
        self.latent_ch = latent_ch
        self.embedding = nn.Embedding(NUM_CLASSES, embed_dim, rng)
        self.enc1 = nn.Conv2d(embed_dim, width, 3, rng, stride=2)
        self.enc_norm1 = nn.GroupNorm(width)
        self.enc2 = nn.Conv2d(width, width, 3, rng, stride=2)
        self.enc_norm2 = nn.GroupNorm(width)
        self.enc3 = nn.Conv2d(width, width, 3, rng)
        self.to_moments = nn.Conv2d(width, 2 * latent_ch, 1, rng)
        self.dec_in = nn.Conv2d(latent_ch, width, 3, rng)
        self.dec1 = nn.Conv2d(width, width, 3, rng)
        self.dec_norm1 = nn.GroupNorm(width)
        self.dec2 = nn.Conv2d(width, width // 2, 3, rng)
        self.dec_norm2 = nn.GroupNorm(width // 2)
        self.dec3 = nn.Conv2d(width // 2, width // 2, 3, rng)
        self.to_logits = nn.Conv2d(width // 2, NUM_CLASSES, 1, rng)

    def encode(self, labels: np.ndarray) -> tuple[Tensor, Tensor]:
        h = embed_labels(labels, self.embedding.table)
        h = ag.silu(self.enc_norm1(self.enc1(h)))
        h = ag.silu(self.enc_norm2(self.enc2(h)))
        h = ag.silu(self.enc3(h))
        m = self.to_moments(h)
        c = self.latent_ch
        return m[:, :c], ag.clip(m[:, c:], *LOGVAR_RANGE)

    def decode(self, z) -> Tensor:
        h = ag.silu(self.dec_in(ag.as_tensor(z)))
        h = ag.silu(self.dec_norm1(self.dec1(h)))
        h = ag.upsample_nearest(h, 2)
        h = ag.silu(self.dec_norm2(self.dec2(h)))
        h = ag.upsample_nearest(h, 2)
        h = ag.silu(self.dec3(h))
        return self.to_logits(h)

    def encode_reparameterize(self, labels, rng: np.random.Generator | None = None):
        mu, logvar = self.encode(labels)
        return reparameterize(mu, logvar, rng), mu, logvar

    def reconstruct(self, labels: np.ndarray) -> np.ndarray:
        with ag.no_grad():
            mu, _ = self.encode(labels)
            return self.decode(mu).data.argmax(axis=1)


class ConditionAttention(nn.Module):
    """Cross-attention from feature pixels to a conditioning token plus a learned null token.

    The null token lets pixels attend away from the condition, so the
    softmax is not trivially 1 over a single key.
    """

    def __init__(self, channels: int, token_dim: int, rng, d_k: int = 32):
        self.norm = nn.GroupNorm(channels)
        self.q = nn.Linear(channels, d_k, rng)
        self.k = nn.Linear(token_dim, d_k, rng)
        self.v = nn.Linear(token_dim, channels, rng)
        self.out = nn.Linear(channels, channels, rng, zero=True)
        self.null = nn.Parameter(rng.normal(0, 0.02, (1, 1, token_dim)))
        self.scale = 1.0 / np.sqrt(d_k)

    def forward(self, h: Tensor, token: Tensor) -> Tensor:
        n, c, hh, ww = h.shape
        x = ag.transpose(self.norm(h).reshape(n, c, hh * ww), (0, 2, 1))  # (N, HW, C)
        tokens = ag.concat([token.reshape(n, 1, -1), self.null + Tensor(np.zeros((n, 1, 1)))], axis=1)
        q = self.q(x)
        k = self.k(tokens)
        attn = ag.softmax(ag.matmul(q, ag.transpose(k, (0, 2, 1))) * self.scale, axis=-1)
        out = self.out(ag.matmul(attn, self.v(tokens)))
        return h + ag.transpose(out, (0, 2, 1)).reshape(n, c, hh, ww)


class MaskDenoiser(nn.Module):
    """Two-level latent U-Net with condition cross-attention at the bottleneck."""

    buffers = ("latent_scale",)

    def __init__(self, rng: np.random.Generator, latent_ch: int = 4, width: int = 32, emb_dim: int = 64):
        self.latent_scale = 1.0
        self.time = nn.TimeEmbedding(emb_dim, rng)
        self.cond1 = nn.Linear(2, emb_dim, rng)
        self.cond2 = nn.Linear(emb_dim, emb_dim, rng)
        self.inp = nn.Conv2d(latent_ch, width, 3, rng)
        self.down1 = nn.ResBlock(width, width, rng, emb_dim)
        self.down2 = nn.ResBlock(width, 2 * width, rng, emb_dim)
        self.attn = ConditionAttention(2 * width, emb_dim, rng)
        self.mid = nn.ResBlock(2 * width, 2 * width, rng, emb_dim)
        self.up1 = nn.ResBlock(3 * width, width, rng, emb_dim)
        self.out_norm = nn.GroupNorm(width)
        self.out = nn.Conv2d(width, latent_ch, 3, rng, zero=True)

    def forward(self, x, t, cond, spatial=None) -> Tensor:
        x = ag.as_tensor(x)
        n = x.shape[0]
        emb = self.time(np.asarray(t))
        if cond is None:
            cond = np.stack([np.full(n, 0.5), np.ones(n)], axis=1)
        token = self.cond2(ag.silu(self.cond1(Tensor(np.asarray(cond, dtype=np.float64)))))
        h0 = self.down1(self.inp(x), emb)
        h = self.down2(ag.avgpool2d(h0, 2), emb)
        h = self.attn(h, token)
        h = self.mid(h, emb)
        h = ag.concat([ag.upsample_nearest(h, 2), h0], axis=1)
        h = self.up1(h, emb)
        return self.out(ag.silu(self.out_norm(h)))


# -- training -------------------------------------------------------------------

@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")


def _labels(vols: Sequence[LabeledVolume]) -> np.ndarray:
    return np.stack([v.labels for v in vols]).astype(np.int64)


def mask_ae_loss(ae: MaskAutoencoder, labels: np.ndarray, rng, kl_weight: float = KL_WEIGHT) -> Tensor:
    z, mu, logvar = ae.encode_reparameterize(labels, rng)
    return ce_reconstruction_loss(ae.decode(z), labels) + kl_weight * kl_loss(mu, logvar)


def train_mask_autoencoder(
    vols: Sequence[LabeledVolume],
    epochs: int = 40,
    seed: int = 0,
    batch_size: int = 16,
    lr: float = 2e-3,
    embed_dim: int = 16,
    kl_weight: float = KL_WEIGHT,
    ae: MaskAutoencoder | None = None,
) -> tuple[MaskAutoencoder, TrainLog]:
    rng = np.random.default_rng(seed)
    ae = ae or MaskAutoencoder(np.random.default_rng([seed, 1]), embed_dim=embed_dim)
    opt = nn.Adam(ae, lr=lr, clip_norm=5.0)
    labels = _labels(vols)
    record = TrainLog()
    with ag.no_grad():
        probe = labels[: min(64, len(labels))]
        record.initial_loss = mask_ae_loss(ae, probe, np.random.default_rng(0), kl_weight).item()
    for epoch in range(epochs):
        total = 0.0
        for step, idx in enumerate(nn.minibatches(len(labels), batch_size, rng)):
            loss = mask_ae_loss(ae, labels[idx], rng, kl_weight)
            value = nn.check_finite(loss, f"mask AE epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            record.losses.append(value)
            total += value * len(idx)
        record.epoch_losses.append(total / len(labels))
        log.info("mask AE epoch %d loss %.4f", epoch, record.epoch_losses[-1])
    return ae, record


def encode_latents(ae: MaskAutoencoder, labels: np.ndarray, batch: int = 64) -> np.ndarray:
    """Deterministic (z = mu) latents for a label batch."""
    out = []
    with ag.no_grad():
        for i in range(0, len(labels), batch):
            out.append(ae.encode(labels[i : i + batch])[0].data)
    return np.concatenate(out)


def train_mask_diffusion(
    ae: MaskAutoencoder,
    vols: Sequence[LabeledVolume],
    sched: df.NoiseSchedule,
    epochs: int = 5,
    seed: int = 0,
    batch_size: int = 16,
    lr: float = 1e-3,
    p_uncond: float = 0.2,
    weighting: str = "simplified",
    denoiser: MaskDenoiser | None = None,
) -> tuple[MaskDenoiser, TrainLog]:
    """Train eps-prediction on frozen-autoencoder latents with condition dropout."""
    rng = np.random.default_rng(seed)
    latents = encode_latents(ae, _labels(vols))
    c = np.array([v.c for v in vols], dtype=np.float64)
    if denoiser is None:
        denoiser = MaskDenoiser(np.random.default_rng([seed, 2]), latent_ch=latents.shape[1])
        denoiser.latent_scale = float(1.0 / latents.std())
    x0_all = latents * denoiser.latent_scale
    opt = nn.Adam(denoiser, lr=lr, clip_norm=5.0)
    record = TrainLog()
    with ag.no_grad():
        k = min(256, len(x0_all))
        prng = np.random.default_rng(123)
        record.initial_loss = df.training_loss(
            denoiser, x0_all[:k], df.dropout_batch(c[:k], p_uncond, prng), sched, prng, weighting
        ).item()
    for epoch in range(epochs):
        total = 0.0
        for step, idx in enumerate(nn.minibatches(len(x0_all), batch_size, rng)):
            cond = df.dropout_batch(c[idx], p_uncond, rng)
            loss = df.training_loss(denoiser, x0_all[idx], cond, sched, rng, weighting)
            value = nn.check_finite(loss, f"mask diffusion epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            record.losses.append(value)
            total += value * len(idx)
        record.epoch_losses.append(total / len(x0_all))
        log.info("mask DM epoch %d loss %.4f", epoch, record.epoch_losses[-1])
    return denoiser, record


# -- sampling ---------------------------------------------------------------------

def sample_latents(
    denoiser: MaskDenoiser,
    sched: df.NoiseSchedule,
    c,
    guidance: float,
    seeds: Sequence[int] | int,
    steps: int = 50,
    n: int | None = None,
    latent_hw: int = 16,
) -> np.ndarray:
    seeds_arr = np.atleast_1d(seeds)
    n = n if n is not None else len(seeds_arr)
    shape = (n, denoiser.out.weight.shape[0], latent_hw, latent_hw)
    z = df.ddim_sample(denoiser, shape, sched, steps, c=c, guidance=guidance, seed=seeds)
    return z / denoiser.latent_scale


def sample_mask(
    denoiser: MaskDenoiser,
    ae: MaskAutoencoder,
    sched: df.NoiseSchedule,
    c,
    guidance: float,
    seeds: Sequence[int] | int,
    steps: int = 50,
    batch: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample label grids for one seed per mask; returns (labels (N, H, W), ventricle ratios).

    ``c`` is a scalar or one value per seed. No degenerate-output filtering:
    the raw argmax mask is returned together with its achieved ratio.
    """
    seeds = [int(s) for s in np.atleast_1d(seeds)]
    cvec = np.broadcast_to(np.asarray(c, dtype=np.float64), (len(seeds),))
    if np.any(cvec < 0) or np.any(cvec > 1.5):
        raise ValueError("c must lie in [0, 1.5]")
    if guidance < 0:
        raise ValueError(f"guidance must be >= 0, got {guidance}")
    masks = []
    for i in range(0, len(seeds), batch):
        chunk = seeds[i : i + batch]
        z = sample_latents(denoiser, sched, cvec[i : i + batch], guidance, chunk, steps)
        with ag.no_grad():
            masks.append(ae.decode(z).data.argmax(axis=1).astype(np.uint8))
    labels = np.concatenate(masks)
    return labels, np.array([_safe_ratio(m) for m in labels])


def _safe_ratio(labels: np.ndarray) -> float:
    try:
        return compute_ratio(labels)
    except ValueError:
        return 0.0


def ventricle_area(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    return (labels == VENTRICLE).reshape(labels.shape[0], -1).sum(axis=1)
