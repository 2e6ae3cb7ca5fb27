"""Second-stage latent diffusion: SPADE-decoded image autoencoder and a mask-conditioned denoiser."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import diffusion as df
from . import nn
from .autograd import Tensor
from .mask_generator import LOGVAR_RANGE, kl_loss, reparameterize
from .phantoms import NUM_CLASSES, LabeledVolume

log = logging.getLogger(__name__)

LAMBDA_ADV = 0.05
KL_WEIGHT = 1e-6


def one_hot_resized(labels: np.ndarray, size: int) -> np.ndarray:
    """(N, H, W) labels -> (N, K, size, size) one-hot via nearest-neighbour resize."""
    labels = np.asarray(labels)
    f = labels.shape[-1] // size
    if f * size != labels.shape[-1]:
        raise ValueError(f"cannot resize {labels.shape[-1]} to {size} by an integer factor")
    small = labels[:, f // 2 :: f, f // 2 :: f] if f > 1 else labels
    return np.eye(NUM_CLASSES)[small].transpose(0, 3, 1, 2)


class SpadeBlock(nn.Module):
    """Mask -> per-pixel scale and shift maps. Final layers start at zero."""

    def __init__(self, channels: int, rng, hidden: int = 16, k: int = 3):
        self.shared = nn.Conv2d(NUM_CLASSES, hidden, 3, rng)
        self.gamma = nn.Conv2d(hidden, channels, k, rng, zero=True)
        self.beta = nn.Conv2d(hidden, channels, k, rng, zero=True)

    def forward(self, mask_onehot: np.ndarray) -> tuple[Tensor, Tensor]:
        h = ag.relu(self.shared(Tensor(mask_onehot)))
        return self.gamma(h), self.beta(h)


def spade_modulate(features: Tensor, mask: np.ndarray, block: SpadeBlock) -> Tensor:
    """Parameter-free instance normalisation, then features * (1 + gamma) + beta.

    ``mask`` is an (N, H, W) label batch at any integer multiple of the
    feature resolution.
    """
    features = ag.as_tensor(features)
    normed = ag.group_norm(features, features.shape[1])
    gamma, beta = block(one_hot_resized(mask, features.shape[-1]))
    return normed * (gamma + 1.0) + beta


class PatchDiscriminator(nn.Module):
    """Three strided convolutions; one realism score per receptive-field patch."""

    def __init__(self, rng, width: int = 16):
        self.c1 = nn.Conv2d(1, width, 4, rng, stride=2, padding=1)
        self.c2 = nn.Conv2d(width, 2 * width, 4, rng, stride=2, padding=1)
        self.c3 = nn.Conv2d(2 * width, 1, 3, rng, stride=1, padding=1)

    def forward(self, x) -> Tensor:
        h = ag.leaky_relu(self.c1(ag.as_tensor(x)), 0.2)
        h = ag.leaky_relu(self.c2(h), 0.2)
        return self.c3(h)


def adversarial_losses(discriminator, real, fake) -> tuple[Tensor, Tensor]:
    """Least-squares GAN losses averaged over the patch grid."""
    d_real = discriminator(real)
    d_fake = discriminator(fake)
    d_loss = ((d_real - 1.0) ** 2).mean() * 0.5 + (d_fake**2).mean() * 0.5
    g_loss = ((d_fake - 1.0) ** 2).mean() * 0.5
    return d_loss, g_loss


class ImageAutoencoder(nn.Module):
    def __init__(self, rng, width: int = 32, latent_ch: int = 4):
        self.latent_ch = latent_ch
        w2, w4 = width // 2, width // 4
        self.enc1 = nn.Conv2d(1, width, 3, rng, stride=2)
        self.enc_norm1 = nn.GroupNorm(width)
        self.enc2 = nn.Conv2d(width, width, 3, rng, stride=2)
        self.enc_norm2 = nn.GroupNorm(width)
        self.enc3 = nn.Conv2d(width, width, 3, rng)
        self.to_moments = nn.Conv2d(width, 2 * latent_ch, 1, rng)
        self.dec_in = nn.Conv2d(latent_ch, width, 3, rng)
        self.spade16 = SpadeBlock(width, rng)
        self.dec16 = nn.Conv2d(width, width, 3, rng)
        self.spade32 = SpadeBlock(width, rng)
        self.dec32 = nn.Conv2d(width, w2, 3, rng)
        self.spade64 = SpadeBlock(w2, rng, hidden=8, k=1)
        self.dec64 = nn.Conv2d(w2, w4, 3, rng)
        self.spade_out = SpadeBlock(w4, rng, hidden=8, k=1)
        self.to_image = nn.Conv2d(w4, 1, 3, rng)

    def encode(self, images) -> tuple[Tensor, Tensor]:
        h = ag.silu(self.enc_norm1(self.enc1(ag.as_tensor(images))))
        h = ag.silu(self.enc_norm2(self.enc2(h)))
        m = self.to_moments(ag.silu(self.enc3(h)))
        c = self.latent_ch
        return m[:, :c], ag.clip(m[:, c:], *LOGVAR_RANGE)

    def decode(self, z, mask: np.ndarray) -> Tensor:
        h = self.dec_in(ag.as_tensor(z))
        h = self.dec16(ag.silu(spade_modulate(h, mask, self.spade16)))
        h = ag.upsample_nearest(h, 2)
        h = self.dec32(ag.silu(spade_modulate(h, mask, self.spade32)))
        h = ag.upsample_nearest(h, 2)
        h = self.dec64(ag.silu(spade_modulate(h, mask, self.spade64)))
        return ag.sigmoid(self.to_image(ag.silu(spade_modulate(h, mask, self.spade_out))))

    def reconstruct(self, images, mask) -> np.ndarray:
        with ag.no_grad():
            return self.decode(self.encode(images)[0], mask).data


class SpadeResBlock(nn.Module):
    """Residual block whose normalisations are SPADE-modulated by the mask."""

    def __init__(self, c_in: int, c_out: int, rng, emb_dim: int):
        self.spade1 = SpadeBlock(c_in, rng)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, rng)
        self.emb = nn.Linear(emb_dim, c_out, rng)
        self.spade2 = SpadeBlock(c_out, rng)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, rng)
        self.skip = nn.Conv2d(c_in, c_out, 1, rng) if c_in != c_out else None

    def forward(self, x: Tensor, emb: Tensor, mask: np.ndarray) -> Tensor:
        h = self.conv1(ag.silu(spade_modulate(x, mask, self.spade1)))
        e = self.emb(ag.silu(emb))
        h = h + e.reshape(e.shape[0], e.shape[1], 1, 1)
        h = self.conv2(ag.silu(spade_modulate(h, mask, self.spade2)))
        return h + (self.skip(x) if self.skip is not None else x)


class SpadeDenoiser(nn.Module):
    """Two-level latent U-Net; the bottleneck and decoder blocks are SPADE-conditioned on the mask."""

    buffers = ("latent_scale",)

    def __init__(self, rng, latent_ch: int = 4, width: int = 32, emb_dim: int = 64):
        self.latent_scale = 1.0
        self.time = nn.TimeEmbedding(emb_dim, rng)
        self.inp = nn.Conv2d(latent_ch, width, 3, rng)
        self.down1 = nn.ResBlock(width, width, rng, emb_dim)
        self.down2 = nn.ResBlock(width, 2 * width, rng, emb_dim)
        self.mid = SpadeResBlock(2 * width, 2 * width, rng, emb_dim)
        self.up1 = SpadeResBlock(3 * width, width, rng, emb_dim)
        self.out_norm = nn.GroupNorm(width)
        self.out = nn.Conv2d(width, latent_ch, 3, rng, zero=True)

    def forward(self, x, t, cond, spatial) -> Tensor:
        if spatial is None:
            raise ValueError("SpadeDenoiser needs a conditioning mask")
        x = ag.as_tensor(x)
        emb = self.time(np.asarray(t))
        h0 = self.down1(self.inp(x), emb)
        h = self.down2(ag.avgpool2d(h0, 2), emb)
        h = self.mid(h, emb, spatial)
        h = ag.concat([ag.upsample_nearest(h, 2), h0], axis=1)
        h = self.up1(h, emb, spatial)
        return self.out(ag.silu(self.out_norm(h)))


# -- training -----------------------------------------------------------------------

@dataclass
class ImageTrainLog:
    losses: list[float] = field(default_factory=list)
    d_losses: list[float] = field(default_factory=list)
    phase_epoch_losses: dict[str, list[float]] = field(default_factory=dict)
    val_l1: dict[str, float] = field(default_factory=dict)
    initial_loss: float = float("nan")

    @property
    def epoch_losses(self) -> list[float]:
        """Per-epoch losses of all phases, in training order."""
        return [x for phase in self.phase_epoch_losses.values() for x in phase]


def _arrays(vols: Sequence[LabeledVolume]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([v.image for v in vols]), np.stack([v.labels for v in vols]).astype(np.int64)


def reconstruction_l1(ae: ImageAutoencoder, vols: Sequence[LabeledVolume], batch: int = 64) -> float:
    images, labels = _arrays(vols)
    err = 0.0
    for i in range(0, len(images), batch):
        rec = ae.reconstruct(images[i : i + batch], labels[i : i + batch])
        err += np.abs(rec - images[i : i + batch]).sum()
    return float(err / images.size)


def _ae_phase(ae, disc, opt_g, opt_d, vols, epochs, rng, batch_size, lambda_adv, kl_weight, record, tag):
    images, labels = _arrays(vols)
    losses = record.phase_epoch_losses.setdefault(tag, [])
    for epoch in range(epochs):
        total = 0.0
        for step, idx in enumerate(nn.minibatches(len(images), batch_size, rng)):
            x, m = images[idx], labels[idx]
            z, mu, logvar = ae.encode_reparameterize(x, rng)
            rec = ae.decode(z, m)
            l1 = ag.abs_(rec - Tensor(x)).mean()
            loss = l1 + kl_weight * kl_loss(mu, logvar)
            if lambda_adv > 0:
                _, g_loss = adversarial_losses(disc, x, rec)
                loss = loss + lambda_adv * g_loss
            value = nn.check_finite(loss, f"image AE {tag} epoch {epoch} step {step}")
            opt_g.zero_grad()
            loss.backward()
            opt_g.step()
            if lambda_adv > 0:
                # discriminator sees the reconstruction as a constant
                d_loss, _ = adversarial_losses(disc, x, rec.detach())
                record.d_losses.append(nn.check_finite(d_loss, f"discriminator {tag} epoch {epoch}"))
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()
            record.losses.append(value)
            total += l1.item() * len(idx)
        losses.append(total / len(images))
        log.info("image AE %s epoch %d L1 %.4f", tag, epoch, losses[-1])


def _encode_reparameterize(self, images, rng=None):
    mu, logvar = self.encode(images)
    return reparameterize(mu, logvar, rng), mu, logvar


ImageAutoencoder.encode_reparameterize = _encode_reparameterize


def train_image_autoencoder(
    corpus_a: Sequence[LabeledVolume],
    corpus_b: Sequence[LabeledVolume],
    epochs_a: int = 20,
    epochs_b: int = 10,
    seed: int = 0,
    batch_size: int = 16,
    lr: float = 2e-3,
    lambda_adv: float = LAMBDA_ADV,
    kl_weight: float = KL_WEIGHT,
    val_b: Sequence[LabeledVolume] | None = None,
) -> tuple[ImageAutoencoder, PatchDiscriminator, ImageTrainLog]:
    """Pretrain on modality A, then fine-tune every weight on modality B.

    When ``val_b`` is given, its L1 is recorded before and after fine-tuning.
    """
    rng = np.random.default_rng(seed)
    ae = ImageAutoencoder(np.random.default_rng([seed, 3]))
    disc = PatchDiscriminator(np.random.default_rng([seed, 4]))
    opt_g = nn.Adam(ae, lr=lr, clip_norm=5.0)
    opt_d = nn.Adam(disc, lr=lr, clip_norm=5.0)
    record = ImageTrainLog()
    record.initial_loss = reconstruction_l1(ae, corpus_a[:64])
    _ae_phase(ae, disc, opt_g, opt_d, corpus_a, epochs_a, rng, batch_size, lambda_adv, kl_weight, record, "A")
    if val_b is not None:
        record.val_l1["B_before"] = reconstruction_l1(ae, val_b)
    opt_g = nn.Adam(ae, lr=lr * 0.5, clip_norm=5.0)
    _ae_phase(ae, disc, opt_g, opt_d, corpus_b, epochs_b, rng, batch_size, lambda_adv, kl_weight, record, "B")
    if val_b is not None:
        record.val_l1["B_after"] = reconstruction_l1(ae, val_b)
    return ae, disc, record


def encode_image_latents(ae: ImageAutoencoder, images: np.ndarray, batch: int = 64) -> np.ndarray:
    out = []
    with ag.no_grad():
        for i in range(0, len(images), batch):
            out.append(ae.encode(images[i : i + batch])[0].data)
    return np.concatenate(out)


def train_image_diffusion(
    ae: ImageAutoencoder,
    corpus_a: Sequence[LabeledVolume],
    corpus_b: Sequence[LabeledVolume],
    sched: df.NoiseSchedule,
    epochs_a: int = 20,
    epochs_b: int = 5,
    seed: int = 0,
    batch_size: int = 16,
    lr: float = 1e-3,
    weighting: str = "simplified",
) -> tuple[SpadeDenoiser, ImageTrainLog]:
    """Eps-prediction on frozen-autoencoder latents, conditioned on the paired mask."""
    rng = np.random.default_rng(seed)
    img_a, lab_a = _arrays(corpus_a)
    img_b, lab_b = _arrays(corpus_b)
    lat_a = encode_image_latents(ae, img_a)
    lat_b = encode_image_latents(ae, img_b)
    den = SpadeDenoiser(np.random.default_rng([seed, 5]), latent_ch=lat_a.shape[1])
    den.latent_scale = float(1.0 / lat_a.std())
    record = ImageTrainLog()
    with ag.no_grad():
        k = min(256, len(lat_a))
        prng = np.random.default_rng(321)
        record.initial_loss = df.training_loss(
            den, lat_a[:k] * den.latent_scale, None, sched, prng, weighting, spatial=lab_a[:k]
        ).item()
    for tag, lat, lab, epochs, rate in (("A", lat_a, lab_a, epochs_a, lr), ("B", lat_b, lab_b, epochs_b, lr * 0.5)):
        opt = nn.Adam(den, lr=rate, clip_norm=5.0)
        x0_all = lat * den.latent_scale
        losses = record.phase_epoch_losses.setdefault(tag, [])
        for epoch in range(epochs):
            total = 0.0
            for step, idx in enumerate(nn.minibatches(len(x0_all), batch_size, rng)):
                loss = df.training_loss(den, x0_all[idx], None, sched, rng, weighting, spatial=lab[idx])
                value = nn.check_finite(loss, f"image diffusion {tag} epoch {epoch} step {step}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                record.losses.append(value)
                total += value * len(idx)
            losses.append(total / len(x0_all))
            log.info("image DM %s epoch %d loss %.4f", tag, epoch, losses[-1])
    return den, record


def sample_image(
    denoiser: SpadeDenoiser,
    ae: ImageAutoencoder,
    sched: df.NoiseSchedule,
    masks: np.ndarray,
    seeds: Sequence[int] | int,
    steps: int = 50,
    batch: int = 64,
) -> np.ndarray:
    """DDIM-sample image latents for each mask (one seed per mask) and decode them."""
    masks = np.asarray(masks).astype(np.int64)
    if masks.ndim == 2:
        masks = masks[None]
    if masks.min() < 0 or masks.max() >= NUM_CLASSES:
        raise ValueError("masks must use the 3-class label scheme")
    seeds = [int(s) for s in np.atleast_1d(seeds)]
    if len(seeds) != len(masks):
        raise ValueError(f"{len(seeds)} seeds for {len(masks)} masks")
    lc = denoiser.out.weight.shape[0]
    hw = masks.shape[-1] // 4
    out = []
    for i in range(0, len(masks), batch):
        m = masks[i : i + batch]
        z = df.ddim_sample(denoiser, (len(m), lc, hw, hw), sched, steps, seed=seeds[i : i + batch], spatial=m)
        with ag.no_grad():
            out.append(ae.decode(z / denoiser.latent_scale, m).data)
    return np.concatenate(out)
