"""Segmentation benchmark: a small U-Net, overlap/volume metrics, and image-quality metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .phantoms import NUM_CLASSES, VENTRICLE

log = logging.getLogger(__name__)


# -- overlap and volume metrics ------------------------------------------------------

def _binary(pred, gt, cls):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred == cls, gt == cls


def dice(pred, gt, cls: int = VENTRICLE) -> float:
    """2|P & G| / (|P| + |G|); 1.0 when both masks are empty."""
    p, g = _binary(pred, gt, cls)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def iou(pred, gt, cls: int = VENTRICLE) -> float:
    """|P & G| / |P | G|; 1.0 when both masks are empty."""
    p, g = _binary(pred, gt, cls)
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


@dataclass
class VolumeErrors:
    mae: float
    mse: float
    diffs: np.ndarray
    percent: np.ndarray
    excluded: list[int]


def volume_errors(pred_volumes, gt_volumes) -> VolumeErrors:
    """MAE/MSE over volumes plus per-sample signed and percent differences.

    Samples with a zero ground-truth volume get NaN percent difference and
    are listed in ``excluded``.
    """
    p = np.asarray(pred_volumes, dtype=np.float64)
    g = np.asarray(gt_volumes, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"{p.size} predictions for {g.size} ground-truth volumes")
    diffs = p - g
    excluded = [int(i) for i in np.flatnonzero(g == 0)]
    with np.errstate(divide="ignore", invalid="ignore"):
        percent = np.where(g == 0, np.nan, 100.0 * diffs / np.where(g == 0, 1.0, g))
    return VolumeErrors(float(np.abs(diffs).mean()), float((diffs**2).mean()), diffs, percent, excluded)


# -- image-quality metrics --------------------------------------------------------------

def _plane(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    while x.ndim > 2 and x.shape[0] == 1:
        x = x[0]
    if x.ndim != 2:
        raise ValueError(f"expected a single 2-D image, got shape {x.shape}")
    return x


def _ssim_terms(a, b, window, K1, K2, L):
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} is smaller than the {window}x{window} window")
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    n = window * window
    mu_a, mu_b = wa.mean(axis=(-2, -1)), wb.mean(axis=(-2, -1))
    # sample (n - 1) covariance, the usual convention for windowed SSIM
    norm = n / (n - 1)
    var_a = (wa.var(axis=(-2, -1))) * norm
    var_b = (wb.var(axis=(-2, -1))) * norm
    cov = ((wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b) * norm
    c1, c2 = (K1 * L) ** 2, (K2 * L) ** 2
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return lum, cs


def ssim(a, b, window: int = 7, K1: float = 0.01, K2: float = 0.03, L: float = 1.0) -> float:
    a, b = _plane(a), _plane(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    lum, cs = _ssim_terms(a, b, window, K1, K2, L)
    return float((lum * cs).mean())


def _pool2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape
    return x.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def ms_ssim(a, b, scales: int = 3, window: int = 7, K1: float = 0.01, K2: float = 0.03, L: float = 1.0) -> float:
    """Product of per-scale contrast-structure terms, luminance at the coarsest scale only.

    Each factor is clamped at 0 before the 1/scales power so the score stays real.
    """
    a, b = _plane(a), _plane(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    f = 2 ** (scales - 1)
    if a.shape[0] % f or a.shape[1] % f:
        raise ValueError(f"image {a.shape} is not divisible by {f} for {scales} scales")
    score = 1.0
    for j in range(scales):
        lum, cs = _ssim_terms(a, b, window, K1, K2, L)
        term = (lum * cs).mean() if j == scales - 1 else cs.mean()
        score *= max(float(term), 0.0) ** (1.0 / scales)
        if j < scales - 1:
            a, b = _pool2(a), _pool2(b)
    return score


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(features_a, features_b) -> float:
    """Squared Frechet distance between Gaussians fitted to two feature sets."""
    fa = np.asarray(features_a, dtype=np.float64)
    fb = np.asarray(features_b, dtype=np.float64)
    d = fa.shape[1]
    if fb.shape[1] != d:
        raise ValueError(f"feature dims differ: {d} vs {fb.shape[1]}")
    for name, f in (("a", fa), ("b", fb)):
        if len(f) < d + 1:
            raise ValueError(f"set {name} has {len(f)} vectors; need at least {d + 1}")
        if not np.isfinite(f).all():
            raise ValueError(f"set {name} has non-finite features, so its covariance is undefined")
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(fa, rowvar=False))
    cov_b = np.atleast_2d(np.cov(fb, rowvar=False))
    if not (np.isfinite(cov_a).all() and np.isfinite(cov_b).all()):
        raise ValueError("non-finite covariance")
    root_a = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(root_a @ cov_b @ root_a)
    dist = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(dist, 0.0)


class RandomFeatures:
    """Fixed seeded 3-layer random conv projection to 32 features (pretrained-network stand-in)."""

    def __init__(self, seed: int = 0, dims: Sequence[int] = (8, 16, 32)):
        rng = np.random.default_rng(seed)
        self.weights = []
        c_in = 1
        for c_out in dims:
            self.weights.append(rng.normal(0, math.sqrt(2.0 / (9 * c_in)), (c_out, c_in, 3, 3)))
            c_in = c_out

    def __call__(self, images: np.ndarray, batch: int = 128) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[:, None]
        out = []
        with ag.no_grad():
            for i in range(0, len(images), batch):
                h = Tensor(images[i : i + batch])
                for w in self.weights:
                    h = ag.relu(ag.conv2d(h, Tensor(w), None, stride=2, padding=1))
                out.append(h.data.mean(axis=(2, 3)))
        return np.concatenate(out)


def sample_pairs(n: int, pairs: int, seed: int) -> np.ndarray:
    """Distinct unordered index pairs drawn uniformly without replacement."""
    if n < 2:
        raise ValueError("need at least 2 images for pairwise statistics")
    iu, ju = np.triu_indices(n, 1)
    flat = np.random.default_rng(seed).choice(len(iu), size=min(pairs, len(iu)), replace=False)
    return np.stack([iu[flat], ju[flat]], axis=1)


def pairwise_diversity(images, pairs: int = 500, seed: int = 0) -> tuple[float, float]:
    """Mean SSIM and MS-SSIM over random distinct image pairs."""
    images = np.asarray(images)
    idx = sample_pairs(len(images), pairs, seed)
    s = [ssim(images[i], images[j]) for i, j in idx]
    m = [ms_ssim(images[i], images[j]) for i, j in idx]
    return float(np.mean(s)), float(np.mean(m))


# -- segmentation network -------------------------------------------------------------

class SegModel(nn.Module):
    """Two-level U-Net with a 3-class head."""

    def __init__(self, rng, width: int = 16):
        w = width
        self.e1a = nn.Conv2d(1, w, 3, rng)
        self.e1b = nn.Conv2d(w, w, 3, rng)
        self.e2a = nn.Conv2d(w, 2 * w, 3, rng)
        self.e2b = nn.Conv2d(2 * w, 2 * w, 3, rng)
        self.d1a = nn.Conv2d(3 * w, w, 3, rng)
        self.d1b = nn.Conv2d(w, w, 3, rng)
        self.head = nn.Conv2d(w, NUM_CLASSES, 1, rng)

    def forward(self, x) -> Tensor:
        h1 = ag.relu(self.e1b(ag.relu(self.e1a(ag.as_tensor(x)))))
        h2 = ag.relu(self.e2b(ag.relu(self.e2a(ag.avgpool2d(h1, 2)))))
        h = ag.concat([ag.upsample_nearest(h2, 2), h1], axis=1)
        return self.head(ag.relu(self.d1b(ag.relu(self.d1a(h)))))

    def predict(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        out = []
        with ag.no_grad():
            for i in range(0, len(images), batch):
                out.append(self(images[i : i + batch]).data.argmax(axis=1).astype(np.uint8))
        return np.concatenate(out)


def segmentation_loss(logits: Tensor, target: np.ndarray, eps: float = 1.0) -> Tensor:
    """Pixel cross-entropy plus (1 - mean soft Dice over classes), Dice pooled over the batch."""
    onehot = Tensor(np.eye(NUM_CLASSES)[np.asarray(target)].transpose(0, 3, 1, 2))
    ce = -(ag.log_softmax(logits, axis=1) * onehot).sum(axis=1).mean()
    prob = ag.softmax(logits, axis=1)
    inter = (prob * onehot).sum(axis=(0, 2, 3))
    denom = prob.sum(axis=(0, 2, 3)) + onehot.sum(axis=(0, 2, 3))
    soft_dice = ((inter * 2.0 + eps) / (denom + eps)).mean()
    return ce + (1.0 - soft_dice)


@dataclass
class SegTrainLog:
    epoch_losses: list[float] = field(default_factory=list)
    train_dice: list[float] = field(default_factory=list)


def train_segmenter(
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int = 30,
    seed: int = 0,
    batch_size: int = 16,
    lr: float = 1e-3,
    width: int = 16,
    track_dice: bool = False,
) -> tuple[SegModel, SegTrainLog]:
    """Train one segmenter; no flips or other augmentation."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if len(images) == 0:
        raise ValueError("cannot train a segmenter on an empty dataset")
    if images.ndim == 3:
        images = images[:, None]
    rng = np.random.default_rng(seed)
    model = SegModel(np.random.default_rng([seed, 6]), width)
    opt = nn.Adam(model, lr=lr)
    record = SegTrainLog()
    for epoch in range(epochs):
        total = 0.0
        for step, idx in enumerate(nn.minibatches(len(images), batch_size, rng)):
            loss = segmentation_loss(model(images[idx]), labels[idx])
            value = nn.check_finite(loss, f"segmenter epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(idx)
        record.epoch_losses.append(total / len(images))
        if track_dice:
            k = min(len(images), 128)
            record.train_dice.append(dice(model.predict(images[:k]), labels[:k]))
        log.info("segmenter epoch %d loss %.4f", epoch, record.epoch_losses[-1])
    return model, record


# -- reports -------------------------------------------------------------------------

def ventricle_volumes(labels) -> np.ndarray:
    labels = np.asarray(labels)
    return (labels == VENTRICLE).reshape(len(labels), -1).sum(axis=1)


@dataclass
class MetricsReport:
    summary: dict[str, dict[str, float]]
    per_sample: list[dict]
    quality: dict[str, float] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, float, float]]:
        out = []
        for model, stats in self.summary.items():
            for metric in ("dice", "iou", "volume_abs_error", "volume_sq_error"):
                out.append((model, metric, stats[f"{metric}_mean"], stats[f"{metric}_std"]))
        return out

    def write(self, csv_path: str | Path, json_path: str | Path) -> None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "metric", "mean", "std"])
            for model, metric, m, s in self.rows():
                w.writerow([model, metric, repr(m), repr(s)])
            for key, val in sorted(self.quality.items()):
                w.writerow(["generator", key, repr(val), ""])
        with open(json_path, "w") as fh:
            json.dump(
                {"summary": self.summary, "quality": self.quality, "per_sample": self.per_sample},
                fh,
                indent=1,
                sort_keys=True,
            )


def evaluate_predictions(predictions: Mapping[str, np.ndarray], gt_labels) -> MetricsReport:
    """Score precomputed label predictions; ``predictions`` maps model name -> (N, H, W)."""
    gt_labels = np.asarray(gt_labels)
    gt_vol = ventricle_volumes(gt_labels)
    order = np.argsort(gt_vol, kind="stable")
    summary: dict[str, dict[str, float]] = {}
    per_sample: list[dict] = []
    for name, pred in predictions.items():
        pred = np.asarray(pred)
        d = np.array([dice(p, g) for p, g in zip(pred, gt_labels)])
        j = np.array([iou(p, g) for p, g in zip(pred, gt_labels)])
        vol = volume_errors(ventricle_volumes(pred), gt_vol)
        abs_err, sq_err = np.abs(vol.diffs), vol.diffs**2
        summary[name] = {
            "dice_mean": float(d.mean()), "dice_std": float(d.std()),
            "iou_mean": float(j.mean()), "iou_std": float(j.std()),
            "volume_abs_error_mean": vol.mae, "volume_abs_error_std": float(abs_err.std()),
            "volume_sq_error_mean": vol.mse, "volume_sq_error_std": float(sq_err.std()),
            "volume_error_std": float(vol.diffs.std()),
        }
        for i in order:
            per_sample.append({
                "model": name,
                "index": int(i),
                "gt_volume": int(gt_vol[i]),
                "pred_volume": int(gt_vol[i] + vol.diffs[i]),
                "dice": float(d[i]),
                "iou": float(j[i]),
                "percent_diff": None if np.isnan(vol.percent[i]) else float(vol.percent[i]),
            })
    return MetricsReport(summary, per_sample)


def evaluate_all(models: Mapping[str, SegModel], test_images, test_labels) -> MetricsReport:
    images = np.asarray(test_images, dtype=np.float64)
    if images.ndim == 3:
        images = images[:, None]
    return evaluate_predictions({k: m.predict(images) for k, m in models.items()}, test_labels)
