"""Overlap, volume and image-similarity metrics on a handful of phantoms. Runs in seconds."""

import numpy as np
from scipy import ndimage

from ventrigen import evaluation as ev
from ventrigen import phantoms as ph

vols = ph.generate_corpus(ph.sample_corpus("skewed", 40, seed=3), seed=3)
images, labels = ph.stack(vols)

# a crude "segmenter": shrink every ventricle by one pixel
shrunk = labels.copy()
for lab in shrunk:
    vent = lab == ph.VENTRICLE
    lab[vent & ~ndimage.binary_erosion(vent)] = ph.TISSUE

print(f"mean ventricle Dice of the eroded masks: {np.mean([ev.dice(p, g) for p, g in zip(shrunk, labels)]):.3f}")
err = ev.volume_errors(ev.ventricle_volumes(shrunk), ev.ventricle_volumes(labels))
print(f"volume MAE {err.mae:.1f} px, mean signed error {err.percent.mean():.1f} %")

ssim, ms = ev.pairwise_diversity(images, pairs=100, seed=0)
print(f"pairwise SSIM {ssim:.3f}, MS-SSIM {ms:.3f} (lower means a more varied set)")

feats = ev.RandomFeatures(seed=0)
b = feats(ph.stack(ph.generate_corpus(ph.sample_corpus("enlarged", 40, seed=4), seed=4))[0])
print(f"random-feature Frechet distance, skewed vs enlarged: {ev.frechet_distance(feats(images), b):.4f}")
print(f"same, skewed vs itself: {ev.frechet_distance(feats(images), feats(images)):.1e}")
