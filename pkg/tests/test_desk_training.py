"""Training oracles at desk scale, sharing the session-trained generator stacks."""

import numpy as np
import pytest
from scipy import ndimage

from conftest import SCALE
from ventrigen import evaluation as ev
from ventrigen import image_generator as ig
from ventrigen import mask_generator as mg
from ventrigen import phantoms as ph
from ventrigen import pipeline as pl

pytestmark = pytest.mark.slow

DARK = 0.25  # midway between ventricle and tissue intensity in modality B


@pytest.fixture(scope="module")
def g4_masks(mask_desk):
    """16 masks per condition value at G=4, for c in (0.1, 0.5, 0.9)."""
    out = {}
    for i, c in enumerate((0.1, 0.5, 0.9)):
        out[c] = mg.sample_mask(
            mask_desk.mask_dm, mask_desk.mask_ae, mask_desk.sched, c, 4.0, list(range(100 * i, 100 * i + 16))
        )
    return out


# -- mask stage -------------------------------------------------------------------------

def test_mask_autoencoder_reconstructs_held_out(mask_desk):
    labels = np.stack([v.labels for v in mask_desk.balanced_val]).astype(np.int64)
    rec = mask_desk.mask_ae.reconstruct(labels)
    assert (rec == labels).mean() >= 0.97
    assert ev.dice(rec, labels) >= 0.90


def test_mask_autoencoder_keeps_empty_mask_empty(mask_desk):
    assert np.all(mask_desk.mask_ae.reconstruct(np.zeros((2, 64, 64), np.int64)) == 0)


def test_mask_diffusion_loss_falls(mask_desk):
    log = mask_desk.mask_dm_log
    assert log.epoch_losses[-1] < 0.8 * log.initial_loss


def test_mask_ratio_rises_with_condition(g4_masks):
    means = [g4_masks[c][1].mean() for c in (0.1, 0.5, 0.9)]
    assert means[0] < means[1] < means[2]


def test_sampled_ventricles_sit_inside_the_brain(g4_masks):
    labels = np.concatenate([g4_masks[c][0] for c in g4_masks])
    inside = 0
    for lab in labels:
        # no ventricle pixel may touch background
        near_bg = ndimage.binary_dilation(lab == ph.BACKGROUND)
        inside += not np.any(near_bg & (lab == ph.VENTRICLE))
    assert inside / len(labels) >= 0.95


# -- image stage ----------------------------------------------------------------------------

def test_image_autoencoder_held_out_l1(image_desk):
    assert image_desk.ae_log.val_l1["B_after"] < 0.05


def test_fine_tuning_helps_second_modality(image_desk):
    v = image_desk.ae_log.val_l1
    assert v["B_after"] < v["B_before"]


def test_decoder_follows_the_mask(image_desk):
    ae = image_desk.stack.image_ae
    vols = image_desk.skewed_val[:16]
    images, labels = ph.stack(vols)
    z = ae.encode(images)[0].data
    grown = labels.copy()
    for lab in grown:
        extra = ndimage.binary_dilation(lab == ph.VENTRICLE, iterations=2) & (lab == ph.TISSUE)
        lab[extra] = ph.VENTRICLE
    newly = (grown == ph.VENTRICLE) & (labels != ph.VENTRICLE)
    before = ae.decode(z, labels).data[:, 0]
    after = ae.decode(z, grown).data[:, 0]
    assert after[newly].mean() < before[newly].mean() - 0.05


def test_image_diffusion_loss_falls(image_desk):
    log = image_desk.dm_log
    assert log.epoch_losses[-1] < 0.8 * log.initial_loss


def test_synthetic_ventricles_are_dark(d_syn):
    samples = d_syn[0].samples[:100]
    darker = [
        s.image[0][s.labels == ph.VENTRICLE].mean() < s.image[0][s.labels == ph.TISSUE].mean()
        for s in samples
        if (s.labels == ph.VENTRICLE).any()
    ]
    assert len(darker) >= 50 and np.mean(darker) >= 0.95


def test_synthetic_images_align_with_masks(d_syn):
    ious = []
    for s in d_syn[0].samples[:120]:
        brain = s.labels != ph.BACKGROUND
        pred = np.where(brain & (s.image[0] < DARK), ph.VENTRICLE, ph.TISSUE)
        pred[~brain] = ph.BACKGROUND
        ious.append(ev.iou(pred, s.labels))
    assert len(ious) >= 100 and np.mean(ious) >= 0.5


def test_background_mask_gives_dark_image(image_desk):
    stack = image_desk.stack
    imgs = ig.sample_image(stack.image_dm, stack.image_ae, stack.sched, np.zeros((4, 64, 64), np.int64), [1, 2, 3, 4])
    assert imgs.mean() < 0.1


# -- synthetic corpus ------------------------------------------------------------------------

def test_synthetic_corpus_is_flatter_and_reaches_further(image_desk, d_syn):
    syn = d_syn[0].samples
    assert len(syn) == pl.scaled(1000, SCALE)
    real_ratios = [ph.compute_ratio(v.labels) for v in image_desk.skewed_train]
    syn_ratios = [s.achieved_ratio for s in syn]
    assert pl.ratio_histogram_flatness(syn_ratios) < pl.ratio_histogram_flatness(real_ratios)
    assert max(syn_ratios) > max(real_ratios)
