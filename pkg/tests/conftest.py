"""Shared desk-scale fixtures: the trained generator stacks are built once per session."""

import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from acceptance_log import RESULTS
from ventrigen import diffusion as df
from ventrigen import image_generator as ig
from ventrigen import mask_generator as mg
from ventrigen import phantoms as ph
from ventrigen import pipeline as pl

# desk settings, mirroring the configuration defaults
T, BETA_START, BETA_END = 200, 5e-4, 0.1
MASK_AE_EPOCHS, MASK_DM_EPOCHS = 6, 20
IMAGE_AE_EPOCHS, IMAGE_DM_EPOCHS = (4, 4), (8, 4)
SCALE = 0.5


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def _split(vols, n_val, seed):
    perm = np.random.default_rng(seed).permutation(len(vols))
    return [vols[i] for i in sorted(perm[n_val:])], [vols[i] for i in sorted(perm[:n_val])]


@dataclass
class Desk:
    sched: df.NoiseSchedule
    timings: dict = field(default_factory=dict)
    balanced: list = field(default_factory=list)
    balanced_train: list = field(default_factory=list)
    balanced_val: list = field(default_factory=list)
    mask_ae: object = None
    mask_dm: object = None
    mask_ae_log: object = None
    mask_dm_log: object = None


@pytest.fixture(scope="session")
def mask_desk():
    """Balanced corpus of 2,000 phantoms, the mask autoencoder and the mask diffusion model.

    The autoencoder sees the 1,600-sample training split so the held-out 400
    can score it; the diffusion model trains on the whole corpus.
    """
    desk = Desk(df.build_linear_schedule(T, BETA_START, BETA_END))
    t0 = time.perf_counter()
    vols = ph.generate_corpus(ph.sample_corpus("balanced", 2000, 0), 0)
    ph.assign_conditions(vols)
    desk.balanced = vols
    desk.balanced_train, desk.balanced_val = _split(vols, 400, 10)
    desk.timings["corpus"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    desk.mask_ae, desk.mask_ae_log = mg.train_mask_autoencoder(desk.balanced_train, MASK_AE_EPOCHS, seed=1)
    desk.timings["mask_ae"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    desk.mask_dm, desk.mask_dm_log = mg.train_mask_diffusion(
        desk.mask_ae, desk.balanced, desk.sched, MASK_DM_EPOCHS, seed=2
    )
    desk.timings["mask_dm"] = time.perf_counter() - t0
    return desk


@dataclass
class ImageDesk:
    stack: pl.GeneratorStack
    skewed_train: list
    skewed_val: list
    test: list
    timings: dict
    ae_log: object
    dm_log: object
    disc: object


@pytest.fixture(scope="session")
def image_desk(mask_desk):
    """Skewed real corpus, enlarged-ventricle test set and the trained image stage."""
    timings = {}
    t0 = time.perf_counter()
    skewed = ph.generate_corpus(ph.sample_corpus("skewed", 1000, 3), 3)
    ph.assign_conditions(skewed)
    train, val = _split(skewed, 200, 11)
    test = ph.generate_corpus(ph.sample_corpus("enlarged", 200, 4), 4)
    timings["corpus"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    ae, disc, ae_log = ig.train_image_autoencoder(
        mask_desk.balanced_train, train, *IMAGE_AE_EPOCHS, seed=5, val_b=val
    )
    timings["image_ae"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    dm, dm_log = ig.train_image_diffusion(ae, mask_desk.balanced_train, train, mask_desk.sched, *IMAGE_DM_EPOCHS, seed=6)
    timings["image_dm"] = time.perf_counter() - t0
    stack = pl.GeneratorStack(mask_desk.sched, mask_desk.mask_ae, mask_desk.mask_dm, ae, dm)
    return ImageDesk(stack, train, val, test, timings, ae_log, dm_log, disc)


@pytest.fixture(scope="session")
def d_syn(image_desk):
    """The bucketed synthetic corpus at the desk scale factor, with its build time."""
    t0 = time.perf_counter()
    ds = pl.build_bucketed_dataset(image_desk.stack, SCALE, seed=7)
    return ds, time.perf_counter() - t0
