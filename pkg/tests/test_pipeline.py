import numpy as np
import pytest

from ventrigen import diffusion as df
from ventrigen import image_generator as ig
from ventrigen import mask_generator as mg
from ventrigen import phantoms as ph
from ventrigen import pipeline as pl


def _perturbed(module, seed, scale):
    rng = np.random.default_rng(seed)
    for _, p in module.named_parameters():
        p.data = p.data + rng.normal(0, scale, p.shape)
    return module


@pytest.fixture(scope="module")
def stack():
    sched = df.build_linear_schedule(50, 1e-3, 0.2)
    return pl.GeneratorStack(
        sched,
        _perturbed(mg.MaskAutoencoder(np.random.default_rng(0)), 1, 0.05),
        _perturbed(mg.MaskDenoiser(np.random.default_rng(2)), 3, 0.05),
        _perturbed(ig.ImageAutoencoder(np.random.default_rng(4)), 5, 0.02),
        _perturbed(ig.SpadeDenoiser(np.random.default_rng(6)), 7, 0.02),
    )


def _fake(tag, n, G):
    return [
        pl.SyntheticSample(np.zeros((4, 4), np.uint8), np.zeros((1, 4, 4)), 0.5, 0.1, G, i, 5, tag) for i in range(n)
    ]


# -- bucket plans --------------------------------------------------------------------

def test_600_over_13_buckets():
    plans = pl.plan_buckets(600, 0.0, 1.3, 13)
    counts = [b.count for b in plans]
    assert counts == [47, 47] + [46] * 11
    assert sum(counts) == 600
    np.testing.assert_allclose([b.hi - b.lo for b in plans], 0.1, atol=1e-12)
    assert plans[0].lo == 0.0 and plans[-1].hi == pytest.approx(1.3)


@pytest.mark.parametrize("total, n", [(400, 10), (300, 13), (7, 3), (0, 4)])
def test_bucket_counts_differ_by_at_most_one(total, n):
    counts = [b.count for b in pl.plan_buckets(total, 0.0, 1.0, n)]
    assert sum(counts) == total and max(counts) - min(counts) <= 1
    assert counts == sorted(counts, reverse=True)


def test_scaled_plans():
    full = pl.syn_plans(1.0)
    assert sum(b.count for b in full["syn_g4"][1]) == 600 and full["syn_g4"][0] == 4.0
    assert sum(b.count for b in full["syn_g1"][1]) == 400 and full["syn_g1"][0] == 1.0
    half = pl.syn_plans(0.5)
    assert sum(b.count for b in half["syn_g4"][1]) == 300
    assert sum(b.count for b in half["syn_g1"][1]) == 200


def test_requested_c_inside_buckets():
    plans = pl.syn_plans(1.0)
    reqs = pl.draw_requests(plans, seed=3)
    for tag, (G, buckets) in plans.items():
        cs = reqs[tag][1]
        i = 0
        for b in buckets:
            assert all(b.contains(c) for c in cs[i : i + b.count])
            i += b.count
        assert len(set(reqs[tag][2])) == len(cs)


# -- composition ----------------------------------------------------------------------

@pytest.mark.parametrize("s, sizes", [(1.0, (1000, 1000, 1512)), (0.5, (500, 500, 756))])
def test_compose_counts(s, sizes):
    real = ph.generate_corpus(ph.sample_corpus("skewed", 1000, 0), 0)
    syn = pl.SyntheticDataset(_fake("syn_g4", pl.scaled(600, s), 4.0) + _fake("syn_g1", pl.scaled(400, s), 1.0))
    out = pl.compose_datasets(real, syn, s, seed=1)
    assert (len(out.real), len(out.syn), len(out.aug)) == sizes
    ids = {id(x) for x in out.aug}
    assert all(id(x) in ids for x in out.real)
    tags = [getattr(x, "tag", "real") for x in out.aug]
    assert tags.count("syn_g1") == pl.scaled(200, s) and tags.count("syn_g4") == pl.scaled(312, s)


def test_compose_rejects_small_pools():
    syn = pl.SyntheticDataset(_fake("syn_g4", 10, 4.0) + _fake("syn_g1", 300, 1.0))
    with pytest.raises(ValueError, match="'syn_g4' has 10 samples; 312 required"):
        pl.compose_datasets([object()] * 1000, syn, 1.0)


def test_histogram_flatness():
    rng = np.random.default_rng(0)
    flat = pl.ratio_histogram_flatness(rng.uniform(0.02, 0.3, 2000))
    skew = pl.ratio_histogram_flatness(np.clip(0.06 * np.exp(0.5 * rng.standard_normal(2000)), 0.02, 0.3))
    assert flat < skew


# -- generation ------------------------------------------------------------------------

def test_generate_pair_deterministic(stack):
    req = pl.GenerationRequest(c=0.4, G=2.0, steps=3, seed=11, count=1)
    (a,) = pl.generate_pair(stack, req)
    (b,) = pl.generate_pair(stack, req)
    assert a.labels.shape == (64, 64) and a.image.shape == (1, 64, 64)
    assert np.array_equal(a.labels, b.labels) and np.array_equal(a.image, b.image)


def test_sample_regenerates_from_provenance(stack):
    batch = pl.generate_items(stack, [0.1, 0.6, 1.2], 4.0, [5, 6, 7], steps=3, tag="syn_g4")
    again = pl.regenerate(stack, batch[1])
    assert np.array_equal(again.labels, batch[1].labels)
    assert np.array_equal(again.image, batch[1].image)


def test_request_validation():
    with pytest.raises(ValueError):
        pl.GenerationRequest(0.5, 1.0, count=0)
    with pytest.raises(ValueError):
        pl.GenerationRequest(0.5, 1.0, steps=0)


def test_persist_and_load_samples(stack, tmp_path):
    real = ph.generate_corpus(ph.sample_corpus("skewed", 2, 0), 0)
    syn = pl.generate_items(stack, [0.2, 0.9], 1.0, [1, 2], steps=2, tag="syn_g1")
    path = tmp_path / "mix.vgds"
    pl.persist_samples(real + syn, path)
    back = pl.load_samples(path)
    assert isinstance(back[0], ph.LabeledVolume) and isinstance(back[3], pl.SyntheticSample)
    assert back[3].seed == syn[1].seed and back[3].G == 1.0 and back[3].tag == "syn_g1"
    assert np.array_equal(back[2].image, syn[0].image) and np.array_equal(back[0].labels, real[0].labels)


def test_stack_load_names_missing_checkpoint(stack, tmp_path):
    stack.save(tmp_path)
    (tmp_path / "image_dm.vgck").unlink()
    with pytest.raises(FileNotFoundError, match="image_dm.vgck"):
        pl.GeneratorStack.load(tmp_path, stack.sched)
    loaded = pl.GeneratorStack.load(tmp_path, stack.sched, images=False)
    assert np.array_equal(loaded.mask_dm.out.weight.data, stack.mask_dm.out.weight.data)


# -- sweep ----------------------------------------------------------------------------------

def test_sweep_grid_and_ground_truth():
    grid = pl.sweep_grid()
    np.testing.assert_allclose(grid, np.arange(13) * 0.1 + 0.05)
    vols = ph.generate_corpus(ph.sample_corpus("balanced", 400, 2), 2)
    ph.assign_conditions(vols)
    truth = pl.ground_truth_curve(vols, grid[:10])
    assert np.all(np.diff(truth) >= 0)
    assert np.isnan(pl.ground_truth_curve(vols, [1.25])[0])


def test_sweep_table(stack, tmp_path):
    vols = ph.generate_corpus(ph.sample_corpus("balanced", 30, 1), 1)
    ph.assign_conditions(vols)
    rows = pl.guidance_sweep(stack, vols, [0.25, 0.75], (1.0, 4.0), per_point=2, steps=2, seed=0)
    assert [(r.c, r.G) for r in rows] == [(0.25, 1.0), (0.75, 1.0), (0.25, 4.0), (0.75, 4.0)]
    pl.write_sweep(rows, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "c,G,mean_area,std_area,ground_truth_mean" and len(lines) == 5
    assert isinstance(pl.sweep_slope(rows, 4.0), float)


def test_regeneration_at_unit_guidance(stack):
    batch = pl.generate_items(stack, [0.3, 0.8], 1.0, [8, 9], steps=2, tag="syn_g1")
    again = pl.regenerate(stack, batch[0])
    assert np.array_equal(again.labels, batch[0].labels) and np.array_equal(again.image, batch[0].image)
