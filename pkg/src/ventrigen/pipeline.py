"""Two-stage mask -> image generation, the guidance sweep, and benchmark dataset composition."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffusion as df
from . import image_generator as ig
from . import mask_generator as mg
from . import nn
from .phantoms import LabeledVolume, read_dataset, write_dataset

log = logging.getLogger(__name__)

TAGS = ("real", "syn_g1", "syn_g4")


@dataclass(frozen=True)
class GenerationRequest:
    c: float
    G: float
    steps: int = 50
    seed: int = 0
    count: int = 1

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")


@dataclass(frozen=True)
class BucketPlan:
    lo: float
    hi: float
    count: int

    def contains(self, c: float) -> bool:
        return self.lo <= c < self.hi


@dataclass
class SyntheticSample:
    labels: np.ndarray
    image: np.ndarray
    c: float
    achieved_ratio: float
    G: float
    seed: int
    steps: int
    tag: str

    def provenance(self) -> dict:
        return {"c": self.c, "G": self.G, "seed": self.seed, "steps": self.steps, "tag": self.tag}


@dataclass
class GeneratorStack:
    """Trained models for both stages; the image half may be absent for mask-only work."""

    sched: df.NoiseSchedule
    mask_ae: mg.MaskAutoencoder
    mask_dm: mg.MaskDenoiser
    image_ae: ig.ImageAutoencoder | None = None
    image_dm: ig.SpadeDenoiser | None = None

    FILES = {
        "mask_ae": "mask_ae.vgck",
        "mask_dm": "mask_dm.vgck",
        "image_ae": "image_ae.vgck",
        "image_dm": "image_dm.vgck",
    }

    @classmethod
    def load(cls, directory: str | Path, sched: df.NoiseSchedule, images: bool = True, **arch) -> "GeneratorStack":
        """Load checkpoints from ``directory``; a missing file raises naming its path."""
        directory = Path(directory)
        rng = np.random.default_rng(0)
        models = {
            "mask_ae": mg.MaskAutoencoder(rng, embed_dim=arch.get("embed_dim", 16)),
            "mask_dm": mg.MaskDenoiser(rng),
        }
        if images:
            models["image_ae"] = ig.ImageAutoencoder(rng)
            models["image_dm"] = ig.SpadeDenoiser(rng)
        for key, model in models.items():
            path = directory / cls.FILES[key]
            if not path.exists():
                raise FileNotFoundError(f"missing checkpoint {path}")
            model.load_state_dict(nn.load_checkpoint(path))
        return cls(sched, **models)

    def save(self, directory: str | Path) -> list[Path]:
        directory = Path(directory)
        out = []
        for key, name in self.FILES.items():
            model = getattr(self, key)
            if model is not None:
                nn.save_checkpoint(directory / name, model.state_dict())
                out.append(directory / name)
        return out


def item_seeds(seed: int, count: int, offset: int = 0) -> list[int]:
    """Per-item seeds derived from a request seed and an item counter."""
    return [int(np.random.SeedSequence([seed, offset + k]).generate_state(1)[0]) for k in range(count)]


def _image_seed(item_seed: int) -> int:
    return int(np.random.SeedSequence([item_seed, 1]).generate_state(1)[0])


def generate_items(
    stack: GeneratorStack, cs, G: float, seeds: Sequence[int], steps: int = 50, tag: str = "syn", batch: int = 64
) -> list[SyntheticSample]:
    """Sample one (mask, image) pair per (c, seed); each pair depends only on its own (c, G, seed)."""
    if stack.image_ae is None or stack.image_dm is None:
        raise ValueError("image stage not loaded")
    cs = np.broadcast_to(np.asarray(cs, dtype=np.float64), (len(seeds),))
    out: list[SyntheticSample] = []
    for i in range(0, len(seeds), batch):
        chunk = list(seeds[i : i + batch])
        masks, ratios = mg.sample_mask(stack.mask_dm, stack.mask_ae, stack.sched, cs[i : i + batch], G, chunk, steps)
        images = ig.sample_image(
            stack.image_dm, stack.image_ae, stack.sched, masks, [_image_seed(s) for s in chunk], steps
        )
        for k, s in enumerate(chunk):
            out.append(
                SyntheticSample(masks[k], images[k], float(cs[i + k]), float(ratios[k]), float(G), int(s), steps, tag)
            )
    return out


def generate_pair(stack: GeneratorStack, request: GenerationRequest, tag: str = "syn") -> list[SyntheticSample]:
    seeds = item_seeds(request.seed, request.count)
    return generate_items(stack, request.c, request.G, seeds, request.steps, tag)


def regenerate(stack: GeneratorStack, sample: SyntheticSample) -> SyntheticSample:
    return generate_items(stack, sample.c, sample.G, [sample.seed], sample.steps, sample.tag)[0]


# -- guidance sweep ------------------------------------------------------------------

def sweep_grid(width: float = 0.1, top: float = 1.3) -> np.ndarray:
    """Bucket midpoints 0.05, 0.15, ... below ``top``; points above 1.0 are out of distribution."""
    n = int(round(top / width))
    return (np.arange(n) + 0.5) * width


@dataclass
class SweepRow:
    c: float
    G: float
    mean_area: float
    std_area: float
    ground_truth_mean: float


def ground_truth_curve(vols: Sequence[LabeledVolume], c_grid, width: float = 0.1) -> np.ndarray:
    """Mean ventricle pixel count of masks whose c falls in each grid point's bucket (NaN if none)."""
    c = np.array([v.c for v in vols])
    area = np.array([mg.ventricle_area(v.labels[None])[0] for v in vols], dtype=np.float64)
    out = []
    for mid in c_grid:
        sel = (c >= mid - width / 2) & (c < mid + width / 2)
        out.append(area[sel].mean() if sel.any() else np.nan)
    return np.array(out)


def guidance_sweep(
    stack: GeneratorStack,
    val_vols: Sequence[LabeledVolume],
    c_grid=None,
    G_set: Sequence[float] = (1, 2, 3, 4, 5),
    per_point: int = 50,
    steps: int = 50,
    seed: int = 0,
) -> list[SweepRow]:
    """Mean/std of sampled ventricle area for every (c, G); masks only."""
    c_grid = sweep_grid() if c_grid is None else np.asarray(c_grid, dtype=np.float64)
    truth = ground_truth_curve(val_vols, c_grid)
    rows = []
    for gi, G in enumerate(G_set):
        for ci, c in enumerate(c_grid):
            seeds = item_seeds(seed, per_point, offset=(gi * len(c_grid) + ci) * per_point)
            masks, _ = mg.sample_mask(stack.mask_dm, stack.mask_ae, stack.sched, c, G, seeds, steps)
            area = mg.ventricle_area(masks).astype(np.float64)
            rows.append(SweepRow(float(c), float(G), float(area.mean()), float(area.std()), float(truth[ci])))
            log.info("sweep G=%g c=%.2f area %.1f", G, c, rows[-1].mean_area)
    return rows


def write_sweep(rows: Sequence[SweepRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["c", "G", "mean_area", "std_area", "ground_truth_mean"])
        for r in rows:
            w.writerow([repr(r.c), repr(r.G), repr(r.mean_area), repr(r.std_area), repr(r.ground_truth_mean)])


def sweep_slope(rows: Sequence[SweepRow], G: float, c_max: float = 1.0) -> float:
    """Least-squares slope of mean area vs c at one guidance value, in-distribution points only."""
    pts = [(r.c, r.mean_area) for r in rows if r.G == G and r.c <= c_max]
    c, a = np.array(pts).T
    return float(np.polyfit(c, a, 1)[0])


# -- dataset construction -----------------------------------------------------------

def plan_buckets(total: int, lo: float, hi: float, n_buckets: int) -> list[BucketPlan]:
    """Equal-width buckets with equal counts; the remainder goes to the lowest buckets first."""
    if n_buckets < 1 or total < 0:
        raise ValueError("need n_buckets >= 1 and total >= 0")
    base, rem = divmod(total, n_buckets)
    edges = np.linspace(lo, hi, n_buckets + 1)
    return [BucketPlan(float(edges[i]), float(edges[i + 1]), base + (1 if i < rem else 0)) for i in range(n_buckets)]


def scaled(count: int, s: float) -> int:
    return int(round(count * s))


def syn_plans(s: float = 0.5) -> dict[str, tuple[float, list[BucketPlan]]]:
    """The two synthetic parts: (guidance, buckets) keyed by provenance tag."""
    return {
        "syn_g4": (4.0, plan_buckets(scaled(600, s), 0.0, 1.3, 13)),
        "syn_g1": (1.0, plan_buckets(scaled(400, s), 0.0, 1.0, 10)),
    }


def draw_requests(plans, seed: int) -> dict[str, tuple[float, np.ndarray, list[int]]]:
    """Concrete (G, c values, item seeds) per tag; c uniform within each bucket."""
    out = {}
    for p, (tag, (G, buckets)) in enumerate(sorted(plans.items())):
        rng = np.random.default_rng([seed, p])
        # uniform draws on [lo, hi) can round up to hi in floating point
        cs = np.concatenate(
            [np.minimum(rng.uniform(b.lo, b.hi, b.count), np.nextafter(b.hi, b.lo)) for b in buckets]
        )
        out[tag] = (G, cs, item_seeds(seed, len(cs), offset=(p + 1) * 1_000_000))
    return out


@dataclass
class SyntheticDataset:
    samples: list[SyntheticSample] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def by_tag(self, tag: str) -> list[SyntheticSample]:
        return [s for s in self.samples if s.tag == tag]


def build_bucketed_dataset(stack: GeneratorStack, s: float = 0.5, seed: int = 0, steps: int = 50) -> SyntheticDataset:
    ds = SyntheticDataset()
    for tag, (G, cs, seeds) in draw_requests(syn_plans(s), seed).items():
        log.info("synthesising %d samples for %s", len(cs), tag)
        ds.samples.extend(generate_items(stack, cs, G, seeds, steps, tag))
    return ds


@dataclass
class ComposedDatasets:
    real: list
    syn: list
    aug: list


def compose_datasets(real_pool: Sequence, d_syn: SyntheticDataset, s: float = 0.5, seed: int = 0) -> ComposedDatasets:
    """D_real from the skewed pool, D_syn as given, D_aug = D_real plus seeded synthetic subsets."""
    need = {"real": scaled(1000, s), "syn_g1": scaled(200, s), "syn_g4": scaled(312, s)}
    pools = {"real": list(real_pool), "syn_g1": d_syn.by_tag("syn_g1"), "syn_g4": d_syn.by_tag("syn_g4")}
    for key, n in need.items():
        if len(pools[key]) < n:
            raise ValueError(f"pool {key!r} has {len(pools[key])} samples; {n} required")
    rng = np.random.default_rng([seed, 7])
    picks = {k: sorted(rng.choice(len(pools[k]), need[k], replace=False)) for k in ("real", "syn_g1", "syn_g4")}
    real = [pools["real"][i] for i in picks["real"]]
    aug = real + [pools["syn_g1"][i] for i in picks["syn_g1"]] + [pools["syn_g4"][i] for i in picks["syn_g4"]]
    return ComposedDatasets(real, list(d_syn.samples), aug)


def arrays(samples: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """(images (N, 1, H, W), labels (N, H, W) int64) for real or synthetic samples."""
    return np.stack([x.image for x in samples]), np.stack([x.labels for x in samples]).astype(np.int64)


def ratio_histogram_flatness(ratios, bins: int = 10, lo: float = 0.0, hi: float = 0.45) -> float:
    """Max-bin / min-bin count over bins spanning the occupied range (inf if a bin is empty)."""
    ratios = np.asarray(ratios)
    edges = np.linspace(max(lo, ratios.min()), min(hi, ratios.max()), bins + 1)
    counts, _ = np.histogram(ratios, edges)
    return float("inf") if counts.min() == 0 else counts.max() / counts.min()


def _provenance(sample, index: int) -> dict:
    if isinstance(sample, SyntheticSample):
        return dict(sample_id=index, **sample.provenance())
    return {"sample_id": index, "tag": "real", "source_id": int(sample.sample_id), "c": float(sample.c)}


def persist_samples(samples: Sequence, path: str | Path) -> Path:
    """Write real and/or synthetic samples as VGDS plus ``<path>.provenance.json``."""
    path = Path(path)
    vols = []
    for i, s in enumerate(samples):
        if isinstance(s, SyntheticSample):
            vols.append(LabeledVolume(s.image, np.asarray(s.labels, dtype=np.uint8), s.achieved_ratio, s.c, "B", i))
        else:
            vols.append(LabeledVolume(s.image, s.labels, s.raw_ratio, s.c, s.modality, i))
    write_dataset(path, vols)
    side = path.with_suffix(path.suffix + ".provenance.json")
    side.write_text(json.dumps([_provenance(s, i) for i, s in enumerate(samples)], indent=1))
    return side


def load_provenance(path: str | Path) -> list[dict]:
    path = Path(path)
    return json.loads(path.with_suffix(path.suffix + ".provenance.json").read_text())


def load_samples(path: str | Path) -> list:
    """Inverse of ``persist_samples``: synthetic entries come back as ``SyntheticSample``."""
    vols = read_dataset(path)
    out = []
    for v, p in zip(vols, load_provenance(path)):
        if p["tag"] == "real":
            out.append(v)
        else:
            out.append(SyntheticSample(v.labels, v.image, p["c"], v.raw_ratio, p["G"], p["seed"], p["steps"], p["tag"]))
    return out


def sweep_rows_to_dicts(rows: Sequence[SweepRow]) -> list[dict]:
    return [asdict(r) for r in rows]
