"""Procedural 2-D brain phantoms with exact three-class labels.

Labels: 0 background, 1 brain tissue, 2 ventricle. The ventricle ratio of a
phantom is ventricle pixels over brain (tissue + ventricle) pixels; the
conditioning value ``c`` is that ratio min-max normalised over a corpus.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

BACKGROUND, TISSUE, VENTRICLE = 0, 1, 2
NUM_CLASSES = 3
MAX_TARGET_RATIO = 0.45
C_CLAMP = (0.0, 1.5)

# per-modality (background, tissue, ventricle, periventricular rim boost)
INTENSITY = {
    "A": (0.0, 0.78, 0.18, 0.0),
    "B": (0.0, 0.45, 0.05, 0.25),
}


@dataclass(frozen=True)
class PhantomSpec:
    grid_size: int = 64
    brain_axes: tuple[float, float] = (24.0, 19.0)  # (rows, cols) semi-axes
    ventricle_target_ratio: float = 0.1
    wobble_seed: int = 0
    modality: str = "A"

    def __post_init__(self):
        margin = self.grid_size / 2 - max(self.brain_axes) * (1 + _WOBBLE_AMP)
        if margin < 2:
            raise ValueError(
                f"brain axes {self.brain_axes} leave {margin:.1f}px margin in a {self.grid_size} grid (need >= 2)"
            )
        if not 0 <= self.ventricle_target_ratio < MAX_TARGET_RATIO:
            raise ValueError(f"ventricle_target_ratio must lie in [0, {MAX_TARGET_RATIO}), got {self.ventricle_target_ratio}")
        if self.modality not in INTENSITY:
            raise ValueError(f"unknown modality {self.modality!r}")


@dataclass
class LabeledVolume:
    image: np.ndarray  # (1, H, W) float64 in [0, 1]
    labels: np.ndarray  # (H, W) uint8
    raw_ratio: float
    c: float = float("nan")
    modality: str = "A"
    sample_id: int = 0


_WOBBLE_AMP = 0.04
_RIM_MARGIN = 3


def _wobble(rng: np.random.Generator, theta: np.ndarray, amp: float) -> np.ndarray:
    r = np.ones_like(theta)
    for k in range(2, 6):
        r += amp / (k - 1) * rng.uniform(-1, 1) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    return r


def _ellipse(yy, xx, cy, cx, ay, ax, rng, amp):
    dy, dx = (yy - cy) / ay, (xx - cx) / ax
    theta = np.arctan2(dy, dx)
    return dy * dy + dx * dx <= _wobble(rng, theta, amp) ** 2


def compute_ratio(labels: np.ndarray) -> float:
    """Ventricle pixels divided by brain (tissue + ventricle) pixels."""
    labels = np.asarray(labels)
    brain = np.count_nonzero(labels >= TISSUE)
    if brain == 0:
        raise ValueError("compute_ratio: label grid has no brain pixels")
    return np.count_nonzero(labels == VENTRICLE) / brain


def _brain_mask(spec: PhantomSpec) -> np.ndarray:
    n = spec.grid_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    rng = np.random.default_rng([spec.wobble_seed, 0])
    return _ellipse(yy, xx, (n - 1) / 2, (n - 1) / 2, spec.brain_axes[0], spec.brain_axes[1], rng, _WOBBLE_AMP)


def _ventricles(spec: PhantomSpec, interior: np.ndarray, scale: float) -> np.ndarray:
    if scale <= 0:
        return np.zeros_like(interior)
    n = spec.grid_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    cy, cx = (n - 1) / 2 - 0.5, (n - 1) / 2
    sep = 1.2 + 0.85 * scale
    # independent perturbation for left and right; same streams at every scale
    left = _ellipse(yy, xx, cy, cx - sep, 1.7 * scale, scale, np.random.default_rng([spec.wobble_seed, 1]), 0.12)
    right = _ellipse(yy, xx, cy, cx + sep, 1.7 * scale, scale, np.random.default_rng([spec.wobble_seed, 2]), 0.12)
    return (left | right) & interior


def _render(labels: np.ndarray, modality: str, rng: np.random.Generator) -> np.ndarray:
    bg, tissue, vent, rim = INTENSITY[modality]
    img = np.full(labels.shape, bg)
    img[labels == TISSUE] = tissue
    img[labels == VENTRICLE] = vent
    if rim:
        near = ndimage.binary_dilation(labels == VENTRICLE, iterations=2) & (labels == TISSUE)
        img[near] += rim
    img = ndimage.uniform_filter(img, size=3, mode="constant")
    img = img + rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)[None]


def generate_phantom(spec: PhantomSpec, seed: int) -> LabeledVolume:
    """Render one phantom whose ventricle ratio is within 10% of the target."""
    brain = _brain_mask(spec)
    interior = ndimage.binary_erosion(brain, iterations=_RIM_MARGIN)
    n_brain = np.count_nonzero(brain)
    target = spec.ventricle_target_ratio

    vent = np.zeros_like(brain)
    if target > 0:
        hi = spec.grid_size / 2.0
        best_ratio = np.count_nonzero(_ventricles(spec, interior, hi)) / n_brain
        if best_ratio < 0.9 * target:
            raise ValueError(
                f"target ratio {target:.3f} unreachable for brain axes {spec.brain_axes}; "
                f"achieved maximum {best_ratio:.3f}"
            )
        lo = 0.0
        best = None
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            cand = _ventricles(spec, interior, mid)
            r = np.count_nonzero(cand) / n_brain
            if best is None or abs(r - target) < abs(best[0] - target):
                best = (r, cand)
            if r < target:
                lo = mid
            else:
                hi = mid
            if abs(r - target) <= 0.01 * target:
                break
        ratio, vent = best
        if abs(ratio - target) > 0.1 * target:
            raise ValueError(f"could not hit target ratio {target:.3f}; closest achieved {ratio:.3f}")

    labels = np.zeros(brain.shape, dtype=np.uint8)
    labels[brain] = TISSUE
    labels[vent] = VENTRICLE
    image = _render(labels, spec.modality, np.random.default_rng([seed, 7]))
    return LabeledVolume(image=image, labels=labels, raw_ratio=compute_ratio(labels), modality=spec.modality)


# -- corpora -------------------------------------------------------------------

RATIO_RANGE = (0.02, 0.30)
SKEW_MEDIAN = 0.06
SKEW_SIGMA = 0.5
# held-out test law: reaches past anything the skewed corpus realistically contains
ENLARGED_RANGE = (0.15, 0.40)


def sample_corpus(kind: str, n: int, seed: int, modality: str | None = None) -> list[PhantomSpec]:
    """Draw phantom specs with a uniform ('balanced'), right-skewed ('skewed') or
    enlarged-ventricle ('enlarged') ratio law."""
    if n < 1:
        raise ValueError("sample_corpus: n must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = RATIO_RANGE
    if kind == "balanced":
        ratios = rng.uniform(lo, hi, n)
    elif kind == "skewed":
        ratios = np.clip(SKEW_MEDIAN * np.exp(SKEW_SIGMA * rng.standard_normal(n)), lo, hi)
    elif kind == "enlarged":
        ratios = rng.uniform(*ENLARGED_RANGE, n)
    else:
        raise ValueError(f"unknown corpus kind {kind!r}")
    modality = modality or ("A" if kind == "balanced" else "B")
    ay = rng.uniform(22.0, 27.0, n)
    ax = rng.uniform(17.0, 22.0, n)
    wobble = rng.integers(0, 2**31, n)
    return [
        PhantomSpec(64, (float(ay[i]), float(ax[i])), float(ratios[i]), int(wobble[i]), modality)
        for i in range(n)
    ]


def generate_corpus(specs: Sequence[PhantomSpec], seed: int) -> list[LabeledVolume]:
    vols = []
    for i, spec in enumerate(specs):
        v = generate_phantom(spec, seed * 1_000_003 + i)
        v.sample_id = i
        vols.append(v)
    return vols


@dataclass(frozen=True)
class NormBounds:
    ratio_min: float
    ratio_max: float

    def apply(self, ratio, clamp: bool = True):
        c = (np.asarray(ratio, dtype=np.float64) - self.ratio_min) / (self.ratio_max - self.ratio_min)
        return np.clip(c, *C_CLAMP) if clamp else c

    def invert(self, c):
        return self.ratio_min + np.asarray(c, dtype=np.float64) * (self.ratio_max - self.ratio_min)


def normalize_conditions(ratios: Sequence[float]) -> tuple[np.ndarray, NormBounds]:
    r = np.asarray(ratios, dtype=np.float64)
    lo, hi = float(r.min()), float(r.max())
    if hi == lo:
        raise ValueError("normalize_conditions: all ratios identical (zero range)")
    return (r - lo) / (hi - lo), NormBounds(lo, hi)


def assign_conditions(vols: Sequence[LabeledVolume]) -> NormBounds:
    c, bounds = normalize_conditions([v.raw_ratio for v in vols])
    for v, ci in zip(vols, c):
        v.c = float(ci)
    return bounds


# -- persistence ---------------------------------------------------------------

DS_MAGIC = b"VGDS"
DS_VERSION = 1
_MODALITY_CODE = {"A": 0, "B": 1}
_CODE_MODALITY = {v: k for k, v in _MODALITY_CODE.items()}


@dataclass
class DatasetManifest:
    path: str
    bounds: NormBounds | None
    entries: list[dict] = field(default_factory=list)

    def ids(self, split: str) -> list[int]:
        return [e["id"] for e in self.entries if e["split"] == split]

    def to_json(self) -> dict:
        return {
            "dataset": self.path,
            "bounds": asdict(self.bounds) if self.bounds else None,
            "entries": self.entries,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        b = d.get("bounds")
        return cls(d["dataset"], NormBounds(**b) if b else None, d["entries"])


def write_dataset(path: str | Path, vols: Sequence[LabeledVolume]) -> list[int]:
    """Write volumes in VGDS layout; returns the byte offset of every sample."""
    path = Path(path)
    offsets = []
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(DS_MAGIC)
            fh.write(struct.pack("<IQ", DS_VERSION, len(vols)))
            for v in vols:
                offsets.append(fh.tell())
                h, w = v.labels.shape
                fh.write(struct.pack("<QBddII", v.sample_id, _MODALITY_CODE[v.modality], v.raw_ratio, v.c, h, w))
                fh.write(np.ascontiguousarray(v.image.reshape(h, w), dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(v.labels, dtype=np.uint8).tobytes())
    except OSError as exc:
        raise OSError(f"failed writing dataset {path}: {exc}") from exc
    return offsets


def read_dataset(path: str | Path) -> list[LabeledVolume]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"failed reading dataset {path}: {exc}") from exc
    if buf[:4] != DS_MAGIC:
        raise ValueError(f"{path}: not a VGDS dataset")
    version, count = struct.unpack_from("<IQ", buf, 4)
    if version != DS_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    off = 16
    hdr = struct.Struct("<QBddII")
    vols = []
    for _ in range(count):
        sid, mod, ratio, c, h, w = hdr.unpack_from(buf, off)
        off += hdr.size
        img = np.frombuffer(buf, "<f8", h * w, off).reshape(1, h, w).astype(np.float64)
        off += 8 * h * w
        lab = np.frombuffer(buf, np.uint8, h * w, off).reshape(h, w).copy()
        off += h * w
        vols.append(LabeledVolume(img, lab, ratio, c, _CODE_MODALITY[mod], sid))
    return vols


def split_and_persist(
    vols: Sequence[LabeledVolume],
    path: str | Path,
    seed: int,
    bounds: NormBounds | None = None,
    extra: dict | None = None,
) -> DatasetManifest:
    """Randomised 80/20 train/val split (val = floor(0.2 n)), written as VGDS + JSON sidecar."""
    if not vols:
        raise ValueError("split_and_persist: no volumes")
    n = len(vols)
    n_val = int(np.floor(0.2 * n))
    perm = np.random.default_rng(seed).permutation(n)
    val = set(perm[:n_val].tolist())
    path = Path(path)
    offsets = write_dataset(path, vols)
    entries = [
        {
            "id": int(v.sample_id),
            "offset": int(off),
            "raw_ratio": float(v.raw_ratio),
            "c": float(v.c),
            "modality": v.modality,
            "split": "val" if i in val else "train",
            **({k: val_[i] for k, val_ in extra.items()} if extra else {}),
        }
        for i, (v, off) in enumerate(zip(vols, offsets))
    ]
    manifest = DatasetManifest(str(path.name), bounds, entries)
    sidecar = path.with_suffix(".json")
    try:
        sidecar.write_text(json.dumps(manifest.to_json(), indent=1))
    except OSError as exc:
        raise OSError(f"failed writing manifest {sidecar}: {exc}") from exc
    return manifest


def load_manifest(path: str | Path) -> DatasetManifest:
    return DatasetManifest.from_json(json.loads(Path(path).with_suffix(".json").read_text()))


def stack(vols: Sequence[LabeledVolume]) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays: images (N, 1, H, W) and labels (N, H, W)."""
    return np.stack([v.image for v in vols]), np.stack([v.labels for v in vols]).astype(np.int64)
