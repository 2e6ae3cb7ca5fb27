"""``ventrigen`` command line: one pipeline stage per subcommand, artifacts under one output directory."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import diffusion as df
from . import evaluation as ev
from . import image_generator as ig
from . import mask_generator as mg
from . import nn
from . import phantoms as ph
from . import pipeline as pl
from .config import ConfigError, ExperimentConfig, parse_config, parse_overrides
from .rng import stream_seed

log = logging.getLogger("ventrigen")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4


class MissingPrerequisite(RuntimeError):
    pass


# artifact layout relative to the output directory, with the step that produces each
ARTIFACTS = {
    "balanced": ("data/balanced.vgds", "gen-data"),
    "skewed": ("data/skewed.vgds", "gen-data"),
    "test": ("data/test.vgds", "gen-data"),
    "mask_ae": ("models/mask_ae.vgck", "train-mask-ae"),
    "mask_dm": ("models/mask_dm.vgck", "train-mask-dm"),
    "image_ae": ("models/image_ae.vgck", "train-image-ae"),
    "image_dm": ("models/image_dm.vgck", "train-image-dm"),
    "sweep": ("sweep/sweep.csv", "sweep"),
    "d_syn": ("synth/d_syn.vgds", "synthesize"),
    "d_real": ("compose/d_real.vgds", "compose"),
    "d_aug": ("compose/d_aug.vgds", "compose"),
    "seg_real": ("seg/seg_real.vgck", "train-seg"),
    "seg_syn": ("seg/seg_syn.vgck", "train-seg"),
    "seg_aug": ("seg/seg_aug.vgck", "train-seg"),
    "metrics_csv": ("eval/metrics.csv", "evaluate"),
    "metrics_json": ("eval/metrics.json", "evaluate"),
}


class Run:
    """Per-invocation context: resolved config, artifact paths, emitted-file list."""

    def __init__(self, cfg: ExperimentConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.out = cfg.out_dir
        self.emitted: list[str] = []

    def path(self, key: str) -> Path:
        return self.out / ARTIFACTS[key][0]

    def need(self, *keys: str) -> list[Path]:
        paths = [self.path(k) for k in keys]
        missing = [f"{p} (run '{ARTIFACTS[k][1]}')" for k, p in zip(keys, paths) if not p.exists()]
        if missing:
            raise MissingPrerequisite(f"{self.command}: missing " + ", ".join(missing))
        return paths

    def emit(self, path: Path) -> Path:
        self.emitted.append(str(path))
        return path

    def prepare(self, key: str) -> Path:
        p = self.path(key)
        p.parent.mkdir(parents=True, exist_ok=True)
        return self.emit(p)

    def seed(self, label: str) -> int:
        return stream_seed(self.cfg["seed"], label)

    def sched(self) -> df.NoiseSchedule:
        c = self.cfg
        return df.build_linear_schedule(
            c["diffusion.T"], c["diffusion.beta_start"], c["diffusion.beta_end"], c["diffusion.sigma_mode"]
        )


def _split(path: Path) -> tuple[list, list]:
    manifest = ph.load_manifest(path)
    vols = ph.read_dataset(path)
    by_id = {v.sample_id: v for v in vols}
    return [by_id[i] for i in manifest.ids("train")], [by_id[i] for i in manifest.ids("val")]


def _save(run: Run, key: str, model: nn.Module) -> None:
    nn.save_checkpoint(run.prepare(key), model.state_dict())


def _load(run: Run, key: str, model: nn.Module) -> nn.Module:
    (p,) = run.need(key)
    model.load_state_dict(nn.load_checkpoint(p))
    return model


def _mask_ae(run):
    return _load(run, "mask_ae", mg.MaskAutoencoder(np.random.default_rng(0), embed_dim=run.cfg["mask.embed_dim"]))


def _stack(run: Run, images: bool = True) -> pl.GeneratorStack:
    stack = pl.GeneratorStack(run.sched(), _mask_ae(run), _load(run, "mask_dm", mg.MaskDenoiser(np.random.default_rng(0))))
    if images:
        stack.image_ae = _load(run, "image_ae", ig.ImageAutoencoder(np.random.default_rng(0)))
        stack.image_dm = _load(run, "image_dm", ig.SpadeDenoiser(np.random.default_rng(0)))
    return stack


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(run: Run, args) -> None:
    c = run.cfg
    for key, kind, n in (
        ("balanced", "balanced", c["data.n_balanced"]),
        ("skewed", "skewed", c["data.n_skewed"]),
        ("test", "enlarged", c["data.n_test"]),
    ):
        vols = ph.generate_corpus(ph.sample_corpus(kind, n, run.seed(f"corpus-{key}")), run.seed(f"render-{key}"))
        bounds = ph.assign_conditions(vols)
        path = run.prepare(key)
        ph.split_and_persist(vols, path, run.seed(f"split-{key}"), bounds)
        run.emit(path.with_suffix(".json"))


def cmd_train_mask_ae(run: Run, args) -> None:
    train, val = _split(run.need("balanced")[0])
    c = run.cfg
    ae, record = mg.train_mask_autoencoder(
        train, c["mask.ae_epochs"], run.seed("mask-ae"), c["mask.batch_size"], c["mask.ae_lr"],
        c["mask.embed_dim"], c["mask.kl_weight"],
    )
    _save(run, "mask_ae", ae)
    labels = np.stack([v.labels for v in val]).astype(np.int64)
    rec = ae.reconstruct(labels)
    log.info("mask AE val accuracy %.4f ventricle dice %.4f", (rec == labels).mean(), ev.dice(rec, labels))


def cmd_train_mask_dm(run: Run, args) -> None:
    train, _ = _split(run.need("balanced")[0])
    ae = _mask_ae(run)
    c = run.cfg
    den, _ = mg.train_mask_diffusion(
        ae, train, run.sched(), c["mask.dm_epochs"], run.seed("mask-dm"), c["mask.batch_size"],
        c["mask.dm_lr"], c["mask.p_uncond"], c["diffusion.weighting"],
    )
    _save(run, "mask_dm", den)


def cmd_train_image_ae(run: Run, args) -> None:
    train_a, _ = _split(run.need("balanced")[0])
    train_b, val_b = _split(run.need("skewed")[0])
    c = run.cfg
    ae, _, record = ig.train_image_autoencoder(
        train_a, train_b, c["image.ae_epochs_a"], c["image.ae_epochs_b"], run.seed("image-ae"),
        c["image.batch_size"], c["image.ae_lr"], c["image.lambda_adv"], c["image.kl_weight"], val_b,
    )
    _save(run, "image_ae", ae)
    log.info("image AE modality-B val L1: %s", record.val_l1)


def cmd_train_image_dm(run: Run, args) -> None:
    train_a, _ = _split(run.need("balanced")[0])
    train_b, _ = _split(run.need("skewed")[0])
    ae = _load(run, "image_ae", ig.ImageAutoencoder(np.random.default_rng(0)))
    c = run.cfg
    den, _ = ig.train_image_diffusion(
        ae, train_a, train_b, run.sched(), c["image.dm_epochs_a"], c["image.dm_epochs_b"],
        run.seed("image-dm"), c["image.batch_size"], c["image.dm_lr"], c["diffusion.weighting"],
    )
    _save(run, "image_dm", den)


def cmd_sweep(run: Run, args) -> None:
    run.need("mask_ae", "mask_dm")
    _, val = _split(run.need("balanced")[0])
    stack = _stack(run, images=False)
    rows = pl.guidance_sweep(
        stack, val, None, run.cfg["sweep.G_set"], run.cfg["sweep.per_point"], run.cfg["diffusion.steps"],
        run.seed("sweep"),
    )
    pl.write_sweep(rows, run.prepare("sweep"))


def cmd_synthesize(run: Run, args) -> None:
    run.need("mask_ae", "mask_dm", "image_ae", "image_dm")
    stack = _stack(run)
    ds = pl.build_bucketed_dataset(stack, run.cfg["scale"], run.seed("synthesize"), run.cfg["diffusion.steps"])
    path = run.prepare("d_syn")
    run.emit(pl.persist_samples(ds.samples, path))


def cmd_compose(run: Run, args) -> None:
    skewed, syn = run.need("skewed", "d_syn")
    train, _ = _split(skewed)
    samples = pl.load_samples(syn)
    d_syn = pl.SyntheticDataset([s for s in samples if isinstance(s, pl.SyntheticSample)])
    out = pl.compose_datasets(train, d_syn, run.cfg["scale"], run.seed("compose"))
    for key, data in (("d_real", out.real), ("d_aug", out.aug)):
        run.emit(pl.persist_samples(data, run.prepare(key)))


SEG_SOURCES = {"seg_real": "d_real", "seg_syn": "d_syn", "seg_aug": "d_aug"}


def cmd_train_seg(run: Run, args) -> None:
    c = run.cfg
    # one seed for all three: the training corpus is the only variable
    seed = run.seed("segmenter")
    for key, source in SEG_SOURCES.items():
        images, labels = pl.arrays(pl.load_samples(run.need(source)[0]))
        model, record = ev.train_segmenter(
            images, labels, c["seg.epochs"], seed, c["seg.batch_size"], c["seg.lr"], c["seg.width"]
        )
        _save(run, key, model)


def cmd_evaluate(run: Run, args) -> None:
    test = ph.read_dataset(run.need("test")[0])
    images, labels = ph.stack(test)
    models = {
        key.replace("seg_", ""): _load(run, key, ev.SegModel(np.random.default_rng(0), run.cfg["seg.width"]))
        for key in SEG_SOURCES
    }
    report = ev.evaluate_all(models, images, labels)
    syn = [s for s in pl.load_samples(run.need("d_syn")[0]) if isinstance(s, pl.SyntheticSample)]
    syn_images = np.stack([s.image for s in syn])
    if len(syn_images) >= 2:
        s_mean, ms_mean = ev.pairwise_diversity(syn_images, run.cfg["eval.pairs"], run.seed("pairs"))
        report.quality.update(diversity_ssim=s_mean, diversity_ms_ssim=ms_mean)
    real_train, _ = _split(run.need("skewed")[0])
    feats = ev.RandomFeatures(run.seed("features"))
    fa, fb = feats(syn_images), feats(np.stack([v.image for v in real_train]))
    if min(len(fa), len(fb)) > fa.shape[1]:
        report.quality["frechet_random_features"] = ev.frechet_distance(fa, fb)
    else:
        log.warning("too few samples for a Frechet distance on %d features", fa.shape[1])
    report.write(run.prepare("metrics_csv"), run.prepare("metrics_json"))
    for model, stats in report.summary.items():
        print(f"{model}: dice {stats['dice_mean']:.3f}  volume MAE {stats['volume_abs_error_mean']:.1f} px")


def cmd_report(run: Run, args) -> None:
    log_path = run.out / "runs.jsonl"
    records = [json.loads(l) for l in log_path.read_text().splitlines()] if log_path.exists() else []
    metrics = run.path("metrics_json")
    summary = json.loads(metrics.read_text())["summary"] if metrics.exists() else {}
    out = run.out / "report.json"
    run.out.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"runs": records, "summary": summary}, indent=1, sort_keys=True))
    run.emit(out)
    print(f"{len(records)} recorded runs; {len(summary)} evaluated models")


def cmd_sample_mask(run: Run, args) -> None:
    stack = _stack(run, images=False)
    seeds = pl.item_seeds(args.seed, args.count)
    labels, ratios = mg.sample_mask(stack.mask_dm, stack.mask_ae, stack.sched, args.c, args.guidance, seeds, args.steps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.save(out, labels)
    run.emit(out)
    print("achieved ratios:", " ".join(f"{r:.4f}" for r in ratios))


def cmd_sample_image(run: Run, args) -> None:
    stack = _stack(run)
    masks = np.load(args.mask_file)
    masks = masks[None] if masks.ndim == 2 else masks
    images = ig.sample_image(stack.image_dm, stack.image_ae, stack.sched, masks, pl.item_seeds(args.seed, len(masks)), args.steps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.save(out, images)
    run.emit(out)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-mask-ae": cmd_train_mask_ae,
    "train-mask-dm": cmd_train_mask_dm,
    "train-image-ae": cmd_train_image_ae,
    "train-image-dm": cmd_train_image_dm,
    "sweep": cmd_sweep,
    "synthesize": cmd_synthesize,
    "compose": cmd_compose,
    "train-seg": cmd_train_seg,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "sample-mask": cmd_sample_mask,
    "sample-image": cmd_sample_image,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ventrigen", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None)
        if name == "sample-mask":
            p.add_argument("--c", type=float, required=True)
            p.add_argument("--guidance", type=float, default=4.0)
            p.add_argument("--count", type=int, default=1)
        if name == "sample-image":
            p.add_argument("--mask-file", type=Path, required=True)
        if name in ("sample-mask", "sample-image"):
            p.add_argument("--steps", type=int, default=50)
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--out", type=Path, required=True)
    return parser


def _append_record(run: Run, start: float, status: int) -> None:
    run.out.mkdir(parents=True, exist_ok=True)
    record = {
        "subcommand": run.command,
        "config_hash": run.cfg.digest(),
        "start": start,
        "end": time.time(),
        "status": status,
        "artifacts": run.emitted,
    }
    with open(run.out / "runs.jsonl", "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        overrides = parse_overrides(extra)
        if "VENTRIGEN_OUT" in os.environ:
            overrides["out_dir"] = os.environ["VENTRIGEN_OUT"]
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(cfg, args.command)
    start = time.time()
    status = EXIT_OK
    try:
        COMMANDS[args.command](run, args)
        snap = run.out / "config" / f"{args.command}.cfg"
        snap.parent.mkdir(parents=True, exist_ok=True)
        snap.write_text(cfg.snapshot())
        run.emit(snap)
    except MissingPrerequisite as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_MISSING
    except (ValueError, RuntimeError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_RUNTIME
    _append_record(run, start, status)
    return status


if __name__ == "__main__":
    sys.exit(main())
