"""Flat dotted-key experiment configuration with defaults and bounds."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence


class ConfigError(ValueError):
    """Unknown key, unparsable value, or bound violation."""


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def _between(lo, hi, lo_open=False, hi_open=False) -> Callable[[Any], bool]:
    def ok(v):
        above = v > lo if lo_open else v >= lo
        below = v < hi if hi_open else v <= hi
        return above and below

    ok.desc = f"{'(' if lo_open else '['}{lo}, {hi}{')' if hi_open else ']'}"
    return ok


def _choice(*options) -> Callable[[Any], bool]:
    def ok(v):
        return v in options

    ok.desc = "one of " + ", ".join(options)
    return ok


_INF = float("inf")
POS_INT = _between(1, _INF)
NONNEG_INT = _between(0, _INF)
RATE = _between(0.0, 1.0, lo_open=True)
UNIT = _between(0.0, 1.0)

# key -> (default, parser, check)
SCHEMA: dict[str, tuple[Any, Callable, Callable | None]] = {
    "seed": (0, int, NONNEG_INT),
    "scale": (0.5, float, _between(0.0, 1.0, lo_open=True)),
    "out_dir": ("runs", str, None),
    "data.n_balanced": (2000, int, _between(10, _INF)),
    "data.n_skewed": (1000, int, _between(10, _INF)),
    "data.n_test": (200, int, POS_INT),
    "diffusion.T": (200, int, _between(2, 100_000)),
    "diffusion.beta_start": (5e-4, float, _between(0.0, 1.0, True, True)),
    "diffusion.beta_end": (0.1, float, _between(0.0, 1.0, True, True)),
    "diffusion.sigma_mode": ("beta", str, _choice("beta", "beta_tilde")),
    "diffusion.weighting": ("simplified", str, _choice("simplified", "eq2")),
    "diffusion.steps": (50, int, POS_INT),
    "mask.embed_dim": (16, int, POS_INT),
    "mask.ae_epochs": (6, int, NONNEG_INT),
    "mask.ae_lr": (2e-3, float, RATE),
    "mask.kl_weight": (1e-6, float, _between(0.0, _INF)),
    "mask.dm_epochs": (20, int, NONNEG_INT),
    "mask.dm_lr": (1e-3, float, RATE),
    "mask.p_uncond": (0.2, float, UNIT),
    "mask.batch_size": (16, int, POS_INT),
    "image.ae_epochs_a": (4, int, NONNEG_INT),
    "image.ae_epochs_b": (4, int, NONNEG_INT),
    "image.ae_lr": (2e-3, float, RATE),
    "image.lambda_adv": (0.05, float, _between(0.0, _INF)),
    "image.kl_weight": (1e-6, float, _between(0.0, _INF)),
    "image.dm_epochs_a": (8, int, NONNEG_INT),
    "image.dm_epochs_b": (4, int, NONNEG_INT),
    "image.dm_lr": (1e-3, float, RATE),
    "image.batch_size": (16, int, POS_INT),
    "sweep.G_set": ((1.0, 2.0, 3.0, 4.0, 5.0), _floats, None),
    "sweep.per_point": (50, int, POS_INT),
    "seg.epochs": (30, int, NONNEG_INT),
    "seg.lr": (1e-3, float, RATE),
    "seg.width": (16, int, POS_INT),
    "seg.batch_size": (16, int, POS_INT),
    "eval.pairs": (500, int, POS_INT),
}


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    values: Mapping[str, Any]

    def __getitem__(self, key: str):
        return self.values[key]

    def snapshot(self) -> str:
        """Resolved config as ``key = value`` lines, sorted; parseable by ``parse_config``."""
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in sorted(self.values))

    def digest(self) -> str:
        """Hash of the experiment settings; the output location is not one of them."""
        lines = [l for l in self.snapshot().splitlines(keepends=True) if not l.startswith("out_dir =")]
        return hashlib.sha256("".join(lines).encode()).hexdigest()

    @property
    def out_dir(self) -> Path:
        return Path(self.values["out_dir"])


def _coerce(key: str, raw) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    _, parse, check = SCHEMA[key]
    try:
        value = parse(raw.strip()) if isinstance(raw, str) else parse(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None
    if check is not None and not check(value):
        raise ConfigError(f"{key}: {value!r} outside allowed range {check.desc}")
    return value


def read_config_file(path: str | Path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = val
    return out


def parse_overrides(args: Sequence[str]) -> dict[str, str]:
    """``--key=value`` command-line pairs."""
    out = {}
    for arg in args:
        if not arg.startswith("--") or "=" not in arg:
            raise ConfigError(f"override {arg!r} is not of the form --key=value")
        key, val = arg[2:].split("=", 1)
        out[key] = val
    return out


def parse_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Defaults, then file values, then overrides; every value validated."""
    values = {k: d for k, (d, _, _) in SCHEMA.items()}
    layers = [read_config_file(path) if path is not None else {}, dict(overrides or {})]
    for layer in layers:
        for key, raw in layer.items():
            values[key] = _coerce(key, raw)
    if values["diffusion.beta_start"] > values["diffusion.beta_end"]:
        raise ConfigError("diffusion.beta_start: must not exceed diffusion.beta_end")
    return ExperimentConfig(values)
