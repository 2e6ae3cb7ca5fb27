"""Layer containers, initialisation, the Adam optimizer, and VGCK checkpoints."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def Parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Base class: parameters are discovered from attributes, recursively.

    ``buffers`` names top-level float attributes/arrays that are saved with
    the parameters but never trained (e.g. a latent scale factor).
    """

    buffers: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{name}.{i}", item))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.named_parameters()}
        for b in self.buffers:
            out[b] = np.array(getattr(self, b), dtype=np.float64)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        state = dict(state)
        for b in self.buffers:
            if b not in state:
                raise KeyError(f"state mismatch: missing buffer {b!r}")
            val = state.pop(b)
            setattr(self, b, float(val) if val.ndim == 0 else val)
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            if p.shape != state[k].shape:
                raise ValueError(f"{k}: shape {state[k].shape} does not match parameter {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        bound = 1.0 / math.sqrt(n_in)
        w = np.zeros((n_out, n_in)) if zero else rng.uniform(-bound, bound, (n_out, n_in))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(n_out))

    def forward(self, x: Tensor) -> Tensor:
        return ag.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        k: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int | None = None,
        zero: bool = False,
    ):
        fan_in = c_in * k * k
        # He-uniform for the ReLU/SiLU stacks used throughout
        bound = math.sqrt(6.0 / fan_in)
        shape = (c_out, c_in, k, k)
        self.weight = Parameter(np.zeros(shape) if zero else rng.uniform(-bound, bound, shape))
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-5):
        self.groups = min(groups, channels)
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return ag.group_norm(x, self.groups, self.weight, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator):
        self.table = Parameter(rng.normal(0.0, 1.0, (num, dim)))

    def forward(self, idx: np.ndarray) -> Tensor:
        return ag.embedding(idx, self.table)


class ResBlock(Module):
    """GroupNorm-SiLU-conv twice with a skip, plus an optional per-channel embedding shift."""

    def __init__(self, c_in: int, c_out: int, rng, emb_dim: int | None = None, groups: int = 8):
        self.norm1 = GroupNorm(c_in, groups)
        self.conv1 = Conv2d(c_in, c_out, 3, rng)
        self.norm2 = GroupNorm(c_out, groups)
        self.conv2 = Conv2d(c_out, c_out, 3, rng)
        self.emb = Linear(emb_dim, c_out, rng) if emb_dim else None
        self.skip = Conv2d(c_in, c_out, 1, rng) if c_in != c_out else None

    def forward(self, x: Tensor, emb: Tensor | None = None) -> Tensor:
        h = self.conv1(ag.silu(self.norm1(x)))
        if self.emb is not None and emb is not None:
            e = self.emb(ag.silu(emb))
            h = h + e.reshape(e.shape[0], e.shape[1], 1, 1)
        h = self.conv2(ag.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of integer timesteps, shape (N, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


# -- optimisation -------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: list[tuple[str, Tensor]], state: AdamState) -> AdamState:
    """Apply one bias-corrected Adam update in place to named parameters."""
    for name, p in params:
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params:
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class Adam:
    """Thin wrapper binding an ``AdamState`` to a module's parameters."""

    def __init__(self, module: Module, lr: float = 1e-3, clip_norm: float | None = None):
        self.module = module
        self.state = AdamState(lr=lr)
        self.clip_norm = clip_norm

    def step(self) -> None:
        params = [(n, p) for n, p in self.module.named_parameters()]
        for n, p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        if self.clip_norm is not None:
            total = math.sqrt(sum(float((p.grad**2).sum()) for _, p in params))
            if total > self.clip_norm:
                for _, p in params:
                    p.grad = p.grad * (self.clip_norm / total)
        adam_step(params, self.state)

    def zero_grad(self) -> None:
        self.module.zero_grad()


# -- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"VGCK"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays in the VGCK binary layout (little-endian)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(state)))
        for name, arr in state.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a VGCK checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64)
        off += 8 * n
    return out


class TimeEmbedding(Module):
    """Sinusoidal timestep features followed by a two-layer MLP."""

    def __init__(self, dim: int, rng):
        self.dim = dim
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def forward(self, t: np.ndarray) -> Tensor:
        return self.fc2(ag.silu(self.fc1(Tensor(timestep_embedding(t, self.dim)))))


class DivergenceError(RuntimeError):
    """Raised when a training loss becomes non-finite."""


def check_finite(loss: Tensor, where: str) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} at {where}")
    return value


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches covering ``range(n)`` once."""
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]
