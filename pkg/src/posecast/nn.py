"""Layers, initialization, the Adam optimizer, and checkpoint serialization."""

from __future__ import annotations

import json
import struct

import numpy as np

from . import kernels
from .autodiff import Tensor, leaky_relu, linear
from .errors import DataValidationError, ShapeError, TrainingError, VersionError

DEFAULT_SLOPE = 0.2


def he_init(rng, out_dim, in_dim, slope=DEFAULT_SLOPE):
    """He-style normal init with the leaky-ReLU gain 2 / (1 + slope^2)."""
    std = np.sqrt(2.0 / ((1.0 + slope * slope) * in_dim))
    return rng.normal(0.0, std, size=(out_dim, in_dim)).astype(np.float32)


class Linear:
    """Dense layer; weight is [out, in], bias [out], bias starts at zero."""

    def __init__(self, in_dim, out_dim, rng, name, slope=DEFAULT_SLOPE):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(he_init(rng, out_dim, in_dim, slope), requires_grad=True,
                             name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_dim, dtype=np.float32), requires_grad=True,
                           name=f"{name}.bias")

    def __call__(self, x):
        return linear(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class ResidualBlock:
    """x + fc2(lrelu(fc1(x))). Zeroing fc2's weight leaves identity plus bias."""

    def __init__(self, width, rng, name, slope=DEFAULT_SLOPE):
        self.fc1 = Linear(width, width, rng, f"{name}.fc1", slope)
        self.fc2 = Linear(width, width, rng, f"{name}.fc2", slope)
        self.slope = slope

    def __call__(self, x):
        return x + self.fc2(leaky_relu(self.fc1(x), self.slope))

    def parameters(self):
        return self.fc1.parameters() + self.fc2.parameters()


class MLP:
    """Linears with leaky ReLU between them; the last layer stays linear."""

    def __init__(self, dims, rng, name, slope=DEFAULT_SLOPE):
        if len(dims) < 2:
            raise ShapeError(f"MLP needs at least [in, out] dims, got {dims}")
        self.slope = slope
        self.layers = [
            Linear(dims[i], dims[i + 1], rng, f"{name}.fc{i}", slope)
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x):
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last:
                x = leaky_relu(x, self.slope)
        return x

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


def named_parameters(params):
    """dict name -> Tensor; names must be present and unique."""
    out = {}
    for p in params:
        if not p.name:
            raise ShapeError("parameter without a name cannot be checkpointed")
        if p.name in out:
            raise ShapeError(f"duplicate parameter name {p.name!r}")
        out[p.name] = p
    return out


class Adam:
    """Bias-corrected Adam with classic L2-coupled weight decay.

    Moment buffers are keyed by parameter name so they survive checkpoint
    round-trips; step() consumes p.grad (missing grads count as zero).
    """

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        named_parameters(self.params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient for parameter {p.name}")
        self.t += 1
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            bad = kernels.adam_update(
                p.data.reshape(-1), np.ascontiguousarray(g, dtype=np.float32).reshape(-1),
                self.m[p.name].reshape(-1), self.v[p.name].reshape(-1),
                self.lr, self.beta1, self.beta2, self.eps, self.weight_decay, self.t)
            if bad:
                raise TrainingError(f"non-finite gradient for parameter {p.name}")


# ---------------------------------------------------------------------------
# Checkpoint format: little-endian, magic "CPF1", version u32, a JSON
# metadata block (u32 length + UTF-8 bytes), parameter count u64, then per
# parameter: name length u16, UTF-8 name, rank u8, dims u32 each, f32 data.
# Adam moments go to a sibling "<path>.opt" file with the identical layout.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CPF1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays, metadata=None):
    """Write named float32 arrays plus a JSON metadata block."""
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        f.write(struct.pack("<Q", len(arrays)))
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                f.write(struct.pack("<I", dim))
            f.write(data.tobytes())


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise DataValidationError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path):
    """Read a checkpoint; returns (dict name -> float32 array, metadata dict)."""
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise DataValidationError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise VersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        (meta_len,) = struct.unpack("<I", _read_exact(f, 4, "metadata length"))
        metadata = json.loads(_read_exact(f, meta_len, "metadata")) if meta_len else {}
        (count,) = struct.unpack("<Q", _read_exact(f, 8, "parameter count"))
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
            shape = tuple(
                struct.unpack("<I", _read_exact(f, 4, "dim"))[0] for _ in range(rank)
            )
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(f, 4 * n, f"data of {name}"), dtype="<f4")
            arrays[name] = data.reshape(shape).astype(np.float32)
    return arrays, metadata


def save_params(path, params, metadata=None):
    save_checkpoint(path, {p.name: p.data for p in named_parameters(params).values()},
                    metadata)


def load_params(path, params):
    """Load arrays into existing parameter tensors in place; returns metadata."""
    arrays, metadata = load_checkpoint(path)
    named = named_parameters(params)
    missing = sorted(set(named) - set(arrays))
    if missing:
        raise DataValidationError(f"{path}: checkpoint missing parameters {missing}")
    for name, p in named.items():
        arr = arrays[name]
        if arr.shape != p.data.shape:
            raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
        p.data = np.ascontiguousarray(arr)
    return metadata


def optimizer_path(path):
    return str(path) + ".opt"


def save_adam(path, opt, metadata=None):
    """Write Adam moments next to a model checkpoint (sibling .opt file)."""
    arrays = {}
    for name in opt.m:
        arrays[f"{name}.m"] = opt.m[name]
        arrays[f"{name}.v"] = opt.v[name]
    meta = dict(metadata or {})
    meta.update({"kind": "adam", "step": opt.t, "lr": opt.lr, "beta1": opt.beta1,
                 "beta2": opt.beta2, "eps": opt.eps, "weight_decay": opt.weight_decay})
    save_checkpoint(optimizer_path(path), arrays, meta)


def load_adam(path, opt):
    """Restore moments and step count into an existing Adam instance."""
    arrays, meta = load_checkpoint(optimizer_path(path))
    for name in opt.m:
        opt.m[name] = np.ascontiguousarray(arrays[f"{name}.m"])
        opt.v[name] = np.ascontiguousarray(arrays[f"{name}.v"])
    opt.t = int(meta.get("step", 0))
    return meta
