"""Fully connected networks, SGD with momentum, and parameter checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor

PARAMETER_TAGS = ("theta_g", "theta_t", "theta_c", "theta_d")


@dataclass(frozen=True)
class NetworkSpec:
    """Widths ``layer_sizes[0] -> ... -> layer_sizes[-1]`` plus per-layer options.

    Layer ``i`` maps ``layer_sizes[i]`` to ``layer_sizes[i + 1]`` and applies
    affine, then optional batch norm, then the activation.
    """

    layer_sizes: tuple
    use_batch_norm: tuple = ()
    activation: tuple = ()

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ValueError("a network needs at least one layer (two widths)")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer widths must be positive: {sizes}")
        n = len(sizes) - 1
        bn = tuple(self.use_batch_norm) or (False,) * n
        act = tuple(self.activation) or ("relu",) * (n - 1) + ("none",)
        if len(bn) != n or len(act) != n:
            raise ValueError(f"expected {n} batch-norm flags and activations")
        for a in act:
            if a not in ("relu", "none"):
                raise ValueError(f"unknown activation {a!r}")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "use_batch_norm", tuple(bool(b) for b in bn))
        object.__setattr__(self, "activation", act)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def in_width(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_width(self) -> int:
        return self.layer_sizes[-1]

    @classmethod
    def mlp(cls, sizes: Sequence[int], batch_norm: bool = False,
            hidden_activation: str = "relu", final_activation: str = "none") -> "NetworkSpec":
        n = len(sizes) - 1
        act = (hidden_activation,) * (n - 1) + (final_activation,)
        bn = (batch_norm,) * (n - 1) + (batch_norm and final_activation != "none",)
        return cls(tuple(sizes), bn, act)


@dataclass
class ParameterSet:
    tag: str
    spec: NetworkSpec
    tensors: dict = field(default_factory=dict)
    bn_states: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tag not in PARAMETER_TAGS:
            raise ValueError(f"unknown parameter tag {self.tag!r}")

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def named(self):
        return self.tensors.items()

    def copy(self) -> "ParameterSet":
        tensors = {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.tensors.items()}
        states = {k: BatchNormState(s.running_mean.copy(), s.running_var.copy(), s.momentum)
                  for k, s in self.bn_states.items()}
        return ParameterSet(self.tag, self.spec, tensors, states)


def init_parameters(spec: NetworkSpec, seed: int, tag: str = "theta_g") -> ParameterSet:
    """Fan-in uniform weights, zero biases, unit batch-norm scale."""
    rng = np.random.default_rng(seed)
    dtype = ad.get_default_dtype()
    params = ParameterSet(tag, spec)
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_sizes[i], spec.layer_sizes[i + 1]
        bound = np.sqrt(6.0 / fan_in)
        params.tensors[f"layer{i}.weight"] = Tensor(
            rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype), requires_grad=True)
        params.tensors[f"layer{i}.bias"] = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)
        if spec.use_batch_norm[i]:
            params.tensors[f"layer{i}.bn_scale"] = Tensor(np.ones(fan_out, dtype=dtype), requires_grad=True)
            params.tensors[f"layer{i}.bn_shift"] = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)
            params.bn_states[f"layer{i}"] = BatchNormState.fresh(fan_out)
    return params


def apply_layer(params: ParameterSet, i: int, h: Tensor, mode: str) -> Tensor:
    spec = params.spec
    t = params.tensors
    out = ad.affine(h, t[f"layer{i}.weight"], t[f"layer{i}.bias"])
    if spec.use_batch_norm[i]:
        out = ad.batch_norm(out, t[f"layer{i}.bn_scale"], t[f"layer{i}.bn_shift"],
                            params.bn_states[f"layer{i}"], mode)
    if spec.activation[i] == "relu":
        out = ad.relu(out)
    return out


def forward_mlp(params: ParameterSet, x: Tensor, mode: str = "train",
                tape: Optional[ad.Tape] = None):
    """Run every layer; returns ``(output, per_layer_outputs)``."""
    if x.data.ndim != 2 or x.shape[1] != params.spec.in_width:
        raise ad.DimensionError(
            f"input width {x.shape[-1] if x.data.ndim else None} does not match "
            f"network input width {params.spec.in_width}")
    if tape is not None:
        with tape:
            return forward_mlp(params, x, mode)
    per_layer = []
    h = x
    for i in range(params.spec.n_layers):
        h = apply_layer(params, i, h, mode)
        per_layer.append(h)
    return h, per_layer


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.0
    velocities: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.learning_rate > 0 and np.isfinite(self.learning_rate)):
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(params: ParameterSet, grads: Optional[dict], state: SgdState) -> ParameterSet:
    """``v <- m v - lr g``; ``theta <- theta + v``. Updates ``params`` in place.

    ``grads`` maps tensors to gradient arrays; when ``None`` each tensor's
    ``.grad`` is used.
    """
    for name, p in params.named():
        g = p.grad if grads is None else grads.get(p)
        if g is None:
            raise KeyError(f"missing gradient for {params.tag}.{name}")
        key = (params.tag, name)
        v = state.velocities.get(key)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v - state.learning_rate * g
        state.velocities[key] = v
        p.data = p.data + v
    return params


# ------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"ARTNCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict) -> None:
    """Write named arrays as little-endian float64 records.

    Layout: magic ``ARTNCKPT``, u32 version, u32 record count, then per record
    u32 name length, UTF-8 name, u32 rank, rank x u64 dims, float64 payload.
    """
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<II", CHECKPOINT_VERSION, len(arrays))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    arrays = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 8 * size > len(buf):
                raise ValueError(f"{path}: truncated payload for {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims).copy()
            pos += 8 * size
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return arrays


def parameter_arrays(params: ParameterSet, prefix: str = "") -> dict:
    arrays = {f"{prefix}{k}": t.data for k, t in params.named()}
    for k, s in params.bn_states.items():
        arrays[f"{prefix}{k}.running_mean"] = s.running_mean
        arrays[f"{prefix}{k}.running_var"] = s.running_var
    return arrays


def load_parameter_arrays(params: ParameterSet, arrays: dict, prefix: str = "") -> None:
    for k, t in params.named():
        key = f"{prefix}{k}"
        if key not in arrays:
            raise KeyError(f"checkpoint lacks {key}")
        if arrays[key].shape != t.shape:
            raise ad.DimensionError(f"{key}: checkpoint shape {arrays[key].shape} != {t.shape}")
        t.data = arrays[key].astype(t.data.dtype)
    for k, s in params.bn_states.items():
        s.running_mean = arrays[f"{prefix}{k}.running_mean"].copy()
        s.running_var = arrays[f"{prefix}{k}.running_var"].copy()
