"""Multilayer perceptron policy with hand-written reverse-mode gradients.

Parameters live in one flat vector, layer-major, each layer storing its
weight matrix (fan_out x fan_in, row-major) followed by its bias.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MODEL_FORMAT = "deepempc-mlp/1"
_MAGIC = b"DEMLP\x01\n"

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "identity": (lambda z: z, lambda a: np.ones_like(a)),
}


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int = 4
    output_dim: int = 1
    hidden_layers: int = 7
    hidden_width: int = 30
    activation: str = "tanh"
    # fixed per-input divisor applied before the first affine map
    input_scale: tuple | None = None

    def __post_init__(self):
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise ValueError("need at least one hidden layer of width >= 1")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input and output dimensions must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.input_scale is not None:
            scale = tuple(float(s) for s in self.input_scale)
            if len(scale) != self.input_dim or min(scale) <= 0:
                raise ValueError("input_scale needs one positive entry per input")
            object.__setattr__(self, "input_scale", scale)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_scale"] = None if self.input_scale is None else list(self.input_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MlpArchitecture":
        d = dict(d)
        if d.get("input_scale") is not None:
            d["input_scale"] = tuple(d["input_scale"])
        return cls(**d)


def param_count(arch: MlpArchitecture) -> int:
    sizes = arch.layer_sizes
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def unpack(arch: MlpArchitecture, theta):
    """Split the flat vector into ``[(W, b), ...]`` views."""
    theta = np.asarray(theta)
    if theta.shape != (param_count(arch),):
        raise ValueError(f"expected {param_count(arch)} parameters, got shape {theta.shape}")
    layers, i = [], 0
    sizes = arch.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = theta[i:i + fan_in * fan_out].reshape(fan_out, fan_in)
        i += fan_in * fan_out
        b = theta[i:i + fan_out]
        i += fan_out
        layers.append((W, b))
    return layers


def init_params(arch: MlpArchitecture, seed: int = 0) -> np.ndarray:
    """Uniform fan-in initialization, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    rng = np.random.default_rng(seed)
    parts = []
    sizes = arch.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, fan_in * fan_out))
        parts.append(rng.uniform(-bound, bound, fan_out))
    return np.concatenate(parts)


@dataclass
class MlpParams:
    arch: MlpArchitecture
    theta: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (param_count(self.arch),):
            raise ValueError("parameter vector does not match the architecture")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("parameters must be finite")

    def __call__(self, x):
        return forward(self.arch, self.theta, x)


@dataclass
class GradientBundle:
    d_theta: np.ndarray
    d_input: np.ndarray


def _forward_cache(arch, theta, X):
    act, _ = _ACTIVATIONS[arch.activation]
    layers = unpack(arch, theta)
    a = X if arch.input_scale is None else X / np.asarray(arch.input_scale)
    acts = [a]
    for W, b in layers[:-1]:
        a = act(a @ W.T + b)
        acts.append(a)
    W, b = layers[-1]
    return a @ W.T + b, acts, layers


def forward(arch: MlpArchitecture, theta, x):
    """Network output. ``x`` of shape (input_dim,) gives a scalar (single output)
    or a vector; a batch (n, input_dim) gives shape (n,) or (n, output_dim)."""
    x = np.asarray(x, dtype=float)
    out, _, _ = _forward_cache(arch, theta, np.atleast_2d(x))
    if arch.output_dim == 1:
        out = out[:, 0]
    if x.ndim == 1:
        return float(out[0]) if arch.output_dim == 1 else out[0]
    return out


def forward_backward(arch: MlpArchitecture, theta, X, upstream_fn):
    """Batched forward pass followed by a reverse sweep.

    ``upstream_fn(y)`` receives the (n,) or (n, output_dim) outputs and must
    return ``(value, dL/dy)``. Returns ``(value, y, d_theta, d_input)`` where
    ``d_theta`` is summed over the batch and ``d_input`` is per sample.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y, acts, layers = _forward_cache(arch, theta, X)
    y_out = y[:, 0] if arch.output_dim == 1 else y
    value, dy = upstream_fn(y_out)
    dy = np.asarray(dy, dtype=float).reshape(len(X), arch.output_dim)
    _, dact = _ACTIVATIONS[arch.activation]
    grads = []
    delta = dy
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        a_in = acts[i]
        grads.append(delta.sum(axis=0))
        grads.append((delta.T @ a_in).ravel())
        delta = delta @ W
        if i > 0:
            delta = delta * dact(a_in)
    d_theta = np.concatenate(grads[::-1])
    d_input = delta if arch.input_scale is None else delta / np.asarray(arch.input_scale)
    return value, y_out, d_theta, d_input


def backward(arch: MlpArchitecture, theta, x, upstream: float = 1.0) -> GradientBundle:
    """Gradients of ``upstream * N(x)`` for a single input (scalar output)."""
    x = np.asarray(x, dtype=float)
    _, _, d_theta, d_input = forward_backward(
        arch, theta, x[None, :], lambda y: (None, np.full_like(y, upstream, dtype=float)))
    return GradientBundle(d_theta, d_input[0])


def input_jacobian(arch: MlpArchitecture, theta, X) -> np.ndarray:
    """Per-sample gradient of a scalar-output network with respect to its input."""
    _, _, _, d_input = forward_backward(arch, theta, X, lambda y: (None, np.ones_like(y)))
    return d_input


def save_model(path, params: MlpParams) -> None:
    """Write the versioned header + raw little-endian float64 parameter vector."""
    header = {"format": MODEL_FORMAT, "architecture": params.arch.to_dict(),
              "n_params": int(params.theta.size), **params.meta}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(params.theta.astype("<f8").tobytes())


def load_model(path) -> MlpParams:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a model file")
    off = len(_MAGIC)
    (n,) = struct.unpack("<Q", raw[off:off + 8])
    header = json.loads(raw[off + 8:off + 8 + n])
    if header.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path}: unsupported model format {header.get('format')!r}")
    arch = MlpArchitecture.from_dict(header.pop("architecture"))
    theta = np.frombuffer(raw[off + 8 + n:], dtype="<f8").astype(float)
    if theta.size != header["n_params"]:
        raise ValueError(f"{path}: truncated parameter block")
    meta = {k: v for k, v in header.items() if k not in ("format", "n_params")}
    return MlpParams(arch, theta, meta)
