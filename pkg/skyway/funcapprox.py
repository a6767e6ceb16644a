"""Dense float64 networks with hand-written backprop, Adam and checkpoints.

Hidden layers use ReLU and the output layer is linear. Inputs may be a single
vector or a batch (rows are samples).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"SKYWNET"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<7sHQ")


class ShapeMismatchError(ValueError):
    """Raised when inputs, gradients or parameters disagree on shape."""


class CheckpointFormatError(ValueError):
    """Raised for unreadable or foreign checkpoint files."""


@dataclass(eq=False)
class DenseNet:
    widths: tuple[int, ...]
    params: list[np.ndarray]

    @classmethod
    def create(cls, widths: Sequence[int], rng: np.random.Generator) -> "DenseNet":
        """He-uniform weights on ReLU-fed layers, a narrower fan-in range on the output, zero biases."""
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ShapeMismatchError(f"need at least input and output widths, got {widths}")
        params: list[np.ndarray] = []
        for layer, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            gain = 6.0 if layer < len(widths) - 2 else 1.0
            limit = np.sqrt(gain / fan_in)
            params.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            params.append(np.zeros(fan_out))
        return cls(widths, params)

    @classmethod
    def zeros(cls, widths: Sequence[int]) -> "DenseNet":
        widths = tuple(int(w) for w in widths)
        params: list[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            params.extend([np.zeros((fan_in, fan_out)), np.zeros(fan_out)])
        return cls(widths, params)

    @property
    def layer_count(self) -> int:
        return len(self.widths) - 1

    def copy(self) -> "DenseNet":
        return DenseNet(self.widths, [p.copy() for p in self.params])

    def frozen(self) -> "DenseNet":
        """Read-only copy for publishing to other threads."""
        clone = self.copy()
        for p in clone.params:
            p.setflags(write=False)
        return clone

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    single: bool


def _as_batch(net: DenseNet, x: np.ndarray) -> tuple[np.ndarray, bool]:
    array = np.asarray(x, dtype=float)
    single = array.ndim == 1
    batch = array[None, :] if single else array
    if batch.ndim != 2 or batch.shape[1] != net.widths[0]:
        raise ShapeMismatchError(f"input width {batch.shape[-1] if batch.ndim else 0} != network input {net.widths[0]}")
    return batch, single


def forward_with_cache(net: DenseNet, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    activation, single = _as_batch(net, x)
    inputs, pre = [], []
    for layer in range(net.layer_count):
        weight, bias = net.params[2 * layer], net.params[2 * layer + 1]
        inputs.append(activation)
        z = activation @ weight + bias
        pre.append(z)
        activation = np.maximum(z, 0.0) if layer < net.layer_count - 1 else z
    output = activation[0] if single else activation
    return output, ForwardCache(inputs, pre, single)


def forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    return forward_with_cache(net, x)[0]


def backward(
    net: DenseNet, x: np.ndarray, upstream: np.ndarray, cache: ForwardCache | None = None
) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients of sum(upstream * forward(x)) w.r.t. parameters and input."""
    if cache is None:
        _, cache = forward_with_cache(net, x)
    grad = np.asarray(upstream, dtype=float)
    grad = grad[None, :] if cache.single else grad
    expected = (cache.inputs[0].shape[0], net.widths[-1])
    if grad.shape != expected:
        raise ShapeMismatchError(f"upstream gradient shape {grad.shape} != output shape {expected}")
    grads: list[np.ndarray] = [np.empty(0)] * len(net.params)
    for layer in reversed(range(net.layer_count)):
        if layer < net.layer_count - 1:
            grad = grad * (cache.pre_activations[layer] > 0.0)
        grads[2 * layer] = cache.inputs[layer].T @ grad
        grads[2 * layer + 1] = grad.sum(axis=0)
        grad = grad @ net.params[2 * layer].T
    return grads, grad[0] if cache.single else grad


@dataclass
class AdamState:
    first: list[np.ndarray]
    second: list[np.ndarray]
    step: int = 0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], learning_rate: float = 3e-4) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, learning_rate)


def adam_step(params: list[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    """Bias-corrected Adam; parameters are updated in place and returned."""
    if len(params) != len(grads) or len(params) != len(state.first):
        raise ShapeMismatchError("params, grads and optimizer state disagree on parameter count")
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for param, grad, m, v in zip(params, grads, state.first, state.second):
        if param.shape != grad.shape:
            raise ShapeMismatchError(f"gradient shape {grad.shape} != parameter shape {param.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        param -= state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
    return params, state


def soft_update(target: DenseNet, source: DenseNet, rate: float) -> None:
    for t_param, s_param in zip(target.params, source.params):
        t_param *= 1.0 - rate
        t_param += rate * s_param


@dataclass
class Checkpoint:
    nets: dict[str, DenseNet]
    metadata: dict[str, Any] = field(default_factory=dict)


def save_checkpoint(path: str | Path, nets: Mapping[str, DenseNet], metadata: Mapping[str, Any] | None = None) -> Path:
    target = Path(path)
    header = {
        "nets": {name: list(net.widths) for name, net in nets.items()},
        "metadata": dict(metadata or {}),
        "dtype": "<f8",
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for net in nets.values() for p in net.params)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(encoded)) + encoded + body)
    except OSError as error:
        raise OSError(f"could not write checkpoint {target}: {error}") from error
    return target


def load_checkpoint(path: str | Path) -> Checkpoint:
    source = Path(path)
    try:
        payload = source.read_bytes()
    except OSError as error:
        raise OSError(f"could not read checkpoint {source}: {error}") from error
    if len(payload) < _PREFIX.size:
        raise CheckpointFormatError(f"{source}: truncated checkpoint header")
    magic, version, header_size = _PREFIX.unpack_from(payload)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{source}: not a skyway checkpoint")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{source}: unsupported checkpoint version {version}")
    try:
        header = json.loads(payload[_PREFIX.size : _PREFIX.size + header_size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise CheckpointFormatError(f"{source}: corrupt checkpoint header") from error
    offset = _PREFIX.size + header_size
    nets: dict[str, DenseNet] = {}
    for name, widths in header["nets"].items():
        params = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            for shape in ((fan_in, fan_out), (fan_out,)):
                size = int(np.prod(shape)) * 8
                chunk = payload[offset : offset + size]
                if len(chunk) != size:
                    raise CheckpointFormatError(f"{source}: truncated parameters for {name}")
                params.append(np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(float))
                offset += size
        nets[name] = DenseNet(tuple(widths), params)
    return Checkpoint(nets, header.get("metadata", {}))
