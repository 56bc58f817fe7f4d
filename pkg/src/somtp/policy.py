"""Feed-forward optimizer network with hand-written reverse mode.

Architecture: ``n_layers`` blocks of (dense -> ReLU -> dropout), then a dense
head, ``tanh``, and an affine map of ``[-1, 1]`` onto the control box.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .vehicle import PlannerConfig

MAGIC = b"SOMTPNET"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable, corrupt or incompatible checkpoint files."""


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    output_dim: int
    n_layers: int = 5
    hidden_dim: int = 256
    dropout_rate: float = 0.3

    def __post_init__(self):
        if self.n_layers < 1 or self.hidden_dim < 1:
            raise ValueError("n_layers and hidden_dim must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.output_dim % 2:
            raise ValueError("output_dim must be 2N")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_dim] * self.n_layers + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


def encode_instance(inst, n_obs: int | None = None) -> np.ndarray:
    """Flatten goal pose and obstacle rows into ``3 + 3 * n_obs`` values."""
    if n_obs is not None and inst.n_obs != n_obs:
        raise ValueError(f"expected {n_obs} obstacles, got {inst.n_obs}")
    return np.concatenate([inst.x_go, inst.obstacles.reshape(-1)])


def encode_batch(goals, obstacles) -> np.ndarray:
    goals = np.asarray(goals, dtype=float)
    obstacles = np.asarray(obstacles, dtype=float)
    return np.concatenate([goals, obstacles.reshape(obstacles.shape[0], -1)], axis=1)


class PolicyNetwork:
    def __init__(self, config: NetworkConfig, planner: PlannerConfig, seed: int = 0):
        if config.output_dim != 2 * planner.N:
            raise ValueError("output_dim must equal 2 * planner.N")
        self.config = config
        self.planner = planner
        self.training = False
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in config.layer_dims():
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))
        self._cache = None

    @property
    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def _scale(self):
        n = self.planner.N
        lo, hi = np.tile(self.planner.lo, n), np.tile(self.planner.hi, n)
        return lo, 0.5 * (hi - lo)

    def forward(self, x, rng: np.random.Generator | None = None) -> np.ndarray:
        """Map encodings ``(B, input_dim)`` (or one vector) to controls ``(B, N, 2)``.

        Dropout is applied only when ``training`` is set, using ``rng``.
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if single:
            x = x[None]
        if x.shape[-1] != self.config.input_dim:
            raise ValueError(f"encoding width {x.shape[-1]} != input_dim {self.config.input_dim}")
        drop = self.config.dropout_rate if self.training else 0.0
        if drop > 0 and rng is None:
            raise ValueError("training-mode forward needs an rng for dropout")
        acts, masks = [x], []
        a = x
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            a = np.maximum(a @ W + b, 0.0)
            if drop > 0:
                m = (rng.random(a.shape) >= drop) / (1.0 - drop)
                a = a * m
            else:
                m = None
            masks.append(m)
            acts.append(a)
        t = np.tanh(a @ self.weights[-1] + self.biases[-1])
        lo, half = self._scale()
        u = lo + (t + 1.0) * half
        self._cache = (acts, masks, t)
        u = u.reshape(x.shape[0], self.planner.N, 2)
        return u[0] if single else u

    def backward(self, grad_u) -> list[np.ndarray]:
        """Parameter gradients (ordered like :attr:`params`) for the last forward pass."""
        if self._cache is None:
            raise RuntimeError("no recorded forward pass")
        acts, masks, t = self._cache
        g = np.asarray(grad_u, dtype=float).reshape(t.shape)
        _, half = self._scale()
        delta = g * half * (1.0 - t * t)
        grads = [None] * (2 * len(self.weights))
        for layer in range(len(self.weights) - 1, -1, -1):
            a_in = acts[layer]
            grads[2 * layer] = a_in.T @ delta
            grads[2 * layer + 1] = delta.sum(axis=0)
            if layer == 0:
                break
            delta = delta @ self.weights[layer].T
            if masks[layer - 1] is not None:
                delta = delta * masks[layer - 1]
            delta = delta * (acts[layer] > 0)
        return grads

    def copy(self) -> "PolicyNetwork":
        other = PolicyNetwork.__new__(PolicyNetwork)
        other.config, other.planner, other.training = self.config, self.planner, False
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        other._cache = None
        return other

    def save(self, path) -> None:
        save(self, path)


def loss_gradient(net: PolicyNetwork, encoding, downstream_grad) -> list[np.ndarray]:
    """Weight gradients of a scalar loss whose gradient at the network output is ``downstream_grad``.

    Requires that the most recent forward pass was on ``encoding``.
    """
    if net._cache is None:
        raise RuntimeError("no recorded forward pass")
    if not np.array_equal(net._cache[0][0], np.atleast_2d(np.asarray(encoding, dtype=float))):
        raise RuntimeError("recorded forward pass was for a different encoding")
    return net.backward(downstream_grad)


def _header(net: PolicyNetwork) -> bytes:
    meta = {
        "network": dataclasses.asdict(net.config),
        "planner": net.planner.to_dict(),
        "planner_digest": net.planner.digest(),
    }
    return json.dumps(meta, sort_keys=True).encode()


def save(net: PolicyNetwork, path) -> None:
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in net.params)
    head = _header(net)
    blob = MAGIC + struct.pack("<II", FORMAT_VERSION, len(head)) + head + payload
    blob += hashlib.sha256(blob).digest()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load(path, expect_output_dim: int | None = None) -> PolicyNetwork:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8 + 32 or not blob.startswith(MAGIC):
        raise CheckpointError("corrupt checkpoint: bad magic or truncated header")
    body, digest = blob[:-32], blob[-32:]
    version, hlen = struct.unpack_from("<II", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("corrupt checkpoint: checksum mismatch")
    start = len(MAGIC) + 8
    try:
        meta = json.loads(body[start : start + hlen])
        config = NetworkConfig(**meta["network"])
        planner = PlannerConfig.from_dict(meta["planner"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if expect_output_dim is not None and config.output_dim != expect_output_dim:
        raise CheckpointError(f"checkpoint output_dim {config.output_dim} != expected {expect_output_dim}")
    net = PolicyNetwork.__new__(PolicyNetwork)
    net.config, net.planner, net.training, net._cache = config, planner, False, None
    if (len(body) - start - hlen) % 8:
        raise CheckpointError("corrupt checkpoint: payload is not a whole number of float64 values")
    flat = np.frombuffer(body, dtype="<f8", offset=start + hlen)
    net.weights, net.biases = [], []
    pos = 0
    for fan_in, fan_out in config.layer_dims():
        net.weights.append(flat[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out).astype(float))
        pos += fan_in * fan_out
        net.biases.append(flat[pos : pos + fan_out].astype(float))
        pos += fan_out
    if pos != flat.size:
        raise CheckpointError("checkpoint payload size does not match its header")
    return net
