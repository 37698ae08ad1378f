"""Shared dense-network machinery: init, ReLU stack, backprop, SGD, persistence.

All three networks in this package (per-view multi-task, fusion, triage)
are small fully-connected stacks built on these helpers. Forward and
backward passes are written out by hand in numpy, so every gradient can
be checked against central finite differences.

Seed handling: independent RNG streams are derived from a base seed with
`mix_seed`, a splitmix64 finalizer. Derived streams are keyed on stable
integers (patient index, grid index, epoch), never on thread identity,
so results do not depend on scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "mix_seed",
    "glorot_uniform",
    "relu",
    "softmax_rows",
    "sigmoid",
    "DenseStack",
    "SgdMomentum",
]

_MASK64 = (1 << 64) - 1


def mix_seed(base: int, *keys: int) -> int:
    """Derive an independent 64-bit seed from a base seed and integer keys.

    splitmix64: each key advances the state by the golden-ratio increment
    and applies the finalizer. Same (base, keys) always gives the same
    seed; distinct key tuples give streams with no practical overlap.
    """
    z = base & _MASK64
    for k in keys:
        z = (z + (int(k) + 1) * 0x9E3779B97F4A7C15) & _MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        z = z ^ (z >> 31)
    return z


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class DenseStack:
    """ReLU hidden stack with inverted dropout. Heads live in the callers."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout: float = 0.0

    @classmethod
    def init(cls, rng: np.random.Generator, sizes: list[int], dropout: float = 0.0) -> "DenseStack":
        """sizes = [input, hidden1, ..., hiddenK]; needs at least one hidden layer."""
        if len(sizes) < 2:
            raise ValueError("dense stack needs at least one hidden layer")
        if any(s <= 0 for s in sizes):
            raise ValueError("layer sizes must be positive")
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            ws.append(glorot_uniform(rng, fan_in, fan_out))
            bs.append(np.zeros(fan_out))
        return cls(weights=ws, biases=bs, dropout=dropout)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def forward(self, x: np.ndarray, train: bool = False, rng: np.random.Generator | None = None):
        """Returns (top activation, cache). cache feeds backward()."""
        if x.ndim != 2 or x.shape[1] != self.weights[0].shape[0]:
            raise ValueError(
                f"input dimension mismatch: got {x.shape}, expected (*, {self.weights[0].shape[0]})"
            )
        acts = [x]
        masks: list[np.ndarray | None] = []
        h = x
        for w, b in zip(self.weights, self.biases):
            z = h @ w + b
            h = relu(z)
            if train and self.dropout > 0.0:
                if rng is None:
                    raise ValueError("dropout training requires an rng")
                mask = (rng.uniform(size=h.shape) >= self.dropout) / (1.0 - self.dropout)
                h = h * mask
                masks.append(mask)
            else:
                masks.append(None)
            acts.append(h)
        return h, (acts, masks)

    def backward(self, cache, grad_top: np.ndarray):
        """Backprop grad at the top activation; returns (weight grads, bias grads, grad wrt input)."""
        acts, masks = cache
        gw = [np.zeros_like(w) for w in self.weights]
        gb = [np.zeros_like(b) for b in self.biases]
        grad = grad_top
        for i in range(len(self.weights) - 1, -1, -1):
            h = acts[i + 1]
            if masks[i] is not None:
                grad = grad * masks[i]
                # Pre-dropout activation sign equals post-dropout sign where mask kept it.
                dz = grad * (h != 0.0)
            else:
                dz = grad * (h > 0.0)
            gw[i] = acts[i].T @ dz
            gb[i] = dz.sum(axis=0)
            grad = dz @ self.weights[i].T
        return gw, gb, grad

    def params(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def copy(self) -> "DenseStack":
        return DenseStack(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            dropout=self.dropout,
        )

    def to_jsonable(self) -> dict:
        return {
            "sizes": self.sizes,
            "dropout": self.dropout,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "DenseStack":
        ws = [np.asarray(w, dtype=float) for w in d["weights"]]
        bs = [np.asarray(b, dtype=float) for b in d["biases"]]
        sizes = [ws[0].shape[0]] + [w.shape[1] for w in ws]
        if sizes != list(d["sizes"]):
            raise ValueError("stored layer sizes do not match weight shapes")
        for w, b in zip(ws, bs):
            if w.shape[1] != b.shape[0]:
                raise ValueError("bias shape does not match weight shape")
        return cls(weights=ws, biases=bs, dropout=float(d["dropout"]))


@dataclass
class SgdMomentum:
    """Plain SGD with momentum 0.9; velocity per parameter array."""

    momentum: float = 0.9
    velocities: dict[int, np.ndarray] = field(default_factory=dict)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        for i, (p, g) in enumerate(zip(params, grads)):
            v = self.velocities.get(i)
            if v is None:
                v = np.zeros_like(p)
            v = self.momentum * v - lr * g
            self.velocities[i] = v
            p += v
