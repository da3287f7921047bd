"""Counter-based random streams.

Every random quantity is drawn from a Philox stream keyed by
``(seed, kind, label, index)``, so results never depend on the order in which
labels, particles or repetitions are scheduled.
"""

from __future__ import annotations

import numpy as np

# stream kinds
NOISE = 1
INITIAL = 2
REPRESENTATIVE = 3
DIRECTION = 4
BERNOULLI = 5
PROBE = 6
CANONICAL = 7

_MASK64 = (1 << 64) - 1


def _key(seed: int, kind: int, label: int, index: int) -> np.ndarray:
    if not (0 <= label < (1 << 24) and 0 <= index < (1 << 32) and 0 <= kind < 256):
        raise ValueError("stream coordinates out of range")
    hi = int(seed) & _MASK64
    lo = (kind << 56) | (label << 32) | index
    return np.array([hi, lo], dtype=np.uint64)


def stream(seed: int, kind: int, label: int = 0, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=_key(seed, kind, label, index)))


def normals(seed: int, kind: int, label: int, indices, shape) -> np.ndarray:
    """Standard normals of ``shape`` for each index, shape ``(len(indices), *shape)``."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.empty((len(indices), *shape))
    for row, i in enumerate(indices):
        out[row] = stream(seed, kind, label, int(i)).standard_normal(shape)
    return out


def uniforms(seed: int, kind: int, label: int, indices, shape) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    out = np.empty((len(indices), *shape))
    for row, i in enumerate(indices):
        out[row] = stream(seed, kind, label, int(i)).random(shape)
    return out


def brownian_increments(seed: int, label: int, indices, n_steps: int, dim: int, dt: float,
                        kind: int = NOISE) -> np.ndarray:
    """Increments ``dW`` of shape ``(len(indices), n_steps, dim)`` with variance ``dt``."""
    return np.sqrt(dt) * normals(seed, kind, label, indices, (n_steps, dim))
