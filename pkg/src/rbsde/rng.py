"""Counter-based Brownian increments.

Every increment ``dw[p, i, j]`` is a fixed function of
``(seed, p, i, j, n_steps)``: paths are grouped in blocks of ``BLOCK_SIZE``
and each (block, noise component) pair owns a Philox stream keyed by the
master seed. Extending an ensemble or changing the number of workers never
changes the increments already drawn for a path.
"""
from __future__ import annotations

import numpy as np

BLOCK_SIZE = 4096
_MASK64 = (1 << 64) - 1


def _stream(seed: int, block: int, component: int) -> np.random.Generator:
    key = np.array([seed & _MASK64, (block << 20) | component], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def block_bounds(n_paths: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + BLOCK_SIZE, n_paths)) for lo in range(0, n_paths, BLOCK_SIZE)]


def block_increments(seed: int, block: int, n_rows: int, n_steps: int,
                     noise_dim: int, dt: float) -> np.ndarray:
    """Increments for the first ``n_rows`` paths of ``block``: (n_rows, n_steps, noise_dim)."""
    out = np.empty((n_rows, n_steps, noise_dim))
    sq = np.sqrt(dt)
    for j in range(noise_dim):
        out[:, :, j] = _stream(seed, block, j).standard_normal((n_rows, n_steps)) * sq
    return out


def brownian_increments(seed: int, n_paths: int, n_steps: int, noise_dim: int,
                        dt: float) -> np.ndarray:
    """All increments of an ensemble, shape (n_paths, n_steps, noise_dim)."""
    parts = [
        block_increments(seed, b, hi - lo, n_steps, noise_dim, dt)
        for b, (lo, hi) in enumerate(block_bounds(n_paths))
    ]
    return np.concatenate(parts, axis=0)


def derive_seed(seed: int, *tags: int) -> int:
    """Child seed for an independent sub-experiment."""
    ss = np.random.SeedSequence([seed & _MASK64, *tags])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
