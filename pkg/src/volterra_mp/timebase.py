"""Uniform time grids, seeded Brownian increments and the binary-tree filtration."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

Mode = Literal["gaussian", "tree"]

# paths per independent random substream
_BLOCK = 256
# largest tree depth we are willing to enumerate
MAX_TREE_STEPS = 20


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt


def make_grid(T: float, N: int) -> TimeGrid:
    if not np.isfinite(T) or T <= 0:
        raise ValueError(f"horizon T must be positive, got {T}")
    if int(N) != N or N < 1:
        raise ValueError(f"steps N must be a positive integer, got {N}")
    return TimeGrid(float(T), int(N))


@dataclass(frozen=True)
class NoiseEnsemble:
    """Brownian increments ``dW[i, k] = W(t_{k+1}) - W(t_k)`` on path ``i``."""

    grid: TimeGrid
    dW: np.ndarray = field(repr=False)
    mode: Mode
    seed: int

    @property
    def M(self) -> int:
        return self.dW.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.M, 1.0 / self.M)

    @property
    def W(self) -> np.ndarray:
        """Brownian paths on the nodes, shape (M, N+1)."""
        out = np.zeros((self.M, self.grid.N + 1))
        np.cumsum(self.dW, axis=1, out=out[:, 1:])
        return out


def _tree_increments(grid: TimeGrid) -> np.ndarray:
    N = grid.N
    idx = np.arange(2**N)[:, None]
    # bit N-1-k of the path index is the sign of step k; 0 means up
    bits = (idx >> (N - 1 - np.arange(N))[None, :]) & 1
    return np.sqrt(grid.dt) * (1.0 - 2.0 * bits)


def _gaussian_increments(grid: TimeGrid, M: int, seed: int) -> np.ndarray:
    out = np.empty((M, grid.N))
    scale = np.sqrt(grid.dt)
    for b, start in enumerate(range(0, M, _BLOCK)):
        stop = min(start + _BLOCK, M)
        ss = np.random.SeedSequence(entropy=seed, spawn_key=(b,))
        rng = np.random.Generator(np.random.Philox(ss))
        block = rng.standard_normal((_BLOCK, grid.N))
        out[start:stop] = scale * block[: stop - start]
    return out


def sample_noise(grid: TimeGrid, M: int, mode: Mode = "gaussian", seed: int = 0) -> NoiseEnsemble:
    """Draw an ensemble of ``M`` increment paths.

    Gaussian paths come from per-block Philox substreams keyed by
    ``(seed, block)``, so the result does not depend on generation order.
    Tree mode enumerates all ``2**N`` sign sequences in lexicographic order
    (``+`` before ``-``), so every atom of the step-``k`` filtration is a
    contiguous run of ``2**(N-k)`` paths.
    """
    if int(M) != M or M < 1:
        raise ValueError(f"paths M must be a positive integer, got {M}")
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    if mode == "tree":
        if grid.N > MAX_TREE_STEPS:
            raise ValueError(f"tree mode needs paths = 2**N; N={grid.N} is too deep to enumerate")
        if M != 2**grid.N:
            raise ValueError(f"tree mode needs paths M = 2**N = {2**grid.N}, got {M}")
        dW = _tree_increments(grid)
    elif mode == "gaussian":
        dW = _gaussian_increments(grid, int(M), seed)
    else:
        raise ValueError(f"unknown noise mode {mode!r}")
    dW.setflags(write=False)
    return NoiseEnsemble(grid, dW, mode, seed)


def filtration_atoms(noise: NoiseEnsemble, k: int) -> list[np.ndarray]:
    """Partition of path indices into groups sharing increments 1..k."""
    N = noise.grid.N
    if not 0 <= k <= N:
        raise ValueError(f"time index {k} outside 0..{N}")
    if noise.mode == "tree":
        size = 2 ** (N - k)
        return [np.arange(a, a + size) for a in range(0, noise.M, size)]
    if k == 0:
        return [np.arange(noise.M)]
    _, inverse = np.unique(noise.dW[:, :k], axis=0, return_inverse=True)
    inverse = inverse.ravel()
    order = np.argsort(inverse, kind="stable")
    splits = np.flatnonzero(np.diff(inverse[order])) + 1
    return np.split(order, splits)
