"""Conditional expectations and discrete martingale-representation integrands.

Two backends share one interface:

* :class:`TreeBackend` averages over the atoms of the binary-tree filtration,
  which is exact.
* :class:`RegressionBackend` fits a ridge regression of the target on
  monomials of the reference state at the conditioning time (least-squares
  Monte Carlo).

Both act on arrays whose first axis is the path index; trailing axes are
treated entrywise.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np
import scipy.linalg

from .errors import IllConditioned
from .timebase import NoiseEnsemble


class TreeBackend:
    """Exact conditional expectations on the Rademacher tree."""

    exact = True

    def __init__(self, noise: NoiseEnsemble):
        if noise.mode != "tree":
            raise ValueError("tree backend needs a tree-mode ensemble")
        self.noise = noise
        self.N = noise.grid.N
        self.dt = noise.grid.dt

    def cond_exp(self, values: np.ndarray, r: int) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        M = self.noise.M
        if values.shape[0] == 1:
            return np.broadcast_to(values, (M,) + values.shape[1:]).copy()
        atoms = 2**r
        blocks = values.reshape((atoms, M // atoms) + values.shape[1:])
        mean = blocks.mean(axis=1, keepdims=True)
        return np.broadcast_to(mean, blocks.shape).reshape(values.shape).copy()

    def integrand(self, values: np.ndarray, k: int) -> np.ndarray:
        """``E_k[values * dW_{k+1}] / dt``."""
        values = np.asarray(values, dtype=float)
        if values.shape[0] == 1:
            return np.zeros((self.noise.M,) + values.shape[1:])
        dw = self.noise.dW[:, k].reshape((-1,) + (1,) * (values.ndim - 1))
        return self.cond_exp(values * dw, k) / self.dt


@dataclass
class RegressionConfig:
    degree: int = 2
    ridge: float = 1e-8

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("regression degree must be >= 0")
        if self.ridge < 0:
            raise ValueError("ridge parameter must be >= 0")


class RegressionBackend:
    """Least-squares projection on polynomials of the reference state.

    The conditioning variable at level ``r`` is ``X̄(t_r)``. Non-constant
    basis columns are standardized; the ridge term is
    ``ridge * trace(G)`` with ``G`` the normalized Gram matrix.
    """

    exact = False

    def __init__(self, noise: NoiseEnsemble, state: np.ndarray, config: RegressionConfig | None = None):
        self.noise = noise
        self.N = noise.grid.N
        self.dt = noise.grid.dt
        self.config = config or RegressionConfig()
        self.state = np.asarray(state, dtype=float)
        if self.state.shape[:2] != (noise.M, self.N + 1):
            raise ValueError("reference state must have shape (M, N+1, n)")
        # backward sweeps touch levels k and k+1 repeatedly; a few entries suffice
        self._cache: OrderedDict[int, tuple[np.ndarray, tuple]] = OrderedDict()
        self.cache_size = 4

    def basis(self, r: int) -> np.ndarray:
        x = self.state[:, r, :]
        M, n = x.shape
        cols = [np.ones(M)]
        for deg in range(1, self.config.degree + 1):
            for combo in combinations_with_replacement(range(n), deg):
                cols.append(np.prod(x[:, list(combo)], axis=1))
        B = np.stack(cols, axis=1)
        sd = B[:, 1:].std(axis=0)
        scale = np.max(np.abs(B[:, 1:]), axis=0) if B.shape[1] > 1 else np.ones(0)
        keep = sd > 1e-12 * np.maximum(scale, 1.0)
        Z = (B[:, 1:][:, keep] - B[:, 1:][:, keep].mean(axis=0)) / sd[keep]
        return np.concatenate([np.ones((M, 1)), Z], axis=1)

    def _factor(self, r: int):
        if r not in self._cache:
            B = self.basis(r)
            G = B.T @ B / B.shape[0]
            lam = self.config.ridge * np.trace(G)
            try:
                cho = scipy.linalg.cho_factor(G + lam * np.eye(G.shape[0]))
            except np.linalg.LinAlgError as exc:
                raise IllConditioned(f"regression Gram matrix at level {r} is singular") from exc
            self._cache[r] = (B, cho)
            if len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        else:
            self._cache.move_to_end(r)
        return self._cache[r]

    def cond_exp(self, values: np.ndarray, r: int) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        M = self.noise.M
        if values.shape[0] == 1:
            return np.broadcast_to(values, (M,) + values.shape[1:]).copy()
        B, cho = self._factor(r)
        flat = values.reshape(M, -1)
        coef = scipy.linalg.cho_solve(cho, B.T @ flat / M)
        return (B @ coef).reshape(values.shape)

    def integrand(self, values: np.ndarray, k: int) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape[0] == 1:
            return np.zeros((self.noise.M,) + values.shape[1:])
        dw = self.noise.dW[:, k].reshape((-1,) + (1,) * (values.ndim - 1))
        inner = self.cond_exp(values, k + 1) if k + 1 < self.N else values
        return self.cond_exp(inner * dw, k) / self.dt


@dataclass
class MartingaleRep:
    """Projections ``Pi[r] = E_r[theta]`` and integrands ``Lam[k]``.

    ``Pi`` has ``s+1`` levels (``Pi[s]`` is the input itself) and ``Lam`` has
    ``s`` levels, so that ``theta = Pi[r] + sum_{k>=r} Lam[k] dW_{k+1}`` on the
    tree.
    """

    s: int
    Pi: np.ndarray = field(repr=False)
    Lam: np.ndarray = field(repr=False)

    def reconstruction_residual(self, noise: NoiseEnsemble, r: int = 0) -> float:
        theta = self.Pi[self.s]
        acc = self.Pi[r].copy()
        for k in range(r, self.s):
            dw = noise.dW[:, k].reshape((-1,) + (1,) * (theta.ndim - 1))
            acc += self.Lam[k] * dw
        return float(np.max(np.abs(acc - theta), initial=0.0))


def project(values: np.ndarray, s: int, backend) -> MartingaleRep:
    """Martingale representation of an ``F_{t_s}``-measurable array."""
    values = np.asarray(values, dtype=float)
    M = backend.noise.M
    values = np.broadcast_to(values, (M,) + values.shape[1:]) if values.shape[0] == 1 else values
    Pi = np.empty((s + 1,) + values.shape)
    Pi[s] = values
    for r in range(s - 1, -1, -1):
        if backend.exact:
            Pi[r] = backend.cond_exp(Pi[r + 1], r)
        else:
            Pi[r] = backend.cond_exp(values, r)
    Lam = np.empty((s,) + values.shape)
    for k in range(s):
        dw = backend.noise.dW[:, k].reshape((-1,) + (1,) * (values.ndim - 1))
        Lam[k] = backend.cond_exp(Pi[k + 1] * dw, k) / backend.dt
    return MartingaleRep(s, Pi, Lam)


def make_backend(noise: NoiseEnsemble, state: np.ndarray | None = None, config: RegressionConfig | None = None):
    if noise.mode == "tree":
        return TreeBackend(noise)
    if state is None:
        raise ValueError("regression backend needs the reference state")
    return RegressionBackend(noise, state, config)
