"""Exact Gaussian sampling on finite point sets.

Replicates are generated in fixed-size blocks; block ``b`` draws from its own
stream keyed by ``(seed, stream, b)``.  The values therefore depend only on
the seed, never on how blocks are spread over worker threads.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from .geometry import UT, Region, discretize, log_lattice
from .kernels import Kernel1D, TensorKernel, min_eigenvalue_ok

log = logging.getLogger(__name__)

BLOCK = 4096
MAX_DENSE_ENTRIES = 2**22


class SamplingError(RuntimeError):
    pass


def block_rng(seed: int, block: int, stream: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(stream, block))
    return np.random.Generator(np.random.PCG64(ss))


def map_blocks(n: int, seed: int, fn: Callable, threads: int = 1, block: int = BLOCK, stream: int = 0) -> list:
    """Apply ``fn(rng, size)`` to consecutive replicate blocks, results in block order."""
    if n <= 0:
        raise SamplingError("replicate count must be positive")
    sizes = [min(block, n - b * block) for b in range(math.ceil(n / block))]

    def run(b):
        return fn(block_rng(seed, b, stream), sizes[b])

    if threads <= 1:
        return [run(b) for b in range(len(sizes))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, range(len(sizes))))


@dataclass
class GridGaussian:
    """Centred Gaussian vector on ``points`` with covariance ``cov``."""

    points: np.ndarray
    cov: np.ndarray
    factor_: np.ndarray | None = None
    jitter: float = 0.0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cov = np.asarray(self.cov, dtype=float)
        if self.cov.ndim != 2 or self.cov.shape[0] != self.cov.shape[1]:
            raise SamplingError("covariance must be square")
        if not np.allclose(self.cov, self.cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(self.cov).max())):
            raise SamplingError("covariance must be symmetric")

    @classmethod
    def from_kernel(cls, kernel, points, **provenance) -> "GridGaussian":
        pts = np.asarray(points, dtype=float)
        if isinstance(kernel, TensorKernel):
            pts = pts.reshape(len(pts), kernel.d)
            cov = kernel.gram(pts)
        else:
            pts = pts.ravel()
            cov = kernel.gram(pts)
        prov = {"kernel": kernel.to_dict(), **provenance}
        return cls(pts, cov, provenance=prov)

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    @property
    def L(self) -> np.ndarray:
        if self.factor_ is None:
            factor(self)
        return self.factor_

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        z = rng.standard_normal((size, self.dim))
        return z @ self.L.T


@dataclass
class AR1Gaussian(GridGaussian):
    """Stationary Markov process on a regular 1-D grid.

    When the lag-``k`` correlation on the grid equals ``rho ** k`` the vector
    is an exact AR(1) recursion, drawn in ``O(n)`` per replicate.
    """

    rho: float = 0.0

    @classmethod
    def detect(cls, kernel: Kernel1D, points, rtol: float = 1e-12) -> "AR1Gaussian | None":
        pts = np.asarray(points, dtype=float).ravel()
        if not kernel.stationary or pts.size < 2:
            return None
        step = np.diff(pts)
        if not np.allclose(step, step[0], rtol=1e-12, atol=0):
            return None
        r = kernel.lag(step[0] * np.arange(pts.size))
        if r[0] <= 0:
            return None
        rho = r[1] / r[0]
        if not (0 <= rho < 1) or not np.allclose(r / r[0], rho ** np.arange(pts.size), rtol=rtol, atol=1e-15):
            return None
        G = cls.from_kernel(kernel, pts)
        G.rho = float(rho)
        return G

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        sd = math.sqrt(self.cov[0, 0])
        innov = math.sqrt(1.0 - self.rho**2)
        z = rng.standard_normal((size, self.dim))
        x = np.empty_like(z)
        x[:, 0] = z[:, 0]
        for j in range(1, self.dim):
            x[:, j] = self.rho * x[:, j - 1] + innov * z[:, j]
        return x * sd


def factor(G: GridGaussian, base_jitter: float = 1e-12, escalations: int = 3) -> GridGaussian:
    """Cholesky factor with escalating diagonal jitter.

    On failure ``base_jitter * trace / n`` is added to the diagonal and
    multiplied by 100 up to ``escalations`` times.
    """
    cov = G.cov
    n = cov.shape[0]
    try:
        G.factor_ = linalg.cholesky(cov, lower=True, check_finite=False)
        G.jitter = 0.0
        return G
    except linalg.LinAlgError:
        pass
    jit = base_jitter * np.trace(cov) / n
    for _ in range(escalations + 1):
        try:
            G.factor_ = linalg.cholesky(cov + jit * np.eye(n), lower=True, check_finite=False)
            G.jitter = float(jit)
            log.info("cholesky needed jitter %.3e", jit)
            return G
        except linalg.LinAlgError:
            jit *= 100.0
    raise SamplingError("Cholesky failed after jitter escalation; kernel/lattice combination is invalid")


@dataclass
class SampleBatch:
    values: np.ndarray
    seed: int
    provenance: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def save(self, path) -> None:
        """Little-endian float64 row-major values plus a JSON sidecar."""
        path = Path(path)
        np.ascontiguousarray(self.values, dtype="<f8").tofile(path)
        meta = {"shape": list(self.values.shape), "seed": self.seed, "provenance": self.provenance}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, sort_keys=True))

    @classmethod
    def load(cls, path) -> "SampleBatch":
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        vals = np.fromfile(path, dtype="<f8").reshape(meta["shape"])
        return cls(vals, meta["seed"], meta["provenance"])


def sample(G: GridGaussian, n: int, seed: int, threads: int = 1) -> SampleBatch:
    if G.dim**2 > MAX_DENSE_ENTRIES:
        raise SamplingError(f"dense covariance with {G.dim**2} entries exceeds the cost guard")
    parts = map_blocks(n, seed, G.draw, threads)
    return SampleBatch(np.concatenate(parts), seed, dict(G.provenance))


def _axis_factor(kernel: Kernel1D, grid) -> np.ndarray:
    g = GridGaussian(np.asarray(grid, float), kernel.gram(np.asarray(grid, float)))
    return factor(g).factor_


def sample_tensor(axes: Sequence[tuple], n: int, seed: int, threads: int = 1) -> SampleBatch:
    """Sample a tensor-product field on the product grid of the axes.

    The covariance is ``kron(G_1, ..., G_d)``; values are flattened in C order
    so point ``(i_1, ..., i_d)`` sits at ``ravel_multi_index``.
    """
    factors = [_axis_factor(k, g) for k, g in axes]
    shape = tuple(f.shape[0] for f in factors)
    m = int(np.prod(shape))

    def draw(rng, k):
        x = rng.standard_normal((k,) + shape)
        for ax, L in enumerate(factors):
            x = np.moveaxis(np.tensordot(x, L, axes=([ax + 1], [1])), -1, ax + 1)
        return x.reshape(k, m)

    grids = [np.asarray(g, float) for _, g in axes]
    mesh = np.meshgrid(*grids, indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=1)
    prov = {"kernel": [k.to_dict() for k, _ in axes], "grid_shape": list(shape), "points": pts.tolist()}
    return SampleBatch(np.concatenate(map_blocks(n, seed, draw, threads)), seed, prov)


def circulant_eigenvalues(k: Kernel1D, m: int, step: float, max_doublings: int = 2) -> np.ndarray | None:
    """Nonnegative eigenvalues of a circulant embedding, or ``None``."""
    N = max(m - 1, 1)
    for _ in range(max_doublings + 1):
        lags = step * np.arange(N + 1)
        r = k.lag(lags)
        row = np.concatenate([r, r[-2:0:-1]])
        lam = np.fft.fft(row).real
        if lam.min() >= -1e-10 * lam.max():
            return np.maximum(lam, 0.0)
        N *= 2
    return None


def sample_stationary_1d(k: Kernel1D, m: int, step: float, n: int, seed: int, threads: int = 1) -> SampleBatch:
    """Exact samples of a stationary process at ``0, step, ..., (m-1) step``.

    Uses circulant embedding; falls back to Cholesky when the embedding
    spectrum stays negative after two doublings.
    """
    if not k.stationary:
        raise SamplingError("circulant embedding needs a stationary kernel")
    lam = circulant_eigenvalues(k, m, step)
    grid = step * np.arange(m)
    prov = {"kernel": k.to_dict(), "m": m, "step": step}
    if lam is None:
        log.info("circulant embedding failed; using Cholesky")
        G = GridGaussian.from_kernel(k, grid)
        batch = sample(G, n, seed, threads)
        batch.provenance.update(prov, method="cholesky")
        return batch
    M = lam.size
    scale = np.sqrt(lam / M)

    def draw(rng, size):
        half = math.ceil(size / 2)
        z = rng.standard_normal((half, M)) + 1j * rng.standard_normal((half, M))
        w = np.fft.fft(scale * z, axis=1)[:, :m]
        return np.concatenate([w.real, w.imag])[:size]

    vals = np.concatenate(map_blocks(n, seed, draw, threads))
    return SampleBatch(vals, seed, {**prov, "method": "circulant"})


def sup_lattice(K: TensorKernel, G: Region, delta: float, depth: float = 3.0) -> np.ndarray:
    """Lattice used for suprema of a self-similar field over ``G``.

    ``U_T`` regions use the log-time lattice; other regions the inner
    cell-centre lattice, dropping points closer than ``delta`` to an axis.
    """
    if isinstance(G, UT):
        return log_lattice(G.T, K.h_vec, delta, depth, "over" if G.complement else "under")
    return discretize(G, delta, "inner", min_coord=None if K.stationary else delta).points


def estimate_sup_expectation(
    K: TensorKernel, G: Region, delta: float, n: int, seed: int, threads: int = 1, depth: float = 3.0
) -> tuple[float, float]:
    """Monte Carlo mean of the lattice maximum and its standard error."""
    pts = sup_lattice(K, G, delta, depth)
    GG = GridGaussian.from_kernel(K, pts)
    if GG.dim**2 > MAX_DENSE_ENTRIES:
        raise SamplingError("lattice too large for dense sampling")
    L = GG.L
    parts = map_blocks(n, seed, lambda rng, k: (rng.standard_normal((k, GG.dim)) @ L.T).max(axis=1), threads)
    mx = np.concatenate(parts)
    return float(mx.mean()), float(mx.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
