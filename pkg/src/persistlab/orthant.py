"""Persistence (orthant) probabilities ``P(X <= c on a lattice)``.

Estimators
----------
crude_mc
    Fraction of exact samples below the level.
sov_qmc
    Sequential conditioning (Genz's separation of variables) with
    probability-ordered variable priority, integrated with a randomly shifted
    Richtmyer lattice rule and the baker's transform.
bridge_mc
    Crude MC for one-dimensional, locally Brownian processes, with each
    replicate weighted by the Brownian-bridge probability of not crossing
    the level between lattice points.  Targets the continuous-time event.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import special
from scipy.special import logsumexp

from .geometry import Region, discretize, log_lattice
from .kernels import FBm, Kernel1D, TensorKernel, pursuit_kernel
from .sampler import AR1Gaussian, GridGaussian, SamplingError, block_rng, map_blocks

SQRT2 = math.sqrt(2.0)
MAX_SOV_DIM = 4096
DEGENERATE_VAR = 1e-14


class EstimationError(RuntimeError):
    pass


@dataclass
class ProbEstimate:
    p_hat: float
    log_p: float
    stderr_log: float
    method: str
    n: int
    seed: int | None = None
    stderr: float = float("nan")
    censored: bool = False
    provenance: dict = field(default_factory=dict)

    def record(self) -> dict:
        """JSON-lines record."""
        prov = self.provenance
        return {
            "p": self.p_hat,
            "log_p": self.log_p,
            "se_log": self.stderr_log,
            "method": self.method,
            "n": self.n,
            "seed": self.seed,
            "region": prov.get("region"),
            "T": prov.get("T"),
            "delta": prov.get("delta"),
            "censored": self.censored,
        }

    def to_json(self) -> str:
        return json.dumps(self.record(), sort_keys=True)

    def within(self, value: float, k: float = 3.0, slack: float = 0.0) -> bool:
        return abs(self.p_hat - value) <= k * self.stderr + slack


def _level_vector(c, dim: int) -> np.ndarray:
    b = np.asarray(c, dtype=float)
    if b.ndim == 0:
        return np.full(dim, float(b))
    if b.shape != (dim,):
        raise EstimationError(f"level must be a scalar or have shape ({dim},)")
    return b


def _from_counts(hits: int, n: int, method: str, seed, provenance) -> ProbEstimate:
    if hits == 0:
        upper = 3.0 / n
        return ProbEstimate(0.0, math.log(upper), 1.0, method, n, seed, upper, True, provenance)
    p = hits / n
    se = math.sqrt(p * (1 - p) / n)
    return ProbEstimate(p, math.log(p), se / p, method, n, seed, se, False, provenance)


def crude_mc(G: GridGaussian, c, n: int, seed: int, threads: int = 1) -> ProbEstimate:
    """Fraction of replicates with ``max(X - c) <= 0``; zero counts report the 3/n bound."""
    b = _level_vector(c, G.dim)

    def count(rng, k):
        x = G.draw(rng, k)
        return int(np.count_nonzero(np.all(x <= b, axis=1)))

    hits = sum(map_blocks(n, seed, count, threads))
    return _from_counts(hits, n, "crude_mc", seed, dict(G.provenance))


def bridge_mc(
    G: GridGaussian, c, n: int, seed: int, step_var: float, end_var: float = 0.0, threads: int = 1
) -> ProbEstimate:
    """Crude MC with Brownian-bridge continuity weights on a 1-D time-ordered grid.

    ``step_var`` is the variance of the increment over one lattice step.  A
    replicate below ``c`` at all lattice points is weighted by
    ``prod_k (1 - exp(-2 (c - x_k)(c - x_{k+1}) / step_var))``.  With
    ``end_var > 0`` the free segments beyond the first and last points (of
    increment variance ``end_var``) add the reflection factor
    ``erf((c - x) / sqrt(2 end_var))`` at each end.
    """
    b = _level_vector(c, G.dim)

    def weights(rng, k):
        x = G.draw(rng, k)
        gap = b - x
        ok = np.all(gap >= 0, axis=1)
        g = gap[ok]
        w = np.zeros(k)
        logw = np.sum(np.log1p(-np.exp(-2.0 * g[:, 1:] * g[:, :-1] / step_var)), axis=1)
        if end_var > 0:
            logw += np.log(special.erf(g[:, 0] / math.sqrt(2 * end_var)))
            logw += np.log(special.erf(g[:, -1] / math.sqrt(2 * end_var)))
        w[ok] = np.exp(logw)
        return w.sum(), np.dot(w, w)

    parts = map_blocks(n, seed, weights, threads)
    s1 = math.fsum(p[0] for p in parts)
    s2 = math.fsum(p[1] for p in parts)
    p = s1 / n
    se = math.sqrt(max(s2 / n - p * p, 0.0) / max(n - 1, 1))
    if p <= 0:
        return ProbEstimate(0.0, math.log(3.0 / n), 1.0, "bridge_mc", n, seed, 3.0 / n, True, dict(G.provenance))
    return ProbEstimate(p, math.log(p), se / p, "bridge_mc", n, seed, se, False, dict(G.provenance))


# --------------------------------------------------------------------------
# sequential conditioning


@dataclass
class SOVPlan:
    """Reordered Cholesky factor of the correlation matrix with scaled limits."""

    L: np.ndarray
    b: np.ndarray
    perm: np.ndarray
    degenerate: np.ndarray
    infeasible: bool = False


def _truncated_mean(beta: float) -> float:
    """``E[Z | Z <= beta]`` for a standard normal."""
    if beta == np.inf:
        return 0.0
    return -math.exp(-0.5 * beta * beta - 0.5 * math.log(2 * math.pi) - float(special.log_ndtr(beta)))


def sov_plan(cov: np.ndarray, b: np.ndarray) -> SOVPlan:
    """Cholesky factorisation with Genz-Bretz variable priority.

    At each step the remaining variable with the smallest conditional
    probability of staying below its limit (given the truncated means of the
    variables already placed) is moved next.
    """
    cov = np.asarray(cov, float)
    sd = np.sqrt(np.diag(cov))
    zero = sd == 0
    if np.any(zero & (b < 0)):
        d = len(b)
        return SOVPlan(np.zeros((d, d)), b, np.arange(d), np.ones(d, bool), infeasible=True)
    keep = ~zero
    C = cov[np.ix_(keep, keep)] / np.outer(sd[keep], sd[keep])
    bb = b[keep] / sd[keep]
    d = C.shape[0]
    perm = np.flatnonzero(keep)
    L = np.zeros((d, d))
    vs = np.diag(C).copy()
    mu = np.zeros(d)
    degenerate = np.zeros(d, bool)
    for i in range(d):
        v = np.maximum(vs[i:], DEGENERATE_VAR)
        score = special.log_ndtr((bb[i:] - mu[i:]) / np.sqrt(v))
        j = i + int(np.argmin(score))
        if j != i:
            for arr in (bb, mu, vs, perm):
                arr[[i, j]] = arr[[j, i]]
            C[[i, j], :] = C[[j, i], :]
            C[:, [i, j]] = C[:, [j, i]]
            L[[i, j], :i] = L[[j, i], :i]
        if vs[i] < DEGENERATE_VAR:
            degenerate[i] = True
            continue
        lii = math.sqrt(vs[i])
        L[i, i] = lii
        if i + 1 < d:
            col = (C[i + 1 :, i] - L[i + 1 :, :i] @ L[i, :i]) / lii
            L[i + 1 :, i] = col
            vs[i + 1 :] -= col * col
            mu[i + 1 :] += col * _truncated_mean((bb[i] - mu[i]) / lii)
    return SOVPlan(L, bb, perm, degenerate)


def _primes(k: int) -> np.ndarray:
    n = max(16, int(k * (math.log(k + 2) + math.log(math.log(k + 3))) + 10))
    sieve = np.ones(n + 1, bool)
    sieve[:2] = False
    for p in range(2, int(n**0.5) + 1):
        if sieve[p]:
            sieve[p * p :: p] = False
    return np.flatnonzero(sieve)[:k]


def richtmyer_alpha(dim: int) -> np.ndarray:
    return np.sqrt(_primes(dim).astype(float)) % 1.0


def _sov_logf(plan: SOVPlan, w: np.ndarray, block: int = 64) -> np.ndarray:
    """Log integrand ``sum_i log e_i`` at the points ``w`` (columns in [0, 1)^d)."""
    L, b, det = plan.L, plan.b, plan.degenerate
    d, n = w.shape[0], w.shape[1]
    Y = np.zeros((d, n))
    logf = np.zeros(n)
    for s in range(0, d, block):
        e = min(s + block, d)
        M = L[s:e, :s] @ Y[:s] if s > 0 else np.zeros((e - s, n))
        for i in range(s, e):
            mu = M[i - s]
            if i > s:
                mu = mu + L[i, s:i] @ Y[s:i]
            if det[i]:
                logf = np.where(mu <= b[i], logf, -np.inf)
                continue
            beta = (b[i] - mu) / L[i, i]
            p = special.ndtr(beta)
            tiny = p < 1e-290
            if np.any(tiny):
                lp = np.log(np.where(tiny, 1.0, p))
                lp[tiny] = special.log_ndtr(beta[tiny])
            else:
                lp = np.log(p)
            logf += lp
            if i < d - 1:
                u = np.clip(w[i] * p, 1e-300, 1.0 - 1e-16)
                Y[i] = special.ndtri(u)
    return logf


def sov_qmc(
    G: GridGaussian,
    c,
    n_points: int = 2**14,
    n_shifts: int = 8,
    seed: int = 0,
    chunk: int = 4096,
) -> ProbEstimate:
    """Randomised-QMC estimate of ``P(X <= c)`` by sequential conditioning.

    The estimate is the mean over ``n_shifts`` independently shifted lattice
    rules; its standard error is the spread over shifts.
    """
    if G.dim > MAX_SOV_DIM:
        raise EstimationError(f"dimension {G.dim} exceeds {MAX_SOV_DIM}")
    if n_shifts < 2:
        raise EstimationError("need at least two shifts for an error estimate")
    b = _level_vector(c, G.dim)
    plan = sov_plan(G.cov, b)
    prov = dict(G.provenance)
    n_total = n_points * n_shifts
    if plan.infeasible:
        return ProbEstimate(0.0, -math.inf, 0.0, "sov_qmc", n_total, seed, 0.0, False, prov)
    d = plan.L.shape[0]
    alpha = richtmyer_alpha(max(d, 1))
    rng = block_rng(seed, 0, stream=7)
    shifts = rng.random((n_shifts, d))
    log_ps = np.empty(n_shifts)
    for r in range(n_shifts):
        parts = []
        for k0 in range(0, n_points, chunk):
            k = np.arange(k0 + 1, min(k0 + chunk, n_points) + 1, dtype=float)
            x = alpha[:, None] * k[None, :]
            x += shifts[r][:, None]
            x -= np.floor(x)
            w = np.abs(2.0 * x - 1.0, out=x)
            parts.append(_sov_logf(plan, w))
        logf = np.concatenate(parts)
        log_ps[r] = logsumexp(logf) - math.log(n_points)
    if np.all(np.isneginf(log_ps)):
        return ProbEstimate(0.0, -math.inf, 0.0, "sov_qmc", n_total, seed, 0.0, False, prov)
    log_p = float(logsumexp(log_ps) - math.log(n_shifts))
    rel = np.exp(log_ps - log_p)
    se_rel = float(np.std(rel, ddof=1) / math.sqrt(n_shifts))
    p = math.exp(log_p)
    prov["log_p_shifts"] = log_ps.tolist()
    return ProbEstimate(p, log_p, se_rel, "sov_qmc", n_total, seed, se_rel * p, False, prov)


# --------------------------------------------------------------------------
# exact oracles


def exact_brownian_sup(T: float, a: float) -> float:
    """``P(sup_{[0,T]} W <= a) = 2 Phi(a / sqrt(T)) - 1`` by the reflection principle."""
    if a <= 0:
        raise ValueError("level must be positive")
    if T <= 0 or math.isinf(a):
        return 1.0
    return math.erf(a / math.sqrt(2.0 * T))


def exact_ou_negative(T: float) -> float:
    """``P(Y(t) <= 0, t in [0, T])`` for ``Y(t) = W(e^t) e^{-t/2}``.

    Equals half the probability that ``W`` has no zero in ``[1, e^T]``, which
    by the arcsine law is ``(2/pi) arcsin(e^{-T/2})``.
    """
    if T < 0:
        raise ValueError("T must be nonnegative")
    return math.asin(math.exp(-T / 2.0)) / math.pi


def exact_estimate(p: float, provenance: dict | None = None) -> ProbEstimate:
    lp = math.log(p) if p > 0 else -math.inf
    return ProbEstimate(p, lp, 0.0, "exact_oracle", 0, None, 0.0, False, dict(provenance or {}))


# --------------------------------------------------------------------------
# persistence on regions


def _region_name(G: Region) -> str:
    return f"{type(G).__name__}{getattr(G, 'a', getattr(G, 'h', ''))}"


def region_lattice(
    K: TensorKernel | Kernel1D, G: Region, delta: float, lattice: str = "cell", depth: float = 2.5, T: float | None = None
) -> np.ndarray:
    """Points at which the persistence event is checked.

    ``cell``: inner cell-centre lattice of ``G`` (axis slab removed for
    non-stationary kernels).  ``log``: for self-similar fields on ``[0, T]^d``,
    the step-``delta`` lattice in log time (see ``geometry.log_lattice``).
    """
    K = K if isinstance(K, TensorKernel) else TensorKernel((K,))
    if lattice == "cell":
        return discretize(G, delta, "inner", min_coord=None if K.stationary else delta).points
    if lattice == "log":
        if T is None:
            lo, hi = G.bbox()
            T = float(hi.max())
        return log_lattice(T, K.h_vec, delta, depth, "box")
    raise EstimationError(f"unknown lattice {lattice!r}")


def _local_step_var(k: Kernel1D, step: float) -> float:
    if not k.stationary:
        raise EstimationError("bridge correction needs a stationary kernel")
    v1 = 2.0 * (k.lag(0.0) - k.lag(step))
    v2 = 2.0 * (k.lag(0.0) - k.lag(2 * step))
    if not (1.8 < v2 / v1 < 2.2):
        raise EstimationError("bridge correction needs a locally Brownian kernel")
    return float(v1)


def persistence_prob(
    K: TensorKernel | Kernel1D,
    G: Region,
    delta: float,
    c: float = 0.0,
    method: str = "sov_qmc",
    n: int = 100_000,
    seed: int = 0,
    n_points: int = 2**14,
    n_shifts: int = 8,
    threads: int = 1,
    lattice: str = "cell",
    depth: float = 2.5,
    T: float | None = None,
) -> ProbEstimate:
    """Estimate ``P(X <= c)`` on the lattice discretisation of ``G``."""
    pts = region_lattice(K, G, delta, lattice, depth, T)
    if isinstance(K, Kernel1D):
        pts = pts[:, 0]
    GG = None
    if isinstance(K, Kernel1D) and method != "sov_qmc":
        GG = AR1Gaussian.detect(K, pts)
    if GG is None:
        GG = GridGaussian.from_kernel(K, pts)
    prov = {"region": _region_name(G), "T": T, "delta": delta, "lattice": lattice, "points": len(pts)}
    GG.provenance.update(prov)
    if method == "crude_mc":
        return crude_mc(GG, c, n, seed, threads)
    if method == "sov_qmc":
        return sov_qmc(GG, c, n_points, n_shifts, seed)
    if method == "bridge_mc":
        k1 = K if isinstance(K, Kernel1D) else K.components[0]
        if isinstance(K, TensorKernel) and K.d != 1:
            raise EstimationError("bridge correction is one-dimensional")
        order = np.argsort(pts.ravel())
        if not np.all(order == np.arange(len(order))):
            raise EstimationError("bridge correction needs time-ordered points")
        # the cell-centre lattice leaves a half cell uncovered at each end
        v = _local_step_var(k1, delta)
        return bridge_mc(GG, c, n, seed, v, v / 2 if lattice == "cell" else 0.0, threads)
    raise EstimationError(f"unknown method {method!r}")


@dataclass
class ResolutionCheck:
    coarse: ProbEstimate
    fine: ProbEstimate
    flagged: bool


def discretization_check(K, G, delta: float, c: float = 0.0, **kw) -> ResolutionCheck:
    """Estimates at ``delta`` and ``delta / 2``; flagged when they differ by more than 3 SE."""
    a = persistence_prob(K, G, delta, c, **kw)
    b = persistence_prob(K, G, delta / 2, c, **kw)
    se = math.hypot(a.stderr, b.stderr)
    return ResolutionCheck(a, b, abs(a.p_hat - b.p_hat) > 3 * se)


# --------------------------------------------------------------------------
# pursuit


@dataclass(frozen=True)
class PursuitSpec:
    """Leader ``X^(0) + sqrt 2`` chased by ``N`` independent copies on ``(0, T]``."""

    T: float
    step: float
    base: Kernel1D = FBm(0.5)
    N: int | None = None
    shift: float = SQRT2

    @property
    def particles(self) -> int:
        return int(math.floor(self.T)) if self.N is None else int(self.N)

    @property
    def times(self) -> np.ndarray:
        m = int(round(self.T / self.step))
        return self.step * np.arange(1, m + 1)


def _particle_paths_sampler(spec: PursuitSpec):
    t = spec.times
    N = spec.particles
    if isinstance(spec.base, FBm) and spec.base.h == 0.5:
        incr_sd = np.sqrt(np.diff(np.concatenate([[0.0], t])))

        def draw(rng, k):
            return np.cumsum(rng.standard_normal((k, N + 1, t.size)) * incr_sd, axis=2)

    else:
        L = GridGaussian.from_kernel(spec.base, t).L

        def draw(rng, k):
            return rng.standard_normal((k, N + 1, t.size)) @ L.T

    return draw


def pursuit_prob(spec: PursuitSpec, method: str = "particle", n: int = 100_000, seed: int = 0, threads: int = 1, **kw) -> ProbEstimate:
    """Estimate ``p_T = P(X^(n)(t) <= X^(0)(t) + sqrt 2, 1 <= n <= N, t in grid)``.

    ``particle`` simulates the N + 1 copies; ``field`` / ``field_sov`` use the
    pursuit field with covariance ``(1 + delta_nm)/2 B(t, s)`` at level 1.
    """
    prov = {"region": "pursuit", "T": spec.T, "delta": spec.step, "N": spec.particles}
    if spec.particles == 0:
        return exact_estimate(1.0, prov)
    if method == "particle":
        draw = _particle_paths_sampler(spec)

        def count(rng, k):
            x = draw(rng, k)
            lead = x[:, :1, :] + spec.shift
            return int(np.count_nonzero(np.all(x[:, 1:, :] <= lead, axis=(1, 2))))

        hits = sum(map_blocks(n, seed, count, threads, block=max(64, 4096 // (spec.particles + 1))))
        return _from_counts(hits, n, "crude_mc", seed, prov)
    t = spec.times
    nn, tt = np.meshgrid(np.arange(1, spec.particles + 1), t, indexing="ij")
    pts = np.stack([nn.ravel(), tt.ravel()], axis=1)
    GG = GridGaussian.from_kernel(pursuit_kernel(spec.base), pts)
    GG.provenance.update(prov)
    level = spec.shift / SQRT2
    if method == "field":
        return crude_mc(GG, level, n, seed, threads)
    if method == "field_sov":
        return sov_qmc(GG, level, seed=seed, **kw)
    raise EstimationError(f"unknown pursuit method {method!r}")
