"""Covariance kernels for self-similar processes and their stationary duals.

Every kernel is an immutable descriptor with a vectorised ``cov(t, s)``.
Self-similar kernels (fBm) are normalised so that ``B(1, 1) = 1``; their
Lamperti duals are stationary and expose ``lag(tau)``.

Kernels serialise to small JSON documents, e.g. ``{"variant": "fbm", "h": 0.5}``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

PSD_TOL = 1e-8


class KernelError(ValueError):
    """Raised for invalid kernel parameters or evaluation domains."""


class NonIntegrableKernel(KernelError):
    """The kernel tail is not absolutely integrable."""


def _check_hurst(h: float, allow_one: bool = False) -> float:
    h = float(h)
    upper_ok = h <= 1.0 if allow_one else h < 1.0
    if not (0.0 < h and upper_ok):
        raise KernelError(f"Hurst index must lie in (0, 1), got {h}")
    return h


def min_eigenvalue_ok(gram: np.ndarray, tol: float = PSD_TOL) -> bool:
    """True when the smallest eigenvalue is above ``-tol * largest``."""
    w = np.linalg.eigvalsh(0.5 * (gram + gram.T))
    scale = max(abs(w[-1]), 1e-300)
    return bool(w[0] >= -tol * scale)


class Kernel1D:
    """Base class for one-dimensional covariance kernels."""

    hurst: float | None = None
    stationary: bool = False

    def cov(self, t, s) -> np.ndarray:
        raise NotImplementedError

    def lag(self, tau) -> np.ndarray:
        if not self.stationary:
            raise KernelError(f"{type(self).__name__} is not stationary")
        tau = np.asarray(tau, dtype=float)
        return self.cov(tau, np.zeros_like(tau))

    def gram(self, grid) -> np.ndarray:
        grid = np.asarray(grid, dtype=float)
        return self.cov(grid[:, None], grid[None, :])

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError

    def __call__(self, t, s):
        return self.cov(t, s)


@dataclass(frozen=True)
class FBm(Kernel1D):
    """Fractional Brownian motion, ``(t^2h + s^2h - |t-s|^2h) / 2``."""

    h: float

    stationary = False

    def __post_init__(self):
        object.__setattr__(self, "h", _check_hurst(self.h))

    @property
    def hurst(self) -> float:
        return self.h

    def cov(self, t, s) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        s = np.asarray(s, dtype=float)
        if np.any(t < 0) or np.any(s < 0):
            raise KernelError("fBm covariance is defined for t, s >= 0")
        p = 2.0 * self.h
        return 0.5 * (t**p + s**p - np.abs(t - s) ** p)

    def to_dict(self):
        return {"variant": "fbm", "h": self.h}


def fbm_cov(h: float, t, s) -> np.ndarray:
    return FBm(h).cov(t, s)


def fbm_dual_closed_form(h: float, tau) -> np.ndarray:
    """Stationary dual of fBm: ``cosh(h tau) - (2 sinh(|tau|/2))^{2h} / 2``."""
    a = np.abs(np.asarray(tau, dtype=float))
    # cosh(ha) and the sinh power cancel to leading order at large lags:
    # (2 sinh(a/2))^{2h} = e^{ha} (1 - e^{-a})^{2h}
    with np.errstate(divide="ignore"):
        gap = -np.expm1(2 * h * np.log1p(-np.exp(-a)))
        # product in log space: e^{ha} overflows long before gap underflows
        return 0.5 * np.exp(-h * a) + 0.5 * np.exp(h * a + np.log(gap))


@dataclass(frozen=True)
class LampertiDual(Kernel1D):
    """Lamperti transform ``Y(t) = X(e^t) / sqrt(E X^2(e^t))`` of a self-similar kernel."""

    base: Kernel1D
    closed_form: bool = True

    stationary = True

    def __post_init__(self):
        if self.base.hurst is None:
            raise KernelError("Lamperti dual needs a self-similar base kernel with a known index")

    @property
    def hurst(self) -> float:
        return self.base.hurst

    def generic_cov(self, t, s) -> np.ndarray:
        """Dual covariance computed from the base kernel at times ``e^t, e^s``."""
        et = np.exp(np.asarray(t, dtype=float))
        es = np.exp(np.asarray(s, dtype=float))
        num = self.base.cov(et, es)
        return num / np.sqrt(self.base.cov(et, et) * self.base.cov(es, es))

    def generic_lag(self, tau) -> np.ndarray:
        a = np.abs(np.asarray(tau, dtype=float))
        return np.exp(-self.hurst * a) * self.base.cov(np.exp(a), 1.0)

    def lag(self, tau) -> np.ndarray:
        if self.closed_form and isinstance(self.base, FBm):
            return fbm_dual_closed_form(self.base.h, tau)
        return self.generic_lag(tau)

    def cov(self, t, s) -> np.ndarray:
        return self.lag(np.asarray(t, dtype=float) - np.asarray(s, dtype=float))

    def to_dict(self):
        return {"variant": "lamperti_dual", "base": self.base.to_dict()}


def lamperti_dual_cov(k: Kernel1D, tau, path: str = "closed") -> np.ndarray:
    """Dual covariance ``B_Y(tau)``; ``path`` is ``"closed"`` or ``"generic"``."""
    dual = k if isinstance(k, LampertiDual) else LampertiDual(k)
    if path == "generic":
        return dual.generic_lag(tau)
    if path == "closed":
        return dual.lag(tau)
    raise KernelError(f"unknown path {path!r}")


def ou_kernel() -> LampertiDual:
    """Ornstein-Uhlenbeck kernel ``exp(-|tau|/2)``, the dual of Brownian motion."""
    return LampertiDual(FBm(0.5))


@dataclass(frozen=True)
class ParticleIndex(Kernel1D):
    """Discrete index kernel ``(1 + [n == m]) / 2`` on particle labels.

    Formally the discrete-time fBm of index 0; it turns N independent copies
    of a process into the differences ``(X^(n) - X^(0)) / sqrt(2)``.
    """

    stationary = False

    def cov(self, n, m) -> np.ndarray:
        n = np.asarray(n)
        m = np.asarray(m)
        return 0.5 * (1.0 + (n == m))

    def to_dict(self):
        return {"variant": "particle_index"}


@dataclass(frozen=True)
class Tabulated(Kernel1D):
    """Stationary kernel given by a table of lag values.

    ``B(tau)`` is linearly interpolated in ``|tau|`` and zero beyond the last lag.
    """

    lags: tuple
    values: tuple
    check_psd: bool = True

    stationary = True

    def __post_init__(self):
        lags = np.asarray(self.lags, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if lags.ndim != 1 or lags.shape != vals.shape or lags.size == 0:
            raise KernelError("lags and values must be 1-D arrays of equal length")
        if lags[0] != 0.0 or np.any(np.diff(lags) <= 0):
            raise KernelError("lags must start at 0 and increase strictly")
        object.__setattr__(self, "lags", tuple(lags))
        object.__setattr__(self, "values", tuple(vals))
        if self.check_psd and lags.size > 1:
            step = np.min(np.diff(lags))
            grid = np.arange(0.0, lags[-1] + step, step)[:64]
            if not min_eigenvalue_ok(self.gram(grid)):
                raise KernelError("tabulated kernel is not positive semidefinite")

    def cov(self, t, s) -> np.ndarray:
        a = np.abs(np.asarray(t, dtype=float) - np.asarray(s, dtype=float))
        lags = np.asarray(self.lags)
        if lags.size == 1:
            return np.where(a == 0.0, self.values[0], 0.0)
        return np.interp(a, lags, np.asarray(self.values), right=0.0)

    def to_dict(self):
        return {"variant": "tabulated", "lags": list(self.lags), "values": list(self.values)}


def white_kernel(step: float = 1.0) -> Tabulated:
    """Discrete white noise on a lattice of the given step."""
    return Tabulated((0.0, step), (1.0, 0.0))


@dataclass(frozen=True)
class TensorKernel:
    """Tensor product ``B(t, s) = prod_i B_i(t_i, s_i)``."""

    components: tuple

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise KernelError("tensor kernel needs at least one component")
        object.__setattr__(self, "components", comps)

    @property
    def d(self) -> int:
        return len(self.components)

    @property
    def h_vec(self) -> tuple:
        return tuple(c.hurst for c in self.components)

    @property
    def H(self) -> float:
        if any(h is None for h in self.h_vec):
            raise KernelError("H is defined only when every component is self-similar")
        return float(sum(self.h_vec))

    @property
    def stationary(self) -> bool:
        return all(c.stationary for c in self.components)

    def cov(self, t, s) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        s = np.asarray(s, dtype=float)
        if t.shape[-1] != self.d or s.shape[-1] != self.d:
            raise KernelError(f"points must have last dimension {self.d}")
        out = 1.0
        for i, comp in enumerate(self.components):
            out = out * comp.cov(t[..., i], s[..., i])
        return np.asarray(out)

    def gram(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return self.cov(p[:, None, :], p[None, :, :])

    def dual(self) -> "TensorKernel":
        return TensorKernel(tuple(LampertiDual(c) for c in self.components))

    def to_dict(self):
        return {"variant": "tensor", "components": [c.to_dict() for c in self.components]}


def eval_tensor_cov(K: TensorKernel, t, s) -> np.ndarray:
    return K.cov(t, s)


def pursuit_kernel(base: Kernel1D) -> TensorKernel:
    """Pursuit field on (particle, time): ``(1 + delta_nm)/2 * B(t, s)``."""
    return TensorKernel((ParticleIndex(), base))


def pursuit_cov(n, m, t, s, base: Kernel1D) -> np.ndarray:
    return ParticleIndex().cov(n, m) * base.cov(t, s)


def kernel_from_dict(doc: dict) -> Kernel1D | TensorKernel:
    """Inverse of ``to_dict``; also accepts ``{"variant": "ou"}`` and ``"pursuit"``."""
    try:
        variant = doc["variant"]
    except (KeyError, TypeError):
        raise KernelError(f"kernel spec needs a 'variant' field: {doc!r}") from None
    if variant == "fbm":
        return FBm(doc["h"])
    if variant == "ou":
        return ou_kernel()
    if variant == "lamperti_dual":
        return LampertiDual(kernel_from_dict(doc["base"]))
    if variant == "particle_index":
        return ParticleIndex()
    if variant == "tabulated":
        return Tabulated(tuple(doc["lags"]), tuple(doc["values"]))
    if variant == "white":
        return white_kernel(doc.get("step", 1.0))
    if variant == "tensor":
        return TensorKernel(tuple(kernel_from_dict(c) for c in doc["components"]))
    if variant == "pursuit":
        return pursuit_kernel(kernel_from_dict(doc["base"]))
    raise KernelError(f"unknown kernel variant {variant!r}")


# --------------------------------------------------------------------------
# spectral density


@dataclass(frozen=True)
class SpectralDensity:
    lambda_grid: np.ndarray
    values: np.ndarray
    f_zero: float
    tau_max: float
    clipped: int = 0


def _tail_lag(k: Kernel1D, tol: float, tau_limit: float) -> float:
    """Smallest doubling lag beyond which the two-sided tail mass is below ``tol``."""
    tau = 1.0
    while tau <= tau_limit:
        b0, b1 = float(k.lag(tau)), float(k.lag(1.1 * tau))
        if b0 <= 0.0:
            return tau
        if b1 > 0.0 and b1 < b0:
            rate = np.log(b0 / b1) / (0.1 * tau)
            tail = 2.0 * b0 / rate
            if tail < tol:
                return tau
        tau *= 2.0
    raise NonIntegrableKernel(f"kernel tail not integrable within lag {tau_limit:g}")


def spectral_density(
    k: Kernel1D,
    lambda_grid: Sequence[float] = (0.0,),
    step: float = 1e-3,
    tail_tol: float = 1e-8,
    tau_limit: float = 1e4,
) -> SpectralDensity:
    """Spectral density ``f(l) = (1/2pi) int cos(l tau) B(tau) dtau`` by trapezoid rule."""
    if not k.stationary:
        raise KernelError("spectral density needs a stationary kernel")
    tau_max = _tail_lag(k, tail_tol * 2 * np.pi, tau_limit)
    n = int(np.ceil(tau_max / step))
    tau = np.linspace(0.0, n * step, n + 1)
    b = k.lag(tau)
    w = np.full(tau.size, step)
    w[0] = w[-1] = 0.5 * step
    lam = np.atleast_1d(np.asarray(lambda_grid, dtype=float))
    # symmetric kernel: integral over R is twice the half-line integral
    vals = np.array([np.dot(w * b, np.cos(l * tau)) for l in lam]) / np.pi
    neg = vals < 0
    clipped = int(np.count_nonzero(neg & (vals > -1e-8)))
    if np.any(vals < -1e-8):
        raise KernelError("spectral density has significantly negative values")
    vals = np.where(neg, 0.0, vals)
    f0 = float(np.dot(w, b) / np.pi)
    return SpectralDensity(lam, vals, f0, float(tau[-1]), clipped)


# --------------------------------------------------------------------------
# conditions on self-similar components


@dataclass
class ConditionResult:
    name: str
    status: str  # "pass", "fail" or "n/a"
    detail: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.status == "pass"


@dataclass
class ConditionReport:
    results: dict

    @property
    def all_pass(self) -> bool:
        return all(r.passed for r in self.results.values())

    def __getitem__(self, key: str) -> ConditionResult:
        return self.results[key]

    def to_dict(self):
        return {k: {"status": r.status, **r.detail} for k, r in self.results.items()}


def _fit_line(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept)


def check_conditions(
    k: Kernel1D,
    grid: Sequence[float] | None = None,
    tol: float = 1e-9,
    eps_min: float = 0.05,
) -> ConditionReport:
    """Numeric checks of time inversion, Hölder bound, nonnegativity, decay and
    the lower bound on ``B(1, 1+s)`` for a one-dimensional kernel.

    Conditions other than nonnegativity apply to self-similar kernels only and
    are reported ``"n/a"`` otherwise.
    """
    if grid is None:
        grid = np.linspace(0.05, 1.0, 20)
    grid = np.asarray(grid, dtype=float)
    res: dict[str, ConditionResult] = {}
    h = k.hurst if not k.stationary else None

    # (c) nonnegativity over the grid, and also over a wide grid for self-similar kernels
    pts = grid if h is None else np.concatenate([grid, np.geomspace(1e-3, 1e3, 40)])
    if h is None and isinstance(k, Tabulated):
        pts = np.concatenate([grid, np.asarray(k.lags)])
    g = k.gram(pts)
    res["c"] = ConditionResult("nonnegativity", "pass" if g.min() >= -tol else "fail", {"min": float(g.min())})

    if h is None:
        for key, name in (("a", "time inversion"), ("b", "Hoelder"), ("d", "decay"), ("e", "lower bound")):
            res[key] = ConditionResult(name, "n/a")
        return ConditionReport(dict(sorted(res.items())))

    # (a) time inversion B(t,s) = (ts)^{2h} B(1/t, 1/s)
    pos = grid[grid > 0]
    T, S = np.meshgrid(pos, pos)
    lhs = k.cov(T, S)
    rhs = (T * S) ** (2 * h) * k.cov(1.0 / T, 1.0 / S)
    err = float(np.max(np.abs(lhs - rhs) / np.maximum(np.abs(lhs), 1.0)))
    res["a"] = ConditionResult("time inversion", "pass" if err <= 1e-10 else "fail", {"max_rel_err": err})

    # (b) E|X(t) - X(s)|^2 <= c |t - s|^{2 alpha} on [0, 1]
    u = np.linspace(0.0, 1.0, 41)
    U, V = np.meshgrid(u, u)
    mask = U > V
    inc = (k.cov(U, U) + k.cov(V, V) - 2 * k.cov(U, V))[mask]
    dist = (U - V)[mask]
    ok = inc > 0
    slope, _ = _fit_line(np.log(dist[ok]), np.log(inc[ok]))
    alpha = 0.5 * slope
    c = float(np.max(inc / dist ** (2 * alpha)))
    b_ok = 0.0 < alpha <= 1.0 + 1e-9 and np.isfinite(c)
    res["b"] = ConditionResult("Hoelder", "pass" if b_ok else "fail", {"alpha": float(alpha), "c": c})

    # (d) B(1, s) <= s^h / ln^{1+eps} s for large s; fitted eps
    s = np.exp(np.linspace(2.0, 10.0, 33))
    b1s = k.cov(1.0, s)
    if np.any(b1s <= 0):
        res["d"] = ConditionResult("decay", "pass", {"eps": float("inf")})
    else:
        slope, _ = _fit_line(np.log(np.log(s)), np.log(s**h / b1s))
        eps = slope - 1.0
        res["d"] = ConditionResult("decay", "pass" if eps > eps_min else "fail", {"eps": float(eps)})

    # (e) inf_{s > 0} B(1, 1 + s) > 0
    s = np.concatenate([np.geomspace(1e-6, 1e6, 200)])
    lo = float(np.min(k.cov(1.0, 1.0 + s)))
    res["e"] = ConditionResult("lower bound", "pass" if lo > tol else "fail", {"inf": lo})

    return ConditionReport(dict(sorted(res.items())))
