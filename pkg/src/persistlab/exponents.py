"""Persistence exponents: fits, closed-form values and verification relations.

An exponent is the slope ``theta`` of the affine model

    -log p(T) = theta * psi(T) + b

fitted by weighted least squares, where ``psi(T)`` is ``T^d`` for
homogeneous fields and ``ln^d T`` for self-similar ones.  The intercept
absorbs the unknown finite-T prefactor.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .geometry import Cube, Parallelepiped, Region, SimplexSh, UT, discretize
from .kernels import FBm, Kernel1D, TensorKernel, ou_kernel, spectral_density
from .orthant import (
    EstimationError,
    ProbEstimate,
    PursuitSpec,
    exact_brownian_sup,
    exact_estimate,
    exact_ou_negative,
    persistence_prob,
    pursuit_prob,
)
from .sampler import estimate_sup_expectation

Z95 = 1.959963984540054
PSI_KINDS = ("power", "log_power")


class FitError(ValueError):
    pass


class BudgetExceeded(RuntimeError):
    pass


def psi(T, kind: str = "power", d: int = 1) -> np.ndarray:
    """Normaliser ``T^d`` (``power``) or ``ln^d T`` (``log_power``)."""
    T = np.asarray(T, dtype=float)
    if kind == "power":
        return T**d
    if kind == "log_power":
        return np.log(T) ** d
    raise FitError(f"unknown psi {kind!r}")


@dataclass
class ExponentFit:
    psi: str
    d: int
    c: float
    pairs: list
    theta_hat: float
    intercept: float
    se: float
    ci_95: tuple
    r_squared: float
    chi2_red: float

    def overlaps(self, other: "ExponentFit", scale: float = 1.0, other_scale: float = 1.0) -> bool:
        """Whether the 95% intervals of ``theta/scale`` and ``other.theta/other_scale`` meet."""
        lo1, hi1 = (x / scale for x in self.ci_95)
        lo2, hi2 = (x / other_scale for x in other.ci_95)
        return lo1 <= hi2 and lo2 <= hi1

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ci_95"] = list(self.ci_95)
        out["pairs"] = [list(p) for p in self.pairs]
        return out


def fit_exponent(series: Sequence[tuple[float, ProbEstimate]], psi_kind: str = "power", d: int = 1, c: float = 0.0) -> ExponentFit:
    """Weighted least-squares fit of ``-log p = theta psi(T) + b``.

    Weights are ``1 / se_log^2``.  The 95% interval uses the WLS covariance,
    inflated by the reduced chi-square when the residuals exceed the stated
    errors.  Series with zero errors (exact oracles) fall back to ordinary
    least squares with the residual variance.
    """
    if psi_kind not in PSI_KINDS:
        raise FitError(f"unknown psi {psi_kind!r}")
    T = np.array([float(t) for t, _ in series])
    if len(np.unique(T)) < 3:
        raise FitError("need >= 3 T values")
    y = np.array([-e.log_p for _, e in series])
    if not np.all(np.isfinite(y)):
        raise FitError("all log_p must be finite")
    se = np.array([e.stderr_log for _, e in series])
    x = psi(T, psi_kind, d)
    if np.ptp(x) == 0:
        raise FitError("singular design: all psi values equal")
    exact = np.all(se == 0)
    if not exact and np.any(se <= 0):
        se = np.where(se > 0, se, se[se > 0].min())
    w = np.ones_like(y) if exact else 1.0 / se**2
    X = np.column_stack([x, np.ones_like(x)])
    A = X.T @ (w[:, None] * X)
    coef = np.linalg.solve(A, X.T @ (w * y))
    resid = y - X @ coef
    dof = len(y) - 2
    chi2 = float(np.sum(w * resid**2))
    chi2_red = chi2 / dof if dof > 0 else 0.0
    cov = np.linalg.inv(A) * (chi2_red if exact else max(1.0, chi2_red))
    theta, b = float(coef[0]), float(coef[1])
    s = math.sqrt(max(cov[0, 0], 0.0))
    ybar = np.sum(w * y) / np.sum(w)
    ss_tot = float(np.sum(w * (y - ybar) ** 2))
    r2 = 1.0 - chi2 / ss_tot if ss_tot > 0 else 1.0
    pairs = [(float(t), float(e.log_p), float(e.stderr_log)) for t, e in series]
    return ExponentFit(psi_kind, d, c, pairs, theta, b, s, (theta - Z95 * s, theta + Z95 * s), r2, float(chi2_red))


def geometric_grid(t_max: float, count: int = 4, ratio: float = 2 ** (1 / 3)) -> list[float]:
    return [float(t_max * ratio ** (j - count + 1)) for j in range(count)]


def capped_t_max(G: Region, delta: float, max_points: int) -> float:
    """Largest ``T`` with at most ``max_points`` inner lattice points in ``T G``."""
    t = delta * (max_points / G.volume) ** (1.0 / len(G.bbox()[0]))
    for _ in range(100):
        if discretize(G.scaled(t), delta, "inner").count <= max_points:
            return t
        t *= 0.99
    raise FitError("could not meet the lattice cap")


# --------------------------------------------------------------------------
# closed-form values


@dataclass(frozen=True)
class TheoryValue:
    name: str
    value: float
    source: str

    def __post_init__(self):
        if not self.value >= 0:
            raise ValueError("exponent values are nonnegative")


def _check_open_hurst(h: float) -> float:
    h = float(h)
    if not 0 < h < 1:
        raise ValueError("h must lie in (0, 1)")
    return h


def theta_pursuit_exact(h: float) -> TheoryValue:
    """Pursuit exponent of fBm, ``Gamma(1+h) / (2 Gamma(2h) Gamma(1-h))``."""
    h = _check_open_hurst(h)
    lg = special.gammaln(1 + h) - special.gammaln(2 * h) - special.gammaln(1 - h)
    return TheoryValue(f"pursuit_fbm(h={h:g})", float(0.5 * math.exp(lg)), "gamma_ratio")


def pursuit_floor(h: float) -> float:
    """Lower estimate ``0.5 min(h, 1-h)`` of the fBm pursuit exponent."""
    h = _check_open_hurst(h)
    return 0.5 * min(h, 1 - h)


def theta_from_spectrum(f_zero: float) -> TheoryValue:
    """Exponent ``1 / (2 pi f(0))`` from the spectral density at zero of the stationary dual."""
    if not f_zero > 0:
        raise ValueError("f(0) must be positive")
    return TheoryValue("spectral", 1.0 / (2 * math.pi * f_zero), "spectral_zero")


@dataclass(frozen=True)
class LowerBound:
    h_a: float
    h_g: float
    factor: float
    bound: float
    hurst_min: float | None


def lower_bound_check(h1: float, h2: float, f_zero_y2: float, fbm: bool = True) -> LowerBound:
    """Slepian lower bound on the sheet exponent.

    ``factor = 2 (h_a / h_g)^2`` and ``bound = factor / (2 pi f(0))``; for
    equal fBm indices ``hurst_min = min(h, 1 - h)`` is returned as well.
    """
    h1, h2 = _check_open_hurst(h1), _check_open_hurst(h2)
    ha, hg = (h1 + h2) / 2, math.sqrt(h1 * h2)
    factor = 2 * (ha / hg) ** 2
    bound = theta_from_spectrum(f_zero_y2).value * factor
    simple = min(h1, 1 - h1) if (fbm and h1 == h2) else None
    return LowerBound(ha, hg, factor, bound, simple)


def duality_scale(h1: float, h2: float) -> float:
    """``c = sqrt(2) h_a / h_g`` relating the sheet exponent to the dual field on ``cK``."""
    h1, h2 = _check_open_hurst(h1), _check_open_hurst(h2)
    return math.sqrt(2) * ((h1 + h2) / 2) / math.sqrt(h1 * h2)


# --------------------------------------------------------------------------
# budgets and reports


@dataclass
class Budget:
    tier: str = "quick"
    n_points: int = 2**14
    n_shifts: int = 8
    n: int = 10**6
    max_points: int = 576
    grid_count: int = 4
    seconds: float = 120.0
    seed: int = 0
    threads: int = 1
    started: float = field(default_factory=time.monotonic)

    @classmethod
    def for_tier(cls, tier: str, seed: int = 0, threads: int = 1) -> "Budget":
        if tier == "quick":
            return cls("quick", 2**12, 8, 10**6, 144, 4, 120.0, seed, threads)
        if tier == "full":
            return cls("full", 2**14, 8, 10**6, 576, 4, 7200.0, seed, threads)
        raise ValueError(f"unknown tier {tier!r}")

    def check(self) -> None:
        if time.monotonic() - self.started > self.seconds:
            raise BudgetExceeded(f"{self.tier} budget of {self.seconds:g} s exceeded")


@dataclass
class Relation:
    name: str
    theory: float | None
    estimate: float | None
    ci: tuple | None
    verdict: bool
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci"] = None if self.ci is None else [float(x) for x in self.ci]
        return d


@dataclass
class Report:
    suite: str
    tier: str
    relations: list = field(default_factory=list)
    partial: bool = False
    error: str | None = None

    @property
    def passed(self) -> bool:
        return not self.partial and self.error is None and all(r.verdict for r in self.relations)

    def to_json(self) -> str:
        doc = {
            "suite": self.suite,
            "tier": self.tier,
            "passed": self.passed,
            "partial": self.partial,
            "error": self.error,
            "relations": [r.to_dict() for r in self.relations],
        }
        return json.dumps(doc, sort_keys=True, indent=1, default=_json_default)

    def to_text(self) -> str:
        def num(v):
            return "-" if v is None else f"{v:.6g}"

        rows = [("relation", "theory", "estimate", "ci_95", "verdict")]
        for r in self.relations:
            ci = "-" if r.ci is None else f"[{r.ci[0]:.4g}, {r.ci[1]:.4g}]"
            rows.append((r.name, num(r.theory), num(r.estimate), ci, "pass" if r.verdict else "FAIL"))
        widths = [max(len(row[i]) for row in rows) for i in range(5)]
        lines = [f"suite {self.suite} ({self.tier})"]
        lines += ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
        if self.partial:
            lines.append(f"PARTIAL: {self.error}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines) + "\n"


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


# --------------------------------------------------------------------------
# probability series


def series(estimate: Callable[[float, int], ProbEstimate], T_values: Sequence[float], budget: Budget | None = None) -> list:
    """``[(T, estimate(T, j))]``, checking the time budget between points."""
    out = []
    for j, T in enumerate(T_values):
        if budget is not None:
            budget.check()
        out.append((float(T), estimate(float(T), j)))
    return out


def stationary_series(K, G: Region, T_values, delta: float, budget: Budget, c: float = 0.0, method: str = "sov_qmc", seed: int | None = None):
    seed = budget.seed if seed is None else seed

    def est(T, j):
        return persistence_prob(
            K, G.scaled(T), delta, c, method, n=budget.n, seed=seed + j, n_points=budget.n_points,
            n_shifts=budget.n_shifts, threads=budget.threads, T=T,
        )

    return series(est, T_values, budget)


def _ci(fit: ExponentFit, scale: float = 1.0) -> tuple:
    return (fit.ci_95[0] / scale, fit.ci_95[1] / scale)


# --------------------------------------------------------------------------
# relations


def duality_check_d1(budget: Budget, delta: float = 0.05, band: tuple = (0.45, 0.55)) -> list[Relation]:
    """Brownian motion vs its stationary dual: both exponents near 1/2.

    The self-similar side uses the exact reflection-principle series with
    ``psi = ln T``; the dual side uses bridge-corrected Monte Carlo of the
    OU process with ``psi = T``, each point checked against the exact value.
    """
    tx = [math.exp(k) for k in (2, 3, 4, 5, 6)]
    sx = [(T, exact_estimate(exact_brownian_sup(T, 1.0))) for T in tx]
    fx = fit_exponent(sx, "log_power", 1, 1.0)
    ty = [round(4 * 3 ** (j / 4) / delta) * delta for j in range(5)]
    sy = stationary_series(ou_kernel(), Cube(1.0, 1), ty, delta, budget, method="bridge_mc")
    fy = fit_exponent(sy, "power", 1, 0.0)
    z = [(e.log_p - math.log(exact_ou_negative(T))) / e.stderr_log for T, e in sy]
    valid = all(abs(v) <= 3 for v in z)
    in_band = [band[0] <= f.theta_hat <= band[1] for f in (fx, fy)]
    return [
        Relation("d1 self-similar (exact oracle, psi=ln T)", 0.5, fx.theta_hat, fx.ci_95, in_band[0], {"fit": fx.to_dict()}),
        Relation(
            "d1 stationary dual (bridge MC, psi=T)", 0.5, fy.theta_hat, fy.ci_95, in_band[1] and valid,
            {"fit": fy.to_dict(), "z_vs_exact": z, "validated": valid},
        ),
    ]


def scaling_check(K: TensorKernel, G: Region, ks: Sequence[float], budget: Budget, delta: float = 0.25, T_values=None) -> list[Relation]:
    """``theta(kG) / k^d`` for each ``k``; passes when all intervals meet.

    Without explicit ``T_values`` each region ``kG`` gets a geometric grid
    whose largest member is capped by ``budget.max_points`` lattice points.
    """
    d = K.d
    fits = {}
    for i, k in enumerate(ks):
        Gk = G.scaled(k)
        Ts = T_values or geometric_grid(capped_t_max(Gk, delta, budget.max_points), budget.grid_count)
        s = stationary_series(K, Gk, Ts, delta, budget, seed=budget.seed + 100 * i)
        fits[k] = fit_exponent(s, "power", d)
    ok = all(fits[a].overlaps(fits[b], a**d, b**d) for a in ks for b in ks)
    return [
        Relation(f"scaling k={k:g}: theta(kG)/k^{d}", None, f.theta_hat / k**d, _ci(f, k**d), ok, {"fit": f.to_dict()})
        for k, f in fits.items()
    ]


def parallelepiped_check(K: TensorKernel, a: Sequence[float], budget: Budget, delta: float = 0.25) -> list[Relation]:
    """``theta(Pi) / prod(a)`` against ``theta(K)``; passes when the intervals meet."""
    a = np.asarray(a, float)
    vol = float(np.prod(a))
    out = {}
    for i, G in enumerate((Cube(1.0, len(a)), Parallelepiped(a))):
        Ts = geometric_grid(capped_t_max(G, delta, budget.max_points), budget.grid_count)
        out[i] = fit_exponent(stationary_series(K, G, Ts, delta, budget, seed=budget.seed + 100 * i), "power", K.d)
    fk, fp = out[0], out[1]
    ok = fk.overlaps(fp, 1.0, vol)
    return [
        Relation("theta(K)", None, fk.theta_hat, fk.ci_95, ok, {"fit": fk.to_dict()}),
        Relation(f"theta(Pi)/prod(a), a={a.tolist()}", None, fp.theta_hat / vol, _ci(fp, vol), ok, {"fit": fp.to_dict()}),
    ]


def tiling_check(K: TensorKernel, h: Sequence[float], budget: Budget, delta: float = 0.25) -> list[Relation]:
    """``theta(S_h) / |S_h|`` against ``theta(K)``: both tile the same growing region."""
    fits = []
    for i, G in enumerate((Cube(1.0, len(h)), SimplexSh(tuple(h)))):
        Ts = geometric_grid(capped_t_max(G, delta, budget.max_points), budget.grid_count)
        fits.append((G.volume, fit_exponent(stationary_series(K, G, Ts, delta, budget, seed=budget.seed + 100 * i), "power", K.d)))
    (vk, fk), (vs, fs) = fits
    ok = fk.overlaps(fs, vk, vs)
    return [
        Relation("theta(K)", None, fk.theta_hat, fk.ci_95, ok, {"fit": fk.to_dict()}),
        Relation("theta(S_h)/|S_h|", None, fs.theta_hat / vs, _ci(fs, vs), ok, {"fit": fs.to_dict()}),
    ]


def duality_check_d2(
    h1: float,
    h2: float,
    budget: Budget,
    TX: Sequence[float] = (8, 16, 32, 64),
    TY: Sequence[float] = (3, 4, 5, 6),
    delta: float | None = None,
    depth: float = 2.5,
    floor: float = 0.25,
) -> list[Relation]:
    """Sheet exponent on ``[0, T]^2`` (level 1) against the dual field on ``c T K`` (level 0).

    Both sides are discretised with the same step in log time, so they
    see the same lattice version of the dual field.  The default step
    ``c / 3`` makes every ``c T`` with integer ``T`` a whole number of cells.
    """
    c = duality_scale(h1, h2)
    delta = c / 3 if delta is None else delta
    X = TensorKernel((FBm(h1), FBm(h2)))
    Y = X.dual()

    def est_x(T, j):
        return persistence_prob(
            X, Cube(T, 2), delta, 1.0, "sov_qmc", seed=budget.seed + j, n_points=budget.n_points,
            n_shifts=budget.n_shifts, lattice="log", depth=depth, T=T,
        )

    fx = fit_exponent(series(est_x, TX, budget), "log_power", 2, 1.0)
    fy = fit_exponent(stationary_series(Y, Cube(c, 2), TY, delta, budget, seed=budget.seed + 100), "power", 2, 0.0)
    ok = fx.overlaps(fy) and fx.theta_hat > floor and fy.theta_hat > floor
    det = {"c": c, "delta": delta, "floor": floor}
    return [
        Relation("d2 sheet theta_X(K) (psi=ln^2 T)", None, fx.theta_hat, fx.ci_95, ok, {"fit": fx.to_dict(), **det}),
        Relation("d2 dual theta_Y(cK) (psi=T^2)", None, fy.theta_hat, fy.ci_95, ok, {"fit": fy.to_dict(), **det}),
    ]


@dataclass
class SupBound:
    T: list
    delta: float
    n: int
    mean: list
    se: list
    a: float
    b: float
    residual_z: list
    ratio: list
    ratio_ok: bool
    residual_ok: bool


def sup_bound_check(
    budget: Budget, T_values=(math.e**2, math.e**3, math.e**4), delta: float | None = None, n: int | None = None, h=(0.5, 0.5)
) -> list[Relation]:
    """Growth of ``E max X`` over ``U_T`` against ``a sqrt(ln T) + b``.

    Passes when the weighted fit leaves residuals within 2 SE and the ratio
    ``E max / sqrt(ln T)`` does not increase by more than 2 combined SE.
    """
    K = TensorKernel(tuple(FBm(x) for x in h))
    n = n or budget.n // 10
    # finest step whose largest lattice fits the dense sampling guard
    delta = delta or (0.25 if budget.tier == "full" else 0.5)
    means, ses = [], []
    for j, T in enumerate(T_values):
        budget.check()
        m, s = estimate_sup_expectation(K, UT(T, tuple(h)), delta, n, budget.seed + j, budget.threads)
        means.append(m)
        ses.append(s)
    x = np.sqrt(np.log(T_values))
    m, s = np.array(means), np.array(ses)
    w = 1 / s**2
    X = np.column_stack([x, np.ones_like(x)])
    coef = np.linalg.solve(X.T @ (w[:, None] * X), X.T @ (w * m))
    z = (m - X @ coef) / s
    ratio = m / x
    rse = s / x
    ratio_ok = all(ratio[i + 1] <= ratio[i] + 2 * math.hypot(rse[i], rse[i + 1]) for i in range(len(x) - 1))
    resid_ok = bool(np.all(np.abs(z) <= 2))
    rep = SupBound(list(map(float, T_values)), delta, n, means, ses, float(coef[0]), float(coef[1]), z.tolist(), ratio.tolist(), ratio_ok, resid_ok)
    return [
        Relation("sup growth a*sqrt(ln T)+b residuals within 2 SE", None, float(coef[0]), None, resid_ok, asdict(rep)),
        Relation("E max / sqrt(ln T) non-increasing", None, float(ratio[-1]), None, ratio_ok, asdict(rep)),
    ]


def pursuit_check(
    budget: Budget, h: float = 0.5, T_values=None, step: float = 0.05, n: int | None = None
) -> list[Relation]:
    """Pursuit exponent fitted over ``psi = ln^2 T`` with ``N = floor(T)`` chasers.

    Passes when the fitted value plus two standard errors is at least the
    lower estimate ``0.5 min(h, 1-h)``.
    """
    theory = theta_pursuit_exact(h).value
    T_values = T_values or [math.exp(x) for x in geometric_grid(3.0, budget.grid_count, 2 ** 0.5)]
    n = n or budget.n // 10
    base = FBm(h)

    def est(T, j):
        spec = PursuitSpec(T, step, base)
        return pursuit_prob(spec, "particle", n, budget.seed + j, budget.threads)

    s = series(est, T_values, budget)
    f = fit_exponent(s, "log_power", 2, 1.0)
    floor = pursuit_floor(h)
    ok = f.theta_hat + 2 * f.se >= floor
    return [
        Relation(
            f"pursuit exponent h={h:g} (psi=ln^2 T)", theory, f.theta_hat, f.ci_95, ok,
            {"fit": f.to_dict(), "floor": floor, "ci_contains_theory": f.ci_95[0] <= theory <= f.ci_95[1]},
        )
    ]


def formula_checks(hs: Sequence[float] = tuple(np.round(np.arange(0.1, 0.95, 0.1), 10))) -> list[Relation]:
    """Closed-form exponent identities, all arithmetic or one quadrature."""
    out = []
    p = theta_pursuit_exact(0.5).value
    out.append(Relation("gamma ratio at h=1/2", 0.25, p, None, abs(p - 0.25) <= 1e-12))
    s = theta_from_spectrum(2 / math.pi).value
    out.append(Relation("spectral value at f(0)=2/pi", 0.25, s, None, abs(s - 0.25) <= 1e-12))
    f0 = spectral_density(ou_kernel()).f_zero
    q = theta_from_spectrum(f0).value
    out.append(Relation("spectral value from integrated OU spectrum", 0.25, q, None, abs(q - 0.25) <= 1e-4, {"f_zero": f0}))
    for h in hs:
        v, lo = theta_pursuit_exact(h).value, pursuit_floor(h)
        out.append(Relation(f"gamma ratio >= 0.5 min(h,1-h), h={h:g}", lo, v, None, v >= lo))
    lb = lower_bound_check(0.5, 0.5, 2 / math.pi)
    out.append(Relation("Slepian bound at h=1/2", 0.5, lb.bound, None, abs(lb.bound - 0.5) <= 1e-12 and lb.hurst_min == 0.5))
    return out
