"""Regions, lattice discretisation, motions and parquet tilings.

Lattice cells are axis aligned with side ``delta``; a lattice point is the
centre of its cell.  The inner lattice keeps cells contained in the region,
the outer lattice keeps cells meeting it, so that

    inner_count * delta^d <= |G| <= outer_count * delta^d

for every region with an exact cell test.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class GeometryError(ValueError):
    pass


class EmptyLattice(GeometryError):
    """No lattice cell qualifies; use a smaller step."""


# --------------------------------------------------------------------------
# regions


class Region:
    d: int

    def contains(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    @property
    def volume(self) -> float:
        raise NotImplementedError

    def scaled(self, T: float) -> "Region":
        raise NotImplementedError

    def cell_status(self, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(inside, meets)`` for the boxes ``[lo, hi]`` (rows)."""
        raise NotImplementedError


def _box_status(lo, hi, blo, bhi):
    inside = np.all((lo >= blo) & (hi <= bhi), axis=1)
    meets = np.all((hi > blo) & (lo < bhi), axis=1)
    return inside, meets


@dataclass(frozen=True)
class Parallelepiped(Region):
    """Axis-aligned box ``[o_1, o_1 + a_1] x ... x [o_d, o_d + a_d]``."""

    a: tuple
    origin: tuple | None = None

    def __post_init__(self):
        a = tuple(float(x) for x in self.a)
        if not a or min(a) <= 0:
            raise GeometryError("side lengths must be positive")
        object.__setattr__(self, "a", a)
        o = (0.0,) * len(a) if self.origin is None else tuple(float(x) for x in self.origin)
        object.__setattr__(self, "origin", o)

    @property
    def d(self) -> int:
        return len(self.a)

    def bbox(self):
        lo = np.asarray(self.origin)
        return lo, lo + np.asarray(self.a)

    @property
    def volume(self) -> float:
        return float(np.prod(self.a))

    def contains(self, x):
        lo, hi = self.bbox()
        x = np.atleast_2d(x)
        return np.all((x >= lo - 1e-12) & (x <= hi + 1e-12), axis=1)

    def scaled(self, T):
        return Parallelepiped(tuple(T * x for x in self.a), tuple(T * x for x in self.origin))

    def cell_status(self, lo, hi):
        return _box_status(lo, hi, *self.bbox())


def Cube(side: float = 1.0, d: int = 2) -> Parallelepiped:
    return Parallelepiped((side,) * d)


@dataclass(frozen=True)
class SimplexSh(Region):
    """``S_h = {t >= 0, (t, h) <= H}`` with ``H = sum(h)``, optionally scaled."""

    h: tuple
    scale: float = 1.0

    def __post_init__(self):
        h = tuple(float(x) for x in self.h)
        if not h or min(h) <= 0:
            raise GeometryError("h must be positive")
        object.__setattr__(self, "h", h)

    @property
    def d(self):
        return len(self.h)

    @property
    def H(self):
        return sum(self.h)

    def bbox(self):
        return np.zeros(self.d), self.scale * self.H / np.asarray(self.h)

    @property
    def volume(self):
        # simplex with legs H/h_i
        return float(self.scale**self.d * np.prod(self.H / np.asarray(self.h)) / math.factorial(self.d))

    def contains(self, x):
        x = np.atleast_2d(x)
        h = np.asarray(self.h)
        return np.all(x >= -1e-12, axis=1) & (x @ h <= self.scale * self.H * (1 + 1e-12))

    def scaled(self, T):
        return SimplexSh(self.h, self.scale * T)

    def cell_status(self, lo, hi):
        h = np.asarray(self.h)
        lim = self.scale * self.H
        inside = np.all(lo >= 0, axis=1) & (hi @ h <= lim)
        meets = np.all(hi > 0, axis=1) & (np.maximum(lo, 0) @ h < lim)
        return inside, meets


@dataclass(frozen=True)
class UT(Region):
    """``{prod t_i^{h_i} <= 1} ∩ [0, T]^d`` (``complement=False``) or its
    complement ``{prod t_i^{h_i} > 1} ∩ [0, T]^d`` in the box."""

    T: float
    h: tuple
    complement: bool = False

    def __post_init__(self):
        if self.T <= 0:
            raise GeometryError("T must be positive")
        object.__setattr__(self, "h", tuple(float(x) for x in self.h))

    @property
    def d(self):
        return len(self.h)

    def bbox(self):
        return np.zeros(self.d), np.full(self.d, float(self.T))

    def _logprod(self, x):
        with np.errstate(divide="ignore"):
            return np.log(np.maximum(x, 0.0)) @ np.asarray(self.h)

    def contains(self, x):
        x = np.atleast_2d(x)
        inbox = np.all((x >= -1e-12) & (x <= self.T + 1e-12), axis=1)
        lp = self._logprod(x)
        return inbox & ((lp > 0) if self.complement else (lp <= 0))

    @property
    def volume(self):
        if self.d == 1:
            v = min(self.T, 1.0)
        elif self.d == 2:
            h1, h2 = self.h
            # area of {t1^h1 t2^h2 <= 1} in [0,T]^2: t2 <= t1^{-h1/h2}
            r = h1 / h2
            t1_star = self.T ** (-1 / r)  # where the curve leaves the top edge
            if t1_star >= self.T:
                v = self.T**2
            else:
                if abs(r - 1.0) < 1e-14:
                    integral = math.log(self.T / t1_star)
                else:
                    integral = (self.T ** (1 - r) - t1_star ** (1 - r)) / (1 - r)
                v = self.T * t1_star + integral
        else:
            raise GeometryError("closed-form volume only for d <= 2")
        return (self.T**self.d - v) if self.complement else v

    def scaled(self, T):
        raise GeometryError("U_T regions are parametrised by T, not by scaling")

    def cell_status(self, lo, hi):
        binside, bmeets = _box_status(lo, hi, *self.bbox())
        lp_lo = self._logprod(np.clip(lo, 0, self.T))
        lp_hi = self._logprod(np.clip(hi, 0, self.T))
        if self.complement:
            return binside & (lp_lo > 0), bmeets & (lp_hi > 0)
        return binside & (lp_hi <= 0), bmeets & (lp_lo < 0)


def UTc(T: float, h: Sequence[float]) -> UT:
    return UT(T, tuple(h), complement=True)


@dataclass(frozen=True)
class Predicate(Region):
    """Region given by an indicator; cell tests are sample based (corners,
    centre and a 3-per-axis interior grid)."""

    indicator: Callable[[np.ndarray], np.ndarray]
    lo: tuple
    hi: tuple
    known_volume: float | None = None

    @property
    def d(self):
        return len(self.lo)

    def bbox(self):
        return np.asarray(self.lo, float), np.asarray(self.hi, float)

    @property
    def volume(self):
        if self.known_volume is None:
            raise GeometryError("volume unknown for this predicate region")
        return self.known_volume

    def contains(self, x):
        return np.asarray(self.indicator(np.atleast_2d(x)), dtype=bool)

    def scaled(self, T):
        ind = self.indicator
        vol = None if self.known_volume is None else self.known_volume * T**self.d
        return Predicate(lambda x: ind(x / T), tuple(T * v for v in self.lo), tuple(T * v for v in self.hi), vol)

    def cell_status(self, lo, hi):
        fr = np.array(list(itertools.product((0.0, 1 / 6, 0.5, 5 / 6, 1.0), repeat=self.d)))
        inside = np.ones(len(lo), bool)
        meets = np.zeros(len(lo), bool)
        for f in fr:
            c = self.contains(lo + f * (hi - lo))
            inside &= c
            meets |= c
        return inside, meets


def disk(radius: float = 1.0) -> Predicate:
    return Predicate(
        lambda x: np.sum(x**2, axis=1) <= radius**2, (-radius, -radius), (radius, radius), math.pi * radius**2
    )


def checkerboard(scale: float, extent: float = 1.0) -> Predicate:
    """Chessboard of squares of side ``scale`` on ``[0, extent]^2``."""

    def ind(x):
        k = np.floor(x / scale).astype(np.int64)
        return (np.sum(k, axis=1) % 2 == 0) & np.all((x >= 0) & (x <= extent), axis=1)

    return Predicate(ind, (0.0, 0.0), (extent, extent), extent**2 / 2)


# --------------------------------------------------------------------------
# lattices


@dataclass(frozen=True)
class Lattice:
    delta: float
    offset: np.ndarray
    points: np.ndarray
    mode: str

    @property
    def count(self) -> int:
        return len(self.points)

    @property
    def measure(self) -> float:
        return self.count * self.delta ** self.points.shape[1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(self.points.shape[1])])
            w.writerows(self.points.tolist())


def _cell_grid(lo, hi, delta, offset):
    axes = []
    for a, b, o in zip(lo, hi, offset):
        k0 = math.floor((a - o) / delta + 1e-9)
        k1 = math.ceil((b - o) / delta - 1e-9)
        axes.append(o + delta * np.arange(k0, k1))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def discretize(G: Region, delta: float, mode: str = "inner", offset=None, min_coord: float | None = None) -> Lattice:
    """Cell-centre lattice of step ``delta`` inside (``inner``) or covering (``outer``) ``G``.

    ``min_coord`` drops points having any coordinate below it (used on
    self-similar fields, which vanish on the axes).
    """
    if delta <= 0:
        raise GeometryError("delta must be positive")
    if mode not in ("inner", "outer"):
        raise GeometryError(f"mode must be 'inner' or 'outer', got {mode!r}")
    lo, hi = G.bbox()
    offset = np.zeros(G.d) if offset is None else np.asarray(offset, float)
    lows = _cell_grid(lo, hi, delta, offset)
    # shrink cells slightly so round-off on region faces does not drop a row
    eps = 1e-9 * delta
    inside, meets = G.cell_status(lows + eps, lows + delta - eps)
    keep = inside if mode == "inner" else meets
    pts = lows[keep] + 0.5 * delta
    if min_coord is not None:
        pts = pts[np.all(pts >= min_coord, axis=1)]
    if len(pts) == 0:
        raise EmptyLattice(f"no {mode} cells of step {delta} in region; shrink delta")
    return Lattice(float(delta), offset, pts, mode)


@dataclass
class RegularityReport:
    deltas: list
    gaps: list
    regular: bool


def regularity_gap(G: Region, deltas: Sequence[float], ratio: float = 0.75, floor: float = 1e-12) -> RegularityReport:
    """Outer minus inner lattice measure for each step.

    The region is reported regular when every refinement shrinks the gap by
    at least ``ratio`` relative to the previous step (or the gap is zero).
    """
    gaps = []
    for dl in deltas:
        inner = _safe_count(G, dl, "inner")
        outer = _safe_count(G, dl, "outer")
        gaps.append((outer - inner) * dl**G.d)
    ok = all(g1 <= floor or g1 <= ratio * g0 for g0, g1 in zip(gaps, gaps[1:]))
    return RegularityReport(list(deltas), gaps, ok)


def _safe_count(G, delta, mode):
    try:
        return discretize(G, delta, mode).count
    except EmptyLattice:
        return 0


# --------------------------------------------------------------------------
# Lamperti coordinates


def log_lattice(T: float, h: Sequence[float], delta: float, depth: float, side: str = "box") -> np.ndarray:
    """Points ``t = exp(u)`` pulled back from a step-``delta`` lattice in log time.

    In log time ``u = ln t`` the self-similar field becomes its stationary
    dual scaled by ``exp((h, u))``.  ``side`` selects the log-image of
    ``[0, T]^d`` (``"box"``), of ``U_T`` (``"under"``) or of ``U_T^c``
    (``"over"``).  Points with ``(h, u) < -depth`` carry variance below
    ``exp(-2 depth)`` and are dropped, which bounds the otherwise infinite
    lattice.
    """
    h = np.asarray(h, float)
    L = math.log(T)
    d = len(h)
    if side == "over":
        lo = np.full(d, L) - (L * h.sum()) / h  # (h, u) >= 0 with u_j <= L
    else:
        lo = np.full(d, L) - (L * h.sum() + depth) / h
    # lattice anchored at u = L so that the upper faces are cell faces
    k = [np.arange(math.floor((L - a) / delta + 1e-9), 0, -1) for a in lo]
    axes = [L - delta * (kk - 0.5) for kk in k]
    mesh = np.meshgrid(*axes, indexing="ij")
    u = np.stack([m.ravel() for m in mesh], axis=1)
    s = u @ h
    if side == "box":
        keep = s >= -depth
    elif side == "under":
        keep = (s <= 0) & (s >= -depth)
    elif side == "over":
        keep = s > 0
    else:
        raise GeometryError(f"unknown side {side!r}")
    return np.exp(u[keep])


@dataclass(frozen=True)
class Motion:
    """``x -> sign_flips * x + translation``."""

    translation: tuple
    sign_flips: tuple

    def __post_init__(self):
        object.__setattr__(self, "translation", tuple(float(x) for x in self.translation))
        flips = tuple(int(e) for e in self.sign_flips)
        if any(e not in (-1, 1) for e in flips) or len(flips) != len(self.translation):
            raise GeometryError("sign flips must be +-1, one per axis")
        object.__setattr__(self, "sign_flips", flips)

    @classmethod
    def identity(cls, d: int) -> "Motion":
        return cls((0.0,) * d, (1,) * d)

    def apply(self, x):
        return np.asarray(x, float) * np.asarray(self.sign_flips) + np.asarray(self.translation)

    def inverse(self) -> "Motion":
        e = np.asarray(self.sign_flips)
        return Motion(tuple(-e * np.asarray(self.translation)), self.sign_flips)

    def compose(self, other: "Motion") -> "Motion":
        """``self ∘ other``."""
        e1, e2 = np.asarray(self.sign_flips), np.asarray(other.sign_flips)
        b = e1 * np.asarray(other.translation) + np.asarray(self.translation)
        return Motion(tuple(b), tuple(e1 * e2))


@dataclass(frozen=True)
class LampertiRegion:
    """Image of ``U_T^c`` in the coordinates ``t~_i = h_i ln t_i``.

    ``to_simplex`` is the motion taking the log-time image
    ``V = {u <= T~ e, (h, u) >= 0}`` onto ``T~ S_h``.
    """

    T: float
    h: tuple

    @property
    def T_tilde(self) -> float:
        return math.log(self.T)

    def forward(self, t):
        return np.asarray(self.h) * np.log(np.asarray(t, float))

    def inverse(self, tt):
        return np.exp(np.asarray(tt, float) / np.asarray(self.h))

    def contains(self, tt):
        tt = np.atleast_2d(tt)
        up = self.T_tilde * np.asarray(self.h)
        return (tt.sum(axis=1) >= -1e-12) & np.all(tt <= up + 1e-12, axis=1)

    @property
    def to_simplex(self) -> Motion:
        d = len(self.h)
        return Motion((self.T_tilde,) * d, (-1,) * d)

    def simplex(self) -> SimplexSh:
        return SimplexSh(self.h, self.T_tilde)


def lamperti_map_region(T: float, h: Sequence[float]) -> LampertiRegion:
    if T <= 1:
        raise GeometryError("T must exceed 1 for U_T^c to have interior")
    return LampertiRegion(float(T), tuple(float(x) for x in h))


# --------------------------------------------------------------------------
# tilings


@dataclass
class Tiling:
    target: Region
    tile: Region
    motions: list = field(default_factory=list)
    covered: bool = False
    # motions sit on a grid of slots with ``per_slot`` motions each, in C order
    origin: np.ndarray | None = None
    pitch: np.ndarray | None = None
    counts: tuple | None = None
    per_slot: int = 1

    @property
    def N_T(self) -> int:
        return len(self.motions)

    @property
    def density(self) -> float:
        return self.N_T * self.tile.volume / self.target.volume

    def tile_contains(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        if self.pitch is None:
            hit = np.zeros(len(x), bool)
            for g in self.motions:
                hit |= self.tile.contains(g.inverse().apply(x))
            return hit
        slot = np.floor((x - self.origin) / self.pitch).astype(np.int64)
        slot = np.clip(slot, 0, np.asarray(self.counts) - 1)
        flat = np.ravel_multi_index(tuple(slot.T), self.counts)
        b = np.array([g.translation for g in self.motions])
        e = np.array([g.sign_flips for g in self.motions])
        hit = np.zeros(len(x), bool)
        for j in range(self.per_slot):
            idx = flat * self.per_slot + j
            hit |= self.tile.contains(e[idx] * (x - b[idx]))
        return hit


def build_tiling(G1: Region, G2: Region, T: float = 1.0, delta: float | None = None) -> Tiling:
    """Cover ``T * G1`` by moved copies of ``G2``.

    Supported: boxes by boxes (translations) and boxes by the ``S_h``
    triangle in d = 2 (translations and the flip of both axes, which maps the
    lower-left half of the ``H/h_1 x H/h_2`` rectangle onto its upper-right half).
    Coverage is verified on the cell centres of a ``delta`` lattice
    (default: an eighth of the tile's shortest side).
    """
    if not isinstance(G1, Parallelepiped):
        raise GeometryError(f"unsupported target {type(G1).__name__}")
    target = G1.scaled(T)
    lo, hi = target.bbox()
    motions: list[Motion] = []
    if isinstance(G2, Parallelepiped):
        cell = np.asarray(G2.a)
        base = np.asarray(G2.origin)
        counts = [math.ceil((b - a) / c - 1e-9) for a, b, c in zip(lo, hi, cell)]
        for idx in itertools.product(*(range(n) for n in counts)):
            motions.append(Motion(tuple(lo + np.asarray(idx) * cell - base), (1,) * G1.d))
        pitch, per_slot = cell, 1
    elif isinstance(G2, SimplexSh) and G2.d == 2 and G1.d == 2:
        legs = G2.scale * G2.H / np.asarray(G2.h)
        counts = [math.ceil((b - a) / c - 1e-9) for a, b, c in zip(lo, hi, legs)]
        for idx in itertools.product(*(range(n) for n in counts)):
            corner = lo + np.asarray(idx) * legs
            motions.append(Motion(tuple(corner), (1, 1)))
            motions.append(Motion(tuple(corner + legs), (-1, -1)))
        pitch, per_slot = legs, 2
    else:
        raise GeometryError(f"unsupported tiling pair ({type(G1).__name__}, {type(G2).__name__})")
    tiling = Tiling(target, G2, motions, origin=lo, pitch=pitch, counts=tuple(counts), per_slot=per_slot)
    if delta is None:
        glo, ghi = G2.bbox()
        delta = float(np.min(ghi - glo)) / 8
    check = discretize(target, delta, "inner").points
    if not np.all(tiling.tile_contains(check)):
        raise GeometryError("coverage verification failed")
    tiling.covered = True
    return tiling
