import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from persistlab.geometry import (
    UT,
    Cube,
    EmptyLattice,
    GeometryError,
    Motion,
    Parallelepiped,
    SimplexSh,
    UTc,
    build_tiling,
    checkerboard,
    discretize,
    disk,
    lamperti_map_region,
    log_lattice,
    regularity_gap,
)


def test_unit_square_sixteen_points():
    lat = discretize(Cube(1.0, 2), 0.25, "inner")
    assert lat.count == 16
    assert np.allclose(np.unique(lat.points[:, 0]), [0.125, 0.375, 0.625, 0.875])


def test_round_off_does_not_drop_cells():
    assert discretize(Cube(2.9999999999999996, 2), 0.25).count == 144


def test_disk_gap():
    inner = discretize(disk(), 0.01, "inner").measure
    outer = discretize(disk(), 0.01, "outer").measure
    assert inner <= math.pi <= outer
    assert outer - inner <= 0.1


@pytest.mark.parametrize(
    "G",
    [Cube(1.0, 2), Parallelepiped((2.0, 0.5)), SimplexSh((0.5, 0.5)), SimplexSh((0.25, 0.75)), UT(5.0, (0.5, 0.5)), UTc(5.0, (0.5, 0.5))],
)
@pytest.mark.parametrize("delta", [0.2, 0.05])
def test_volume_bracket(G, delta):
    inner = discretize(G, delta, "inner").measure
    outer = discretize(G, delta, "outer").measure
    assert inner <= G.volume + 1e-12
    assert G.volume <= outer + 1e-12


def test_simplex_volume():
    assert SimplexSh((0.5, 0.5)).volume == pytest.approx(2.0)
    assert SimplexSh((0.25, 0.75)).volume == pytest.approx(1.0 / (2 * 0.25 * 0.75))


def test_simplex_gap_is_order_delta():
    rep = regularity_gap(SimplexSh((0.5, 0.5)), [0.1, 0.05, 0.025])
    assert rep.regular
    ratios = np.array(rep.gaps[1:]) / np.array(rep.gaps[:-1])
    assert np.allclose(ratios, 0.5, atol=0.05)


def test_cube_gap_vanishes():
    rep = regularity_gap(Cube(1.0, 2), [0.5, 0.25, 0.125])
    assert rep.regular and max(rep.gaps) == 0.0


def test_checkerboard_irregular():
    rep = regularity_gap(checkerboard(0.05), [0.2, 0.1, 0.05, 0.025])
    assert not rep.regular


def test_empty_lattice():
    with pytest.raises(EmptyLattice):
        discretize(Cube(0.1, 2), 0.5, "inner")


def test_min_coord_drops_axis_slab():
    lat = discretize(Cube(1.0, 2), 0.1, "inner", min_coord=0.1)
    assert lat.count == 81


def test_ut_volume_closed_form():
    # area of {t1 t2 <= 1} in [0, T]^2 is 1 + 2 ln T
    T = math.e**2
    assert UT(T, (0.5, 0.5)).volume == pytest.approx(5.0)
    assert UTc(T, (0.5, 0.5)).volume == pytest.approx(T**2 - 5.0)


def test_lattice_csv(tmp_path):
    lat = discretize(Cube(1.0, 2), 0.5)
    p = tmp_path / "lat.csv"
    lat.to_csv(p)
    rows = p.read_text().strip().splitlines()
    assert rows[0] == "x0,x1" and len(rows) == 5


# Lamperti coordinates -------------------------------------------------------


def test_lamperti_point():
    R = lamperti_map_region(math.e**4, (0.5, 0.5))
    tt = R.forward([math.e**2, math.e**2])
    assert np.allclose(tt, [1.0, 1.0], atol=1e-15)
    assert R.contains(tt)[0]


def test_lamperti_boundary_and_vertex():
    T = 20.0
    R = lamperti_map_region(T, (0.3, 0.7))
    t1 = np.array([2.0, 5.0])
    t = np.array([t1[0], t1[0] ** (-0.3 / 0.7)])  # on prod t_i^{h_i} = 1
    assert R.forward(t).sum() == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(R.forward([T, T]), R.T_tilde * np.array([0.3, 0.7]))


@given(st.lists(st.floats(0.01, 100), min_size=2, max_size=2))
def test_lamperti_round_trip(t):
    R = lamperti_map_region(50.0, (0.4, 0.6))
    assert np.allclose(R.inverse(R.forward(t)), t, rtol=1e-12)


def test_lamperti_needs_T_above_one():
    with pytest.raises(GeometryError):
        lamperti_map_region(1.0, (0.5, 0.5))


def test_log_image_maps_onto_simplex():
    # V = {u <= T~ e, (h, u) >= 0} is carried onto T~ S_h by u -> -u + T~ e
    T, h = 30.0, (0.5, 0.5)
    R = lamperti_map_region(T, h)
    L = R.T_tilde
    rng = np.random.default_rng(1)
    u = rng.uniform(-L, L, (2000, 2))
    inV = (u @ np.array(h) >= 0) & np.all(u <= L, axis=1)
    assert np.array_equal(R.simplex().contains(R.to_simplex.apply(u)), inV)


def test_log_lattice_sides():
    box = log_lattice(64.0, (0.5, 0.5), 0.25, 2.0, "box")
    under = log_lattice(64.0, (0.5, 0.5), 0.25, 2.0, "under")
    over = log_lattice(64.0, (0.5, 0.5), 0.25, 2.0, "over")
    assert len(under) + len(over) == len(box)
    assert np.all(box <= 64.0) and np.all(box > 0)
    assert np.all(np.prod(np.sqrt(over), axis=1) > 1)


# motions and tilings --------------------------------------------------------


@given(
    b=st.tuples(st.floats(-5, 5), st.floats(-5, 5)),
    e=st.tuples(st.sampled_from([-1, 1]), st.sampled_from([-1, 1])),
    b2=st.tuples(st.floats(-5, 5), st.floats(-5, 5)),
    e2=st.tuples(st.sampled_from([-1, 1]), st.sampled_from([-1, 1])),
)
def test_motion_group(b, e, b2, e2):
    g, g2 = Motion(b, e), Motion(b2, e2)
    x = discretize(Cube(1.0, 2), 0.25).points
    assert np.allclose(g.inverse().apply(g.apply(x)), x, atol=1e-12)
    assert np.allclose(g.compose(g2).apply(x), g.apply(g2.apply(x)), atol=1e-12)


def test_motion_rejects_bad_flip():
    with pytest.raises(GeometryError):
        Motion((0.0,), (2,))


def test_tiling_unit_squares():
    t = build_tiling(Cube(1.0, 2), Cube(1.0, 2), T=7)
    assert t.N_T == 49 and t.density == 1.0 and t.covered


def test_tiling_simplex_pair():
    h = (0.5, 0.5)
    S = SimplexSh(h)
    rect = Parallelepiped(tuple(S.H / np.asarray(h)))
    t = build_tiling(rect, S, T=1)
    assert t.N_T == 2 and t.density == pytest.approx(1.0)


def test_tiling_parallelepiped():
    t = build_tiling(Cube(1.0, 2), Parallelepiped((0.5, 1 / 3)), T=1)
    assert t.N_T == 6 and t.density == pytest.approx(1.0)


@pytest.mark.parametrize("T", [10, 20, 40])
def test_tiling_density_tends_to_one(T):
    t = build_tiling(Cube(1.0, 2), Parallelepiped((0.7, 0.3)), T=T)
    assert 1.0 <= t.density <= 1.0 + 2 * (0.7 + 0.3) / T + 1e-9


def test_tiling_unsupported():
    with pytest.raises(GeometryError):
        build_tiling(disk(), Cube(1.0, 2))
