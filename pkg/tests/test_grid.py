import io

import numpy as np
import pytest

from rvc.grid import (
    EvalStats,
    Grid,
    ScalarField,
    export_slice_csv,
    fill_upwind,
    gradient_upwind,
    interpolate,
    read_field,
    write_field,
)


def grid1d(lo=0.0, hi=1.0, n=2, periodic=False):
    # helper for tests that want fewer than 3 nodes conceptually; the class
    # enforces >= 3, so callers pass real sizes
    return Grid(lo=[lo], hi=[hi], shape=(n,), periodic=(periodic,))


# === construction ===========================================================

def test_spacing_non_periodic():
    g = Grid(lo=[0.0], hi=[1.0], shape=(3,), periodic=(False,))
    assert g.spacing[0] == pytest.approx(0.5)
    assert np.allclose(g.axis(0), [0.0, 0.5, 1.0])


def test_spacing_periodic_excludes_endpoint():
    g = Grid(lo=[-np.pi], hi=[np.pi], shape=(4,), periodic=(True,))
    assert g.spacing[0] == pytest.approx(np.pi / 2)
    assert np.allclose(g.axis(0), [-np.pi, -np.pi / 2, 0.0, np.pi / 2])
    assert g.axis(0).max() < np.pi


def test_shape_minimum_enforced():
    with pytest.raises(ValueError):
        Grid(lo=[0.0], hi=[1.0], shape=(2,), periodic=(False,))


def test_bad_bounds_rejected():
    with pytest.raises(ValueError):
        Grid(lo=[1.0], hi=[0.0], shape=(5,), periodic=(False,))
    with pytest.raises(ValueError):
        Grid(lo=[0.0, 0.0], hi=[1.0], shape=(5,), periodic=(False,))


def test_grid_arrays_read_only():
    g = Grid(lo=[0.0], hi=[1.0], shape=(5,), periodic=(False,))
    with pytest.raises(ValueError):
        g.lo[0] = 3.0
    with pytest.raises(ValueError):
        g.axis(0)[0] = 3.0


def test_point_and_range_check():
    g = Grid(lo=[0.0, -1.0], hi=[1.0, 1.0], shape=(5, 3), periodic=(False, False))
    assert np.allclose(g.point((4, 0)), [1.0, -1.0])
    with pytest.raises(ValueError):
        g.point((5, 0))


# === interpolation ==========================================================

def test_interpolate_midpoint():
    # hand value: nodes 0 and 1 carry 0 and 2; x=0.25 in a 2-cell grid
    # [0, 0.5, 1] with values [0, 1, 2] interpolates linearly to 0.5
    g = Grid(lo=[0.0], hi=[1.0], shape=(3,), periodic=(False,))
    f = ScalarField(g, np.array([0.0, 1.0, 2.0]))
    assert interpolate(f, [0.25]) == pytest.approx(0.5)


def test_interpolate_exact_at_nodes():
    rng = np.random.default_rng(7)
    g = Grid(lo=[-2.0, 0.0], hi=[2.0, 3.0], shape=(9, 7), periodic=(False, False))
    f = ScalarField(g, rng.normal(size=(9, 7)))
    for i in range(9):
        for j in range(7):
            x = g.point((i, j))
            assert interpolate(f, x) == f.values[i, j]


def test_interpolate_periodic_wrap():
    # query at hi on a periodic axis wraps to lo
    g = Grid(lo=[-np.pi], hi=[np.pi], shape=(4,), periodic=(True,))
    f = ScalarField(g, np.array([1.0, 2.0, 3.0, 4.0]))
    assert interpolate(f, [np.pi]) == pytest.approx(1.0)
    # between the last node and the seam: blend of 4 and 1
    x = np.pi / 2 + 0.5 * (np.pi / 2)
    assert interpolate(f, [x]) == pytest.approx(2.5)


def test_interpolate_affine_reproduction():
    # multilinear interpolation reproduces affine functions anywhere inside
    rng = np.random.default_rng(21)
    g = Grid(lo=[0.0, -1.0, 2.0], hi=[2.0, 1.0, 5.0], shape=(5, 6, 7),
             periodic=(False, False, False))
    coef = rng.normal(size=3)
    off = 0.7
    mesh = np.meshgrid(*[g.axis(d) for d in range(3)], indexing="ij")
    vals = off + sum(c * m for c, m in zip(coef, mesh))
    f = ScalarField(g, vals)
    for _ in range(200):
        x = rng.uniform(g.lo, g.hi)
        assert interpolate(f, x) == pytest.approx(off + coef @ x, abs=1e-12)


def test_interpolate_clamp_flags():
    g = Grid(lo=[0.0], hi=[1.0], shape=(5,), periodic=(False,))
    f = ScalarField(g, np.arange(5.0))
    stats = EvalStats()
    assert interpolate(f, [2.0], stats) == pytest.approx(4.0)
    assert interpolate(f, [-1.0], stats) == pytest.approx(0.0)
    assert stats.clamped_queries == 2
    # tiny overshoot is treated as a boundary hit, not a clamp
    assert interpolate(f, [1.0 + 1e-12], stats) == pytest.approx(4.0)
    assert stats.clamped_queries == 2


# === one-sided differences ==================================================

def test_gradient_upwind_interior():
    g = Grid(lo=[0.0], hi=[2.0], shape=(3,), periodic=(False,))
    f = ScalarField(g, np.array([0.0, 0.0, 1.0]))
    left, right = gradient_upwind(f, (1,))
    assert left[0] == pytest.approx(0.0)
    assert right[0] == pytest.approx(1.0)


def test_gradient_upwind_boundary_copies_interior():
    g = Grid(lo=[0.0], hi=[3.0], shape=(4,), periodic=(False,))
    f = ScalarField(g, np.array([0.0, 1.0, 3.0, 6.0]))
    left, right = gradient_upwind(f, (0,))
    assert left[0] == pytest.approx(1.0)   # ghost copy of the first interior difference
    assert right[0] == pytest.approx(1.0)
    left, right = gradient_upwind(f, (3,))
    assert left[0] == pytest.approx(3.0)
    assert right[0] == pytest.approx(3.0)  # ghost copy on the high side


def test_gradient_upwind_periodic_seam():
    g = Grid(lo=[0.0], hi=[4.0], shape=(4,), periodic=(True,))
    f = ScalarField(g, np.array([0.0, 1.0, 2.0, 3.0]))
    left, right = gradient_upwind(f, (0,))
    assert left[0] == pytest.approx((0.0 - 3.0) / 1.0)
    assert right[0] == pytest.approx(1.0)
    left, right = gradient_upwind(f, (3,))
    assert right[0] == pytest.approx((0.0 - 3.0) / 1.0)


def test_fill_upwind_matches_pointwise():
    rng = np.random.default_rng(3)
    g = Grid(lo=[0.0, -1.0], hi=[1.0, 1.0], shape=(6, 5), periodic=(False, True))
    f = ScalarField(g, rng.normal(size=(6, 5)))
    for d in range(2):
        dm = np.empty_like(f.values)
        dp = np.empty_like(f.values)
        fill_upwind(f.values, g, d, dm, dp)
        for i in range(6):
            for j in range(5):
                left, right = gradient_upwind(f, (i, j))
                assert dm[i, j] == pytest.approx(left[d], abs=1e-13)
                assert dp[i, j] == pytest.approx(right[d], abs=1e-13)


# === binary round trip ======================================================

def test_field_binary_round_trip():
    rng = np.random.default_rng(11)
    g = Grid(lo=[0.0, -2.0], hi=[1.0, 2.0], shape=(4, 5), periodic=(False, True))
    f = ScalarField(g, rng.normal(size=(4, 5)))
    buf = io.BytesIO()
    write_field(f, buf)
    buf.seek(0)
    f2 = read_field(buf)
    assert f2.grid.compatible(g)
    assert np.array_equal(f2.values, f.values)
    # bitwise identical when re-serialized
    buf2 = io.BytesIO()
    write_field(f2, buf2)
    assert buf.getvalue() == buf2.getvalue()


def test_field_read_rejects_bad_magic():
    g = Grid(lo=[0.0], hi=[1.0], shape=(3,), periodic=(False,))
    f = ScalarField(g, np.zeros(3))
    buf = io.BytesIO()
    write_field(f, buf)
    raw = bytearray(buf.getvalue())
    raw[0] = ord("X")
    with pytest.raises(ValueError):
        read_field(io.BytesIO(bytes(raw)))


def test_field_read_rejects_non_finite():
    g = Grid(lo=[0.0], hi=[1.0], shape=(3,), periodic=(False,))
    f = ScalarField(g, np.zeros(3))
    buf = io.BytesIO()
    write_field(f, buf)
    raw = bytearray(buf.getvalue())
    raw[-8:] = np.array([np.nan]).astype("<f8").tobytes()
    with pytest.raises(ValueError):
        read_field(io.BytesIO(bytes(raw)))


def test_field_read_rejects_truncation():
    g = Grid(lo=[0.0], hi=[1.0], shape=(3,), periodic=(False,))
    f = ScalarField(g, np.zeros(3))
    buf = io.BytesIO()
    write_field(f, buf)
    with pytest.raises(ValueError):
        read_field(io.BytesIO(buf.getvalue()[:-4]))


# === csv slice ==============================================================

def test_export_slice_csv(tmp_path):
    g = Grid(lo=[0.0, 0.0, 0.0], hi=[1.0, 1.0, 1.0], shape=(3, 3, 3),
             periodic=(False, False, False))
    vals = np.arange(27.0).reshape(3, 3, 3)
    f = ScalarField(g, vals)
    out = tmp_path / "slice.csv"
    meta = export_slice_csv(f, {2: 0.49}, out)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "x0,x1,value"
    assert len(lines) == 1 + 9
    assert meta["fixed"][2] == pytest.approx(0.5)  # snapped to nearest node
    first = [float(t) for t in lines[1].split(",")]
    assert first == [0.0, 0.0, vals[0, 0, 1]]


def test_export_slice_requires_two_free_axes(tmp_path):
    g = Grid(lo=[0.0, 0.0], hi=[1.0, 1.0], shape=(3, 3), periodic=(False, False))
    f = ScalarField(g, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        export_slice_csv(f, {0: 0.0}, tmp_path / "x.csv")
