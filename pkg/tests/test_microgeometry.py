import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from knudsen_eta.errors import DegenerateFlat, InvalidFamilyParams
from knudsen_eta.microgeometry import (
    GridCell,
    compute_flatness,
    compute_shape_matrix,
    ellipsoid_for_flatness,
    load_grid_csv,
    make_cell,
    roughness_classical,
    save_grid_csv,
    sphere_packing_sigma,
)


def ellipsoid_h(eps):
    # a = b = c = 1: |grad f|^2 peaks at the corners
    return 2 * eps**2 / (1 - 2 * eps**2)


FAMILIES = [
    ("ellipsoid", dict(eps=0.1)),
    ("ellipsoid", dict(a1=1.0, a2=1.0, c1=1.0, c2=2.0, eps=0.05)),
    ("sphere_packing", dict(r_s=1.0, r_m=1.0)),
]


@pytest.mark.parametrize("family,params", FAMILIES)
def test_gradient_matches_finite_differences(family, params, rng):
    cell = make_cell(family, **params)
    x1 = rng.uniform(-0.99 * cell.c1, 0.99 * cell.c1, 100)
    x2 = rng.uniform(-0.99 * cell.c2, 0.99 * cell.c2, 100)
    step = 1e-5 * cell.size
    g1, g2 = cell.gradient(x1, x2)
    fd1 = (cell.height(x1 + step, x2) - cell.height(x1 - step, x2)) / (2 * step)
    fd2 = (cell.height(x1, x2 + step) - cell.height(x1, x2 - step)) / (2 * step)
    scale = np.maximum(np.hypot(g1, g2), 1e-3)
    assert np.max(np.abs(fd1 - g1) / scale) < 1e-6
    assert np.max(np.abs(fd2 - g2) / scale) < 1e-6


@pytest.mark.parametrize("family,params", FAMILIES + [("flat", {})])
def test_relief_below_opening(family, params):
    cell = make_cell(family, **params)
    assert cell.max_height() < cell.top


def test_flat_cell():
    cell = make_cell("flat")
    x = np.linspace(-1, 1, 7)
    assert np.all(cell.height(x, x) == 0)
    assert np.all(np.array(cell.gradient(x, x)) == 0)
    assert compute_flatness(cell) == 0.0
    assert roughness_classical(cell) == (0.0, 0.0)
    with pytest.raises(DegenerateFlat):
        compute_shape_matrix(cell)


def test_ellipsoid_flatness_closed_form():
    cell = make_cell("ellipsoid", a=1, b=1, c=1, eps=0.1)
    h = compute_flatness(cell)
    assert h == pytest.approx(ellipsoid_h(0.1), rel=1e-8)
    # leading order 2 eps^2
    assert abs(h - 0.02) < 10 * 0.1**4


def test_ellipsoid_relief_drop_closed_form():
    eps = 0.1
    cell = make_cell("ellipsoid", a=1, b=1, c=1, eps=eps)
    drop = cell.height(0.0, 0.0) - cell.height(1.0, 0.0)
    expected = (1 / eps) * (1 - np.sqrt(1 - eps**2))
    assert drop == pytest.approx(expected, abs=1e-12)


def test_sphere_packing_geometry():
    cell = make_cell("sphere_packing", r_s=1.0, r_m=1.0)
    assert cell.c1 == cell.c2 == 1.0
    # cap of radius 2 centered below the opening
    x = np.array([0.0, 0.5, 1.0])
    z = cell.height(x, 0 * x)
    assert np.allclose(np.diff(z) + 0, np.diff(np.sqrt(4 - x**2)))


def test_sphere_packing_flatness_and_lambda_h():
    for sigma in (0.1, 0.2, 0.351, 0.5):
        cell = sphere_packing_sigma(sigma)
        h = compute_flatness(cell)
        assert h == pytest.approx(2 * sigma**2 / (1 - 2 * sigma**2), rel=1e-8)
        mp = compute_shape_matrix(cell, h=h)
        assert mp.lambda_h == pytest.approx(sigma**2 / 3, rel=1e-8)
    mp = compute_shape_matrix(sphere_packing_sigma(0.5))
    assert abs(mp.lambda_h - 1 / 12) < 0.5**4


def test_isotropic_ellipsoid_lambda():
    # exact: lambda = (1 - 2 eps^2)/6
    for eps in (0.05, 0.02):
        mp = compute_shape_matrix(make_cell("ellipsoid", eps=eps))
        assert mp.isotropic
        assert abs(mp.lambda1 - 1 / 6) < 1e-3
        assert mp.lam == pytest.approx((1 - 2 * eps**2) / 6, rel=1e-9)


def test_isotropic_ellipsoid_lambda_at_eps_01_exact_value():
    # at eps = 0.1 the finite-h quotient sits 3.3e-3 below the limit 1/6
    mp = compute_shape_matrix(make_cell("ellipsoid", eps=0.1))
    assert mp.lam == pytest.approx((1 - 2 * 0.01) / 6, rel=1e-9)


def test_anisotropic_ellipsoid_closed_form():
    mp = compute_shape_matrix(make_cell("ellipsoid", a1=1, a2=1, c1=1, c2=2, eps=0.05))
    assert not mp.isotropic
    assert mp.lambda1 == pytest.approx(4 / 15, abs=1e-2)
    assert mp.lambda2 == pytest.approx(1 / 15, abs=1e-2)
    # eigenvectors along the axes: the longer cell side carries the larger eigenvalue
    assert mp.Lambda[1, 1] > mp.Lambda[0, 0]
    assert abs(mp.Lambda[0, 1]) < 1e-12


@pytest.mark.parametrize("family,params", FAMILIES)
def test_shape_matrix_invariants(family, params):
    cell = make_cell(family, **params)
    mp = compute_shape_matrix(cell)
    assert np.allclose(mp.A, mp.A.T)
    assert np.all(np.linalg.eigvalsh(mp.A) >= -1e-15)
    assert np.trace(mp.A) <= mp.h
    assert 0 <= np.trace(mp.Lambda) <= 1
    assert mp.lambda1 >= mp.lambda2 >= 0
    assert np.allclose(sorted(np.linalg.eigvalsh(mp.Lambda))[::-1], [mp.lambda1, mp.lambda2])
    assert mp.quadrature_error < 1e-6


def test_flatness_ratio_under_halving_eps():
    h = {e: compute_flatness(make_cell("ellipsoid", eps=e)) for e in (0.2, 0.1, 0.05)}
    assert h[0.1] / h[0.05] == pytest.approx(4, rel=0.05)
    # the 0.2 -> 0.1 ratio carries the O(eps^2) correction of the exact law
    assert h[0.2] / h[0.1] == pytest.approx(ellipsoid_h(0.2) / ellipsoid_h(0.1), rel=1e-8)
    hs = {s: compute_flatness(sphere_packing_sigma(s)) for s in (0.1, 0.05)}
    assert hs[0.1] / hs[0.05] == pytest.approx(4, rel=0.05)


def test_ellipsoid_for_flatness_roundtrip():
    for h in (0.04, 0.02, 0.0025):
        assert compute_flatness(ellipsoid_for_flatness(h)) == pytest.approx(h, rel=1e-8)


def test_lambda_convergence_anisotropic():
    mp = compute_shape_matrix(make_cell("ellipsoid", a1=1, a2=1, c1=1, c2=2, eps=0.05))
    assert np.max(np.abs(np.diag(mp.Lambda) - [1 / 15, 4 / 15])) < 1e-2


def test_roughness_against_fine_midpoint_oracle():
    cell = make_cell("ellipsoid", eps=0.1)
    Ra, Rms = roughness_classical(cell)
    m = 1024
    x = -1 + (np.arange(m) + 0.5) * 2 / m
    X, Y = np.meshgrid(x, x, indexing="ij")
    f = cell.height(X, Y)
    dev = f - f.mean()
    assert Ra == pytest.approx(np.mean(np.abs(dev)), rel=1e-4)
    assert Rms == pytest.approx(np.sqrt(np.mean(dev**2)), rel=1e-4)


def test_roughness_and_flatness_scaling(tmp_path):
    base = make_cell("ellipsoid", eps=0.1)
    x = np.linspace(-1, 1, 129)
    X, Y = np.meshgrid(x, x, indexing="ij")
    heights = base.height(X, Y)
    g = GridCell(1.0, 1.0, heights)
    Ra, Rms = roughness_classical(g, n=256)
    h = compute_flatness(g)
    for s in (0.5, 2.0):
        gs = GridCell(1.0, 1.0, s * heights)
        Ra_s, Rms_s = roughness_classical(gs, n=256)
        assert Ra_s == pytest.approx(s * Ra, rel=1e-9)
        assert Rms_s == pytest.approx(s * Rms, rel=1e-9)
        assert compute_flatness(gs) == pytest.approx(s**2 * h, rel=1e-6)
    # constant offset leaves roughness unchanged
    assert roughness_classical(GridCell(1.0, 1.0, heights + 3.0), n=256)[0] == pytest.approx(Ra, rel=1e-9)


def test_grid_csv_roundtrip(tmp_path):
    x = np.linspace(-1, 1, 33)
    X, Y = np.meshgrid(x, x, indexing="ij")
    heights = 0.05 * np.cos(np.pi * X) * np.cos(np.pi * Y)
    path = tmp_path / "relief.csv"
    save_grid_csv(path, 1.0, 1.0, heights)
    cell = load_grid_csv(path)
    assert cell.c1 == 1.0
    assert np.allclose(cell.height(X, Y), heights, atol=1e-12)
    assert make_cell("grid", path=str(path)).height(0.0, 0.0) == pytest.approx(0.05)


@pytest.mark.parametrize(
    "family,params",
    [("ellipsoid", dict(eps=-0.1)), ("ellipsoid", dict(eps=0.9)), ("sphere_packing", dict(r_s=0, r_m=1)), ("torus", {}), ("ellipsoid", {})],
)
def test_invalid_family_params(family, params):
    with pytest.raises(InvalidFamilyParams):
        make_cell(family, **params)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 0.3))
def test_trace_A_bounded_by_h(eps):
    cell = make_cell("ellipsoid", eps=eps)
    mp = compute_shape_matrix(cell, n=48)
    assert np.trace(mp.A) <= mp.h * (1 + 1e-12)
