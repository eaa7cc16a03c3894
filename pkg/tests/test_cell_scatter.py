import numpy as np
import pytest
from scipy import stats

from knudsen_eta.cell_scatter import (
    DiscVelocity,
    build_transition_matrix,
    check_operator_approx,
    diffuse_scatter,
    lift_incoming,
    ray_surface_intersection,
    sample_scatter,
    scatter_batch,
    trace_cell,
    trace_rays,
)
from knudsen_eta.errors import MaxBounceExceeded
from knudsen_eta.estimation import DiscPartition
from knudsen_eta.microgeometry import compute_flatness, ellipsoid_for_flatness, make_cell, sphere_packing_sigma

CELLS = {
    "flat": lambda: make_cell("flat"),
    "ellipsoid": lambda: make_cell("ellipsoid", eps=0.1),
    "sphere": lambda: sphere_packing_sigma(0.35),
}


def ellipsoid_oracle(cell, origin, d):
    """Independent closed-form hit on (x/A1)^2 + (y/A2)^2 + ((z + K)/B)^2 = 1."""
    A1, A2, B, K = cell.A1, cell.A2, cell.B, cell.K
    o = np.array(origin, float) + np.array([0, 0, K])
    D = np.diag([1 / A1**2, 1 / A2**2, 1 / B**2])
    a = d @ D @ d
    b = 2 * o @ D @ d
    c = o @ D @ o - 1
    t = (-b - np.sqrt(b * b - 4 * a * c)) / (2 * a)
    p = o + t * d
    n = D @ p
    n /= np.linalg.norm(n)
    return t, p - np.array([0, 0, K]), n


def test_disc_velocity_invariants():
    v = DiscVelocity([0.6, 0.0])
    assert v.normal_speed == pytest.approx(0.8)
    assert np.allclose(v.lift(False), [0.6, 0.0, -0.8])
    with pytest.raises(ValueError):
        DiscVelocity([1.0, 0.5])


def test_flat_normal_incidence():
    out = trace_cell(make_cell("flat"), DiscVelocity([0.0, 0.0]), [0.3, -0.2])
    assert out.bounces == 1
    assert np.allclose(out.V.u, 0.0)


def test_flat_oblique_keeps_tangential():
    out = trace_cell(make_cell("flat"), DiscVelocity([0.5, -0.3], rho=2.0), [0.0, 0.0])
    assert out.bounces == 1
    assert np.allclose(out.V.u, [0.5, -0.3], atol=1e-15)


def test_ellipsoid_single_reflection_matches_oracle():
    cell = make_cell("ellipsoid", eps=0.1)
    r = np.array([0.31, -0.17])
    u = np.array([0.12, 0.05])
    v = lift_incoming(u)[0]
    t, p, n = ellipsoid_oracle(cell, [r[0], r[1], cell.top], v)
    V = v - 2 * (v @ n) * n
    out = trace_cell(cell, DiscVelocity(u), r)
    assert out.bounces == 1
    assert np.allclose(out.V.u, V[:2], atol=1e-10)


def test_ray_surface_intersection_examples(rng):
    flat = make_cell("flat")
    p, n = ray_surface_intersection(flat, [0.2, 0.1, 1.0], [0, 0, -1])
    assert np.allclose(p, [0.2, 0.1, 0.0]) and np.allclose(n, [0, 0, 1])

    cap = make_cell("sphere_packing", r_s=1.0, r_m=1.0)
    p, n = ray_surface_intersection(cap, [0.0, 0.0, 5.0], [0, 0, -1])
    assert p[2] == pytest.approx(cap.height(0.0, 0.0), abs=1e-14)
    assert np.allclose(n, [0, 0, 1])

    cell = make_cell("ellipsoid", eps=0.1)
    for _ in range(20):
        o = np.array([*rng.uniform(-0.5, 0.5, 2), cell.top])
        d = np.array([*rng.uniform(-0.2, 0.2, 2), -1.0])
        pa, na = ray_surface_intersection(cell, o, d, method="analytic")
        pn, nn = ray_surface_intersection(cell, o, d, method="numeric")
        assert np.allclose(pa, pn, atol=1e-10)
        assert np.allclose(na, nn, atol=1e-9)
        _, po, no = ellipsoid_oracle(cell, o, d / np.linalg.norm(d))
        assert np.allclose(pa, po, atol=1e-10)
    assert ray_surface_intersection(cell, [0, 0, cell.top], [0, 0, 1]) is None


@pytest.mark.parametrize("name", list(CELLS))
def test_speed_conservation_and_reversibility(name, rng):
    cell = CELLS[name]()
    n = 100
    r = np.column_stack([rng.uniform(-cell.c1, cell.c1, n), rng.uniform(-cell.c2, cell.c2, n)])
    u = diffuse_scatter(np.zeros((n, 2)), rng) * 0.95
    res = trace_rays(cell, r, lift_incoming(u))
    assert res.ok.all()
    speed = np.hypot(np.hypot(res.U[:, 0], res.U[:, 1]), res.normal)
    assert np.allclose(speed, 1.0, rtol=1e-12, atol=0)
    assert np.all(res.normal > 0)
    back = trace_rays(cell, res.exit_point, np.column_stack([-res.U, -res.normal]))
    assert back.ok.all()
    assert np.max(np.abs(back.exit_point - r)) < 1e-8 * cell.size
    assert np.allclose(back.U, -u, atol=1e-9)


def test_bounce_cap():
    with pytest.raises(MaxBounceExceeded):
        trace_cell(make_cell("flat"), DiscVelocity([0.1, 0.1]), [0.0, 0.0], max_bounces=0)


def test_sample_scatter_flat_is_deterministic(rng):
    v = DiscVelocity([0.3, 0.4])
    for _ in range(5):
        assert np.allclose(sample_scatter(make_cell("flat"), v, rng).u, v.u)


def test_near_normal_deviation_quantile(rng):
    cell = make_cell("ellipsoid", eps=0.1)
    h = compute_flatness(cell)
    u = np.full((20000, 2), 0.01)
    U = scatter_batch(cell, u, rng)
    dev = np.linalg.norm(U - u, axis=1)
    assert np.quantile(dev, 0.99) <= 3 * np.sqrt(h)


@pytest.mark.parametrize("name", ["ellipsoid", "sphere"])
def test_cosine_law_stationary_small(name, rng):
    cell = CELLS[name]()
    part = DiscPartition(10, 10)
    u = diffuse_scatter(np.zeros((200_000, 2)), rng)
    U = scatter_batch(cell, u, rng)
    assert np.all(np.einsum("ij,ij->i", U, U) <= 1.0)
    counts = np.bincount(part.bin_of(U), minlength=100)
    assert stats.chisquare(counts).pvalue > 0.01


def test_flat_transition_matrix_is_identity():
    tm = build_transition_matrix(make_cell("flat"), (6, 6), n_samples=500, seed=3)
    assert np.array_equal(tm.P, np.eye(36))


def test_diffuse_transition_matrix_rows_uniform():
    tm = build_transition_matrix(diffuse_scatter, (4, 4), n_samples=20000, seed=3)
    assert np.allclose(tm.P.sum(axis=1), 1.0, atol=1e-12)
    assert np.max(np.abs(tm.P - 1 / 16)) < 5 * np.sqrt((1 / 16) * (15 / 16) / 20000)


def test_transition_matrix_threads_identical():
    cell = make_cell("ellipsoid", eps=0.1)
    a = build_transition_matrix(cell, (6, 6), n_samples=2000, seed=9, threads=1, chunk=5000)
    b = build_transition_matrix(cell, (6, 6), n_samples=2000, seed=9, threads=4, chunk=5000)
    assert np.array_equal(a.P, b.P)


def test_transition_matrix_detailed_balance():
    cell = make_cell("ellipsoid", eps=0.1)
    tm = build_transition_matrix(cell, (24, 24), n_samples=10_000, seed=11)
    assert tm.symmetry_zscore() < 5.0
    assert tm.meta["failures"] == 0


def test_operator_check_constant_function():
    psi = np.array([[1.0]])
    oc = check_operator_approx(ellipsoid_for_flatness, psi, [0.3, 0.2], [0.04, 0.01], n_quad=64)
    assert all(r.residual < 1e-12 for r in oc.rows)


def test_operator_check_order():
    psi = np.zeros((3, 3))
    psi[0, 0], psi[2, 0], psi[0, 2] = 1, -2, -2
    oc = check_operator_approx(ellipsoid_for_flatness, psi, [0.3, 0.2], [0.04, 0.01, 0.0025], n_quad=128)
    assert oc.slope >= 0.4
    # generator value at u: 2 lam (-8)(1 - 2|u|^2)
    row = oc.rows[-1]
    lam = np.trace(row.A) / 2 / row.h
    assert row.l_psi == pytest.approx(2 * lam * -8 * (1 - 2 * 0.13), rel=1e-10)


def test_operator_check_preconditions():
    psi = np.array([[1.0]])
    with pytest.raises(ValueError):
        check_operator_approx(ellipsoid_for_flatness, psi, [0.9, 0.0], [0.01])
    with pytest.raises(ValueError):
        check_operator_approx(ellipsoid_for_flatness, psi, [0.1, 0.0], [0.1])
