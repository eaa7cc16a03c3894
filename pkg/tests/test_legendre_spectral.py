import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from knudsen_eta.errors import OutOfRegime, TruncationNotConverged
from knudsen_eta.legendre_spectral import (
    EigenMode,
    all_modes,
    apply_generator,
    compute_C,
    displacement_on_disc,
    eval_eigenfunction,
    flight_moments,
    hypergeometric_terminating,
    poly2d_eval,
    radial_polynomial,
    theta_eta_from_microparams,
    verify_eigenpair,
)
from knudsen_eta.microgeometry import RegimeWarning
from knudsen_eta.quadrature import disc_polar_rule


def test_hypergeometric_examples():
    s = np.linspace(0, 1, 11)
    for k in (0, 3, 17):
        assert np.all(hypergeometric_terminating(0, k, s) == 1.0)
    assert np.allclose(hypergeometric_terminating(1, 0, s), 1 - 2 * s)
    assert np.allclose(hypergeometric_terminating(2, 0, s), 1 - 6 * s + 6 * s**2)
    with pytest.raises(OverflowError):
        hypergeometric_terminating(150, 60, 0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 12), st.integers(0, 12), st.floats(0, 1))
def test_horner_and_jacobi_agree(l, k, s):
    assert hypergeometric_terminating(l, k, s) == pytest.approx(float(radial_polynomial(l, k, s)), abs=1e-9)


def test_radial_polynomial_value_at_zero():
    for l, k in [(0, 0), (5, 3), (35, 35)]:
        assert radial_polynomial(l, k, 0.0) == pytest.approx(1.0, rel=1e-12)


def test_eigenfunction_examples():
    u = np.array([[0.3, 0.4], [0.0, 0.0], [-0.5, 0.1]])
    assert np.allclose(eval_eigenfunction(EigenMode(0, 0), u), 1.0)
    assert np.allclose(eval_eigenfunction(EigenMode(0, 1), u), 1 - 2 * np.sum(u**2, axis=1))
    assert np.allclose(eval_eigenfunction(EigenMode(1, 0, "sin"), u), u[:, 1])
    with pytest.raises(ValueError):
        EigenMode(0, 2, "sin")


def test_sin_cos_orthogonal():
    u1, u2, w = disc_polar_rule(64, 64)
    U = np.column_stack([u1, u2])
    a = eval_eigenfunction(EigenMode(1, 0, "sin"), U)
    b = eval_eigenfunction(EigenMode(1, 0, "cos"), U)
    assert abs(np.dot(w, a * b)) < 1e-10


def test_orthogonality_up_to_ten():
    u1, u2, w = disc_polar_rule(64, 64)
    U = np.column_stack([u1, u2])
    modes = list(all_modes(10, 10))
    Phi = np.array([eval_eigenfunction(m, U) for m in modes])
    G = (Phi * w) @ Phi.T
    d = np.sqrt(np.diag(G))
    assert np.max(np.abs(G / np.outer(d, d) - np.eye(len(modes)))) < 1e-8


@pytest.mark.parametrize("k,l,mu", [(1, 0, 2), (0, 1, 8), (1, 1, 14)])
def test_verified_eigenvalues(k, l, mu):
    res = verify_eigenpair(EigenMode(k, l, "cos"))
    assert res.mu == pytest.approx(mu, abs=1e-12)
    assert res.residual < 1e-12
    # the printed formula gives mu + 1
    assert res.formula == mu + 1
    assert not res.agrees_with_formula


def test_eigen_residuals_up_to_ten():
    for m in all_modes(10, 10):
        residual, mu = verify_eigenpair(m)
        assert residual < 1e-10
        assert mu == m.verified_eigenvalue


def test_verify_eigenpair_with_quadrature():
    q = disc_polar_rule(64, 64)
    res = verify_eigenpair(EigenMode(3, 4, "sin"), quadrature=q)
    assert res.mu == pytest.approx(EigenMode(3, 4).verified_eigenvalue, rel=1e-10)
    assert res.residual < 1e-8


def test_generator_on_polynomial():
    # psi = 1 - 2|u|^2 under Lambda = lam I: L psi = 2 lam (-8)(1 - 2|u|^2)
    psi = np.zeros((3, 3))
    psi[0, 0], psi[2, 0], psi[0, 2] = 1, -2, -2
    lam = 0.17
    Lc = apply_generator(psi, lam * np.eye(2))
    u1, u2 = 0.3, -0.45
    assert poly2d_eval(Lc, u1, u2) == pytest.approx(2 * lam * -8 * (1 - 2 * (u1**2 + u2**2)), rel=1e-12)


def test_generator_anisotropic_against_finite_differences(rng):
    c = rng.standard_normal((4, 4))
    Lam = np.array([[0.3, 0.05], [0.05, 0.1]])
    Lc = apply_generator(c, Lam)
    u = np.array([0.2, -0.3])
    e = 1e-4

    def f(x):
        return poly2d_eval(c, x[0], x[1])

    g = np.array([(f(u + e * d) - f(u - e * d)) / (2 * e) for d in np.eye(2)])
    H = np.array([[(f(u + e * a + e * b) - f(u + e * a - e * b) - f(u - e * a + e * b) + f(u - e * a - e * b)) / (4 * e * e) for b in np.eye(2)] for a in np.eye(2)])
    expected = -4 * g @ (Lam @ u) + 2 * (1 - u @ u) * np.trace(Lam @ H)
    assert poly2d_eval(Lc, *u) == pytest.approx(expected, rel=1e-6)


def test_displacement_examples():
    assert displacement_on_disc([0.0, 0.0]) == 0.0
    u = np.array([[0.3, 0.4], [-0.2, 0.7]])
    v = u * [1, -1]
    assert np.allclose(displacement_on_disc(v), -displacement_on_disc(u))
    # rim with u_tau = 0 is guarded
    assert displacement_on_disc([0.0, 1.0]) == 0.0


def test_flight_moment_oracle():
    m = flight_moments()
    assert m["E_T"] == pytest.approx(2.0, abs=1e-10)
    assert m["E_X"] == pytest.approx(0.0, abs=1e-12)
    assert m["E_X2"] == pytest.approx(8 / 3, rel=1e-9)
    assert m["E_X_ue"] == pytest.approx(2 / 3, rel=1e-10)


def test_displacement_projection_on_first_mode():
    # <X, r sin(theta)> by the smooth-angle oracle vs the polar rule used by compute_C
    acc = compute_C(1, 0)
    m = flight_moments()
    norm_mode = 0.25  # <(r sin)^2> under the normalized disc measure
    i = [j for j, md in enumerate(acc.modes) if (md.k, md.l, md.j) == (1, 0, "sin")][0]
    expected = m["E_X_ue"] / np.sqrt(norm_mode * m["E_X2"])
    assert acc.projections[i] == pytest.approx(expected, rel=1e-4)


@pytest.fixture(scope="module")
def series():
    return compute_C(35, 35)


def test_even_k_modes_vanish(series):
    assert series.max_even_k_projection() < 1e-12
    cos_modes = np.array([m.j == "cos" for m in series.modes])
    assert np.max(np.abs(series.projections[cos_modes])) < 1e-12


def test_partial_sums_monotone(series):
    for conv in ("formula", "verified"):
        assert np.all(series.contributions(conv) >= 0)
        assert np.all(np.diff(series.running[conv]) >= 0)


def test_parseval(series):
    assert series.parseval_sum <= 1 + 1e-8
    assert compute_C(5, 5).parseval_sum < compute_C(15, 15).parseval_sum < series.parseval_sum


def test_series_values_and_conventions(series):
    C = series.C
    # weight on the leading mode (k, l) = (1, 0) is (2/3)^2 / (1/4 * 8/3) = 2/3
    assert series.projections[[i for i, m in enumerate(series.modes) if (m.k, m.l, m.j) == (1, 0, "sin")][0]] ** 2 == pytest.approx(2 / 3, rel=1e-4)
    assert C["verified"] == pytest.approx(0.1812, abs=5e-4)
    assert C["formula"] == pytest.approx(0.1239, abs=5e-4)
    assert C["verified"] > C["formula"]
    assert series.converged("verified") and series.converged("formula")


def test_printed_norm_doubles_C(series):
    printed = compute_C(35, 35, x_norm="printed")
    ratio = series.x_norm_sq / printed.x_norm_sq
    for conv in ("formula", "verified"):
        assert printed.C[conv] == pytest.approx(ratio * series.C[conv], rel=1e-12)


def test_measure_scale_invariance():
    a = compute_C(10, 10)
    b = compute_C(10, 10, measure_scale=7.3)
    for conv in ("formula", "verified"):
        assert b.C[conv] == pytest.approx(a.C[conv], rel=1e-10)


def test_truncation_not_converged():
    with pytest.raises(TruncationNotConverged):
        compute_C(2, 2, strict=True)


def test_series_csv(series, tmp_path):
    path = tmp_path / "c.csv"
    series.to_csv(path)
    rows = path.read_text().splitlines()
    assert rows[0] == "l,B_formula,C_formula,B_verified,C_verified"
    assert len(rows) == 37
    assert float(rows[-1].split(",")[-1]) == pytest.approx(series.C["verified"], rel=1e-15)


def test_theta_eta_examples():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        theta, eta = theta_eta_from_microparams(0.5, 0.06, 0.03)
    assert theta == pytest.approx(1.0) and eta == pytest.approx(1.0)
    with pytest.warns(RegimeWarning):
        theta, eta = theta_eta_from_microparams(1 / 6, 0.247, 0.685)
    assert theta == pytest.approx(0.0601, abs=1e-4)
    assert eta == pytest.approx(32.3, abs=0.1)
    # sphere packing: lam h = sigma^2 / 3
    sigma = 0.2
    theta, _ = theta_eta_from_microparams(1 / 6, 2 * sigma**2, 0.685)
    assert theta / sigma**2 == pytest.approx(0.49, abs=0.01)


def test_theta_eta_regime():
    with pytest.warns(RegimeWarning):
        theta_eta_from_microparams(1 / 6, 0.09, 0.01)
    with pytest.raises(OutOfRegime):
        theta_eta_from_microparams(1 / 6, 0.09, 0.005)


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-3, 1.0), st.floats(1e-4, 0.1), st.floats(0.05, 1.0))
def test_theta_eta_identity(lam, h, C):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            theta, eta = theta_eta_from_microparams(lam, h, C)
        except OutOfRegime:
            assert lam * h / C >= 2
            return
    assert eta * theta + theta == pytest.approx(2.0, rel=1e-12)
