# The constant C of the circular channel.
#
# C collects the displacement function's projections on the eigenmodes of
# the disc Legendre operator.  The table shows where the weight sits and how
# the two eigenvalue conventions and two normalizations of X change the sum.
from knudsen_eta import legendre_spectral as ls

acc = ls.compute_C(35, 35)
print(f"|X|^2 used: {acc.x_norm_sq:.6f} (printed value {ls.X_NORM_SQ_PRINTED:.6f})")
print(" l   B_l/C (verified)   partial C")
for row in acc.to_rows()[:8]:
    print(f"{row['l']:2d}   {row['B_verified'] / acc.C['verified']:.3e}          {row['C_verified']:.6f}")
print("Parseval sum:", round(acc.parseval_sum, 4))

for x_norm in ("oracle", "printed"):
    a = ls.compute_C(35, 35, x_norm=x_norm)
    print(f"x_norm={x_norm:8s} C_formula={a.C['formula']:.5f}  C_verified={a.C['verified']:.5f}")

# a direct check that the radial polynomials are eigenfunctions
for mode in ls.all_modes(2, 2):
    chk = ls.verify_eigenpair(mode)
    print(mode, "residual", chk.residual, "eigenvalue", chk.mu, "formula", mode.formula_eigenvalue)

# enhancement from micro-parameters: theta = lambda h / C, eta = 2/theta - 1
theta, eta = ls.theta_eta_from_microparams(1 / 6, 0.02, acc.C["verified"])
print(f"h=0.02, lambda=1/6: theta={theta:.5f}  eta={eta:.2f}")
