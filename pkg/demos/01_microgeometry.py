# Surface cells and their signature numbers.
#
# A cell is one periodic tile of the effective relief.  Two numbers summarize
# it for transport purposes: the flatness h (largest squared slope) and the
# shape matrix Lambda (average tangential-normal outer product divided by h).
import warnings

import numpy as np

from knudsen_eta import compute_flatness, compute_shape_matrix, make_cell, roughness_classical, sphere_packing_sigma

# polished ellipsoid caps: h grows like 2 eps^2, lambda stays near 1/6
for eps in (0.2, 0.1, 0.05, 0.025):
    cell = make_cell("ellipsoid", eps=eps)
    h = compute_flatness(cell)
    mp = compute_shape_matrix(cell, h=h)
    Ra, Rms = roughness_classical(cell)
    print(f"ellipsoid eps={eps:<6} h={h:.5f}  2eps^2={2 * eps**2:.5f}  lambda={mp.lam:.5f}  Ra={Ra:.2e}  Rms={Rms:.2e}")

# stretching the cell along x2 splits the shape eigenvalues
mp = compute_shape_matrix(make_cell("ellipsoid", a1=1, a2=1, c1=1, c2=2, eps=0.05))
print("anisotropic cell, Lambda =\n", np.round(mp.Lambda, 4), "\nisotropic:", mp.isotropic)

# packed spheres seen by a molecule of finite radius: lambda h tracks sigma^2/3
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    for sigma in (0.1, 0.2, 0.35, 0.5):
        cell = sphere_packing_sigma(sigma)
        mp = compute_shape_matrix(cell, h=compute_flatness(cell))
        print(f"sphere packing sigma={sigma:<5} h={mp.h:.4f}  lambda*h={mp.lambda_h:.5f}  sigma^2/3={sigma**2 / 3:.5f}")
