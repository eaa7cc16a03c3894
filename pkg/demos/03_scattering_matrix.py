# A discretized scattering operator and the enhancement it implies.
#
# Velocities are binned on an equal-area partition of the disc, each bin is
# sampled through the cell, and the Markov-Poisson equation gives eta.  The
# angular resolution matters: a rough cell deflects by about sqrt(h) per
# collision, which the bins must resolve.
import numpy as np

from knudsen_eta import estimation as est
from knudsen_eta.cell_scatter import build_transition_matrix
from knudsen_eta.microgeometry import ellipsoid_for_flatness

cell = ellipsoid_for_flatness(0.02)
for bins in ((12, 12), (24, 24), (24, 48)):
    tm = build_transition_matrix(cell, bins, n_samples=4000, seed=1, threads=4)
    X = est.binned_displacement(tm.partition)
    rep = est.eta_spectral_measure(tm, X)
    print(f"bins={bins}: eta_key={est.eta_key_formula(tm, X):7.2f}  eta_spectral={rep.eta:7.2f}"
          f"  gap={est.spectral_gap(tm):.4f}  symmetry z={tm.symmetry_zscore():.2f}")

# the diffuse operator forgets the incoming velocity: eta = 1, gap = 1
part = est.DiscPartition(24, 24)
Pd = est.diffuse_transition_matrix(part)
print("diffuse:", est.eta_key_formula(Pd, est.binned_displacement(part)), est.spectral_gap(Pd))

# two-state chain: eta = 1 + 2 (1 - 2p) / (2p)
p = 0.1
P = np.array([[1 - p, p], [p, 1 - p]])
print("two-state:", est.eta_key_formula(P, np.array([1.0, -1.0])), 1 + 2 * (1 - 2 * p) / (2 * p))
