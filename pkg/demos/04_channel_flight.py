# Molecules in a long circular channel.
#
# Exit times from |z| <= L grow like L^2 for diffusive walls and like L for
# mirror walls.  A slightly rough cell sits in between: its per-collision
# memory makes the walk ballistic until many collisions have passed, so a
# short channel underestimates the asymptotic enhancement.  The unbounded
# mean square displacement is a second estimator of the diffusivity.
import numpy as np

from knudsen_eta import channel_flight as cf
from knudsen_eta.microgeometry import ellipsoid_for_flatness

rng = np.random.default_rng(0)
T, X = cf.flight_TX(cf.sample_cosine_law(rng, 1.0, 1_000_000))
print(f"cosine law: E[T]={T.mean():.4f}  E[X^2]={np.mean(X * X):.4f} (heavy tail, slow convergence)")

Ls = [12.5, 25.0, 50.0]
taus = [cf.run_exit_time_experiment(cf.ChannelSpec(L=L), "diffuse", 4000, seed=2, min_traj=1).mean_exit_time for L in Ls]
print("diffuse exit times", np.round(taus, 1), "exponent", round(cf.fit_exponent(Ls, taus), 3))

cell = ellipsoid_for_flatness(0.02)
ch = cf.ChannelSpec(L=50.0)
d = cf.run_exit_time_experiment(ch, "diffuse", 4000, seed=3, min_traj=1, threads=4)
m = cf.run_exit_time_experiment(ch, cf.CellSource(cell), 4000, seed=4, min_traj=1, threads=4)
e = cf.estimate_eta_mc(m, d, max_rel_se=1.0)
print(f"L/R=50 exit-time eta = {e.eta:.2f} +- {e.stderr:.2f}")

dd = cf.run_unbounded(ch, "diffuse", 2000, 2000, seed=5)
dm = cf.run_unbounded(ch, cf.CellSource(cell), 2000, 2000, seed=6)
rd, rm = cf.msd_estimator(dd), cf.msd_estimator(dm)
print(f"MSD eta = {rm.diffusivity / rd.diffusivity:.1f}  (converged: {rm.converged}, drift {rm.drift:.3f})")
