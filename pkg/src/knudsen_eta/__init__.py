"""Knudsen self-diffusivity enhancement in channels with modeled surface microgeometry.

Three pipelines estimate ``eta = D / D_K``: random-flight Monte Carlo
(:mod:`.channel_flight`), spectral analysis of the discretized scattering
operator (:mod:`.estimation`) and the series over generalized Legendre modes
(:mod:`.legendre_spectral`).  Cells and their micro-parameters live in
:mod:`.microgeometry`, the billiard tracer in :mod:`.cell_scatter`.
"""

from .errors import *  # noqa: F401,F403
from .microgeometry import (
    MicroParams,
    RegimeWarning,
    compute_flatness,
    compute_shape_matrix,
    ellipsoid_for_flatness,
    make_cell,
    roughness_classical,
    sphere_packing_sigma,
)
from .cell_scatter import DiscVelocity, build_transition_matrix, check_operator_approx, sample_scatter, trace_cell
from .legendre_spectral import EigenMode, compute_C, displacement_on_disc, theta_eta_from_microparams, verify_eigenpair
from .estimation import (
    DiscPartition,
    TransitionMatrix,
    eta_key_formula,
    eta_spectral_measure,
    solve_markov_poisson,
    spectral_gap,
)
from .channel_flight import ChannelSpec, estimate_eta_mc, free_flight, run_exit_time_experiment, sample_cosine_law
from .seeding import seed_derivation

__version__ = "0.1.0"
