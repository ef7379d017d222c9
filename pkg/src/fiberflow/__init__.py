"""Fibered-Wasserstein gradient flow of entropic optimal transport.

Simulates the minimizing-movement (JKO) discretization of a multiphase
transport flow on [0, 1] with a finite species marginal, verifies its
a-priori estimates, and reproduces the associated asymptotic-convergence
experiments.
"""

from .measures import (Coupling, EnergySpec, Grid1D, MarginalX, SpeciesSet,
                       build_bottleneck_mu, build_equispaced_nu,
                       build_uniform_mu, flipped_coupling, load_coupling,
                       product_coupling, quadratic_spec, save_coupling,
                       table_spec)
from .functionals import (EnergyBreakdown, delta_energy, energy, fibered_w2,
                          w2_1d)
from .jko import (StepParams, StepPlan, StepResult, cp_operator_norm,
                  cp_prox_entropy, jko_step, run_flow)
from .sinkhorn import SinkhornResult, gibbs_residual, sinkhorn_minimize
from .diagnostics import (PressureField, StationarityCase, dissipation,
                          flipped_stationarity_case, identity_coupling,
                          identity_stationarity_case, pressure_solve,
                          stability_compare, stationarity_certificate,
                          velocity_field, vertical_average, weak_residual)
from .runner import (RunConfig, TrajectoryRecord, compare_runs,
                     fit_convergence_rate, run)

__version__ = "0.1.0"
