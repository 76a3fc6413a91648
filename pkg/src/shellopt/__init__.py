"""Worst-case elastic shell design under manufacturing noise.

A designer picks a per-face thickness field for a discrete elastic shell;
a test engineer responds with the admissible load maximizing compliance;
the designer minimizes the expected tracking cost of that worst response
while the realized thickness is perturbed by multiplicative noise.
"""

from .bilevel import (QuadraticLowerLevel, max_compliance, optimal_force_set,
                      quad_value, relaxed_worst_case_cost, toy_instance,
                      toy_scale_gap, worst_case_cost)
from .elastic import (ElasticComponents, MaterialField, SPDFactorization,
                      assemble_components, assemble_h, assemble_mass,
                      bending_energy, cauchy_green, dh_du, energy_gradient,
                      face_metric, free_energy, membrane_density, membrane_energy,
                      solve_state, state_operator, total_energy)
from .follower import (BoxConstraints, CylinderConstraints, ForceModel,
                       FollowerResult, build_force_basis, newton_ascent,
                       reduce_compliance, smoothed_objective, solve_follower)
from .leader import (LeaderConfig, NoiseModel, SampleBatch, default_initial_thickness,
                     empirical_risk, evaluate_sample, hypergradient, leader_barrier,
                     sample_perturbation, sgd, simulate_outcomes, tracking_cost,
                     tracking_mask)
from .mesh import (ReferenceQuantities, ShellMesh, build_topology, dihedral_angles,
                   load_obj, make_roof, reference_quantities, save_obj,
                   select_dirichlet, vertex_normals)
from .risk import cvar, expectation, expected_excess, mean_upper_semideviation

__version__ = "0.1.0"
