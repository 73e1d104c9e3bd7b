"""Robust multi-period planning of fast-charging stations on coupled
transport and distribution networks under adoption feedback."""

from .diffusion import (AdoptionCoefficients, AmbiguityParams, DiffusionParams,
                        adoption_coefficients, ambiguity_constraint_rows,
                        convenience_level, exact_adoption_recursion, second_moment_bound)
from .evaluate import (EvaluationReport, TestSet, diffusion_trajectory, empirical_test_set,
                       fixed_plan_value, random_test_set, simulate_plan, vd3rs,
                       worst_case_test_set)
from .instance import Instance, assemble_instance
from .linmodel import LinearModel, VariableRegistry
from .model import (CostParams, Planning, REGISTRY, TechParams, capital_recovery_factor,
                    mccormick_envelope)
from .network import (CouplingMap, CoverageSets, DistributionLine, DistributionNetwork,
                      ODPair, TransportNetwork, brute_force_coverage, build_od_pairs,
                      coverage_for_instance, filter_od_pairs, generate_coverage_sets,
                      shortest_path)
from .scenario import (RepresentativeDay, ScenarioSupport, check_support_feasibility,
                       generate_support, load_representative_days,
                       save_representative_days)
from .solve import (BendersState, HighsBackend, SolveReport, SolverBackend, benders_solve,
                    extract_worst_case, make_backend, solve_extensive)

__version__ = "0.1.0"
