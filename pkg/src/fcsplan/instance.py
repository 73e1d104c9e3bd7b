"""Bundled problem instance: networks, parameters, scenarios, profiles."""

from __future__ import annotations

from dataclasses import dataclass, replace

from .diffusion import AdoptionCoefficients, AmbiguityParams, DiffusionParams, adoption_coefficients
from .model import CostParams, TechParams
from .network import (CouplingMap, CoverageSets, DistributionNetwork, TransportNetwork,
                      build_od_pairs, coverage_for_instance)
from .scenario import ScenarioSupport, generate_support


@dataclass(frozen=True)
class Instance:
    tn: TransportNetwork
    dn: DistributionNetwork
    coupling: CouplingMap
    od_pairs: tuple
    coverage: CoverageSets
    diffusion: DiffusionParams
    ambiguity: AmbiguityParams
    coeffs: AdoptionCoefficients
    support: ScenarioSupport
    days: dict
    cost: CostParams
    tech: TechParams
    n_periods: int
    recharge_threshold: float
    allow_pv: bool = True
    allow_ess: bool = True

    def restricted(self, allow_pv=None, allow_ess=None) -> "Instance":
        return replace(self,
                       allow_pv=self.allow_pv if allow_pv is None else allow_pv,
                       allow_ess=self.allow_ess if allow_ess is None else allow_ess)

    def with_support(self, support: ScenarioSupport) -> "Instance":
        return replace(self, support=support)


def assemble_instance(tn, dn, coupling, od_requests, diffusion, ambiguity, cost, tech,
                      n_periods, days, recharge_threshold,
                      support=None, n_scenarios=4, seed=0,
                      allow_pv=True, allow_ess=True) -> Instance:
    """Derive paths, coverage sets, coefficients and (optionally) scenarios."""
    od_pairs = tuple(build_od_pairs(tn, od_requests, tech.driving_range_mi,
                                    recharge_threshold))
    coverage = coverage_for_instance(tn, od_pairs, tech.driving_range_mi)
    od_keys = tuple(od.key for od in od_pairs)
    coeffs = adoption_coefficients(diffusion, od_keys)
    if support is None:
        support = generate_support(coeffs, ambiguity, od_keys, n_periods,
                                   n_scenarios, seed)
    return Instance(tn, dn, coupling, od_pairs, coverage, diffusion, ambiguity,
                    coeffs, support, days, cost, tech, n_periods,
                    recharge_threshold, allow_pv, allow_ess)
