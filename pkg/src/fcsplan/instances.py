"""Bundled fixtures: a desk-scale toy and a 24-node synthetic case.

The toy is sized for exhaustive verification (4 transport nodes, 3 grid
nodes, 2 periods, few scenarios, integer spot counts pinned by bounds).
The 24-node case mirrors the scale of a classic test road network coupled
to a 14-node feeder, with synthetic lengths and profiles.
"""

from __future__ import annotations

import numpy as np

from .diffusion import AmbiguityParams, DiffusionParams, adoption_coefficients
from .instance import Instance, assemble_instance
from .model import CostParams, TechParams
from .network import CouplingMap, DistributionLine, DistributionNetwork, TransportNetwork
from .scenario import RepresentativeDay

WEEKDAY = np.array([0.30, 0.22, 0.18, 0.16, 0.20, 0.35, 0.60, 0.90, 1.00, 0.92,
                    0.82, 0.76, 0.72, 0.70, 0.74, 0.80, 0.90, 1.00, 0.95, 0.80,
                    0.65, 0.52, 0.44, 0.36])
WEEKEND = np.array([0.40, 0.32, 0.26, 0.24, 0.26, 0.34, 0.46, 0.60, 0.72, 0.80,
                    0.85, 0.88, 0.88, 0.86, 0.84, 0.82, 0.82, 0.84, 0.80, 0.70,
                    0.60, 0.52, 0.48, 0.42])
SUN = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 0.02, 0.10, 0.25, 0.45, 0.65, 0.82,
                0.93, 1.00, 0.97, 0.88, 0.72, 0.52, 0.30, 0.12, 0.02, 0.0, 0.0,
                0.0, 0.0])


def _days_for_period(od_base, load_base_p, pv_nodes, growth, weights=(200.0, 165.0)):
    """Two representative days (weekday-like, weekend-like) for one period."""
    days = []
    for day_id, (w, shape) in enumerate(zip(weights, (WEEKDAY, WEEKEND))):
        traffic = {od: base * growth * shape for od, base in od_base.items()}
        load_p = {n: base * (shape * 0.6 + 0.4) for n, base in load_base_p.items()}
        load_q = {n: 0.35 * arr for n, arr in load_p.items()}
        pv = {i: SUN.copy() for i in pv_nodes}
        days.append(RepresentativeDay(day_id, w, traffic, pv, load_p, load_q))
    return days


def toy_cost(unmet_per_kwh=100.0) -> CostParams:
    return CostParams(
        fcs=200_000.0, spot=50_000.0, pv_per_kw=883.0, ess_per_kwh=300.0,
        line_per_kva_km=120.0, sub_per_kva=788.0,
        energy_per_kwh=0.094, unmet_per_kwh=unmet_per_kwh,
        curtail_per_kwh=30.0, shed_per_kwh=50.0,
        interest_rate=0.06,
        life={"fcs": 20, "spot": 10, "pv": 20, "ess": 10, "line": 30, "sub": 30},
        period_years=2.0)


def toy_tech(spots=3, allow_ders=False) -> TechParams:
    caps_pv = {2: 2.0, 3: 2.0} if allow_ders else {}
    caps_ess = {2: 1.5, 3: 1.5} if allow_ders else {}
    return TechParams(
        driving_range_mi=100.0, kwh_per_mile=0.24, charge_power_kw=120.0,
        charge_eff=0.92, spots_min=spots, spots_max=spots,
        pv_cap_mw=caps_pv, ess_cap_mwh=caps_ess,
        ess_rate_in=0.4, ess_rate_out=0.5, ess_eff_in=0.95, ess_eff_out=0.95,
        line_exp_p_mw=1.0, line_exp_q_mvar=0.8)


def build_toy(seed=11, n_scenarios=4, unmet_per_kwh=100.0, incentive_scale=1.0,
              traffic_scale=1.0, allow_ders=False, expandable_line=False,
              spots=3, sigma_scale=1.0) -> Instance:
    tn = TransportNetwork.from_edges(
        nodes=(1, 2, 3, 4),
        edges=((1, 2, 40.0), (2, 3, 40.0), (3, 4, 40.0)))
    dn = DistributionNetwork(
        nodes=(1, 2, 3), root=1, sbase_mva=10.0,
        vmin_sqr={n: 0.95 ** 2 for n in (1, 2, 3)},
        vmax_sqr={n: 1.05 ** 2 for n in (1, 2, 3)},
        lines=(
            DistributionLine(1, 2, 0.020, 0.040, 4.0, 3.0, False, 5.0),
            DistributionLine(2, 3, 0.025, 0.050, 1.2, 1.0, expandable_line, 4.0),
        ),
        sub_initial_mva={1: 0.3, 2: 0.3, 3: 0.3, 4: 0.3})
    coupling = CouplingMap({1: 2, 2: 2, 3: 3, 4: 3})
    diffusion = DiffusionParams(
        market_potential=1.0,
        basic_rate={(1, 4): (0.04, 0.04), (2, 4): (0.03, 0.03)},
        initial={(1, 4): 0.10, (2, 4): 0.10},
        incentive={(1, 4): {2: 0.05 * incentive_scale, 3: 0.05 * incentive_scale},
                   (2, 4): {2: 0.04 * incentive_scale, 3: 0.04 * incentive_scale}},
        std_dev={(1, 4): (0.04 * sigma_scale, 0.05 * sigma_scale),
                 (2, 4): (0.04 * sigma_scale, 0.05 * sigma_scale)},
        variance_incentive={(1, 4): {2: 0.08 * incentive_scale, 3: 0.08 * incentive_scale},
                            (2, 4): {2: 0.06 * incentive_scale, 3: 0.06 * incentive_scale}})
    coeffs = adoption_coefficients(diffusion)
    ambiguity = AmbiguityParams(
        mean_radius={od: tuple(0.15 * m for m in coeffs.intercept[od])
                     for od in ((1, 4), (2, 4))},
        second_lo=0.85, second_hi=1.15)
    od_base = {(1, 4): 30.0 * traffic_scale, (2, 4): 20.0 * traffic_scale}
    load_p = {1: 0.4, 2: 1.2, 3: 0.8}
    days = {1: _days_for_period(od_base, load_p, (2, 3), 1.0),
            2: _days_for_period(od_base, load_p, (2, 3), 1.15)}
    return assemble_instance(
        tn, dn, coupling, od_requests=((1, 4), (2, 4)),
        diffusion=diffusion, ambiguity=ambiguity,
        cost=toy_cost(unmet_per_kwh), tech=toy_tech(spots, allow_ders),
        n_periods=2, days=days, recharge_threshold=0.2,
        n_scenarios=n_scenarios, seed=seed,
        allow_pv=allow_ders, allow_ess=allow_ders)


def toy_variant(seed: int) -> Instance:
    """Randomized toy used by the decomposition regression sweep."""
    rng = np.random.default_rng(seed)
    return build_toy(
        seed=int(rng.integers(1, 10_000)),
        n_scenarios=int(rng.integers(2, 5)),
        unmet_per_kwh=float(rng.uniform(60, 160)),
        incentive_scale=float(rng.uniform(0.5, 1.6)),
        traffic_scale=float(rng.uniform(0.8, 1.4)),
        sigma_scale=float(rng.uniform(0.7, 1.3)),
        expandable_line=bool(rng.integers(0, 2)))


# ---------------------------------------------------------------------------
# 24-node synthetic case
# ---------------------------------------------------------------------------

_EDGES_24 = [
    (1, 2, 48), (1, 3, 36), (2, 6, 42), (3, 4, 30), (3, 12, 32), (4, 5, 22),
    (4, 11, 40), (5, 6, 28), (5, 9, 34), (6, 8, 24), (7, 8, 26), (7, 18, 30),
    (8, 9, 32), (8, 16, 36), (9, 10, 24), (10, 11, 38), (10, 15, 30),
    (10, 16, 34), (10, 17, 40), (11, 12, 42), (11, 14, 34), (12, 13, 30),
    (13, 24, 32), (14, 15, 28), (14, 23, 30), (15, 19, 26), (15, 22, 32),
    (16, 17, 22), (16, 18, 24), (17, 19, 20), (18, 20, 28), (19, 20, 24),
    (20, 21, 26), (20, 22, 30), (21, 22, 22), (21, 24, 28), (22, 23, 26),
    (23, 24, 24),
]

# districts for diffusion parameters: high / medium / low responsiveness
_DISTRICT_A = {1, 2, 3, 4, 5, 6}
_DISTRICT_B = {7, 8, 9, 10, 16, 17, 18}

_OD_24 = [
    (1, 10, 55.0), (3, 19, 50.0), (2, 15, 45.0), (5, 20, 40.0),
    (6, 22, 40.0), (4, 18, 35.0), (7, 24, 35.0), (9, 23, 30.0),
    (12, 20, 30.0), (13, 16, 28.0), (14, 2, 26.0), (21, 1, 24.0),
]

_CANDIDATES_24 = (3, 4, 5, 6, 8, 10, 11, 13, 15, 16, 19, 20, 22, 24)

_DN14_LINES = [
    # tail, head, r_pu, x_pu, p MW, q MVar, expandable, km
    (1, 2, 0.010, 0.025, 30.0, 22.0, False, 3.0),
    (2, 3, 0.014, 0.032, 18.0, 13.0, True, 4.0),
    (3, 4, 0.016, 0.036, 12.0, 9.0, True, 4.5),
    (4, 5, 0.018, 0.040, 8.0, 6.0, False, 5.0),
    (2, 6, 0.015, 0.034, 14.0, 10.0, True, 4.0),
    (6, 7, 0.018, 0.040, 9.0, 7.0, False, 5.0),
    (7, 8, 0.020, 0.044, 6.0, 4.5, False, 5.5),
    (1, 9, 0.012, 0.028, 24.0, 18.0, False, 3.5),
    (9, 10, 0.016, 0.036, 15.0, 11.0, True, 4.5),
    (10, 11, 0.018, 0.040, 10.0, 7.5, False, 5.0),
    (11, 12, 0.020, 0.044, 7.0, 5.0, False, 5.5),
    (9, 13, 0.017, 0.038, 12.0, 9.0, True, 4.5),
    (13, 14, 0.020, 0.044, 7.0, 5.0, False, 5.5),
]

_COUPLE_24 = {
    1: 2, 2: 3, 3: 4, 4: 5, 5: 5, 6: 4, 7: 6, 8: 7, 9: 8, 10: 8, 11: 10,
    12: 10, 13: 11, 14: 12, 15: 12, 16: 6, 17: 7, 18: 6, 19: 13, 20: 13,
    21: 14, 22: 14, 23: 12, 24: 11,
}


def _district_params(node_pair):
    o, d = node_pair
    if o in _DISTRICT_A or d in _DISTRICT_A:
        return 0.04, 0.04, 0.10
    if o in _DISTRICT_B or d in _DISTRICT_B:
        return 0.02, 0.02, 0.06
    return 0.01, 0.0, 0.0


def build_sioux24(seed=17, n_scenarios=4, n_periods=3, incentive_scale=1.0,
                  traffic_scale=1.0, n_od=10) -> Instance:
    tn = TransportNetwork.from_edges(
        nodes=tuple(range(1, 25)),
        edges=[(j, k, float(l)) for j, k, l in _EDGES_24],
        candidates=_CANDIDATES_24)
    dn = DistributionNetwork(
        nodes=tuple(range(1, 15)), root=1, sbase_mva=100.0,
        vmin_sqr={n: 0.95 ** 2 for n in range(1, 15)},
        vmax_sqr={n: 1.05 ** 2 for n in range(1, 15)},
        lines=tuple(DistributionLine(*row) for row in _DN14_LINES),
        sub_initial_mva={i: 10.0 for i in _CANDIDATES_24})
    coupling = CouplingMap(_COUPLE_24)

    requests = [(o, d) for o, d, _w in _OD_24[:n_od]]
    from .network import build_od_pairs
    paths = build_od_pairs(tn, requests, _tech_24().driving_range_mi, 0.2)
    basic, init, inc, sig, vinc = {}, {}, {}, {}, {}
    for od in paths:
        a, delta, dvar = _district_params(od.key)
        basic[od.key] = tuple(a for _ in range(n_periods))
        init[od.key] = 0.10
        sig[od.key] = tuple(0.03 + 0.01 * g for g in range(n_periods))
        on_path = [i for i in od.path_nodes if i in tn.candidates]
        inc[od.key] = {i: delta * incentive_scale for i in on_path}
        vinc[od.key] = {i: dvar * incentive_scale for i in on_path}
    diffusion = DiffusionParams(1.0, basic, init, inc, sig, vinc)
    coeffs = adoption_coefficients(diffusion)
    ambiguity = AmbiguityParams(
        {od: tuple(0.15 * m for m in coeffs.intercept[od]) for od in basic},
        0.85, 1.15)

    od_base = {(o, d): w * traffic_scale for o, d, w in _OD_24[:n_od]}
    load_p = {n: v for n, v in zip(range(1, 15),
                                   (0.0, 6.0, 4.5, 3.5, 2.5, 4.0, 3.0, 5.0,
                                    4.0, 3.0, 2.5, 2.0, 3.5, 2.5))}
    pv_nodes = tuple(_CANDIDATES_24)
    days = {g: _days_for_period(od_base, load_p, pv_nodes, 1.0 + 0.15 * (g - 1))
            for g in range(1, n_periods + 1)}
    return assemble_instance(
        tn, dn, coupling, requests, diffusion, ambiguity,
        cost=_cost_24(), tech=_tech_24(), n_periods=n_periods, days=days,
        recharge_threshold=0.2, n_scenarios=n_scenarios, seed=seed)


def _tech_24() -> TechParams:
    return TechParams(
        driving_range_mi=360.0, kwh_per_mile=0.24, charge_power_kw=120.0,
        charge_eff=0.92, spots_min=2, spots_max=90,
        pv_cap_mw={i: 6.0 for i in _CANDIDATES_24},
        ess_cap_mwh={i: 3.0 for i in _CANDIDATES_24},
        ess_rate_in=0.4, ess_rate_out=0.5, ess_eff_in=0.95, ess_eff_out=0.95,
        line_exp_p_mw=6.0, line_exp_q_mvar=4.5)


def _cost_24() -> CostParams:
    return CostParams(
        fcs=1_630_000.0, spot=100_000.0, pv_per_kw=883.0, ess_per_kwh=300.0,
        line_per_kva_km=120.0, sub_per_kva=788.0,
        energy_per_kwh=0.094, unmet_per_kwh=100.0,
        curtail_per_kwh=30.0, shed_per_kwh=50.0,
        interest_rate=0.06,
        life={"fcs": 20, "spot": 10, "pv": 20, "ess": 10, "line": 30, "sub": 30},
        period_years=2.0)
