"""MILP construction for the robust charging-station planning problem.

The single-level form carries three blocks per planning period:

* first stage: siting/sizing binaries and integers plus grid expansion,
* a moment-price block dualizing the worst distribution over the adoption
  support (prices enter products with siting binaries, linearized exactly
  by envelope rows since the binaries are 0/1),
* one operation copy per adoption realization, tied to the prices through
  a per-scenario feasibility row.

The same builders produce the Benders master (operation copies replaced by
epigraph variables) and the standalone subproblem LPs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import ambiguity_constraint_rows
from .errors import Infeasible, InfeasibleCoverage, InvalidParams
from .linmodel import BINARY, CONTINUOUS, EQ, GE, INTEGER, LE, LinearModel, VariableRegistry

MW_PER_KW = 1e-3


def capital_recovery_factor(rate: float, lifespan_years: float) -> float:
    """Annuity coefficient spreading one unit of capex over the lifespan."""
    if rate <= 0:
        raise InvalidParams("interest rate must be positive")
    if lifespan_years < 1:
        raise InvalidParams("lifespan must be at least one year")
    q = (1.0 + rate) ** lifespan_years
    return rate * q / (q - 1.0)


@dataclass(frozen=True)
class CostParams:
    fcs: float                    # $ per new station
    spot: float                   # $ per charging spot
    pv_per_kw: float
    ess_per_kwh: float
    line_per_kva_km: float
    sub_per_kva: float
    energy_per_kwh: float         # grid purchase price
    unmet_per_kwh: float          # penalty on unserved EV energy
    curtail_per_kwh: float
    shed_per_kwh: float
    interest_rate: float
    life: dict                    # asset -> lifespan years
    period_years: float = 2.0
    energy_reactive_per_kvarh: float = 0.0

    def __post_init__(self):
        for name in ("fcs", "spot", "pv_per_kw", "ess_per_kwh", "line_per_kva_km",
                     "sub_per_kva", "energy_per_kwh", "unmet_per_kwh",
                     "curtail_per_kwh", "shed_per_kwh"):
            if getattr(self, name) < 0:
                raise InvalidParams(f"cost {name} must be nonnegative")
        if self.interest_rate <= 0:
            raise InvalidParams("interest rate must be positive")
        missing = {"fcs", "spot", "pv", "ess", "line", "sub"} - set(self.life)
        if missing:
            raise InvalidParams(f"missing lifespans for {sorted(missing)}")

    def crf(self, asset: str) -> float:
        return capital_recovery_factor(self.interest_rate, self.life[asset])

    def invest_discount(self, g: int) -> float:
        return (1.0 + self.interest_rate) ** (-(g - 1))

    def operation_discount(self, g: int) -> float:
        # present-value annuity factor of the period index
        r = self.interest_rate
        return (1.0 - (1.0 + r) ** (-g)) / r


@dataclass(frozen=True)
class TechParams:
    driving_range_mi: float
    kwh_per_mile: float
    charge_power_kw: float
    charge_eff: float
    spots_min: int
    spots_max: int
    pv_cap_mw: dict               # candidate node -> max installable PV
    ess_cap_mwh: dict             # candidate node -> max installable storage
    ess_rate_in: float            # charging rate as fraction of capacity per hour
    ess_rate_out: float
    ess_eff_in: float
    ess_eff_out: float
    line_exp_p_mw: float
    line_exp_q_mvar: float
    service_curve: tuple | None = None   # ((slope, intercept), ...) concave
    dt_hours: float = 1.0

    def __post_init__(self):
        for name in ("charge_eff", "ess_eff_in", "ess_eff_out"):
            v = getattr(self, name)
            if not (0 < v <= 1):
                raise InvalidParams(f"{name}={v} outside (0, 1]")
        if self.spots_min < 0 or self.spots_max < self.spots_min:
            raise InvalidParams("spot bounds out of order")
        if self.service_curve is not None:
            slopes = [s for s, _b in self.service_curve]
            if any(s < 0 for s in slopes) or slopes != sorted(slopes, reverse=True):
                raise InvalidParams("service curve must be nondecreasing and concave")
            if min(b for _s, b in self.service_curve) < -1e-12:
                raise InvalidParams("service curve must pass through the origin")

    @property
    def kwh_per_ev(self) -> float:
        return self.kwh_per_mile * self.driving_range_mi / self.charge_eff

    def service_segments(self):
        """Affine caps on EVs served per hour as a function of spot count."""
        if self.service_curve is not None:
            return self.service_curve
        rate = self.charge_power_kw * self.dt_hours * self.charge_eff / (
            self.kwh_per_mile * self.driving_range_mi)
        return ((rate, 0.0),)


REGISTRY = VariableRegistry()
for fam, desc in {
    "fcs_open": "station exists at node i in period g",
    "fcs_new": "station newly built at node i in period g",
    "spots": "charging spots installed at node i in period g",
    "spots_new": "spots newly added at node i in period g",
    "pv_cap": "cumulative on-site PV capacity (MW)",
    "pv_new": "PV capacity added in the period (MW)",
    "ess_cap": "cumulative on-site storage capacity (MWh)",
    "ess_new": "storage capacity added in the period (MWh)",
    "line_up": "feeder section upgraded by period g",
    "line_up_new": "feeder section newly upgraded in period g",
    "sub_cap": "station supply-point capacity (MVA)",
    "sub_new": "supply-point capacity added in the period (MVA)",
    "pair_open": "product of two siting binaries (expectation mode)",
    "serve": "EVs served per hour at a station",
    "unmet": "EVs turned away per hour at a station",
    "frac": "share of a path's EVs charging at a station",
    "frac_dd": "adoption-scaled share of a path's EVs (expectation mode)",
    "uncov": "share of a path's EVs with no reachable open station on an arc",
    "uncov_dd": "adoption-scaled uncovered share (expectation mode)",
    "pv_out": "PV output fed in (MW)",
    "pv_spill": "PV output curtailed (MW)",
    "ess_in": "storage charging power (MW)",
    "ess_out": "storage discharging power (MW)",
    "ess_soc": "storage state of charge (MWh)",
    "flow_p": "active power on a feeder section (MW)",
    "flow_q": "reactive power on a feeder section (MVar)",
    "grid_p": "active power bought at the root (MW)",
    "grid_q": "reactive power bought at the root (MVar)",
    "volt_sq": "squared voltage magnitude (p.u.^2)",
    "shed": "shed fraction of nodal load",
    "fcs_load": "station charging demand mapped onto a grid node (MW)",
    "price_norm": "price of the total-probability row",
    "price_mean_lo": "price of the lower mean row",
    "price_mean_hi": "price of the upper mean row",
    "price_sq_lo": "price of the lower second-moment row",
    "price_sq_hi": "price of the upper second-moment row",
    "lin_mean_lo": "price-times-siting product, lower mean row",
    "lin_mean_hi": "price-times-siting product, upper mean row",
    "lin_sq_lo": "price-times-siting product, lower second-moment row",
    "lin_sq_hi": "price-times-siting product, upper second-moment row",
    "sp_bound": "epigraph of one scenario operation value (master)",
    "worst_prob": "scenario probability in the worst-distribution LP",
}.items():
    REGISTRY.declare(fam, desc)

_PRICE_FAMILY = {"mean_lo": "price_mean_lo", "mean_hi": "price_mean_hi",
                 "sq_lo": "price_sq_lo", "sq_hi": "price_sq_hi"}
_LIN_FAMILY = {"mean_lo": "lin_mean_lo", "mean_hi": "lin_mean_hi",
               "sq_lo": "lin_sq_lo", "sq_hi": "lin_sq_hi"}


def mccormick_envelope(lm: LinearModel, product: int, continuous: int, binary: int,
                       bound: float, tag: str):
    """Exact envelope of product = continuous * binary with continuous in [0, bound]."""
    if not (bound > 0 and math.isfinite(bound)):
        raise InvalidParams(f"envelope bound must be finite and positive, got {bound}")
    lm.add_row([(product, 1.0), (binary, -bound)], LE, 0.0, f"env_cap[{tag}]")
    lm.add_row([(product, 1.0), (continuous, -1.0)], LE, 0.0, f"env_below[{tag}]")
    lm.add_row([(product, 1.0), (continuous, -1.0), (binary, -bound)], GE, -bound,
               f"env_above[{tag}]")
    # product >= 0 is carried by the variable bound


@dataclass
class SecondStage:
    """One period/realization operation LP with first-stage linkage.

    Row right-hand sides are ``base_rhs[k] - sum(coef * v1[name])`` over the
    linkage terms, so the LP is re-solved for a new plan by refreshing the
    rhs vector only.
    """

    period: int
    scenario: int
    lm: LinearModel
    base_rhs: list
    link: dict                      # row index -> list of (first-stage name, coef)

    def refresh(self, v1: dict):
        for k, terms in self.link.items():
            self.lm.rows[k].rhs = self.base_rhs[k] - sum(
                coef * v1[name] for name, coef in terms)

    def solve(self, v1: dict, backend, want_duals: bool = True):
        self.refresh(v1)
        res = backend.solve(self.lm, want_duals=want_duals)
        return res.objective, res

    def cut(self, v1: dict, value: float, res, column_of) -> tuple[float, dict]:
        """Optimality cut value >= const + sum(coef * master column)."""
        grad: dict[str, float] = {}
        duals = res.duals
        for k, terms in self.link.items():
            d = duals[k]
            if d == 0.0:
                continue
            for name, coef in terms:
                grad[name] = grad.get(name, 0.0) - d * coef
        const = value - sum(g * v1[name] for name, g in grad.items())
        return const, {column_of[name]: g for name, g in grad.items()}


@dataclass
class MasterInfo:
    column_of: dict                 # first-stage name -> master column
    omega: dict                     # (g, s) -> master column of the epigraph


class Planning:
    """Builder and bookkeeping for one instance in one modelling mode.

    mode "ddu": worst distribution over an ambiguity set whose moments move
    with the siting plan.  "diu": same with the movement stripped out.
    "sdd": plain expectation under fixed probabilities, with the plan
    shifting the adoption realizations themselves.
    """

    def __init__(self, inst, mode: str = "ddu", big_m: float | None = None,
                 sdd_probabilities: dict | None = None):
        if mode not in ("ddu", "diu", "sdd"):
            raise InvalidParams(f"unknown mode {mode!r}")
        self.inst = inst
        self.mode = mode
        self.periods = list(range(1, inst.n_periods + 1))
        self.od_keys = tuple(od.key for od in inst.od_pairs)
        self.candidates = sorted(inst.tn.candidates)
        self.cand_on_path = {od.key: tuple(i for i in od.path_nodes
                                           if i in inst.tn.candidates)
                             for od in inst.od_pairs}
        self.exp_lines = [ln for ln in inst.dn.lines if ln.expandable]
        self.coeffs = inst.coeffs if mode != "diu" else _strip_decision_terms(inst.coeffs)
        self.eval_coeffs = inst.coeffs
        self.sdd_probabilities = sdd_probabilities
        self._sp_cache: dict = {}
        self._catalog = self._first_stage_catalog()
        self._fs_names = [name for name, *_rest in self._catalog]
        self._invest_coef = {name: obj for name, _lb, _ub, _kind, obj in self._catalog if obj}
        self.big_m = big_m if big_m is not None else self.estimate_price_bound()

    def _first_stage_catalog(self):
        """Every first-stage column: (name, lb, ub, kind, objective)."""
        inst, cost, tech = self.inst, self.inst.cost, self.inst.tech
        name = REGISTRY.name
        rows = []
        for g in self.periods:
            disc = cost.invest_discount(g)
            for i in self.candidates:
                pv_max = tech.pv_cap_mw.get(i, 0.0) if inst.allow_pv else 0.0
                ess_max = tech.ess_cap_mwh.get(i, 0.0) if inst.allow_ess else 0.0
                rows += [
                    (name("fcs_open", i, g), 0.0, 1.0, BINARY, 0.0),
                    (name("fcs_new", i, g), 0.0, 1.0, BINARY,
                     disc * cost.crf("fcs") * cost.fcs),
                    (name("spots", i, g), 0.0, tech.spots_max, INTEGER, 0.0),
                    (name("spots_new", i, g), 0.0, tech.spots_max, INTEGER,
                     disc * cost.crf("spot") * cost.spot),
                    (name("pv_cap", i, g), 0.0, pv_max, CONTINUOUS, 0.0),
                    (name("pv_new", i, g), 0.0, pv_max, CONTINUOUS,
                     disc * cost.crf("pv") * cost.pv_per_kw / MW_PER_KW),
                    (name("ess_cap", i, g), 0.0, ess_max, CONTINUOUS, 0.0),
                    (name("ess_new", i, g), 0.0, ess_max, CONTINUOUS,
                     disc * cost.crf("ess") * cost.ess_per_kwh / MW_PER_KW),
                    (name("sub_cap", i, g), 0.0, math.inf, CONTINUOUS, 0.0),
                    (name("sub_new", i, g), 0.0, math.inf, CONTINUOUS,
                     disc * cost.crf("sub") * cost.sub_per_kva / MW_PER_KW),
                ]
            for ln in self.exp_lines:
                rows += [
                    (name("line_up", *ln.key, g), 0.0, 1.0, BINARY, 0.0),
                    (name("line_up_new", *ln.key, g), 0.0, 1.0, BINARY,
                     disc * cost.crf("line") * cost.line_per_kva_km
                     * ln.length_km * tech.line_exp_p_mw / MW_PER_KW),
                ]
        if self.mode == "sdd":
            for key in self._pair_keys():
                rows.append((name("pair_open", *key), 0.0, 1.0, CONTINUOUS, 0.0))
        return rows

    def _pair_keys(self):
        needed = set()
        for od_key in self.od_keys:
            for g in self.periods:
                _mu0, shift = self.coeffs.mean_terms(od_key, g)
                for (i1, r) in shift:
                    for i2 in self.cand_on_path[od_key]:
                        needed.add((i1, r, i2, g))
        return sorted(needed)

    # ------------------------------------------------------------------
    # shared helpers
    # ------------------------------------------------------------------

    def scenario_ids(self, g):
        return list(range(self.inst.support.n_scenarios(g)))

    def _unique_cover_sets(self, od_key):
        seen, out = set(), []
        for arc in self.inst.coverage.for_od(od_key):
            s = self.inst.coverage.get(od_key, arc)
            if s not in seen:
                seen.add(s)
                out.append((arc, s))
        return out

    def x_history_from(self, v1: dict) -> dict:
        hist = {}
        for g in self.periods:
            for i in self.candidates:
                hist[(i, g)] = int(round(v1[REGISTRY.name("fcs_open", i, g)]))
        return hist

    # ------------------------------------------------------------------
    # first stage
    # ------------------------------------------------------------------

    def build_first_stage(self, lm: LinearModel):
        inst, tech = self.inst, self.inst.tech
        name = REGISTRY.name
        for od in inst.od_pairs:
            for arc, cover in self._unique_cover_sets(od.key):
                if not cover:
                    raise InfeasibleCoverage(f"empty coverage set for {od.key} arc {arc}")
        for n, lb, ub, kind, obj in self._catalog:
            lm.add_var(n, lb, ub, kind, obj)

        col = {}
        for g in self.periods:
            for i in self.candidates:
                col["open", i, g] = lm.var_index(name("fcs_open", i, g))
                col["new", i, g] = lm.var_index(name("fcs_new", i, g))
                col["spots", i, g] = lm.var_index(name("spots", i, g))
                col["spots_new", i, g] = lm.var_index(name("spots_new", i, g))
                col["pv", i, g] = lm.var_index(name("pv_cap", i, g))
                col["pv_new", i, g] = lm.var_index(name("pv_new", i, g))
                col["ess", i, g] = lm.var_index(name("ess_cap", i, g))
                col["ess_new", i, g] = lm.var_index(name("ess_new", i, g))
                col["sub", i, g] = lm.var_index(name("sub_cap", i, g))
                col["sub_new", i, g] = lm.var_index(name("sub_new", i, g))
            for ln in self.exp_lines:
                col["line", ln.key, g] = lm.var_index(name("line_up", *ln.key, g))
                col["line_new", ln.key, g] = lm.var_index(name("line_up_new", *ln.key, g))

        for od in inst.od_pairs:
            for g in self.periods:
                for k_idx, (arc, cover) in enumerate(self._unique_cover_sets(od.key)):
                    lm.add_row([(col["open", i, g], 1.0) for i in sorted(cover)], GE, 1.0,
                               f"cover[{od.key[0]}-{od.key[1]},{k_idx},{g}]")
        for i in self.candidates:
            for g in self.periods:
                prev_open = [(col["open", i, g - 1], -1.0)] if g > 1 else []
                prev_spots = [(col["spots", i, g - 1], -1.0)] if g > 1 else []
                if g > 1:
                    lm.add_row([(col["open", i, g], 1.0)] + prev_open, GE, 0.0,
                               f"keep_open[{i},{g}]")
                lm.add_row([(col["new", i, g], 1.0), (col["open", i, g], -1.0)]
                           + [(c, -v) for c, v in prev_open], GE, 0.0, f"new_open[{i},{g}]")
                lm.add_row([(col["spots", i, g], 1.0),
                            (col["open", i, g], -tech.spots_min)], GE, 0.0, f"spots_lo[{i},{g}]")
                lm.add_row([(col["spots", i, g], 1.0),
                            (col["open", i, g], -tech.spots_max)], LE, 0.0, f"spots_hi[{i},{g}]")
                if g > 1:
                    lm.add_row([(col["spots", i, g], 1.0)] + prev_spots, GE, 0.0,
                               f"spots_keep[{i},{g}]")
                lm.add_row([(col["spots_new", i, g], 1.0), (col["spots", i, g], -1.0)]
                           + [(c, -v) for c, v in prev_spots], EQ, 0.0, f"spots_add[{i},{g}]")
                lm.add_row([(col["pv", i, g], 1.0)]
                           + [(col["pv_new", i, r], -1.0) for r in range(1, g + 1)],
                           EQ, 0.0, f"pv_total[{i},{g}]")
                pv_max = inst.tech.pv_cap_mw.get(i, 0.0) if inst.allow_pv else 0.0
                lm.add_row([(col["pv", i, g], 1.0), (col["open", i, g], -pv_max)], LE, 0.0,
                           f"pv_at_station[{i},{g}]")
                lm.add_row([(col["ess", i, g], 1.0)]
                           + [(col["ess_new", i, r], -1.0) for r in range(1, g + 1)],
                           EQ, 0.0, f"ess_total[{i},{g}]")
                ess_max = inst.tech.ess_cap_mwh.get(i, 0.0) if inst.allow_ess else 0.0
                lm.add_row([(col["ess", i, g], 1.0), (col["open", i, g], -ess_max)], LE, 0.0,
                           f"ess_at_station[{i},{g}]")
                lm.add_row([(col["sub", i, g], 1.0)]
                           + [(col["sub_new", i, r], -1.0) for r in range(1, g + 1)],
                           EQ, inst.dn.sub_initial_mva.get(i, 0.0), f"sub_total[{i},{g}]")
                lm.add_row([(col["sub", i, g], 1.0),
                            (col["spots", i, g], -tech.charge_power_kw * MW_PER_KW)],
                           GE, 0.0, f"sub_need[{i},{g}]")
        for ln in self.exp_lines:
            for g in self.periods:
                prev = [(col["line", ln.key, g - 1], -1.0)] if g > 1 else []
                if g > 1:
                    lm.add_row([(col["line", ln.key, g], 1.0)] + prev, GE, 0.0,
                               f"line_keep[{ln.key[0]}-{ln.key[1]},{g}]")
                lm.add_row([(col["line_new", ln.key, g], 1.0),
                            (col["line", ln.key, g], -1.0)] + [(c, -v) for c, v in prev],
                           GE, 0.0, f"line_add[{ln.key[0]}-{ln.key[1]},{g}]")

        if self.mode == "sdd":
            self._build_pair_products(lm)
        return col

    def _build_pair_products(self, lm):
        # products of siting binaries feeding the shifted adoption bounds
        name = REGISTRY.name
        for (i1, r, i2, g) in self._pair_keys():
            p = lm.var_index(name("pair_open", i1, r, i2, g))
            a = lm.var_index(name("fcs_open", i1, r))
            b = lm.var_index(name("fcs_open", i2, g))
            lm.add_row([(p, 1.0), (a, -1.0)], LE, 0.0, f"pair_a[{i1},{r},{i2},{g}]")
            lm.add_row([(p, 1.0), (b, -1.0)], LE, 0.0, f"pair_b[{i1},{r},{i2},{g}]")
            lm.add_row([(p, 1.0), (a, -1.0), (b, -1.0)], GE, -1.0,
                       f"pair_ab[{i1},{r},{i2},{g}]")

    # ------------------------------------------------------------------
    # second stage
    # ------------------------------------------------------------------

    def subproblem(self, g, s) -> SecondStage:
        key = (g, s)
        if key not in self._sp_cache:
            theta = self.inst.support.vector(g, s)
            if self.mode == "sdd":
                self._sp_cache[key] = self.build_second_stage_shifted(g, s, theta)
            else:
                self._sp_cache[key] = self.build_second_stage(g, s, theta)
        return self._sp_cache[key]

    def subproblems(self) -> dict:
        return {(g, s): self.subproblem(g, s)
                for g in self.periods for s in self.scenario_ids(g)}

    def build_second_stage(self, g, s, theta: dict, relax_limits: bool = False) -> SecondStage:
        """Operation LP of period g under fixed adoption realization theta."""
        return self._second_stage(g, s, theta, shifted=False, relax_limits=relax_limits)

    def build_second_stage_shifted(self, g, s, theta: dict) -> SecondStage:
        """Operation LP with plan-shifted adoption (expectation mode)."""
        return self._second_stage(g, s, theta, shifted=True, relax_limits=False)

    def _second_stage(self, g, s, theta, shifted, relax_limits):
        inst = self.inst
        tech, cost, dn = inst.tech, inst.cost, inst.dn
        dt = tech.dt_hours
        opf = cost.operation_discount(g)
        kwh_ev = tech.kwh_per_ev
        name = REGISTRY.name
        lm = LinearModel(f"operation[{g},{s}]")
        link: dict[int, list] = {}

        def linked_row(coeffs, sense, rhs, tag, links):
            k = lm.add_row(coeffs, sense, rhs, tag)
            if links:
                link[k] = links
            return k

        days = inst.days[g]
        v = {}
        for d_idx, day in enumerate(days):
            w = opf * day.weight
            for t in range(len(next(iter(day.load_p.values())))):
                for i in self.candidates:
                    v["serve", i, d_idx, t] = lm.add_var(name("serve", i, d_idx, t, g, s))
                    v["unmet", i, d_idx, t] = lm.add_var(
                        name("unmet", i, d_idx, t, g, s),
                        obj=w * cost.unmet_per_kwh * kwh_ev * dt)
                    v["pv_out", i, d_idx, t] = lm.add_var(name("pv_out", i, d_idx, t, g, s))
                    v["pv_spill", i, d_idx, t] = lm.add_var(
                        name("pv_spill", i, d_idx, t, g, s),
                        obj=w * cost.curtail_per_kwh / MW_PER_KW * dt)
                    v["ess_in", i, d_idx, t] = lm.add_var(name("ess_in", i, d_idx, t, g, s))
                    v["ess_out", i, d_idx, t] = lm.add_var(name("ess_out", i, d_idx, t, g, s))
                    v["soc", i, d_idx, t] = lm.add_var(name("ess_soc", i, d_idx, t, g, s))
                for od_key in self.od_keys:
                    fam = "frac_dd" if shifted else "frac"
                    for i in self.cand_on_path[od_key]:
                        v["frac", od_key, i, d_idx, t] = lm.add_var(
                            name(fam, f"{od_key[0]}-{od_key[1]}", i, d_idx, t, g, s),
                            ub=1.0 if not shifted else math.inf)
                for n in dn.nodes:
                    lo, hi = dn.vmin_sqr[n], dn.vmax_sqr[n]
                    if relax_limits:
                        lo, hi = 0.25, 4.0
                    if n == dn.root:
                        lo = hi = 1.0
                    v["volt", n, d_idx, t] = lm.add_var(name("volt_sq", n, d_idx, t, g, s), lo, hi)
                    v["shed", n, d_idx, t] = lm.add_var(
                        name("shed", n, d_idx, t, g, s), 0.0, 1.0,
                        obj=w * cost.shed_per_kwh / MW_PER_KW * dt * day.load_p[n][t])
                    v["fcs_load", n, d_idx, t] = lm.add_var(name("fcs_load", n, d_idx, t, g, s))
                v["grid_p", d_idx, t] = lm.add_var(
                    name("grid_p", d_idx, t, g, s),
                    obj=w * cost.energy_per_kwh / MW_PER_KW * dt)
                v["grid_q", d_idx, t] = lm.add_var(
                    name("grid_q", d_idx, t, g, s),
                    obj=w * cost.energy_reactive_per_kvarh / MW_PER_KW * dt)
                for ln in dn.lines:
                    v["fp", ln.key, d_idx, t] = lm.add_var(
                        name("flow_p", ln.key[0], ln.key[1], d_idx, t, g, s), -math.inf, math.inf)
                    v["fq", ln.key, d_idx, t] = lm.add_var(
                        name("flow_q", ln.key[0], ln.key[1], d_idx, t, g, s), -math.inf, math.inf)

        segs = tech.service_segments()
        for d_idx, day in enumerate(days):
            hours = range(len(next(iter(day.load_p.values()))))
            w = opf * day.weight
            for t in hours:
                tag = f"{d_idx},{t},{g},{s}"
                for od_key in self.od_keys:
                    lam = day.traffic[od_key][t]
                    od_label = f"{od_key[0]}-{od_key[1]}"
                    for k_idx, (arc, cover) in enumerate(self._unique_cover_sets(od_key)):
                        cover_cand = sorted(set(cover) & set(self.cand_on_path[od_key]))
                        terms = [(v["frac", od_key, i, d_idx, t], 1.0) for i in cover_cand]
                        # shared fractions over overlapping sets can clash at
                        # plans that still satisfy coverage; the slack keeps
                        # recourse complete and is priced like unmet EVs
                        if shifted:
                            short = lm.add_var(
                                name("uncov_dd", od_label, k_idx, d_idx, t, g, s),
                                obj=w * cost.unmet_per_kwh * kwh_ev * dt * lam)
                            _mu0, shift = self.coeffs.mean_terms(od_key, g)
                            links = [(REGISTRY.name("fcs_open", i, r), -coef)
                                     for (i, r), coef in sorted(shift.items())]
                            linked_row(terms + [(short, 1.0)], EQ, theta[od_key],
                                       f"frac_total[{od_label},{k_idx},{tag}]", links)
                        else:
                            short = lm.add_var(
                                name("uncov", od_label, k_idx, d_idx, t, g, s),
                                obj=w * cost.unmet_per_kwh * kwh_ev * dt
                                * theta[od_key] * lam)
                            lm.add_row(terms + [(short, 1.0)], EQ, 1.0,
                                       f"frac_total[{od_label},{k_idx},{tag}]")
                    for i in self.cand_on_path[od_key]:
                        if shifted:
                            _mu0, shift = self.coeffs.mean_terms(od_key, g)
                            links = [(REGISTRY.name("fcs_open", i, g), -theta[od_key])]
                            links += [(REGISTRY.name("pair_open", i1, r, i, g), -coef)
                                      for (i1, r), coef in sorted(shift.items())]
                            linked_row([(v["frac", od_key, i, d_idx, t], 1.0)], LE, 0.0,
                                       f"frac_open[{od_key[0]}-{od_key[1]},{i},{tag}]", links)
                        else:
                            linked_row([(v["frac", od_key, i, d_idx, t], 1.0)], LE, 0.0,
                                       f"frac_open[{od_key[0]}-{od_key[1]},{i},{tag}]",
                                       [(REGISTRY.name("fcs_open", i, g), -1.0)])
                for i in self.candidates:
                    demand = []
                    for od_key in self.od_keys:
                        if i in self.cand_on_path[od_key]:
                            lam = day.traffic[od_key][t]
                            scale = lam if shifted else theta[od_key] * lam
                            if scale:
                                demand.append((v["frac", od_key, i, d_idx, t], -scale))
                    lm.add_row([(v["serve", i, d_idx, t], 1.0),
                                (v["unmet", i, d_idx, t], 1.0)] + demand, EQ, 0.0,
                               f"ev_balance[{i},{tag}]")
                    for seg_idx, (slope, intercept) in enumerate(segs):
                        linked_row([(v["serve", i, d_idx, t], 1.0)], LE, intercept,
                                   f"serve_cap[{i},{seg_idx},{tag}]",
                                   [(REGISTRY.name("spots", i, g), -slope)])
                    pv_shape = day.pv.get(i)
                    out_coef = float(pv_shape[t]) if pv_shape is not None else 0.0
                    linked_row([(v["pv_out", i, d_idx, t], 1.0),
                                (v["pv_spill", i, d_idx, t], 1.0)], EQ, 0.0,
                               f"pv_split[{i},{tag}]",
                               [(REGISTRY.name("pv_cap", i, g), -out_coef)])
                    linked_row([(v["ess_in", i, d_idx, t], 1.0)], LE, 0.0,
                               f"ess_in_cap[{i},{tag}]",
                               [(REGISTRY.name("ess_cap", i, g), -tech.ess_rate_in)])
                    linked_row([(v["ess_out", i, d_idx, t], 1.0)], LE, 0.0,
                               f"ess_out_cap[{i},{tag}]",
                               [(REGISTRY.name("ess_cap", i, g), -tech.ess_rate_out)])
                    linked_row([(v["soc", i, d_idx, t], 1.0)], LE, 0.0,
                               f"soc_cap[{i},{tag}]",
                               [(REGISTRY.name("ess_cap", i, g), -1.0)])
                    t_prev = t - 1 if t > 0 else max(hours)
                    lm.add_row([(v["soc", i, d_idx, t], 1.0),
                                (v["soc", i, d_idx, t_prev], -1.0),
                                (v["ess_in", i, d_idx, t], -tech.ess_eff_in * dt),
                                (v["ess_out", i, d_idx, t], dt / tech.ess_eff_out)],
                               EQ, 0.0, f"soc_step[{i},{tag}]")
                for n in dn.nodes:
                    coupled = [i for i in self.candidates
                               if inst.coupling.tn_to_dn.get(i) == n]
                    lm.add_row([(v["fcs_load", n, d_idx, t], 1.0)]
                               + [(v["serve", i, d_idx, t], -kwh_ev * MW_PER_KW) for i in coupled],
                               EQ, 0.0, f"fcs_load_def[{n},{tag}]")
                    p_terms = [(v["fcs_load", n, d_idx, t], -1.0),
                               (v["shed", n, d_idx, t], day.load_p[n][t])]
                    q_terms = [(v["shed", n, d_idx, t], day.load_q[n][t])]
                    for ln in dn.lines:
                        if ln.head == n:
                            p_terms.append((v["fp", ln.key, d_idx, t], 1.0))
                            q_terms.append((v["fq", ln.key, d_idx, t], 1.0))
                        if ln.tail == n:
                            p_terms.append((v["fp", ln.key, d_idx, t], -1.0))
                            q_terms.append((v["fq", ln.key, d_idx, t], -1.0))
                    if n == dn.root:
                        p_terms.append((v["grid_p", d_idx, t], 1.0))
                        q_terms.append((v["grid_q", d_idx, t], 1.0))
                    for i in coupled:
                        p_terms.append((v["ess_out", i, d_idx, t], 1.0))
                        p_terms.append((v["ess_in", i, d_idx, t], -1.0))
                        p_terms.append((v["pv_out", i, d_idx, t], 1.0))
                    lm.add_row(p_terms, EQ, day.load_p[n][t], f"bal_p[{n},{tag}]")
                    lm.add_row(q_terms, EQ, day.load_q[n][t], f"bal_q[{n},{tag}]")
                for ln in dn.lines:
                    lm.add_row([(v["volt", ln.tail, d_idx, t], 1.0),
                                (v["volt", ln.head, d_idx, t], -1.0),
                                (v["fp", ln.key, d_idx, t], -2.0 * ln.r_pu / dn.sbase_mva),
                                (v["fq", ln.key, d_idx, t], -2.0 * ln.x_pu / dn.sbase_mva)],
                               EQ, 0.0, f"vdrop[{ln.key[0]}-{ln.key[1]},{tag}]")
                    if relax_limits:
                        continue
                    exp_p = tech.line_exp_p_mw if ln.expandable else 0.0
                    exp_q = tech.line_exp_q_mvar if ln.expandable else 0.0
                    links_p = ([(REGISTRY.name("line_up", *ln.key, g), -exp_p)]
                               if ln.expandable else [])
                    links_n = ([(REGISTRY.name("line_up", *ln.key, g), exp_p)]
                               if ln.expandable else [])
                    linked_row([(v["fp", ln.key, d_idx, t], 1.0)], LE, ln.p_rating_mw,
                               f"line_p_hi[{ln.key[0]}-{ln.key[1]},{tag}]", links_p)
                    linked_row([(v["fp", ln.key, d_idx, t], 1.0)], GE, -ln.p_rating_mw,
                               f"line_p_lo[{ln.key[0]}-{ln.key[1]},{tag}]", links_n)
                    links_p = ([(REGISTRY.name("line_up", *ln.key, g), -exp_q)]
                               if ln.expandable else [])
                    links_n = ([(REGISTRY.name("line_up", *ln.key, g), exp_q)]
                               if ln.expandable else [])
                    linked_row([(v["fq", ln.key, d_idx, t], 1.0)], LE, ln.q_rating_mvar,
                               f"line_q_hi[{ln.key[0]}-{ln.key[1]},{tag}]", links_p)
                    linked_row([(v["fq", ln.key, d_idx, t], 1.0)], GE, -ln.q_rating_mvar,
                               f"line_q_lo[{ln.key[0]}-{ln.key[1]},{tag}]", links_n)

        base = [row.rhs for row in lm.rows]
        return SecondStage(g, s, lm, base, link)

    # ------------------------------------------------------------------
    # moment-price block and single-level forms
    # ------------------------------------------------------------------

    def estimate_price_bound(self) -> float:
        """Heuristic cap on the moment prices, validated after each solve.

        Scales an upper bound on any period's operation cost by the inverse
        of the smallest useful separation in the support moments.
        """
        inst = self.inst
        worst = 0.0
        for g in self.periods:
            tot = 0.0
            for day in inst.days[g]:
                dem = sum(float(np.max(day.traffic[od])) for od in self.od_keys)
                load = sum(float(np.max(day.load_p[n])) for n in inst.dn.nodes)
                pvcap = sum(inst.tech.pv_cap_mw.get(i, 0.0) for i in self.candidates)
                hourly = (inst.cost.unmet_per_kwh * inst.tech.kwh_per_ev * dem
                          + (inst.cost.energy_per_kwh * 3.0 * load
                             + inst.cost.curtail_per_kwh * pvcap
                             + inst.cost.shed_per_kwh * load) / MW_PER_KW)
                tot += day.weight * 24 * hourly * inst.tech.dt_hours
            worst = max(worst, inst.cost.operation_discount(g) * tot)
        span = 0.0
        for g in self.periods:
            block = inst.support.values[g]
            for col in block.T:
                span = max(span, float(col.max() - col.min()))
        return 2.0 * worst / max(span, 0.05)

    def _moment_rows(self, g):
        return ambiguity_constraint_rows(self.coeffs, self.inst.ambiguity,
                                         self.inst.support.values[g], g, self.od_keys)

    def _add_price_block(self, lm, big_m, with_products=True):
        """Dual variables of the ambiguity rows plus their objective terms.

        Returns per period the list of (row, price column, sign) entries and
        the norm-price column; the per-scenario feasibility coefficient of a
        price is sign * row.weights[s].
        """
        name = REGISTRY.name
        block = {}
        for g in self.periods:
            entries = []
            for row in self._moment_rows(g):
                if row.kind == "norm":
                    kappa = lm.add_var(name("price_norm", g), -math.inf, math.inf, obj=1.0)
                    entries.append((row, kappa, 1.0))
                    continue
                sign = 1.0 if row.sense == LE else -1.0
                od_label = f"{row.od[0]}-{row.od[1]}"
                p = lm.add_var(name(_PRICE_FAMILY[row.kind], od_label, g),
                               0.0, big_m, obj=sign * row.const)
                entries.append((row, p, sign))
                if with_products:
                    for (i, r), coef in sorted(row.x_coeffs.items()):
                        nu = lm.add_var(name(_LIN_FAMILY[row.kind], od_label, i, r, g),
                                        0.0, big_m, obj=sign * coef)
                        mccormick_envelope(lm, nu, p,
                                           lm.var_index(name("fcs_open", i, r)), big_m,
                                           f"{_LIN_FAMILY[row.kind]}[{od_label},{i},{r},{g}]")
            block[g] = entries
        return block

    def _feasibility_terms(self, entries, s):
        return [(colnum, sign * float(row.weights[s])) for row, colnum, sign in entries]

    def build_extensive(self, big_m: float | None = None) -> LinearModel:
        """Single-level MILP over all periods and adoption realizations."""
        lm = LinearModel(f"planning-{self.mode}")
        self.build_first_stage(lm)
        col_of = {n: lm.var_index(n) for n in self._fs_names}
        if self.mode == "sdd":
            self._embed_expectation(lm, col_of)
            return lm
        block = self._add_price_block(lm, big_m if big_m is not None else self.big_m)
        for g in self.periods:
            for s in self.scenario_ids(g):
                sp = self.subproblem(g, s)
                offset, obj_terms = self._embed_sp(lm, sp, col_of)
                terms = self._feasibility_terms(block[g], s)
                terms += [(c, -w) for c, w in obj_terms]
                lm.add_row(terms, GE, 0.0, f"worst_bound[{g},{s}]")
        return lm

    def _embed_sp(self, lm, sp, col_of, obj_scale=0.0):
        """Copy an operation LP into the big model; returns objective terms."""
        offset = lm.n_vars
        for idx, n in enumerate(sp.lm.var_names):
            lm.add_var(n, sp.lm.lb[idx], sp.lm.ub[idx], sp.lm.kind[idx])
        obj_terms = [(offset + i, c) for i, c in sorted(sp.lm.obj.items())]
        for k, row in enumerate(sp.lm.rows):
            coeffs = [(offset + i, c) for i, c in row.coeffs]
            for nm, coef in sp.link.get(k, []):
                coeffs.append((col_of[nm], coef))
            lm.add_row(coeffs, row.sense, sp.base_rhs[k], row.tag)
        if obj_scale:
            for c, w in obj_terms:
                lm.add_obj(c, obj_scale * w)
        return offset, obj_terms

    def _embed_expectation(self, lm, col_of):
        for g in self.periods:
            ids = self.scenario_ids(g)
            probs = self.sdd_probabilities.get(g) if self.sdd_probabilities else None
            if probs is None:
                probs = np.full(len(ids), 1.0 / len(ids))
            for s in ids:
                sp = self.subproblem(g, s)
                self._embed_sp(lm, sp, col_of, obj_scale=float(probs[s]))

    def build_master(self, big_m: float | None = None):
        """Benders master: first stage, price block, scenario epigraphs."""
        lm = LinearModel(f"master-{self.mode}")
        self.build_first_stage(lm)
        col_of = {n: lm.var_index(n) for n in self._fs_names}
        omega = {}
        if self.mode == "sdd":
            for g in self.periods:
                ids = self.scenario_ids(g)
                probs = self.sdd_probabilities.get(g) if self.sdd_probabilities else None
                if probs is None:
                    probs = np.full(len(ids), 1.0 / len(ids))
                for s in ids:
                    omega[(g, s)] = lm.add_var(REGISTRY.name("sp_bound", g, s),
                                               0.0, math.inf, obj=float(probs[s]))
        else:
            block = self._add_price_block(lm, big_m if big_m is not None else self.big_m)
            for g in self.periods:
                for s in self.scenario_ids(g):
                    omega[(g, s)] = lm.add_var(REGISTRY.name("sp_bound", g, s))
                    terms = self._feasibility_terms(block[g], s)
                    terms.append((omega[(g, s)], -1.0))
                    lm.add_row(terms, GE, 0.0, f"worst_bound[{g},{s}]")
        return lm, MasterInfo(col_of, omega)

    # ------------------------------------------------------------------
    # fixed-plan evaluation
    # ------------------------------------------------------------------

    def first_stage_vector(self, lm, x) -> dict:
        out = {}
        for n in self._fs_names:
            val = float(x[lm.var_index(n)])
            if lm.kind[lm.var_index(n)] in (BINARY, INTEGER):
                val = float(round(val))
            out[n] = val
        return out

    def first_stage_cost(self, lm, x) -> float:
        v1 = self.first_stage_vector(lm, x)
        return sum(coef * v1[n] for n, coef in self._invest_coef.items())

    def plan_cost(self, v1: dict) -> float:
        return sum(coef * v1.get(n, 0.0) for n, coef in self._invest_coef.items())

    def extract_plan(self, lm, x) -> dict:
        return self.first_stage_vector(lm, x)

    def plan_vector(self, plan: dict) -> dict:
        missing = [n for n in self._fs_names if n not in plan]
        if missing:
            raise InvalidParams(f"plan misses first-stage entries, e.g. {missing[:3]}")
        return {n: plan[n] for n in self._fs_names}

    def worst_expectation(self, g, sp_values: dict, v1: dict, backend):
        """Value and distribution of the worst expectation at a fixed plan.

        In expectation mode the fixed probabilities are returned unchanged.
        """
        ids = self.scenario_ids(g)
        if self.mode == "sdd":
            probs = self.sdd_probabilities.get(g) if self.sdd_probabilities else None
            if probs is None:
                probs = np.full(len(ids), 1.0 / len(ids))
            return float(sum(probs[s] * sp_values[s] for s in ids)), np.asarray(probs)
        hist = self.x_history_from(v1)
        lm = LinearModel(f"worst_distribution[{g}]")
        pi = [lm.add_var(REGISTRY.name("worst_prob", g, s), obj=-sp_values[s]) for s in ids]
        for row in self._moment_rows(g):
            lm.add_row([(pi[s], float(row.weights[s])) for s in ids], row.sense,
                       row.rhs_at(hist), f"{row.kind}[{g}]")
        try:
            res = backend.solve(lm, want_duals=False)
        except Infeasible:
            raise Infeasible(
                f"ambiguity set of period {g} is empty at the candidate plan; "
                "regenerate the support with wider anchors") from None
        return -res.objective, res.x[:len(ids)]

    def build_fixed_plan_lp(self, plan: dict):
        """LP valuing a fixed plan; objective equals the full plan cost.

        Returns the model and the map (period, scenario) -> feasibility row,
        whose duals are the worst-case scenario probabilities.
        """
        v1 = self.plan_vector(plan)
        hist = self.x_history_from(v1)
        lm = LinearModel(f"fixed-plan-{self.mode}")
        lm.obj_const = self.plan_cost(v1)
        row_of = {}
        if self.mode == "sdd":
            raise InvalidParams("worst-case extraction applies to robust modes only")
        name = REGISTRY.name
        for g in self.periods:
            entries = []
            for row in self._moment_rows(g):
                if row.kind == "norm":
                    kappa = lm.add_var(name("price_norm", g), -math.inf, math.inf, obj=1.0)
                    entries.append((row, kappa, 1.0))
                    continue
                sign = 1.0 if row.sense == LE else -1.0
                od_label = f"{row.od[0]}-{row.od[1]}"
                p = lm.add_var(name(_PRICE_FAMILY[row.kind], od_label, g),
                               obj=sign * row.rhs_at(hist))
                entries.append((row, p, sign))
            for s in self.scenario_ids(g):
                sp = self.subproblem(g, s)
                sp.refresh(v1)
                offset = lm.n_vars
                for idx, n in enumerate(sp.lm.var_names):
                    lm.add_var(n, sp.lm.lb[idx], sp.lm.ub[idx], sp.lm.kind[idx])
                for row in sp.lm.rows:
                    lm.add_row([(offset + i, c) for i, c in row.coeffs],
                               row.sense, row.rhs, row.tag)
                terms = self._feasibility_terms(entries, s)
                terms += [(offset + i, -c) for i, c in sorted(sp.lm.obj.items())]
                row_of[(g, s)] = lm.add_row(terms, GE, 0.0, f"worst_bound[{g},{s}]")
        return lm, row_of

    # ------------------------------------------------------------------
    # diagnostics
    # ------------------------------------------------------------------

    def check_price_bounds(self, lm, x, big_m, slack=1e-6) -> list[str]:
        if x is None:
            return []
        bad = []
        for fam in ("price_mean_lo", "price_mean_hi", "price_sq_lo", "price_sq_hi",
                    "lin_mean_lo", "lin_mean_hi", "lin_sq_lo", "lin_sq_hi"):
            for n, idx in lm._by_name.items():
                if n.startswith(fam + "[") and x[idx] >= big_m * (1.0 - slack) - slack:
                    bad.append(n)
        return bad

    def envelope_error(self, lm, x) -> float:
        """Largest |product - price * binary| across all envelope products."""
        worst = 0.0
        for fam_lin, fam_price in (("lin_mean_lo", "price_mean_lo"),
                                   ("lin_mean_hi", "price_mean_hi"),
                                   ("lin_sq_lo", "price_sq_lo"),
                                   ("lin_sq_hi", "price_sq_hi")):
            for n, idx in lm._by_name.items():
                if not n.startswith(fam_lin + "["):
                    continue
                od_label, i, r, g = n[len(fam_lin) + 1:-1].split(",")
                p = x[lm.var_index(f"{fam_price}[{od_label},{g}]")]
                xb = round(x[lm.var_index(f"fcs_open[{i},{r}]")])
                worst = max(worst, abs(x[idx] - p * xb))
        return worst

    def cost_breakdown(self, lm, x) -> dict:
        if x is None:
            return {}
        v1 = self.first_stage_vector(lm, x)
        parts = {"fcs": 0.0, "spots": 0.0, "pv": 0.0, "ess": 0.0, "line": 0.0, "sub": 0.0}
        fam_of = {"fcs_new": "fcs", "spots_new": "spots", "pv_new": "pv",
                  "ess_new": "ess", "line_up_new": "line", "sub_new": "sub"}
        for n, coef in self._invest_coef.items():
            fam = n.split("[", 1)[0]
            parts[fam_of[fam]] += coef * v1[n]
        invest = sum(parts.values())
        total = lm.objective_value(np.asarray(x))
        out = {f"invest_{k}": v for k, v in parts.items()}
        out["invest_total"] = invest
        out["worst_operation"] = total - invest
        out["total"] = total
        return out

    def operation_split(self, res_x, sp: SecondStage) -> dict:
        """Split one operation LP's cost into purchase and penalty parts."""
        energy = penalty = 0.0
        for i, c in sp.lm.obj.items():
            fam = sp.lm.var_names[i].split("[", 1)[0]
            val = c * res_x[i]
            if fam in ("grid_p", "grid_q"):
                energy += val
            else:
                penalty += val
        return {"energy": energy, "penalty": penalty}


def _strip_decision_terms(coeffs):
    from .diffusion import AdoptionCoefficients
    return AdoptionCoefficients(
        coeffs.intercept,
        {od: {g: {} for g in by_g} for od, by_g in coeffs.shift.items()},
        coeffs.second_base,
        {od: {} for od in coeffs.variance_bonus},
        coeffs.market_potential)
