"""Out-of-sample evaluation, security audits, and the value of modelling
adoption feedback.

Three test distributions are supported: the worst case extracted from the
solved model (WCD), random distributions drawn inside the ambiguity set
(RGD), and a maximum-entropy discretization of the point estimate (ED).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import InvalidParams
from .model import Planning, REGISTRY
from .solve import benders_solve, extract_worst_case, solve_extensive


@dataclass(frozen=True)
class TestSet:
    label: str                       # "WCD" | "RGD" | "ED"
    probabilities: dict              # period -> ndarray over scenarios
    seed: int | None = None

    def __post_init__(self):
        for g, p in self.probabilities.items():
            if abs(float(np.sum(p)) - 1.0) > 1e-6 or np.any(np.asarray(p) < -1e-9):
                raise InvalidParams(f"test set {self.label}: invalid distribution at period {g}")


def worst_case_test_set(planning: Planning, plan: dict, backend) -> TestSet:
    wc = extract_worst_case(planning, plan, backend)
    return TestSet("WCD", wc.probabilities)


def random_test_set(planning: Planning, plan: dict, backend, n_draws: int = 20,
                    seed: int = 0) -> TestSet:
    """Average of Dirichlet draws kept inside the ambiguity set at the plan.

    Draws failing the moment rows are pulled toward a known-feasible
    distribution until they pass, so the sampler always terminates.
    """
    rng = np.random.default_rng(seed)
    v1 = planning.plan_vector(plan)
    hist = planning.x_history_from(v1)
    probs = {}
    for g in planning.periods:
        rows = planning._moment_rows(g)
        n = planning.inst.support.n_scenarios(g)
        anchor = _feasible_distribution(planning, g, hist, backend)
        kept = []
        for _ in range(n_draws):
            draw = rng.dirichlet(np.ones(n))
            if _in_ambiguity_set(rows, hist, draw):
                kept.append(draw)
                continue
            lo, hi = 0.0, 1.0
            for _bisect in range(40):
                mid = 0.5 * (lo + hi)
                cand = mid * draw + (1.0 - mid) * anchor
                if _in_ambiguity_set(rows, hist, cand):
                    lo = mid
                else:
                    hi = mid
            kept.append(lo * draw + (1.0 - lo) * anchor)
        probs[g] = np.mean(kept, axis=0)
    return TestSet("RGD", probs, seed)


def empirical_test_set(planning: Planning, plan: dict) -> TestSet:
    """Maximum-entropy distribution on the support matching the plan's moments.

    Fits an exponential-family weighting over the scenarios whose first and
    second moments per path reproduce the point estimate; infeasible targets
    fall back to the best least-squares moment match.
    """
    v1 = planning.plan_vector(plan)
    hist = planning.x_history_from(v1)
    coeffs = planning.eval_coeffs
    probs = {}
    for g in planning.periods:
        block = planning.inst.support.values[g]
        n, n_od = block.shape
        targets = []
        feats = []
        for j, od in enumerate(planning.od_keys):
            mu0, shift = coeffs.mean_terms(od, g)
            mean = mu0 + sum(c * hist.get(key, 0) for key, c in shift.items())
            base, sq = coeffs.second_moment_terms(od, g)
            second = base + sum(c * hist.get(key, 0) for key, c in sq.items())
            targets += [mean, second]
            feats += [block[:, j], block[:, j] ** 2]
        feats = np.asarray(feats)          # (2*n_od, n)
        targets = np.asarray(targets)

        def dual(lam):
            z = lam @ feats
            z -= z.max()
            w = np.exp(z)
            return math.log(w.sum()) + z.max() - lam @ targets

        res = minimize(dual, np.zeros(len(targets)), method="L-BFGS-B",
                       options={"maxiter": 500})
        z = res.x @ feats
        z -= z.max()
        w = np.exp(z)
        pi = w / w.sum()
        got = feats @ pi
        if np.max(np.abs(got - targets)) > 1e-4:
            warnings.warn(f"period {g}: point-estimate moments not matchable on the "
                          "support, using the closest max-entropy fit")
        probs[g] = pi
    return TestSet("ED", probs)


def _in_ambiguity_set(rows, hist, pi, tol=1e-9):
    for row in rows:
        val = float(np.dot(row.weights, pi))
        rhs = row.rhs_at(hist)
        if row.sense == "==" and abs(val - rhs) > tol:
            return False
        if row.sense == "<=" and val > rhs + tol:
            return False
        if row.sense == ">=" and val < rhs - tol:
            return False
    return True


def _feasible_distribution(planning, g, hist, backend):
    from .linmodel import LinearModel
    lm = LinearModel(f"anchor[{g}]")
    n = planning.inst.support.n_scenarios(g)
    pi = [lm.add_var(REGISTRY.name("worst_prob", g, s)) for s in range(n)]
    for row in planning._moment_rows(g):
        lm.add_row([(pi[s], float(row.weights[s])) for s in range(n)], row.sense,
                   row.rhs_at(hist), f"{row.kind}[{g}]")
    res = backend.solve(lm)
    return res.x[:n]


# ---------------------------------------------------------------------------
# plan simulation
# ---------------------------------------------------------------------------

@dataclass
class EvaluationReport:
    label: str
    covered_fraction: dict           # (g, d, t) -> expected covered share
    covered_aggregate: float
    shed_kwh_per_day: dict           # (g, d) -> expected kWh shed per day
    shed_expected: float             # day-weight averaged kWh/day
    operation_cost: float            # probability-weighted, discounted
    voltage_extremes: dict           # dn node -> (min pu, max pu)
    line_loading: dict               # line key -> max |flow| / rating
    diffusion: dict                  # od -> adoption per period
    relax_limits: bool = False

    def summary(self) -> dict:
        return {
            "label": self.label,
            "covered_aggregate": self.covered_aggregate,
            "shed_kwh_per_day": self.shed_expected,
            "operation_cost": self.operation_cost,
            "voltage_min": min(v[0] for v in self.voltage_extremes.values()),
            "voltage_max": max(v[1] for v in self.voltage_extremes.values()),
            "line_loading_max": max(self.line_loading.values()) if self.line_loading else 0.0,
            "relax_limits": self.relax_limits,
        }


def simulate_plan(planning: Planning, plan: dict, test_set: TestSet, backend,
                  relax_limits: bool = False) -> EvaluationReport:
    """Re-run the operation stage at a fixed plan under a test distribution."""
    inst = planning.inst
    v1 = planning.plan_vector(plan)
    covered, shed = {}, {}
    op_cost = 0.0
    volt = {n: (math.inf, -math.inf) for n in inst.dn.nodes}
    loading = {ln.key: 0.0 for ln in inst.dn.lines}
    for g in planning.periods:
        pis = np.asarray(test_set.probabilities[g], dtype=float)
        for s in planning.scenario_ids(g):
            pi = float(pis[s])
            theta = inst.support.vector(g, s)
            sp = (planning.build_second_stage(g, s, theta, relax_limits=True)
                  if relax_limits else planning.subproblem(g, s))
            val, res = sp.solve(v1, backend, want_duals=False)
            op_cost += pi * val
            _accumulate_metrics(planning, g, s, sp, res.x, pi, theta, v1,
                                covered, shed, volt, loading)
    demand_w, covered_w = 0.0, 0.0
    for (g, d, t), (num, den) in covered.items():
        covered_w += num
        demand_w += den
    covered_frac = {k: (num / den if den > 1e-12 else 1.0)
                    for k, (num, den) in covered.items()}
    aggregate = covered_w / demand_w if demand_w > 1e-12 else 1.0
    shed_expected = 0.0
    total_w = 0.0
    for (g, d), kwh in shed.items():
        w = inst.days[g][d].weight
        shed_expected += w * kwh
        total_w += w
    shed_expected = shed_expected / total_w if total_w else 0.0
    trajectory = diffusion_trajectory(planning, plan)
    return EvaluationReport(test_set.label, covered_frac, aggregate, shed,
                            shed_expected, op_cost,
                            {n: (math.sqrt(lo), math.sqrt(hi)) for n, (lo, hi) in volt.items()},
                            loading, trajectory, relax_limits)


def _accumulate_metrics(planning, g, s, sp, x, pi, theta, v1, covered, shed, volt, loading):
    inst = planning.inst
    lm = sp.lm
    days = inst.days[g]
    for d_idx, day in enumerate(days):
        hours = len(next(iter(day.load_p.values())))
        shed_kwh = 0.0
        for t in range(hours):
            served = total = 0.0
            for i in planning.candidates:
                served += x[lm.var_index(REGISTRY.name("serve", i, d_idx, t, g, s))]
            for od in planning.od_keys:
                total += theta[od] * day.traffic[od][t]
            num, den = covered.get((g, d_idx, t), (0.0, 0.0))
            covered[(g, d_idx, t)] = (num + pi * served, den + pi * total)
            for n in inst.dn.nodes:
                frac = x[lm.var_index(REGISTRY.name("shed", n, d_idx, t, g, s))]
                shed_kwh += frac * day.load_p[n][t] * inst.tech.dt_hours * 1e3
                u = x[lm.var_index(REGISTRY.name("volt_sq", n, d_idx, t, g, s))]
                lo, hi = volt[n]
                volt[n] = (min(lo, u), max(hi, u))
            for ln in inst.dn.lines:
                f = abs(x[lm.var_index(REGISTRY.name("flow_p", ln.key[0], ln.key[1],
                                                     d_idx, t, g, s))])
                cap = ln.p_rating_mw
                if ln.expandable:
                    cap += (inst.tech.line_exp_p_mw
                            * v1[REGISTRY.name("line_up", *ln.key, g)])
                loading[ln.key] = max(loading[ln.key], f / cap)
        shed[(g, d_idx)] = shed.get((g, d_idx), 0.0) + pi * shed_kwh


def diffusion_trajectory(planning: Planning, plan: dict) -> dict:
    """Expected adoption per path and period at the given plan."""
    v1 = planning.plan_vector(plan)
    hist = planning.x_history_from(v1)
    coeffs = planning.eval_coeffs
    return {od: [coeffs.expected_adoption(od, g, hist) for g in planning.periods]
            for od in planning.od_keys}


# ---------------------------------------------------------------------------
# value of modelling adoption feedback
# ---------------------------------------------------------------------------

@dataclass
class FeedbackValueReport:
    value: float
    cost_aware: float          # full-model cost of the adoption-aware plan
    cost_blind: float          # full-model cost of the adoption-blind plan
    plan_aware: dict = field(repr=False, default=None)
    plan_blind: dict = field(repr=False, default=None)


def vd3rs(inst, backend, gap_tol: float = 1e-7, method: str = "extensive",
          max_iter: int = 80, big_m: float | None = None) -> FeedbackValueReport:
    """Relative regret of planning as if siting did not influence adoption.

    Both plans are valued by the adoption-aware model with the plan fixed,
    so coincident models yield exactly zero.
    """
    aware = Planning(inst, "ddu", big_m=big_m)
    blind = Planning(inst, "diu", big_m=big_m)
    if method == "benders":
        rep_aware, _ = benders_solve(aware, backend, gap_tol=max(gap_tol, 1e-6),
                                     max_iter=max_iter)
        rep_blind, _ = benders_solve(blind, backend, gap_tol=max(gap_tol, 1e-6),
                                     max_iter=max_iter)
    else:
        rep_aware = solve_extensive(aware, backend, gap_tol=gap_tol)
        rep_blind = solve_extensive(blind, backend, gap_tol=gap_tol)
    cost_aware = fixed_plan_value(aware, rep_aware.plan, backend)
    cost_blind = fixed_plan_value(aware, rep_blind.plan, backend)
    value = (cost_blind - cost_aware) / cost_aware
    return FeedbackValueReport(value, cost_aware, cost_blind,
                               rep_aware.plan, rep_blind.plan)


def fixed_plan_value(planning: Planning, plan: dict, backend) -> float:
    """Full-model cost of a fixed plan (investment plus worst expectation)."""
    lp, _rows = planning.build_fixed_plan_lp(plan)
    return backend.solve(lp).objective
