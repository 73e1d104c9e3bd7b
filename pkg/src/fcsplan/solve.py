"""Solver backends, extensive-form solve, Benders engine, worst-case extraction.

The backend contract: ``solve`` returns primal values for any model and,
for pure LPs, one dual value per row with the convention
``dual = d(objective)/d(rhs)`` of the row as stated (any sense).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import Bounds, LinearConstraint, linprog, milp

from .errors import DualUnavailable, Infeasible, IterationLimit, SolverFailure, UnboundedDuals
from .linmodel import CONTINUOUS, EQ, GE, LE, LinearModel


@dataclass
class SolveResult:
    status: str                 # "optimal" | "limit"
    objective: float
    x: np.ndarray
    duals: np.ndarray | None = None   # per row, d(obj)/d(rhs)
    mip_gap: float = 0.0
    wall_s: float = 0.0

    def value(self, model: LinearModel, name: str) -> float:
        return float(self.x[model.var_index(name)])


class SolverBackend:
    """Interface every backend implements."""

    capabilities: frozenset = frozenset()

    def solve(self, model: LinearModel, gap_tol: float = 1e-4,
              want_duals: bool = False, time_limit: float | None = None) -> SolveResult:
        raise NotImplementedError


class HighsBackend(SolverBackend):
    """scipy/HiGHS backend.  LPs via linprog (duals), MILPs via milp."""

    capabilities = frozenset({"lp", "milp"})

    def solve(self, model, gap_tol=1e-4, want_duals=False, time_limit=None):
        model.validate()
        t0 = time.perf_counter()
        if model.is_mip():
            if want_duals:
                raise DualUnavailable("duals are only available for pure LPs")
            res = self._solve_milp(model, gap_tol, time_limit)
        else:
            res = self._solve_lp(model, want_duals)
        res.wall_s = time.perf_counter() - t0
        return res

    # -- LP ------------------------------------------------------------

    def _assemble(self, model, senses):
        rows_i, cols_i, vals = [], [], []
        rhs = []
        keep = []
        for k, row in enumerate(model.rows):
            if row.sense not in senses:
                continue
            keep.append(k)
            r = len(rhs)
            flip = -1.0 if row.sense == GE else 1.0
            for idx, coef in row.coeffs:
                rows_i.append(r)
                cols_i.append(idx)
                vals.append(flip * coef)
            rhs.append(flip * row.rhs)
        mat = sparse.csr_matrix((vals, (rows_i, cols_i)),
                                shape=(len(rhs), model.n_vars))
        return mat, np.asarray(rhs, dtype=float), keep

    def _solve_lp(self, model, want_duals):
        a_ub, b_ub, keep_ub = self._assemble(model, (LE, GE))
        a_eq, b_eq, keep_eq = self._assemble(model, (EQ,))
        c = np.zeros(model.n_vars)
        for i, v in model.obj.items():
            c[i] = v
        bounds = list(zip(model.lb, model.ub))
        res = linprog(c, A_ub=a_ub if len(b_ub) else None, b_ub=b_ub if len(b_ub) else None,
                      A_eq=a_eq if len(b_eq) else None, b_eq=b_eq if len(b_eq) else None,
                      bounds=bounds, method="highs")
        if res.status == 2:
            raise Infeasible(f"{model.name}: LP infeasible")
        if res.status != 0:
            raise SolverFailure(f"{model.name}: linprog status {res.status} ({res.message})")
        duals = None
        if want_duals:
            duals = np.zeros(model.n_rows)
            if len(b_ub):
                marg = res.ineqlin.marginals
                for pos, k in enumerate(keep_ub):
                    flip = -1.0 if model.rows[k].sense == GE else 1.0
                    duals[k] = flip * marg[pos]
            if len(b_eq):
                marg = res.eqlin.marginals
                for pos, k in enumerate(keep_eq):
                    duals[k] = marg[pos]
        return SolveResult("optimal", float(res.fun) + model.obj_const, res.x, duals)

    # -- MILP ------------------------------------------------------------

    def _solve_milp(self, model, gap_tol, time_limit):
        c = np.zeros(model.n_vars)
        for i, v in model.obj.items():
            c[i] = v
        constraints = []
        rows_i, cols_i, vals, lo, hi = [], [], [], [], []
        for row in model.rows:
            r = len(lo)
            for idx, coef in row.coeffs:
                rows_i.append(r)
                cols_i.append(idx)
                vals.append(coef)
            if row.sense == LE:
                lo.append(-np.inf)
                hi.append(row.rhs)
            elif row.sense == GE:
                lo.append(row.rhs)
                hi.append(np.inf)
            else:
                lo.append(row.rhs)
                hi.append(row.rhs)
        if lo:
            mat = sparse.csc_matrix((vals, (rows_i, cols_i)),
                                    shape=(len(lo), model.n_vars))
            constraints = [LinearConstraint(mat, lo, hi)]
        integrality = np.array([0 if k == CONTINUOUS else 1 for k in model.kind])
        options = {"mip_rel_gap": gap_tol}
        if time_limit is not None:
            options["time_limit"] = time_limit
        res = milp(c=c, constraints=constraints, integrality=integrality,
                   bounds=Bounds(np.array(model.lb), np.array(model.ub)),
                   options=options)
        if res.status == 2:
            raise Infeasible(f"{model.name}: MILP infeasible")
        if res.status not in (0, 1) or res.x is None:
            raise SolverFailure(f"{model.name}: milp status {res.status} ({res.message})")
        status = "optimal" if res.status == 0 else "limit"
        gap = float(getattr(res, "mip_gap", 0.0) or 0.0)
        return SolveResult(status, float(res.fun) + model.obj_const, res.x, None, gap)


_BACKENDS = {"scipy": HighsBackend, "highs": HighsBackend}


def make_backend(name: str = "scipy") -> SolverBackend:
    try:
        return _BACKENDS[name.lower()]()
    except KeyError:
        raise SolverFailure(f"unknown solver backend {name!r}") from None


# ---------------------------------------------------------------------------
# extensive-form solve
# ---------------------------------------------------------------------------

@dataclass
class SolveReport:
    objective: float
    status: str
    mip_gap: float
    plan: dict
    cost_breakdown: dict[str, float]
    wall_s: float = 0.0
    big_m: float = 0.0
    extras: dict = field(default_factory=dict)


def solve_extensive(planning, backend: SolverBackend, gap_tol: float = 1e-4,
                    max_doublings: int = 3) -> SolveReport:
    """Solve the single-level reformulation to optimality.

    The moment-price bound is validated a posteriori: if any price sits at
    the bound (or an envelope product is inexact), the bound is doubled and
    the model rebuilt, at most ``max_doublings`` times.
    """
    t0 = time.perf_counter()
    big_m = planning.big_m
    for attempt in range(max_doublings + 1):
        model = planning.build_extensive(big_m=big_m)
        res = backend.solve(model, gap_tol=gap_tol)
        x = _polish_integers(model, res.x, backend)
        objective = model.objective_value(x)
        bad = planning.check_price_bounds(model, x, big_m)
        if not bad:
            plan = planning.extract_plan(model, x)
            breakdown = planning.cost_breakdown(model, x)
            return SolveReport(objective, res.status, res.mip_gap, plan,
                               breakdown, time.perf_counter() - t0, big_m)
        big_m *= 2.0
    raise UnboundedDuals(
        f"moment prices at bound after {max_doublings} doublings (M={big_m:g}): {bad}")


def _polish_integers(model, x, backend):
    """Re-solve with integers pinned at their rounded values.

    HiGHS satisfies integrality only to a tolerance; pinning and re-solving
    the continuous rest makes envelope products exact and keeps the
    objective within integrality noise.
    """
    ints = model.integer_indices()
    if not ints:
        return x
    fixed = model.fix_variables({i: round(x[i]) for i in ints}, drop_integrality=True)
    try:
        res = backend.solve(fixed)
    except (Infeasible, SolverFailure):
        return x
    return res.x


# ---------------------------------------------------------------------------
# Benders decomposition
# ---------------------------------------------------------------------------

@dataclass
class Cut:
    period: int
    scenario: int
    const: float
    coeffs: dict[int, float]      # master column index -> coefficient


@dataclass
class BendersState:
    iterations: int = 0
    lower: float = -math.inf
    upper: float = math.inf
    gap: float = math.inf
    cuts: list[Cut] = field(default_factory=list)
    incumbent: dict | None = None
    history: list[tuple[int, float, float, float, float]] = field(default_factory=list)
    converged: bool = False

    def log_csv(self) -> str:
        lines = ["iter,lower,upper,gap,wall_ms"]
        for it, lb, ub, gap, ms in self.history:
            lines.append(f"{it},{lb:.10g},{ub:.10g},{gap:.6g},{ms:.1f}")
        return "\n".join(lines) + "\n"


def benders_solve(planning, backend: SolverBackend, gap_tol: float = 1e-4,
                  max_iter: int = 60, mp_gap: float = 1e-9,
                  max_doublings: int = 3) -> tuple[SolveReport, BendersState]:
    """Master/subproblem loop with one optimality cut per (period, scenario).

    The master carries the first stage plus the moment-price block; each
    subproblem is the day-weighted operation LP of one period under one
    adoption realization.  Lower bounds are master optima and therefore
    nondecreasing; upper bounds come from evaluating the candidate plan.
    """
    t_start = time.perf_counter()
    big_m = planning.big_m
    for attempt in range(max_doublings + 1):
        report, state = _benders_loop(planning, backend, gap_tol, max_iter, mp_gap, big_m)
        # a posteriori bound check on the final master solution
        if not report.extras.get("price_bound_hit"):
            report.wall_s = time.perf_counter() - t_start
            report.big_m = big_m
            return report, state
        big_m *= 2.0
    raise UnboundedDuals(f"moment prices at bound after {max_doublings} doublings")


def _benders_loop(planning, backend, gap_tol, max_iter, mp_gap, big_m):
    master, mp_info = planning.build_master(big_m=big_m)
    subproblems = planning.subproblems()
    state = BendersState()
    best_plan_x = None
    t0 = time.perf_counter()

    for it in range(1, max_iter + 1):
        res = backend.solve(master, gap_tol=mp_gap)
        lower = res.objective
        # master relaxations tighten monotonically; guard against solver noise
        state.lower = max(state.lower, lower)
        v1 = planning.first_stage_vector(master, res.x)

        sp_values = {}
        upper_ops = 0.0
        for (g, s), sp in subproblems.items():
            val, sp_res = sp.solve(v1, backend)
            sp_values[(g, s)] = val
            cut = sp.cut(v1, val, sp_res, mp_info.column_of)
            state.cuts.append(Cut(g, s, cut[0], cut[1]))
            _add_cut_row(master, mp_info, g, s, cut)
        for g in planning.periods:
            upper_ops += planning.worst_expectation(
                g, {s: sp_values[(g, s)] for s in planning.scenario_ids(g)},
                v1, backend)[0]
        invest = planning.first_stage_cost(master, res.x)
        upper = invest + upper_ops
        if upper < state.upper - 1e-12 or state.incumbent is None:
            state.upper = min(state.upper, upper)
            best_plan_x = res.x.copy()
            state.incumbent = planning.extract_plan(master, res.x)
        gap = abs(state.upper - state.lower) / max(abs(state.upper), 1e-12)
        state.gap = gap
        state.iterations = it
        state.history.append((it, state.lower, state.upper, gap,
                              (time.perf_counter() - t0) * 1e3))
        if gap <= gap_tol:
            state.converged = True
            break

    if not state.converged and state.iterations >= max_iter:
        pass  # return best incumbent with converged=False, callers decide

    bad = planning.check_price_bounds(master, best_plan_x, big_m) if best_plan_x is not None else []
    report = SolveReport(state.upper, "optimal" if state.converged else "limit",
                         state.gap, state.incumbent,
                         planning.cost_breakdown(master, best_plan_x),
                         extras={"price_bound_hit": bad}, big_m=big_m)
    return report, state


def _add_cut_row(master, mp_info, g, s, cut):
    const, coeffs = cut
    omega = mp_info.omega[(g, s)]
    terms = [(omega, 1.0)] + [(col, -coef) for col, coef in coeffs.items()]
    master.add_row(terms, GE, const, f"cut[{g},{s}]")


# ---------------------------------------------------------------------------
# worst-case distribution extraction
# ---------------------------------------------------------------------------

@dataclass
class WorstCaseDistribution:
    probabilities: dict[int, np.ndarray]    # period -> vector over scenarios
    inner_values: dict[int, float]          # period -> worst-case expected cost
    cross_check: dict[int, float]           # period -> primal inner-max value


def extract_worst_case(planning, plan, backend: SolverBackend) -> WorstCaseDistribution:
    """Read worst-case scenario probabilities off the fixed-plan LP duals.

    The fixed-plan LP minimizes the moment-price block plus operation
    copies; the dual of each scenario's price-feasibility row is the
    probability the adversary puts on that realization.  A primal
    inner-max LP per period cross-checks the value.
    """
    lp, row_of = planning.build_fixed_plan_lp(plan)
    res = backend.solve(lp, want_duals=True)
    if res.duals is None:
        raise DualUnavailable("backend returned no duals for the fixed-plan LP")
    probs, inner, cross = {}, {}, {}
    for g in planning.periods:
        ids = planning.scenario_ids(g)
        delta = np.array([res.duals[row_of[(g, s)]] for s in ids])
        probs[g] = delta
        v1 = planning.plan_vector(plan)
        sp_values = {}
        for s in ids:
            val, _ = planning.subproblem(g, s).solve(v1, backend, want_duals=False)
            sp_values[s] = val
        inner[g] = float(np.dot(delta, [sp_values[s] for s in ids]))
        cross[g] = planning.worst_expectation(g, sp_values, v1, backend)[0]
    return WorstCaseDistribution(probs, inner, cross)
