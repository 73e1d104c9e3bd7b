"""EV adoption dynamics and the moment description of the ambiguity sets.

Adoption on a path follows a saturating recursion: the step into period g
adds ``rate[g] * convenience(x, g) * (1 - adoption/market_potential)``,
where the convenience level responds to stations opened on the path by the
previous period.  For optimization the recursion is linearized around the
zero-plan trajectory, which keeps the intercept exact when no stations are
built and makes every adoption quantity affine in the siting binaries.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySupport, InvalidParams

PERIOD_0 = 0   # siting decisions are indexed 1..n_periods; x[, 0] == 0


@dataclass(frozen=True)
class DiffusionParams:
    market_potential: float                      # fraction of the fleet, K <= 1
    basic_rate: dict                             # od -> tuple of per-period rates
    initial: dict                                # od -> initial adoption fraction
    incentive: dict                              # od -> {node: opening bonus}
    std_dev: dict                                # od -> tuple of per-period std devs
    variance_incentive: dict                     # od -> {node: dispersion bonus}

    def __post_init__(self):
        k = self.market_potential
        if not (0 < k <= 1):
            raise InvalidParams(f"market potential {k} outside (0, 1]")
        for od, th0 in self.initial.items():
            if not (0 < th0 < k):
                raise InvalidParams(f"initial adoption {th0} for {od} outside (0, K)")
        for od, rates in self.basic_rate.items():
            if any(a < 0 for a in rates):
                raise InvalidParams(f"negative basic rate for {od}")
        for table in (self.incentive, self.variance_incentive):
            for od, by_node in table.items():
                if any(v < 0 for v in by_node.values()):
                    raise InvalidParams(f"negative incentive entry for {od}")

    def n_periods(self, od):
        return len(self.basic_rate[od])


@dataclass(frozen=True)
class AmbiguityParams:
    mean_radius: dict       # od -> tuple per period (absolute radius)
    second_lo: float        # multiplier below the expected second moment
    second_hi: float        # multiplier above it

    def __post_init__(self):
        if not (0 < self.second_lo <= 1 <= self.second_hi):
            raise InvalidParams(
                f"second-moment multipliers ({self.second_lo}, {self.second_hi}) "
                "must straddle 1")
        for od, radii in self.mean_radius.items():
            if any(r < 0 for r in radii):
                raise InvalidParams(f"negative mean radius for {od}")


def convenience_level(params: DiffusionParams, od, x_prev: dict) -> float:
    """1 plus the opening bonuses of stations present in the prior period."""
    bonus = params.incentive.get(od, {})
    return 1.0 + sum(delta * x_prev.get(i, 0) for i, delta in bonus.items())


def exact_adoption_recursion(params: DiffusionParams, od, x_history,
                             n_periods: int | None = None) -> np.ndarray:
    """Run the saturating recursion and return adoption per period 1..G.

    ``x_history[(i, r)]`` gives the siting indicator of node ``i`` at period
    ``r``; entries for r == 0 are ignored (no stations before the horizon).
    Serves as the validation oracle for the linearized coefficients.
    """
    g_max = n_periods or params.n_periods(od)
    k = params.market_potential
    theta = params.initial[od]
    out = np.empty(g_max)
    for g in range(1, g_max + 1):
        x_prev = {i: x_history.get((i, g - 1), 0) for i in params.incentive.get(od, {})}
        d = convenience_level(params, od, x_prev)
        theta = theta + params.basic_rate[od][g - 1] * d * (1.0 - theta / k)
        out[g - 1] = theta
    return out


@dataclass(frozen=True)
class AdoptionCoefficients:
    """Affine description of expected adoption per (od, period).

    ``intercept[od][g-1]`` is the adoption of the zero-plan trajectory and
    ``shift[od][g]`` maps (node, decision period r, 1 <= r <= g-1) to the
    coefficient on the siting binary x[node, r].
    """

    intercept: dict
    shift: dict            # od -> {g: {(node, r): coef}}
    second_base: dict      # od -> tuple per period of mu^2 + sigma^2
    variance_bonus: dict   # od -> {node: dispersion bonus}
    market_potential: float

    def expected_adoption(self, od, g, x_history) -> float:
        val = self.intercept[od][g - 1]
        for (i, r), coef in self.shift[od].get(g, {}).items():
            val += coef * x_history.get((i, r), 0)
        if val > self.market_potential + 1e-12:
            warnings.warn(
                f"linearized adoption {val:.4f} for {od} at period {g} clamped to "
                f"market potential {self.market_potential}", stacklevel=2)
            val = self.market_potential
        return max(0.0, val)

    def mean_terms(self, od, g):
        """Intercept and x-coefficients of the mean, without clamping."""
        return self.intercept[od][g - 1], self.shift[od].get(g, {})

    def second_moment_terms(self, od, g):
        """Base value and x-coefficients (on x[node, g-1]) of the 2nd moment."""
        base = self.second_base[od][g - 1]
        coefs = {}
        if g - 1 >= 1:
            for i, dv in self.variance_bonus.get(od, {}).items():
                coefs[(i, g - 1)] = base * dv
        return base, coefs


def adoption_coefficients(params: DiffusionParams, od_keys=None) -> AdoptionCoefficients:
    """Linearize the recursion around the zero-plan trajectory.

    The saturation factor of step r is frozen at its zero-plan value, so the
    intercept reproduces the exact recursion at x == 0 and every opening
    bonus enters linearly with the step's own basic rate.
    """
    ods = list(od_keys) if od_keys is not None else list(params.basic_rate)
    k = params.market_potential
    intercept, shift, second_base = {}, {}, {}
    for od in ods:
        if params.initial[od] == 0:
            raise InvalidParams(f"initial adoption for {od} must be nonzero")
        base = exact_adoption_recursion(params, od, {})
        g_max = params.n_periods(od)
        sat = np.empty(g_max)          # zero-plan saturation entering step g
        theta_prev = params.initial[od]
        for g in range(1, g_max + 1):
            sat[g - 1] = 1.0 - theta_prev / k
            theta_prev = base[g - 1]
        intercept[od] = tuple(base)
        by_g = {}
        bonus = params.incentive.get(od, {})
        for g in range(1, g_max + 1):
            coefs = {}
            # step r of the recursion carries x[., r-1]; only r >= 2 sees
            # decisions from inside the horizon
            for r in range(2, g + 1):
                a_step = params.basic_rate[od][r - 1] * sat[r - 1]
                for i, delta in bonus.items():
                    if a_step * delta:
                        coefs[(i, r - 1)] = coefs.get((i, r - 1), 0.0) + a_step * delta
            by_g[g] = coefs
        shift[od] = by_g
        mu = np.asarray(intercept[od])
        sig = np.asarray(params.std_dev[od], dtype=float)
        second_base[od] = tuple(mu ** 2 + sig ** 2)
    return AdoptionCoefficients(intercept, shift, second_base,
                                {od: dict(params.variance_incentive.get(od, {})) for od in ods},
                                k)


def second_moment_bound(coeffs: AdoptionCoefficients, ambiguity: AmbiguityParams,
                        od, g, x_prev: dict) -> tuple[float, float]:
    """Lower and upper admissible second moments at the given prior-period plan."""
    base, coefs = coeffs.second_moment_terms(od, g)
    val = base + sum(c * x_prev.get(i, 0) for (i, _r), c in coefs.items())
    return val * ambiguity.second_lo, val * ambiguity.second_hi


@dataclass(frozen=True)
class MomentRow:
    """One ambiguity-set row: sum_s pi_s * weight_s  (sense)  const + x-terms."""

    kind: str               # "norm" | "mean_lo" | "mean_hi" | "sq_lo" | "sq_hi"
    od: object | None
    weights: np.ndarray     # coefficient of each scenario probability
    sense: str              # "<=" | ">=" | "=="
    const: float
    x_coeffs: dict          # (node, period r) -> rhs coefficient

    def rhs_at(self, x_history) -> float:
        return self.const + sum(c * x_history.get(key, 0) for key, c in self.x_coeffs.items())


def ambiguity_constraint_rows(coeffs: AdoptionCoefficients, ambiguity: AmbiguityParams,
                              support, g: int, od_keys) -> list[MomentRow]:
    """Row description of the ambiguity set of period ``g``.

    ``support`` is the (n_scenarios, n_od) array of adoption realizations.
    The right-hand sides are affine in the siting binaries; both the primal
    worst-distribution LP and the dualized reformulation are generated from
    these rows, which keeps the two sides consistent by construction.
    """
    support = np.asarray(support, dtype=float)
    if support.ndim != 2 or support.shape[0] == 0:
        raise EmptySupport(f"period {g} has no scenarios")
    rows = [MomentRow("norm", None, np.ones(support.shape[0]), "==", 1.0, {})]
    for j, od in enumerate(od_keys):
        mu0, mean_coefs = coeffs.mean_terms(od, g)
        eps = ambiguity.mean_radius[od][g - 1]
        theta = support[:, j]
        rows.append(MomentRow("mean_lo", od, theta, ">=", mu0 - eps, dict(mean_coefs)))
        rows.append(MomentRow("mean_hi", od, theta, "<=", mu0 + eps, dict(mean_coefs)))
        base, sq_coefs = coeffs.second_moment_terms(od, g)
        lo = {key: c * ambiguity.second_lo for key, c in sq_coefs.items()}
        hi = {key: c * ambiguity.second_hi for key, c in sq_coefs.items()}
        rows.append(MomentRow("sq_lo", od, theta ** 2, ">=", base * ambiguity.second_lo, lo))
        rows.append(MomentRow("sq_hi", od, theta ** 2, "<=", base * ambiguity.second_hi, hi))
    return rows
