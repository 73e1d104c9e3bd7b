"""Adoption-rate support sets and representative-day profiles."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .diffusion import ambiguity_constraint_rows
from .errors import DegenerateSpread, NonFiniteValue, SchemaError

HOURS = 24
DAYS_PER_YEAR = 365.0


@dataclass(frozen=True)
class ScenarioSupport:
    od_keys: tuple
    values: dict            # period g -> ndarray (n_scenarios, n_od)
    seed: int

    def n_scenarios(self, g):
        return self.values[g].shape[0]

    def vector(self, g, s):
        """Adoption realization s of period g as {od: value}."""
        row = self.values[g][s]
        return {od: float(row[j]) for j, od in enumerate(self.od_keys)}

    def to_json(self) -> str:
        payload = {
            "od_keys": [list(k) for k in self.od_keys],
            "seed": self.seed,
            "values": {str(g): v.tolist() for g, v in self.values.items()},
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ScenarioSupport":
        payload = json.loads(text)
        od_keys = tuple(tuple(k) for k in payload["od_keys"])
        values = {int(g): np.asarray(v, dtype=float)
                  for g, v in payload["values"].items()}
        return ScenarioSupport(od_keys, values, int(payload["seed"]))


def generate_support(coeffs, ambiguity, od_keys, n_periods: int,
                     n_scenarios: int, seed: int) -> ScenarioSupport:
    """Stratified support wide enough to keep the ambiguity set non-empty.

    Every period gets anchor vectors at the zero-plan and full-plan means
    and at the widened extremes, then stratified uniform fill in between.
    Anchors guarantee that the moment box of any siting plan intersects the
    convex hull of the support.
    """
    if n_scenarios < 2:
        raise ValueError("n_scenarios must be at least 2")
    rng = np.random.default_rng(seed)
    od_keys = tuple(od_keys)
    values = {}
    for g in range(1, n_periods + 1):
        lo, hi, mid0, mid1 = [], [], [], []
        degenerate = True
        for od in od_keys:
            mu0, shift = coeffs.mean_terms(od, g)
            full = mu0 + sum(shift.values())
            sig = np.sqrt(max(coeffs.second_base[od][g - 1] - coeffs.intercept[od][g - 1] ** 2, 0.0))
            eps = ambiguity.mean_radius[od][g - 1]
            if sig > 0 or eps > 0 or full > mu0:
                degenerate = False
            lo.append(max(0.0, mu0 - 3.0 * sig - eps))
            hi.append(min(1.0, full + 3.0 * sig + eps))
            mid0.append(mu0)
            mid1.append(full)
        lo, hi = np.array(lo), np.array(hi)
        if degenerate:
            warnings.warn(f"period {g}: zero spread, emitting a singleton support",
                          DegenerateSpread)
            values[g] = np.array(mid0)[None, :]
            continue
        anchors = [lo, hi, np.array(mid0), np.array(mid1)]
        unique = []
        for a in anchors:
            if not any(np.allclose(a, u, atol=1e-12) for u in unique):
                unique.append(a)
        unique = unique[:n_scenarios]
        n_fill = n_scenarios - len(unique)
        strata = np.empty((n_fill, len(od_keys)))
        for j in range(len(od_keys)):
            edges = np.linspace(lo[j], hi[j], n_fill + 1)
            pts = edges[:-1] + rng.random(n_fill) * np.diff(edges)
            strata[:, j] = rng.permutation(pts)
        block = np.vstack([np.array(unique), strata]) if n_fill else np.array(unique)
        values[g] = np.clip(block, 0.0, 1.0)
    return ScenarioSupport(od_keys, values, seed)


def check_support_feasibility(coeffs, ambiguity, support: ScenarioSupport,
                              x_histories) -> list[str]:
    """Feasibility of 'find a distribution in the ambiguity set' per plan.

    Returns a list of human-readable problems; empty means every given
    siting history admits at least one distribution on the support.
    """
    from scipy.optimize import linprog

    problems = []
    for g, block in support.values.items():
        rows = ambiguity_constraint_rows(coeffs, ambiguity, block, g, support.od_keys)
        for label, hist in x_histories.items():
            a_ub, b_ub, a_eq, b_eq = [], [], [], []
            for row in rows:
                rhs = row.rhs_at(hist)
                if row.sense == "==":
                    a_eq.append(row.weights)
                    b_eq.append(rhs)
                elif row.sense == "<=":
                    a_ub.append(row.weights)
                    b_ub.append(rhs)
                else:
                    a_ub.append(-row.weights)
                    b_ub.append(-rhs)
            res = linprog(np.zeros(block.shape[0]), A_ub=np.array(a_ub), b_ub=np.array(b_ub),
                          A_eq=np.array(a_eq), b_eq=np.array(b_eq),
                          bounds=[(0, None)] * block.shape[0], method="highs")
            if res.status != 0:
                problems.append(f"period {g}, plan {label!r}: ambiguity set empty")
    return problems


@dataclass(frozen=True)
class RepresentativeDay:
    day_id: int
    weight: float                   # days of the year this profile stands for
    traffic: dict                   # od -> ndarray(24) vehicles/h
    pv: dict                        # tn node -> ndarray(24) per-unit output
    load_p: dict                    # dn node -> ndarray(24) MW
    load_q: dict                    # dn node -> ndarray(24) MVar

    def __post_init__(self):
        for table in (self.traffic, self.pv, self.load_p, self.load_q):
            for key, arr in table.items():
                if len(arr) != HOURS:
                    raise SchemaError(f"profile {key} has {len(arr)} hours, expected {HOURS}")
                if not np.all(np.isfinite(arr)):
                    raise NonFiniteValue(f"profile {key} contains NaN or inf")
        for key, arr in self.pv.items():
            if np.any(arr < -1e-12) or np.any(arr > 1.0 + 1e-12):
                raise SchemaError(f"pv profile {key} outside [0, 1]")


_SERIES = ("traffic", "pv", "load_p", "load_q", "weight")


def representative_days_frame(days_by_period: dict) -> pd.DataFrame:
    records = []
    for g, days in sorted(days_by_period.items()):
        for day in days:
            records.append((g, day.day_id, -1, "weight", "", day.weight))
            for series, table in (("traffic", day.traffic), ("pv", day.pv),
                                  ("load_p", day.load_p), ("load_q", day.load_q)):
                for key, arr in sorted(table.items(), key=lambda kv: str(kv[0])):
                    label = f"{key[0]}-{key[1]}" if isinstance(key, tuple) else str(key)
                    for t in range(HOURS):
                        records.append((g, day.day_id, t, series, label, float(arr[t])))
    return pd.DataFrame.from_records(
        records, columns=["period", "day", "hour", "series", "key", "value"])


def save_representative_days(days_by_period: dict, path):
    representative_days_frame(days_by_period).to_csv(path, index=False)


def load_representative_days(path, od_keys, tn_nodes, dn_nodes) -> dict:
    """Read and validate the profile CSV; weights renormalized to 365/year."""
    frame = pd.read_csv(path)
    required = {"period", "day", "hour", "series", "key", "value"}
    if not required.issubset(frame.columns):
        raise SchemaError(f"representative-day file misses columns "
                          f"{sorted(required - set(frame.columns))}")
    if not np.all(np.isfinite(frame["value"].to_numpy())):
        raise NonFiniteValue("representative-day file contains NaN or inf values")
    bad = set(frame["series"]) - set(_SERIES)
    if bad:
        raise SchemaError(f"unknown series {sorted(bad)}")
    od_by_label = {f"{o}-{d}": (o, d) for (o, d) in od_keys}
    out = {}
    for g, per_g in frame.groupby("period"):
        days = []
        for day_id, per_day in per_g.groupby("day"):
            weight_rows = per_day[per_day["series"] == "weight"]
            if len(weight_rows) != 1:
                raise SchemaError(f"period {g} day {day_id}: need exactly one weight row")
            tables = {"traffic": {}, "pv": {}, "load_p": {}, "load_q": {}}
            for series in tables:
                chunk = per_day[per_day["series"] == series]
                for key, rows in chunk.groupby("key"):
                    rows = rows.sort_values("hour")
                    if list(rows["hour"]) != list(range(HOURS)):
                        raise SchemaError(
                            f"period {g} day {day_id} series {series} key {key}: "
                            f"expected hours 0..{HOURS - 1}")
                    arr = rows["value"].to_numpy(dtype=float)
                    if series == "traffic":
                        if key not in od_by_label:
                            raise SchemaError(f"traffic key {key!r} is not a known OD pair")
                        tables[series][od_by_label[key]] = arr
                    else:
                        node = _parse_node(key, tn_nodes if series == "pv" else dn_nodes)
                        tables[series][node] = arr
            days.append(RepresentativeDay(int(day_id), float(weight_rows["value"].iloc[0]),
                                          tables["traffic"], tables["pv"],
                                          tables["load_p"], tables["load_q"]))
        total = sum(d.weight for d in days)
        if abs(total - DAYS_PER_YEAR) > 0.01 * DAYS_PER_YEAR:
            warnings.warn(f"period {g}: day weights sum to {total:.1f}, "
                          f"renormalizing to {DAYS_PER_YEAR}")
        scale = DAYS_PER_YEAR / total
        out[int(g)] = [RepresentativeDay(d.day_id, d.weight * scale, d.traffic,
                                         d.pv, d.load_p, d.load_q) for d in days]
    return out


def _parse_node(key, known):
    for node in known:
        if str(node) == str(key):
            return node
    raise SchemaError(f"profile key {key!r} is not a known node")
