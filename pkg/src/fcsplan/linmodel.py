"""Solver-agnostic linear model container.

Variables and constraint rows are stored sparsely with stable integer
indices.  Builders name every variable and tag every row so that models
stay auditable and the LP text export is readable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

CONTINUOUS = "c"
BINARY = "b"
INTEGER = "i"

LE = "<="
GE = ">="
EQ = "=="

_SENSES = (LE, GE, EQ)


@dataclass
class Row:
    coeffs: list[tuple[int, float]]
    sense: str
    rhs: float
    tag: str


class LinearModel:
    """A minimize-objective MILP/LP in sparse row form."""

    def __init__(self, name: str = "model"):
        self.name = name
        self.var_names: list[str] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.kind: list[str] = []
        self.obj: dict[int, float] = {}
        self.obj_const = 0.0
        self.rows: list[Row] = []
        self._by_name: dict[str, int] = {}

    # -- variables ---------------------------------------------------------

    def add_var(self, name, lb=0.0, ub=math.inf, kind=CONTINUOUS, obj=0.0):
        if name in self._by_name:
            raise ValueError(f"duplicate variable name {name!r}")
        if kind not in (CONTINUOUS, BINARY, INTEGER):
            raise ValueError(f"unknown variable kind {kind!r}")
        if kind == BINARY:
            lb, ub = max(0.0, lb), min(1.0, ub)
        if not (lb <= ub):
            raise ValueError(f"empty bounds for {name!r}: [{lb}, {ub}]")
        idx = len(self.var_names)
        self.var_names.append(name)
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        self.kind.append(kind)
        if obj:
            self.obj[idx] = self.obj.get(idx, 0.0) + float(obj)
        self._by_name[name] = idx
        return idx

    def var_index(self, name: str) -> int:
        return self._by_name[name]

    def has_var(self, name: str) -> bool:
        return name in self._by_name

    def set_bounds(self, idx: int, lb: float, ub: float):
        if lb > ub:
            raise ValueError(f"empty bounds for {self.var_names[idx]!r}")
        self.lb[idx] = float(lb)
        self.ub[idx] = float(ub)

    def add_obj(self, idx: int, coef: float):
        if coef:
            self.obj[idx] = self.obj.get(idx, 0.0) + float(coef)

    # -- rows --------------------------------------------------------------

    def add_row(self, coeffs, sense, rhs, tag):
        if sense not in _SENSES:
            raise ValueError(f"unknown row sense {sense!r}")
        merged: dict[int, float] = {}
        for idx, coef in coeffs:
            if not (0 <= idx < len(self.var_names)):
                raise ValueError(f"row {tag!r} references unknown column {idx}")
            merged[idx] = merged.get(idx, 0.0) + float(coef)
        self.rows.append(Row(sorted(merged.items()), sense, float(rhs), tag))
        return len(self.rows) - 1

    # -- properties --------------------------------------------------------

    @property
    def n_vars(self) -> int:
        return len(self.var_names)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def is_mip(self) -> bool:
        return any(k != CONTINUOUS for k in self.kind)

    def integer_indices(self) -> list[int]:
        return [i for i, k in enumerate(self.kind) if k != CONTINUOUS]

    def objective_value(self, x: np.ndarray) -> float:
        return self.obj_const + sum(c * x[i] for i, c in self.obj.items())

    def row_activity(self, row: Row, x: np.ndarray) -> float:
        return sum(c * x[i] for i, c in row.coeffs)

    def validate(self):
        """Reject NaN/inf coefficients and malformed binaries."""
        for i, c in self.obj.items():
            if not math.isfinite(c):
                raise ValueError(f"non-finite objective coefficient on {self.var_names[i]}")
        for row in self.rows:
            if not math.isfinite(row.rhs):
                raise ValueError(f"non-finite rhs in row {row.tag}")
            for i, c in row.coeffs:
                if not math.isfinite(c):
                    raise ValueError(f"non-finite coefficient in row {row.tag}")
        for i, k in enumerate(self.kind):
            if k == BINARY and (self.lb[i] < 0.0 or self.ub[i] > 1.0):
                raise ValueError(f"binary {self.var_names[i]} with bounds outside [0,1]")

    def fix_variables(self, values: dict[int, float], drop_integrality=False):
        """Return a copy with the given columns pinned to constants.

        With ``drop_integrality`` every remaining integer column becomes
        continuous, which is how fixed-plan LPs are produced.
        """
        out = LinearModel(self.name + "+fixed")
        out.var_names = list(self.var_names)
        out.lb = list(self.lb)
        out.ub = list(self.ub)
        out.kind = list(self.kind)
        out.obj = dict(self.obj)
        out.obj_const = self.obj_const
        out.rows = [Row(list(r.coeffs), r.sense, r.rhs, r.tag) for r in self.rows]
        out._by_name = dict(self._by_name)
        for idx, val in values.items():
            out.lb[idx] = float(val)
            out.ub[idx] = float(val)
        if drop_integrality:
            out.kind = [CONTINUOUS] * len(out.kind)
        return out

    # -- export ------------------------------------------------------------

    def write_lp(self, path):
        """Write the model in LP text format with 17 significant digits."""

        def num(v):
            return f"{v:.17g}"

        def term(coef, name, first):
            sign = "-" if coef < 0 else ("" if first else "+")
            return f" {sign} {num(abs(coef))} {name}" if not first else f"{sign}{num(abs(coef))} {name}"

        lines = ["\\ " + self.name, "Minimize", " obj:"]
        first = True
        for idx in sorted(self.obj):
            lines.append("   " + term(self.obj[idx], self.var_names[idx], first))
            first = False
        if first:
            lines.append("   0 " + (self.var_names[0] if self.var_names else "x"))
        lines.append("Subject To")
        sense_txt = {LE: "<=", GE: ">=", EQ: "="}
        for k, row in enumerate(self.rows):
            parts = []
            first = True
            for idx, coef in row.coeffs:
                parts.append(term(coef, self.var_names[idx], first))
                first = False
            if not parts:
                parts = ["0 " + self.var_names[0]]
            lines.append(f" r{k}_{_sanitize(row.tag)}: " + " ".join(parts) +
                         f" {sense_txt[row.sense]} {num(row.rhs)}")
        lines.append("Bounds")
        for i, name in enumerate(self.var_names):
            lo = "-inf" if self.lb[i] == -math.inf else num(self.lb[i])
            hi = "+inf" if self.ub[i] == math.inf else num(self.ub[i])
            lines.append(f" {lo} <= {name} <= {hi}")
        gen = [self.var_names[i] for i, k in enumerate(self.kind) if k == INTEGER]
        bins = [self.var_names[i] for i, k in enumerate(self.kind) if k == BINARY]
        if gen:
            lines.append("Generals")
            lines.extend(" " + g for g in gen)
        if bins:
            lines.append("Binaries")
            lines.extend(" " + b for b in bins)
        lines.append("End")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _sanitize(tag: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "_.[]" else "_" for ch in tag)


@dataclass
class VariableRegistry:
    """Declared variable families and the quantity each one carries.

    Builders must register every family they emit; the audit test checks
    the emitted set against this table so that each modelled quantity has
    exactly one home.
    """

    families: dict[str, str] = field(default_factory=dict)

    def declare(self, family: str, description: str):
        if family in self.families:
            raise ValueError(f"family {family!r} declared twice")
        self.families[family] = description

    def name(self, family: str, *indices) -> str:
        if family not in self.families:
            raise ValueError(f"family {family!r} not declared")
        if not indices:
            return family
        return family + "[" + ",".join(str(i) for i in indices) + "]"


def family_of(var_name: str) -> str:
    return var_name.split("[", 1)[0]
