"""Solver-agnostic intermediate representation for LP / second-order-cone programs.

Problems are built incrementally (variables, linear equalities/inequalities,
second-order cones, one minimized linear objective), sealed, and handed to a
backend: pure-LP instances go to HiGHS via ``scipy.optimize.linprog``, anything
with a cone goes to Clarabel.  ``check_solution`` recomputes residuals directly
from the expressions so solver output is never trusted blindly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

INF = float("inf")

DEFAULT_TOL_FEAS = 1e-8
DEFAULT_TOL_OBJ = 1e-8


class SealedProblemError(RuntimeError):
    """Mutation attempted after the problem was sealed."""


class ExtractionError(RuntimeError):
    """Solution values requested from a non-optimal result."""


@dataclass(frozen=True)
class VariableRef:
    id: int
    name: str
    lower: float = -INF
    upper: float = INF

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError(f"variable {self.name}: lower {self.lower} > upper {self.upper}")


class LinearExpr:
    """Sparse affine expression: sum(coeff_i * var_i) + offset."""

    __slots__ = ("coeffs", "offset")

    def __init__(self, coeffs: dict[int, float] | None = None, offset: float = 0.0):
        self.coeffs = coeffs if coeffs is not None else {}
        self.offset = float(offset)

    @staticmethod
    def term(var: VariableRef, coeff: float = 1.0) -> "LinearExpr":
        return LinearExpr({var.id: float(coeff)})

    @staticmethod
    def constant(value: float) -> "LinearExpr":
        return LinearExpr({}, value)

    @staticmethod
    def sum(pairs, offset: float = 0.0) -> "LinearExpr":
        """Build from (VariableRef, coeff) pairs, merging duplicates."""
        coeffs: dict[int, float] = {}
        for var, c in pairs:
            c = float(c)
            if c != 0.0:
                coeffs[var.id] = coeffs.get(var.id, 0.0) + c
        return LinearExpr(coeffs, offset)

    def copy(self) -> "LinearExpr":
        return LinearExpr(dict(self.coeffs), self.offset)

    def add_term(self, var: VariableRef, coeff: float) -> "LinearExpr":
        c = float(coeff)
        if c != 0.0:
            self.coeffs[var.id] = self.coeffs.get(var.id, 0.0) + c
        return self

    def __add__(self, other):
        out = self.copy()
        if isinstance(other, LinearExpr):
            for vid, c in other.coeffs.items():
                out.coeffs[vid] = out.coeffs.get(vid, 0.0) + c
            out.offset += other.offset
        else:
            out.offset += float(other)
        return out

    __radd__ = __add__

    def __sub__(self, other):
        return self + (other * -1.0 if isinstance(other, LinearExpr) else -float(other))

    def __rsub__(self, other):
        return (self * -1.0) + other

    def __mul__(self, scalar: float):
        s = float(scalar)
        return LinearExpr({vid: c * s for vid, c in self.coeffs.items()}, self.offset * s)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def value(self, x: np.ndarray) -> float:
        return float(sum(c * x[vid] for vid, c in self.coeffs.items()) + self.offset)

    def is_finite(self) -> bool:
        return math.isfinite(self.offset) and all(math.isfinite(c) for c in self.coeffs.values())

    def __repr__(self):
        parts = [f"{c:+.6g}*v{vid}" for vid, c in sorted(self.coeffs.items())]
        if self.offset or not parts:
            parts.append(f"{self.offset:+.6g}")
        return " ".join(parts)


def expr_of(x) -> LinearExpr:
    if isinstance(x, LinearExpr):
        return x
    if isinstance(x, VariableRef):
        return LinearExpr.term(x)
    return LinearExpr.constant(float(x))


@dataclass
class SolveResult:
    status: str                      # optimal | infeasible | unbounded | numerical-failure
    x: np.ndarray | None = None      # primal values, present iff optimal
    objective: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def value(self, ref: VariableRef) -> float:
        if self.status != "optimal" or self.x is None:
            raise ExtractionError(f"no primal values available: status={self.status}")
        return float(self.x[ref.id])


@dataclass
class ResidualReport:
    max_equality: float = 0.0
    max_inequality: float = 0.0
    max_soc: float = 0.0
    max_bound: float = 0.0
    violations: list[tuple[str, float]] = field(default_factory=list)

    @property
    def max_residual(self) -> float:
        return max(self.max_equality, self.max_inequality, self.max_soc, self.max_bound)

    def ok(self, tol: float) -> bool:
        return self.max_residual <= tol


class ConicProblem:
    """Minimization problem over linear equalities/inequalities and SOC cones.

    Constraint conventions: equalities store expr == 0, inequalities store
    expr <= 0, and an SOC entry (vector, bound) means ||vector||_2 <= bound.
    """

    def __init__(self, name: str = ""):
        self.name = name
        self.variables: list[VariableRef] = []
        self.objective: LinearExpr = LinearExpr.constant(0.0)
        self.equalities: list[tuple[LinearExpr, str]] = []
        self.inequalities: list[tuple[LinearExpr, str]] = []
        self.soc_constraints: list[tuple[list[LinearExpr], LinearExpr, str]] = []
        self._sealed = False

    # -- construction ------------------------------------------------------

    def _check_open(self):
        if self._sealed:
            raise SealedProblemError(f"problem {self.name!r} is sealed")

    def add_variable(self, name: str, lower: float = -INF, upper: float = INF) -> VariableRef:
        self._check_open()
        ref = VariableRef(id=len(self.variables), name=name,
                          lower=float(lower), upper=float(upper))
        self.variables.append(ref)
        return ref

    def add_variables(self, names, lower: float = -INF, upper: float = INF) -> list[VariableRef]:
        return [self.add_variable(n, lower, upper) for n in names]

    def set_objective(self, expr) -> None:
        self._check_open()
        e = expr_of(expr)
        if not e.is_finite():
            raise ValueError("objective has non-finite coefficients")
        self.objective = e

    def add_eq(self, expr, label: str = "") -> None:
        """Register expr == 0."""
        self._check_open()
        e = expr_of(expr)
        if not e.is_finite():
            raise ValueError(f"equality {label!r} has non-finite coefficients")
        self.equalities.append((e, label))

    def add_ineq(self, expr, label: str = "") -> None:
        """Register expr <= 0."""
        self._check_open()
        e = expr_of(expr)
        if not e.is_finite():
            raise ValueError(f"inequality {label!r} has non-finite coefficients")
        self.inequalities.append((e, label))

    def add_soc(self, vector, bound, label: str = "") -> None:
        """Register ||vector||_2 <= bound for affine vector entries."""
        self._check_open()
        vec = [expr_of(e) for e in vector]
        if len(vec) == 0:
            raise ValueError(f"SOC constraint {label!r} has an empty vector")
        b = expr_of(bound)
        if not b.is_finite() or any(not e.is_finite() for e in vec):
            raise ValueError(f"SOC constraint {label!r} has non-finite coefficients")
        self.soc_constraints.append((vec, b, label))

    def seal(self) -> "ConicProblem":
        self._sealed = True
        return self

    @property
    def sealed(self) -> bool:
        return self._sealed

    @property
    def n_variables(self) -> int:
        return len(self.variables)

    @property
    def is_lp(self) -> bool:
        return not self.soc_constraints

    # -- matrix assembly ----------------------------------------------------

    def _row_matrix(self, exprs: list[LinearExpr]) -> tuple[sp.csc_matrix, np.ndarray]:
        """Stack expressions into (A, c) with expr_i(x) = A[i] @ x + c[i]."""
        n = self.n_variables
        rows, cols, vals = [], [], []
        consts = np.zeros(len(exprs))
        for i, e in enumerate(exprs):
            consts[i] = e.offset
            for vid, c in e.coeffs.items():
                rows.append(i)
                cols.append(vid)
                vals.append(c)
        A = sp.csc_matrix((vals, (rows, cols)), shape=(len(exprs), n))
        return A, consts

    def objective_vector(self) -> tuple[np.ndarray, float]:
        c = np.zeros(self.n_variables)
        for vid, coef in self.objective.coeffs.items():
            c[vid] = coef
        return c, self.objective.offset

    def bounds_list(self) -> list[tuple[float | None, float | None]]:
        out = []
        for v in self.variables:
            lo = None if v.lower == -INF else v.lower
            hi = None if v.upper == INF else v.upper
            out.append((lo, hi))
        return out


def check_solution(problem: ConicProblem, point: np.ndarray, tol: float = DEFAULT_TOL_FEAS) -> ResidualReport:
    """Recompute all constraint residuals at ``point`` without the solver.

    Violations beyond ``tol`` are listed by constraint label.
    """
    x = np.asarray(point, dtype=float)
    if x.shape != (problem.n_variables,):
        raise ValueError(f"point has shape {x.shape}, expected ({problem.n_variables},)")
    report = ResidualReport()

    for e, label in problem.equalities:
        r = abs(e.value(x))
        report.max_equality = max(report.max_equality, r)
        if r > tol:
            report.violations.append((f"eq:{label}", r))
    for e, label in problem.inequalities:
        r = max(0.0, e.value(x))
        report.max_inequality = max(report.max_inequality, r)
        if r > tol:
            report.violations.append((f"ineq:{label}", r))
    for vec, bound, label in problem.soc_constraints:
        norm = math.sqrt(sum(e.value(x) ** 2 for e in vec))
        r = max(0.0, norm - bound.value(x))
        report.max_soc = max(report.max_soc, r)
        if r > tol:
            report.violations.append((f"soc:{label}", r))
    for v in problem.variables:
        r = max(0.0, v.lower - x[v.id], x[v.id] - v.upper)
        report.max_bound = max(report.max_bound, r)
        if r > tol:
            report.violations.append((f"bound:{v.name}", r))
    return report


def _solve_lp_highs(problem: ConicProblem, tol_feas: float) -> SolveResult:
    c, c0 = problem.objective_vector()
    A_eq = b_eq = A_ub = b_ub = None
    if problem.equalities:
        A, consts = problem._row_matrix([e for e, _ in problem.equalities])
        A_eq, b_eq = A, -consts
    if problem.inequalities:
        A, consts = problem._row_matrix([e for e, _ in problem.inequalities])
        A_ub, b_ub = A, -consts
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                  bounds=problem.bounds_list(), method="highs",
                  options={"primal_feasibility_tolerance": tol_feas,
                           "dual_feasibility_tolerance": tol_feas})
    diagnostics = {"backend": "scipy-highs", "iterations": int(getattr(res, "nit", 0) or 0),
                   "message": res.message}
    if res.status == 0:
        return SolveResult("optimal", np.asarray(res.x, dtype=float),
                           float(res.fun) + c0, diagnostics)
    if res.status == 2:
        return SolveResult("infeasible", diagnostics=diagnostics)
    if res.status == 3:
        return SolveResult("unbounded", diagnostics=diagnostics)
    return SolveResult("numerical-failure", diagnostics=diagnostics)


def _solve_clarabel(problem: ConicProblem, tol_feas: float, tol_obj: float) -> SolveResult:
    import clarabel

    n = problem.n_variables
    c, c0 = problem.objective_vector()

    # Clarabel form: min q'x  s.t.  Ax + s = b,  s in K (zero, nonneg, SOC blocks).
    rows: list[LinearExpr] = []
    cones = []

    eq_exprs = [e for e, _ in problem.equalities]
    rows.extend(eq_exprs)
    if eq_exprs:
        cones.append(clarabel.ZeroConeT(len(eq_exprs)))

    ineq_exprs = [e for e, _ in problem.inequalities]
    # Finite variable bounds become nonnegative-cone rows.
    bound_exprs: list[LinearExpr] = []
    for v in problem.variables:
        if v.lower != -INF:
            bound_exprs.append(LinearExpr({v.id: -1.0}, v.lower))   # lower - x <= 0
        if v.upper != INF:
            bound_exprs.append(LinearExpr({v.id: 1.0}, -v.upper))   # x - upper <= 0
    nonneg = ineq_exprs + bound_exprs
    rows.extend(nonneg)
    if nonneg:
        cones.append(clarabel.NonnegativeConeT(len(nonneg)))

    for vec, bound, _ in problem.soc_constraints:
        # s_0 = bound(x), s_i = vec_i(x); SOC requires s_0 >= ||s_1:||.
        rows.append(bound * -1.0)
        rows.extend(e * -1.0 for e in vec)
        cones.append(clarabel.SecondOrderConeT(len(vec) + 1))

    # Uniform mapping: a stored row r yields A_i = coeffs(r), b_i = -r.offset,
    # so the slack is s_i = b_i - A_i x = -r(x).  Eq/ineq rows store r = e,
    # making the zero/nonneg cones encode e(x) = 0 / e(x) <= 0; SOC rows store
    # r = -expr so the slack equals the expression itself, as the cone needs.
    A, consts = problem._row_matrix(rows)
    b = -consts

    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_feas = tol_feas
    settings.tol_gap_abs = tol_obj
    settings.tol_gap_rel = tol_obj
    solver = clarabel.DefaultSolver(sp.csc_matrix((n, n)), c, A, b, cones, settings)
    sol = solver.solve()

    status = str(sol.status)
    diagnostics = {"backend": "clarabel", "iterations": int(sol.iterations),
                   "r_prim": float(sol.r_prim), "r_dual": float(sol.r_dual),
                   "raw_status": status}
    if status in ("SolverStatus.Solved", "Solved"):
        return SolveResult("optimal", np.asarray(sol.x, dtype=float),
                           float(sol.obj_val) + c0, diagnostics)
    if "PrimalInfeasible" in status:
        return SolveResult("infeasible", diagnostics=diagnostics)
    if "DualInfeasible" in status:
        return SolveResult("unbounded", diagnostics=diagnostics)
    return SolveResult("numerical-failure", diagnostics=diagnostics)


def solve(problem: ConicProblem, tol_feas: float = DEFAULT_TOL_FEAS,
          tol_obj: float = DEFAULT_TOL_OBJ) -> SolveResult:
    """Solve a sealed problem and independently verify the returned point.

    Optimal results are re-checked with ``check_solution`` at 10x the solver
    tolerance; anything not passing is downgraded to numerical-failure rather
    than returned silently.
    """
    if not problem.sealed:
        raise RuntimeError("problem must be sealed before solving")
    if problem.is_lp:
        result = _solve_lp_highs(problem, tol_feas)
    else:
        result = _solve_clarabel(problem, tol_feas, tol_obj)

    if result.status == "optimal":
        report = check_solution(problem, result.x, tol=10.0 * tol_feas)
        result.diagnostics["max_residual"] = report.max_residual
        if not report.ok(10.0 * tol_feas):
            result.diagnostics["residual_violations"] = report.violations[:20]
            return SolveResult("numerical-failure", diagnostics=result.diagnostics)
    return result


def write_problem(problem: ConicProblem, path) -> None:
    """Dump the problem in CPLEX-LP-style text for external debugging.

    Linear parts use the standard .lp sections; each second-order cone is
    written as a comment line ``\\ soc: ||e1 ; e2 ; ...|| <= bound`` since the
    base format has no cone syntax.  Intended for inspection, not round-trips.
    """
    names = {v.id: v.name.replace(" ", "_") or f"v{v.id}" for v in problem.variables}
    seen: dict[str, int] = {}
    for vid in sorted(names):
        base = names[vid]
        if base in seen:
            seen[base] += 1
            names[vid] = f"{base}#{seen[base]}"
        else:
            seen[base] = 0

    def fmt(e: LinearExpr, with_offset: bool) -> str:
        parts = []
        for vid, c in sorted(e.coeffs.items()):
            parts.append(f"{'+' if c >= 0 else '-'} {abs(c):.17g} {names[vid]}")
        if with_offset and e.offset:
            parts.append(f"{'+' if e.offset >= 0 else '-'} {abs(e.offset):.17g}")
        text = " ".join(parts) if parts else "0"
        return text[2:] if text.startswith("+ ") else text

    lines = [f"\\ problem: {problem.name}", "Minimize", f" obj: {fmt(problem.objective, True)}",
             "Subject To"]
    for i, (e, label) in enumerate(problem.equalities):
        lines.append(f" eq{i}{'_' + label if label else ''}: {fmt(e, False)} = {-e.offset:.17g}")
    for i, (e, label) in enumerate(problem.inequalities):
        lines.append(f" ineq{i}{'_' + label if label else ''}: {fmt(e, False)} <= {-e.offset:.17g}")
    for i, (vec, bound, label) in enumerate(problem.soc_constraints):
        body = " ; ".join(fmt(e, True) for e in vec)
        lines.append(f"\\ soc{i}{'_' + label if label else ''}: ||{body}|| <= {fmt(bound, True)}")
    lines.append("Bounds")
    for v in problem.variables:
        lo = "-inf" if v.lower == -INF else f"{v.lower:.17g}"
        hi = "+inf" if v.upper == INF else f"{v.upper:.17g}"
        lines.append(f" {lo} <= {names[v.id]} <= {hi}")
    lines.append("End")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
