"""Builders translating a fund instance into solvable LP/SOCP models.

Four model families share one scaffold (allocation variables x_0..x_{T-1},
contribution rates y_1..y_T, the t=0 budget, balance equalities, funding
floors, and regulatory sets) and differ in how the uncertain wage, return,
and liability expectations enter:

* point/stochastic: plain nominal expectations (an LP),
* mixture: epigraph over finitely many candidate distributions (an LP),
* box: exact LP duals of the inner perturbation problems, one independent
  dual-variable copy per inner problem (an LP),
* Wasserstein: transport duals with norm-2 cone constraints per empirical
  point (an SOCP), built on two-sided box supports.

Brute-force oracles for the inner problems (vertex enumeration over the
probability-perturbation polytope, a transport LP over a discretized
support) live here too; they deliberately avoid the dual reformulation
code paths so tests can compare the two routes.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .conic import ConicProblem, LinearExpr, SolveResult, VariableRef, expr_of, solve
from .fund import (
    DiscountScenarios,
    FundSpec,
    InvestmentStrategy,
    ReturnScenarios,
    ValidationError,
    check_simplex,
)

MODEL_NAMES = ("MD", "BD", "WM", "SP")


# -- ambiguity specifications -------------------------------------------------

@dataclass(frozen=True)
class MixtureAmbiguity:
    """Finite candidate sets of discount/return scenario distributions."""

    discount_likelihoods: np.ndarray  # (I, S), rows on the S-simplex
    return_likelihoods: np.ndarray    # (J, K), rows on the K-simplex

    def __post_init__(self):
        for name in ("discount_likelihoods", "return_likelihoods"):
            mat = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            object.__setattr__(self, name, mat)
            if mat.shape[0] < 1:
                raise ValidationError(f"{name} needs at least one distribution")
            for i, row in enumerate(mat):
                check_simplex(row, f"{name}[{i}]")
            mat.setflags(write=False)


@dataclass(frozen=True)
class BoxAmbiguity:
    """Coordinate-wise perturbation bounds around the nominal distributions.

    ``discount_lower <= 0 <= discount_upper`` bound the wage/liability-side
    perturbation eta per discount scenario; the return-side xi is bounded
    likewise.  Validity relative to a nominal distribution (perturbed
    probabilities staying in [0, 1]) is checked against the scenario sets
    at build time via :meth:`validate_against`.
    """

    discount_lower: np.ndarray
    discount_upper: np.ndarray
    return_lower: np.ndarray
    return_upper: np.ndarray

    def __post_init__(self):
        for name in ("discount_lower", "discount_upper", "return_lower", "return_upper"):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
            if arr.ndim != 1 or not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} must be a finite 1-d vector")
            arr.setflags(write=False)
        for lo, hi, side in ((self.discount_lower, self.discount_upper, "discount"),
                             (self.return_lower, self.return_upper, "return")):
            if lo.shape != hi.shape:
                raise ValidationError(f"{side} bound vectors differ in length")
            if np.any(lo > 0) or np.any(hi < 0):
                raise ValidationError(f"{side} perturbation box must contain the zero vector")

    def validate_against(self, p0: np.ndarray, q0: np.ndarray) -> None:
        if self.discount_lower.size != p0.size:
            raise ValidationError("discount bounds do not match the number of discount scenarios")
        if self.return_lower.size != q0.size:
            raise ValidationError("return bounds do not match the number of return scenarios")
        tol = 1e-12
        if np.any(p0 + self.discount_lower < -tol) or np.any(p0 + self.discount_upper > 1 + tol):
            raise ValidationError("perturbed discount probabilities leave [0, 1]")
        if np.any(q0 + self.return_lower < -tol) or np.any(q0 + self.return_upper > 1 + tol):
            raise ValidationError("perturbed return probabilities leave [0, 1]")

    @staticmethod
    def symmetric(p0, q0, discount_half_width, return_half_width) -> "BoxAmbiguity":
        """Symmetric half-widths, clipped so probabilities stay valid."""
        p0 = np.asarray(p0, dtype=float)
        q0 = np.asarray(q0, dtype=float)
        dh = np.broadcast_to(np.asarray(discount_half_width, dtype=float), p0.shape)
        rh = np.broadcast_to(np.asarray(return_half_width, dtype=float), q0.shape)
        if np.any(dh < 0) or np.any(rh < 0):
            raise ValidationError("half widths must be nonnegative")
        return BoxAmbiguity(
            discount_lower=-np.minimum(dh, p0),
            discount_upper=np.minimum(dh, 1.0 - p0),
            return_lower=-np.minimum(rh, q0),
            return_upper=np.minimum(rh, 1.0 - q0),
        )


@dataclass(frozen=True)
class BoxSupport:
    """Per-coordinate [lower, upper] support box."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape:
            raise ValidationError("support bounds differ in shape")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValidationError("support boxes must be bounded (finite)")
        if np.any(lo > hi):
            raise ValidationError("support lower bound exceeds upper bound")
        lo.setflags(write=False)
        hi.setflags(write=False)

    def contains(self, points: np.ndarray, tol: float = 1e-9) -> bool:
        pts = np.asarray(points, dtype=float)
        return bool(np.all(pts >= self.lower - tol) and np.all(pts <= self.upper + tol))

    @staticmethod
    def around(points: np.ndarray, axis: int = 0, widen: float = 0.2) -> "BoxSupport":
        """Empirical min/max box widened by ``widen`` times the range."""
        pts = np.asarray(points, dtype=float)
        lo = pts.min(axis=axis)
        hi = pts.max(axis=axis)
        pad = widen * (hi - lo)
        return BoxSupport(lower=lo - pad, upper=hi + pad)


@dataclass(frozen=True)
class WassersteinAmbiguity:
    """Radii and box supports for the transport-ball model.

    ``wage_radius`` bounds the ball around the empirical discounted-wage
    vectors; ``liability_radii[t-1]`` (defaulted to the wage radius) and
    ``return_radii[t-1]`` bound the per-period liability and return balls.
    Supports are two-sided boxes; every empirical scenario must lie inside.
    """

    wage_radius: float
    return_radii: np.ndarray              # length T
    wage_support: BoxSupport              # over R^T
    liability_support: BoxSupport         # lower/upper of length T (scalar per t)
    return_support: BoxSupport            # lower/upper of shape (T, N+1)
    liability_radii: np.ndarray | None = None  # length T; None -> wage_radius

    def __post_init__(self):
        rr = np.asarray(self.return_radii, dtype=float)
        object.__setattr__(self, "return_radii", rr)
        if self.wage_radius < 0 or np.any(rr < 0):
            raise ValidationError("Wasserstein radii must be nonnegative")
        if self.liability_radii is None:
            lr = np.full(rr.shape, float(self.wage_radius))
        else:
            lr = np.asarray(self.liability_radii, dtype=float)
            if np.any(lr < 0):
                raise ValidationError("Wasserstein radii must be nonnegative")
        object.__setattr__(self, "liability_radii", lr)
        if lr.shape != rr.shape:
            raise ValidationError("liability and return radii must both have length T")

    def validate_against(self, ds: DiscountScenarios, rs: ReturnScenarios) -> None:
        T = ds.horizon
        if self.return_radii.size != T:
            raise ValidationError("return radii length does not match the horizon")
        if not self.wage_support.contains(ds.wages_pv.T):
            raise ValidationError("an empirical wage scenario lies outside its support box")
        if self.liability_support.lower.shape != (T,):
            raise ValidationError("liability support must have one interval per period")
        for t in range(T):
            if not (np.all(ds.liability_values[t] >= self.liability_support.lower[t] - 1e-9)
                    and np.all(ds.liability_values[t] <= self.liability_support.upper[t] + 1e-9)):
                raise ValidationError(f"liability scenario outside support at period {t + 1}")
        if self.return_support.lower.shape != (T, rs.n_assets):
            raise ValidationError("return support must be (T, N+1)")
        for t in range(T):
            if not BoxSupport(self.return_support.lower[t],
                              self.return_support.upper[t]).contains(rs.gross[t]):
                raise ValidationError(f"return scenario outside support at period {t + 1}")


def wasserstein_from_scenarios(ds: DiscountScenarios, rs: ReturnScenarios,
                               wage_radius: float, return_radius,
                               liability_radius=None, widen: float = 0.2) -> WassersteinAmbiguity:
    """Ambiguity spec with supports taken from the empirical scenario hulls."""
    T = ds.horizon
    rr = np.broadcast_to(np.asarray(return_radius, dtype=float), (T,)).copy()
    lr = None if liability_radius is None else \
        np.broadcast_to(np.asarray(liability_radius, dtype=float), (T,)).copy()
    return WassersteinAmbiguity(
        wage_radius=float(wage_radius),
        return_radii=rr,
        liability_radii=lr,
        wage_support=BoxSupport.around(ds.wages_pv.T, axis=0, widen=widen),
        liability_support=BoxSupport.around(ds.liability_values, axis=1, widen=widen),
        return_support=BoxSupport.around(rs.gross, axis=1, widen=widen),
    )


# -- built-model bookkeeping --------------------------------------------------

@dataclass
class DualBlock:
    """One inner worst-case problem embedded in a robust counterpart.

    ``sense`` is "sup" for adversarial maximization (wages, liabilities) and
    "inf" for adversarial minimization (returns).  ``value_expr`` evaluates
    the block's worst-case bound at any primal point; ``scenario_exprs`` give
    the per-scenario payoffs the adversary perturbs.
    """

    location: str                 # "objective" | "balance" | "funding"
    quantity: str                 # "wage" | "return" | "liability"
    t: int | None
    sense: str
    value_expr: LinearExpr
    scenario_exprs: list[LinearExpr]
    data: dict = field(default_factory=dict)


@dataclass
class BuiltModel:
    """A sealed conic problem plus the variable handles to read it back."""

    problem: ConicProblem
    x: list[list[VariableRef]]    # T rows of N+1 allocation variables
    y: list[VariableRef]          # T contribution-rate variables
    model: str
    blocks: list[DualBlock] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return len(self.x)

    @property
    def n_assets(self) -> int:
        return len(self.x[0])


def _scaffold(spec: FundSpec, name: str) -> tuple[ConicProblem, list[list[VariableRef]], list[VariableRef]]:
    """Variables, t=0 budget, and regulatory sets shared by every model."""
    problem = ConicProblem(name)
    lo, hi = spec.regulatory.contribution_bounds
    y = [problem.add_variable(f"y[{t}]", lo, hi) for t in range(1, spec.horizon + 1)]
    x_lb = 0.0 if spec.regulatory.nonnegative else -float("inf")
    x = [[problem.add_variable(f"x[{t},{n}]", x_lb) for n in range(spec.n_assets)]
         for t in range(spec.horizon)]

    problem.add_eq(LinearExpr.sum((v, 1.0) for v in x[0]) - spec.initial_budget,
                   label="budget[0]")
    for t, row in enumerate(x):
        for gi, g in enumerate(spec.regulatory.group_constraints):
            members = LinearExpr.sum((row[n], 1.0) for n in g.assets)
            total = LinearExpr.sum((v, g.fraction) for v in row)
            if g.op == "<=":
                problem.add_ineq(members - total, label=f"group{gi}[{t}]")
            else:
                problem.add_ineq(total - members, label=f"group{gi}[{t}]")
    return problem, x, y


def _portfolio_return(x_row: list[VariableRef], gross: np.ndarray) -> LinearExpr:
    return LinearExpr.sum(zip(x_row, gross))


def _attach_balance_and_funding(problem: ConicProblem, spec: FundSpec,
                                x, y, income_exprs, liability_exprs) -> None:
    """Wire per-period income and worst-case liability into the scaffold.

    ``income_exprs[t-1]`` is the (worst-case) expected portfolio income
    r_t'x_{t-1} for moments t=1..T; ``liability_exprs[t-1]`` the (worst-case)
    expected liability value.  Balance holds for t=1..T-1, the funding floor
    for t=1..T.
    """
    T = spec.horizon
    psi = spec.funding_threshold
    for t in range(1, T):
        total = LinearExpr.sum((v, 1.0) for v in x[t])
        problem.add_eq(total - income_exprs[t - 1] - LinearExpr.term(y[t - 1], spec.wages[t - 1])
                       + spec.benefit_payments[t - 1],
                       label=f"balance[{t}]")
    for t in range(1, T + 1):
        problem.add_ineq(liability_exprs[t - 1] * psi - income_exprs[t - 1],
                         label=f"funding[{t}]")


# -- point-estimate and stochastic models -------------------------------------

def _build_point_model(spec: FundSpec, wages_pv: np.ndarray, liability_values: np.ndarray,
                       gross: np.ndarray, name: str) -> BuiltModel:
    T = spec.horizon
    if wages_pv.shape != (T,) or liability_values.shape != (T,):
        raise ValidationError("wage/liability value vectors must have length T")
    if gross.shape != (T, spec.n_assets):
        raise ValidationError(f"gross returns must be (T, {spec.n_assets})")
    problem, x, y = _scaffold(spec, name)
    problem.set_objective(LinearExpr.sum(zip(y, wages_pv)))
    income = [_portfolio_return(x[t - 1], gross[t - 1]) for t in range(1, T + 1)]
    liab = [expr_of(liability_values[t - 1]) for t in range(1, T + 1)]
    _attach_balance_and_funding(problem, spec, x, y, income, liab)
    problem.seal()
    return BuiltModel(problem=problem, x=x, y=y, model=name)


def build_deterministic(spec: FundSpec, wages_pv, liability_values, gross_returns) -> BuiltModel:
    """LP for known point estimates of discounted wages, liabilities, returns."""
    return _build_point_model(spec, np.asarray(wages_pv, dtype=float),
                              np.asarray(liability_values, dtype=float),
                              np.asarray(gross_returns, dtype=float), "deterministic")


def build_sp(spec: FundSpec, ds: DiscountScenarios, rs: ReturnScenarios) -> BuiltModel:
    """Stochastic program: all uncertain terms replaced by nominal expectations."""
    p0, q0 = ds.probabilities, rs.probabilities
    built = _build_point_model(spec,
                               ds.wages_pv @ p0,
                               ds.liability_values @ p0,
                               np.einsum("tkn,k->tn", rs.gross, q0), "SP")
    return built


# -- mixture model -------------------------------------------------------------

def build_mixture(spec: FundSpec, ds: DiscountScenarios, rs: ReturnScenarios,
                  amb: MixtureAmbiguity) -> BuiltModel:
    """Epigraph LP over the candidate distributions (worst case at a vertex)."""
    if amb.discount_likelihoods.shape[1] != ds.n_scenarios:
        raise ValidationError("discount likelihoods do not match the discount scenario count")
    if amb.return_likelihoods.shape[1] != rs.n_scenarios:
        raise ValidationError("return likelihoods do not match the return scenario count")
    T = spec.horizon
    problem, x, y = _scaffold(spec, "MD")
    theta = problem.add_variable("theta")
    mu = [problem.add_variable(f"mu[{t}]") for t in range(1, T + 1)]
    omega = [problem.add_variable(f"omega[{t}]") for t in range(1, T + 1)]

    problem.set_objective(LinearExpr.term(theta))
    for i, p_i in enumerate(amb.discount_likelihoods):
        wage_exp = LinearExpr.sum(zip(y, ds.wages_pv @ p_i))
        problem.add_ineq(wage_exp - LinearExpr.term(theta), label=f"mix_obj[{i}]")
    for t in range(1, T + 1):
        for j, q_j in enumerate(amb.return_likelihoods):
            ret_exp = _portfolio_return(x[t - 1], np.einsum("kn,k->n", rs.gross[t - 1], q_j))
            problem.add_ineq(LinearExpr.term(mu[t - 1]) - ret_exp, label=f"mix_ret[{t},{j}]")
        for i, p_i in enumerate(amb.discount_likelihoods):
            liab_exp = float(ds.liability_values[t - 1] @ p_i)
            problem.add_ineq(LinearExpr.term(omega[t - 1], -1.0) + liab_exp,
                             label=f"mix_liab[{t},{i}]")

    income = [LinearExpr.term(mu[t - 1]) for t in range(1, T + 1)]
    liab = [LinearExpr.term(omega[t - 1], spec.funding_threshold) for t in range(1, T + 1)]
    # funding floor mu_t >= psi*omega_t, plus the balance use of mu_t
    for t in range(1, T):
        total = LinearExpr.sum((v, 1.0) for v in x[t])
        problem.add_eq(total - income[t - 1] - LinearExpr.term(y[t - 1], spec.wages[t - 1])
                       + spec.benefit_payments[t - 1], label=f"balance[{t}]")
    for t in range(1, T + 1):
        problem.add_ineq(liab[t - 1] - income[t - 1], label=f"funding[{t}]")
    problem.seal()
    return BuiltModel(problem=problem, x=x, y=y, model="MD",
                      blocks=[DualBlock("objective", "wage", None, "sup",
                                        LinearExpr.term(theta), [], {"theta": theta,
                                                                     "mu": mu, "omega": omega})])


# -- box model -----------------------------------------------------------------

def _box_sup_block(problem: ConicProblem, scenario_exprs: list[LinearExpr],
                   nominal: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                   tag: str) -> LinearExpr:
    """Exact dual of max_eta sum_s v_s (p0_s + eta_s) over the perturbation box.

    Adds variables (z free, d+ >= 0, d- >= 0) and the dual equalities
    z + d+_s - d-_s = v_s; returns the worst-case value expression
    sum_s v_s p0_s + sum_s (d+_s ub_s - d-_s lb_s), which upper-bounds the
    inner maximum at any dual-feasible point and attains it at optimality.
    """
    S = len(scenario_exprs)
    z = problem.add_variable(f"{tag}.z")
    d_plus = [problem.add_variable(f"{tag}.d+[{s}]", 0.0) for s in range(S)]
    d_minus = [problem.add_variable(f"{tag}.d-[{s}]", 0.0) for s in range(S)]
    for s in range(S):
        problem.add_eq(LinearExpr.term(z) + LinearExpr.term(d_plus[s])
                       - LinearExpr.term(d_minus[s]) - scenario_exprs[s],
                       label=f"{tag}.dual[{s}]")
    value = LinearExpr.constant(0.0)
    for s in range(S):
        value = value + scenario_exprs[s] * float(nominal[s])
        value.add_term(d_plus[s], float(upper[s]))
        value.add_term(d_minus[s], -float(lower[s]))
    return value


def _box_inf_block(problem: ConicProblem, scenario_exprs: list[LinearExpr],
                   nominal: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                   tag: str) -> LinearExpr:
    """Exact dual of min_xi sum_k v_k (q0_k + xi_k) over the perturbation box.

    Adds (Gamma free, w+ >= 0, w- >= 0) with Gamma + w-_k - w+_k = v_k and
    returns sum_k v_k q0_k + sum_k (w-_k lb_k - w+_k ub_k), a lower bound on
    the inner minimum, tight at optimality.
    """
    K = len(scenario_exprs)
    gamma = problem.add_variable(f"{tag}.Gamma")
    w_plus = [problem.add_variable(f"{tag}.w+[{k}]", 0.0) for k in range(K)]
    w_minus = [problem.add_variable(f"{tag}.w-[{k}]", 0.0) for k in range(K)]
    for k in range(K):
        problem.add_eq(LinearExpr.term(gamma) + LinearExpr.term(w_minus[k])
                       - LinearExpr.term(w_plus[k]) - scenario_exprs[k],
                       label=f"{tag}.dual[{k}]")
    value = LinearExpr.constant(0.0)
    for k in range(K):
        value = value + scenario_exprs[k] * float(nominal[k])
        value.add_term(w_minus[k], float(lower[k]))
        value.add_term(w_plus[k], -float(upper[k]))
    return value


def build_box(spec: FundSpec, ds: DiscountScenarios, rs: ReturnScenarios,
              amb: BoxAmbiguity) -> BuiltModel:
    """Robust counterpart for box-bounded probability perturbations.

    Every inner worst case (the objective, each balance equality, and both
    sides of each funding constraint) gets its own dual-variable copy;
    sharing one copy across blocks, as a literal reading of the compact
    formulation suggests, would couple independent inner problems and lose
    exactness.  Dual constraints are the exact LP-duality equalities.
    """
    amb.validate_against(ds.probabilities, rs.probabilities)
    T = spec.horizon
    p0, q0 = ds.probabilities, rs.probabilities
    problem, x, y = _scaffold(spec, "BD")
    blocks: list[DualBlock] = []

    def wage_exprs():
        return [LinearExpr.sum(zip(y, ds.wages_pv[:, s])) for s in range(ds.n_scenarios)]

    def return_exprs(t):
        return [_portfolio_return(x[t - 1], rs.gross[t - 1, k]) for k in range(rs.n_scenarios)]

    obj_scen = wage_exprs()
    obj_value = _box_sup_block(problem, obj_scen, p0,
                               amb.discount_lower, amb.discount_upper, "obj")
    problem.set_objective(obj_value)
    blocks.append(DualBlock("objective", "wage", None, "sup", obj_value, obj_scen,
                            {"nominal": p0, "lower": amb.discount_lower,
                             "upper": amb.discount_upper}))

    income = []
    for t in range(1, T + 1):
        locations = [("funding", f"fund_ret[{t}]")]
        if t <= T - 1:
            locations.insert(0, ("balance", f"bal_ret[{t}]"))
        per_location = {}
        for loc, tag in locations:
            scen = return_exprs(t)
            value = _box_inf_block(problem, scen, q0,
                                   amb.return_lower, amb.return_upper, tag)
            per_location[loc] = value
            blocks.append(DualBlock(loc, "return", t, "inf", value, scen,
                                    {"nominal": q0, "lower": amb.return_lower,
                                     "upper": amb.return_upper}))
        income.append(per_location)

    liab = []
    for t in range(1, T + 1):
        scen = [expr_of(ds.liability_values[t - 1, s]) for s in range(ds.n_scenarios)]
        value = _box_sup_block(problem, scen, p0,
                               amb.discount_lower, amb.discount_upper, f"fund_liab[{t}]")
        liab.append(value)
        blocks.append(DualBlock("funding", "liability", t, "sup", value, scen,
                                {"nominal": p0, "lower": amb.discount_lower,
                                 "upper": amb.discount_upper}))

    for t in range(1, T):
        total = LinearExpr.sum((v, 1.0) for v in x[t])
        problem.add_eq(total - income[t - 1]["balance"]
                       - LinearExpr.term(y[t - 1], spec.wages[t - 1])
                       + spec.benefit_payments[t - 1], label=f"balance[{t}]")
    for t in range(1, T + 1):
        problem.add_ineq(liab[t - 1] * spec.funding_threshold - income[t - 1]["funding"],
                         label=f"funding[{t}]")
    problem.seal()
    return BuiltModel(problem=problem, x=x, y=y, model="BD", blocks=blocks)

# -- Wasserstein model -----------------------------------------------------------

def _wass_sup_block(problem: ConicProblem, points: np.ndarray, support: BoxSupport,
                    coeff_exprs: list[LinearExpr], radius: float, weight: float,
                    tag: str) -> tuple[LinearExpr, dict]:
    """Transport dual of sup E[a'xi] over a ball around the empirical points.

    ``points`` has one empirical realization per row; ``coeff_exprs`` is the
    (possibly decision-dependent) loss gradient a.  The two-sided box support
    {lo <= xi <= hi} enters through multipliers g+ and g- (the stacked rows
    [I; -I] of the polytope), one pair per point, with norm-2 cone constraints
    ||g+_p - g-_p - a|| <= lam.  Returns the bound expression
    lam*radius + weight * sum_p nu_p and the variable handles.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n_pts, dim = pts.shape
    if len(coeff_exprs) != dim:
        raise ValidationError(f"{tag}: coefficient vector does not match point dimension")
    lam = problem.add_variable(f"{tag}.lam", 0.0)
    nus = [problem.add_variable(f"{tag}.nu[{p}]") for p in range(n_pts)]
    gammas = []
    hi_gap = support.upper - pts   # (n_pts, dim), each row d - C*point for C=[I;-I]
    lo_gap = pts - support.lower
    for p in range(n_pts):
        g_plus = [problem.add_variable(f"{tag}.g+[{p},{d}]", 0.0) for d in range(dim)]
        g_minus = [problem.add_variable(f"{tag}.g-[{p},{d}]", 0.0) for d in range(dim)]
        gammas.append((g_plus, g_minus))
        point_loss = LinearExpr.constant(0.0)
        for d in range(dim):
            point_loss = point_loss + coeff_exprs[d] * float(pts[p, d])
            point_loss.add_term(g_plus[d], float(hi_gap[p, d]))
            point_loss.add_term(g_minus[d], float(lo_gap[p, d]))
        problem.add_ineq(point_loss - LinearExpr.term(nus[p]), label=f"{tag}.epi[{p}]")
        cone = [LinearExpr.term(g_plus[d]) - LinearExpr.term(g_minus[d]) - coeff_exprs[d]
                for d in range(dim)]
        problem.add_soc(cone, LinearExpr.term(lam), label=f"{tag}.norm[{p}]")
    value = LinearExpr.term(lam, float(radius))
    for nu in nus:
        value.add_term(nu, weight)
    return value, {"lam": lam, "nus": nus, "gammas": gammas}


def build_wasserstein(spec: FundSpec, ds: DiscountScenarios, rs: ReturnScenarios,
                      amb: WassersteinAmbiguity) -> BuiltModel:
    """SOCP robust counterpart over transport balls around the empirical laws.

    The empirical distributions place weight 1/S on each discounted-wage and
    liability scenario and 1/K on each return scenario (the scenario sets'
    nominal probabilities play no role here).  The wage ball drives the
    objective; per period, a return ball (adversary minimizing income, loss
    coefficients -x_{t-1}) feeds both the balance equality and the funding
    floor, and a liability ball (adversary maximizing, scalar loss) feeds the
    funding floor's right side scaled by the threshold.
    """
    amb.validate_against(ds, rs)
    T = spec.horizon
    S, K = ds.n_scenarios, rs.n_scenarios
    problem, x, y = _scaffold(spec, "WM")
    blocks: list[DualBlock] = []

    y_exprs = [LinearExpr.term(v) for v in y]
    obj_value, obj_refs = _wass_sup_block(problem, ds.wages_pv.T, amb.wage_support,
                                          y_exprs, amb.wage_radius, 1.0 / S, "wage")
    problem.set_objective(obj_value)
    blocks.append(DualBlock("objective", "wage", None, "sup", obj_value,
                            [LinearExpr.sum(zip(y, ds.wages_pv[:, s])) for s in range(S)],
                            {"refs": obj_refs, "radius": amb.wage_radius}))

    income = []
    for t in range(1, T + 1):
        neg_x = [LinearExpr.term(v, -1.0) for v in x[t - 1]]
        support_t = BoxSupport(amb.return_support.lower[t - 1], amb.return_support.upper[t - 1])
        sup_neg, refs = _wass_sup_block(problem, rs.gross[t - 1], support_t, neg_x,
                                        float(amb.return_radii[t - 1]), 1.0 / K,
                                        f"ret[{t}]")
        income.append(sup_neg * -1.0)  # inf E[r'x] = -sup E[-r'x]
        blocks.append(DualBlock("balance" if t < T else "funding", "return", t, "inf",
                                sup_neg * -1.0,
                                [_portfolio_return(x[t - 1], rs.gross[t - 1, k])
                                 for k in range(K)],
                                {"refs": refs, "radius": float(amb.return_radii[t - 1])}))

    liab = []
    for t in range(1, T + 1):
        support_t = BoxSupport(np.array([amb.liability_support.lower[t - 1]]),
                               np.array([amb.liability_support.upper[t - 1]]))
        value, refs = _wass_sup_block(problem, ds.liability_values[t - 1][:, None],
                                      support_t, [expr_of(1.0)],
                                      float(amb.liability_radii[t - 1]), 1.0 / S,
                                      f"liab[{t}]")
        liab.append(value)
        blocks.append(DualBlock("funding", "liability", t, "sup", value,
                                [expr_of(ds.liability_values[t - 1, s]) for s in range(S)],
                                {"refs": refs, "radius": float(amb.liability_radii[t - 1])}))

    _attach_balance_and_funding(problem, spec, x, y, income, liab)
    problem.seal()
    return BuiltModel(problem=problem, x=x, y=y, model="WM", blocks=blocks)


def wasserstein_sup_value(points, support: BoxSupport, coeffs, radius: float,
                          tol_feas: float = 1e-9, tol_obj: float = 1e-9) -> float:
    """Optimal value of one transport-dual block for constant loss coefficients.

    Solves inf lam*radius + mean(nu) subject to the block's epigraph and cone
    constraints, i.e. the dual route to sup E[coeffs'xi] over the ball; the
    independent primal route is :func:`worst_case_inner_wasserstein`.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    coeff_vec = np.atleast_1d(np.asarray(coeffs, dtype=float))
    problem = ConicProblem("wass-block")
    value, _ = _wass_sup_block(problem, pts, support,
                               [expr_of(c) for c in coeff_vec], float(radius),
                               1.0 / pts.shape[0], "blk")
    problem.set_objective(value)
    result = solve(problem.seal(), tol_feas, tol_obj)
    if result.status != "optimal":
        raise RuntimeError(f"Wasserstein block solve failed: {result.status}")
    return float(result.objective)


def box_block_dual_value(values, nominal, lower, upper, sense: str = "max",
                         tol_feas: float = 1e-9, tol_obj: float = 1e-9) -> float:
    """Optimal value of one box-dual block at fixed scenario payoffs.

    Builds the same dual equalities the robust counterpart embeds and
    optimizes the block's bound expression (minimized for the sup side,
    maximized for the inf side).  Exactness against the independent primal
    route (:func:`worst_case_inner_box`) is what the duality tests assert.
    """
    vals = np.asarray(values, dtype=float)
    nom = np.asarray(nominal, dtype=float)
    problem = ConicProblem("box-block")
    exprs = [expr_of(v) for v in vals]
    if sense == "max":
        value = _box_sup_block(problem, exprs, nom, np.asarray(lower, float),
                               np.asarray(upper, float), "blk")
        problem.set_objective(value)
        sign = 1.0
    elif sense == "min":
        value = _box_inf_block(problem, exprs, nom, np.asarray(lower, float),
                               np.asarray(upper, float), "blk")
        problem.set_objective(value * -1.0)
        sign = -1.0
    else:
        raise ValueError(f"sense must be 'max' or 'min', got {sense!r}")
    result = solve(problem.seal(), tol_feas, tol_obj)
    if result.status != "optimal":
        raise RuntimeError(f"box block solve failed: {result.status}")
    return sign * float(result.objective)


# -- strategy extraction and infeasibility diagnosis ---------------------------

def extract_strategy(built: BuiltModel, result: SolveResult) -> InvestmentStrategy:
    """Read the allocation/contribution variables out of an optimal result."""
    alloc = np.array([[result.value(v) for v in row] for row in built.x])
    rates = np.array([result.value(v) for v in built.y])
    return InvestmentStrategy(allocations=alloc, contribution_rates=rates,
                              objective_value=float(result.objective),
                              model=built.model)


def locate_funding_infeasibility(built: BuiltModel, tol: float = 1e-7) -> list[int]:
    """Periods whose funding floor cannot be met (elastic relaxation).

    Clones the model with a nonnegative slack on every funding constraint,
    minimizes total slack, and reports the periods needing slack above
    ``tol``.  An empty list for an infeasible model means the infeasibility
    lies outside the funding rows (e.g. the balance turns insolvent).
    """
    src = built.problem
    relaxed = ConicProblem(src.name + "+slack")
    for v in src.variables:
        relaxed.add_variable(v.name, v.lower, v.upper)
    rv = relaxed.variables
    slacks: dict[str, VariableRef] = {}

    def clone(e: LinearExpr) -> LinearExpr:
        return LinearExpr(dict(e.coeffs), e.offset)

    for e, label in src.equalities:
        relaxed.add_eq(clone(e), label)
    for e, label in src.inequalities:
        expr = clone(e)
        if label.startswith("funding["):
            s = relaxed.add_variable(f"slack.{label}", 0.0)
            slacks[label] = s
            expr.add_term(s, -1.0)
        relaxed.add_ineq(expr, label)
    for vec, bound, label in src.soc_constraints:
        relaxed.add_soc([clone(e) for e in vec], clone(bound), label)
    objective = LinearExpr.constant(0.0)
    for s in slacks.values():
        objective.add_term(s, 1.0)
    relaxed.set_objective(objective)
    del rv
    result = solve(relaxed.seal())
    if result.status != "optimal":
        return []
    out = []
    for label, s in slacks.items():
        if result.value(s) > tol:
            out.append(int(label[len("funding["):-1]))
    return sorted(out)


# -- independent inner-problem oracles ------------------------------------------

def worst_case_inner_box(values, nominal, lower, upper,
                         sense: str = "max") -> tuple[float, np.ndarray]:
    """Exact inner optimum over the probability-perturbation box, primal side.

    Optimizes sum_s values_s (nominal_s + eta_s) over {sum eta = 0,
    lower <= eta <= upper} by enumerating the polytope's vertices (at most
    one coordinate away from its bounds) for small problems, falling back to
    an LP solve above 8 scenarios.  Returns (optimal value, the attaining
    distribution nominal + eta*).
    """
    v = np.asarray(values, dtype=float)
    p0 = np.asarray(nominal, dtype=float)
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    S = v.size
    if not (p0.shape == lo.shape == hi.shape == (S,)):
        raise ValidationError("values, nominal, and bounds must share one length")
    if np.any(lo > 1e-12) or np.any(hi < -1e-12):
        raise ValidationError("perturbation box must contain the zero vector")
    if sense not in ("max", "min"):
        raise ValueError(f"sense must be 'max' or 'min', got {sense!r}")
    obj = v if sense == "max" else -v

    if S == 1:
        return float(v[0] * p0[0]), p0.copy()

    if S <= 8:
        best_val = -math.inf
        best_eta = np.zeros(S)
        idx = np.arange(S)
        for free in range(S):
            others = idx[idx != free]
            for bits in itertools.product((0, 1), repeat=S - 1):
                eta = np.empty(S)
                eta[others] = np.where(bits, hi[others], lo[others])
                eta[free] = -eta[others].sum()
                if lo[free] - 1e-12 <= eta[free] <= hi[free] + 1e-12:
                    val = float(obj @ eta)
                    if val > best_val:
                        best_val = val
                        best_eta = eta
        perturb = best_val
        eta_star = best_eta
    else:
        res = linprog(-obj, A_eq=np.ones((1, S)), b_eq=[0.0],
                      bounds=list(zip(lo, hi)), method="highs")
        if res.status != 0:
            raise ValidationError(f"perturbation box LP infeasible: {res.message}")
        perturb = float(-res.fun)
        eta_star = np.asarray(res.x)

    signed = perturb if sense == "max" else -perturb
    return float(v @ p0 + signed), p0 + eta_star


def worst_case_inner_wasserstein(loss, points, weights, radius: float,
                                 support: tuple[float, float],
                                 resolution: int = 200) -> float:
    """Transport-LP upper oracle: sup E[loss] over a 1-d Wasserstein ball.

    Discretizes the scalar support interval into ``resolution`` uniform grid
    points (plus the empirical atoms, so a zero radius reproduces the
    empirical expectation exactly) and solves the finite transport plan LP.
    Only meant as a test oracle; multi-dimensional points are not supported.
    """
    pts = np.atleast_1d(np.asarray(points, dtype=float))
    if pts.ndim != 1:
        raise ValidationError("transport oracle supports scalar uncertainty only")
    if radius < 0:
        raise ValidationError("radius must be nonnegative")
    lo, hi = float(support[0]), float(support[1])
    if lo > hi:
        raise ValidationError("support interval is empty")
    if np.any(pts < lo - 1e-12) or np.any(pts > hi + 1e-12):
        raise ValidationError("an empirical point lies outside the support")
    if weights is None:
        w = np.full(pts.size, 1.0 / pts.size)
    else:
        w = check_simplex(weights, "empirical weights")
        if w.size != pts.size:
            raise ValidationError("weights do not match the number of points")

    grid = np.union1d(np.linspace(lo, hi, resolution), pts)
    G, P = grid.size, pts.size
    loss_vals = np.array([float(loss(g)) for g in grid])
    cost = np.abs(pts[:, None] - grid[None, :])

    # variables: transport plan rows flattened (P*G,)
    c = -np.tile(loss_vals, P)
    A_eq = np.zeros((P, P * G))
    for s in range(P):
        A_eq[s, s * G:(s + 1) * G] = 1.0
    res = linprog(c, A_ub=cost.reshape(1, -1), b_ub=[radius],
                  A_eq=A_eq, b_eq=w, bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(-res.fun)
