"""Pension fund domain types, discounting arithmetic, and instance validation.

Time convention used throughout the package: decision moments are t = 0..T.
The state at t=0 (fund capital, wage bill, contribution rate, benefit payment,
holdings) is known.  Vectors of wages and benefit payments cover the moments
t = 1..T, so index i of such a vector refers to moment t = i+1.  Matrices of
discounted wages W and liability values L have shape (T, S) with row i
holding the values for moment t = i+1:

    W[i, s] = wages[i] / (1 + rate_s)^(i+1)          (present value at t=0)
    L[i, s] = sum_{j >= i} benefits[j] / (1 + rate_s)^(j-i)
                                                     (value at moment i+1)

L is the value *at* a moment of the benefits still owed from that moment on,
which is what the funding-ratio constraint compares assets against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Probability vectors are accepted as simplex members up to this slack.
SIMPLEX_TOL = 1e-9


class ValidationError(ValueError):
    """Raised when an input violates a documented invariant."""


def _finite_array(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


def check_simplex(probs, name: str = "probabilities", tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Validate and return a probability vector, raising if off the simplex."""
    p = _finite_array(probs, name)
    if p.ndim != 1 or p.size == 0:
        raise ValidationError(f"{name} must be a nonempty 1-d vector")
    if np.min(p) < -tol:
        raise ValidationError(f"{name} has a negative entry ({np.min(p):.3g})")
    total = float(p.sum())
    if abs(total - 1.0) > tol:
        raise ValidationError(f"{name} sums to {total!r}, not 1 (simplex violation)")
    return p


@dataclass(frozen=True)
class GroupConstraint:
    """Cap or floor the share of total holdings invested in a set of assets.

    ``assets`` are indices into 0..N (0 = cash), ``op`` is "<=" or ">=",
    and ``fraction`` bounds sum(x[assets]) relative to sum(x).
    """

    assets: tuple[int, ...]
    op: str
    fraction: float

    def __post_init__(self):
        if self.op not in ("<=", ">="):
            raise ValidationError(f"group constraint op must be '<=' or '>=', got {self.op!r}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValidationError(f"group fraction {self.fraction} outside [0, 1]")
        if len(self.assets) == 0:
            raise ValidationError("group constraint needs at least one asset index")


@dataclass(frozen=True)
class RegulatorySets:
    """Admissible contribution rates and portfolio restrictions."""

    contribution_bounds: tuple[float, float] = (0.0, 1.0)
    group_constraints: tuple[GroupConstraint, ...] = ()
    nonnegative: bool = True

    def __post_init__(self):
        lo, hi = self.contribution_bounds
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValidationError(
                f"contribution bounds must satisfy 0 <= lo <= hi <= 1, got ({lo}, {hi})"
            )


@dataclass(frozen=True)
class FundSpec:
    """Static description of a defined-benefit fund and its starting state."""

    horizon: int                      # T, number of decision moments after t=0
    n_assets: int                     # N+1 including cash at index 0
    initial_assets: float             # A_0
    initial_wage: float               # w_0
    initial_contribution_rate: float  # y_0
    initial_liability: float          # l_0
    initial_holdings: np.ndarray      # x_{n,0}, length N+1
    wages: np.ndarray                 # w_t for t=1..T
    benefit_payments: np.ndarray      # l_t for t=1..T
    funding_threshold: float          # psi > 0
    regulatory: RegulatorySets = field(default_factory=RegulatorySets)

    def __post_init__(self):
        object.__setattr__(self, "initial_holdings",
                           _finite_array(self.initial_holdings, "initial_holdings"))
        object.__setattr__(self, "wages", _finite_array(self.wages, "wages"))
        object.__setattr__(self, "benefit_payments",
                           _finite_array(self.benefit_payments, "benefit_payments"))
        for issue in self.invariant_violations():
            raise ValidationError(issue)
        self.initial_holdings.setflags(write=False)
        self.wages.setflags(write=False)
        self.benefit_payments.setflags(write=False)

    def invariant_violations(self) -> list[str]:
        issues = []
        if self.horizon < 1:
            issues.append(f"horizon must be >= 1, got {self.horizon}")
        if self.n_assets < 1:
            issues.append(f"n_assets must be >= 1 (cash at least), got {self.n_assets}")
        for name in ("initial_assets", "initial_wage", "initial_liability"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                issues.append(f"{name} must be finite and >= 0, got {v}")
        if not 0.0 <= self.initial_contribution_rate <= 1.0:
            issues.append(
                f"initial_contribution_rate must lie in [0, 1], got {self.initial_contribution_rate}"
            )
        if self.funding_threshold <= 0:
            issues.append(f"funding_threshold must be > 0, got {self.funding_threshold}")
        if self.initial_holdings.shape != (self.n_assets,):
            issues.append(
                f"initial_holdings has shape {self.initial_holdings.shape}, expected ({self.n_assets},)"
            )
        elif np.any(self.initial_holdings < 0):
            issues.append("initial_holdings has negative entries")
        for name in ("wages", "benefit_payments"):
            vec = getattr(self, name)
            if vec.shape != (self.horizon,):
                issues.append(f"{name} has shape {vec.shape}, expected ({self.horizon},)")
            elif vec.size and np.min(vec) < 0:
                issues.append(f"{name} has negative entries")
        for g in self.regulatory.group_constraints:
            if any(not 0 <= a < self.n_assets for a in g.assets):
                issues.append(f"group constraint indices {g.assets} outside 0..{self.n_assets - 1}")
        return issues

    @property
    def initial_budget(self) -> float:
        """Cash available to invest at t=0: A_0 + w_0*y_0 - l_0."""
        return (self.initial_assets
                + self.initial_wage * self.initial_contribution_rate
                - self.initial_liability)


@dataclass(frozen=True)
class DiscountScenarios:
    """Discrete discount-rate scenarios with derived wage/liability values."""

    rates: np.ndarray            # gamma_s, length S
    probabilities: np.ndarray    # nominal p0 on the S-simplex
    wages_pv: np.ndarray         # W, shape (T, S)
    liability_values: np.ndarray  # L, shape (T, S)

    def __post_init__(self):
        for name in ("rates", "probabilities", "wages_pv", "liability_values"):
            arr = _finite_array(getattr(self, name), name)
            object.__setattr__(self, name, arr)
            arr.setflags(write=False)
        check_simplex(self.probabilities, "discount probabilities")
        if np.any(self.rates <= -1.0):
            raise ValidationError("discount rates must be > -1")
        S = self.rates.size
        if self.probabilities.shape != (S,):
            raise ValidationError("rates and probabilities must have equal length")
        if self.wages_pv.ndim != 2 or self.wages_pv.shape[1] != S:
            raise ValidationError(f"wages_pv must have shape (T, {S})")
        if self.liability_values.shape != self.wages_pv.shape:
            raise ValidationError("wages_pv and liability_values must share one (T, S) shape")

    @property
    def n_scenarios(self) -> int:
        return self.rates.size

    @property
    def horizon(self) -> int:
        return self.wages_pv.shape[0]

    def mean_rate(self) -> float:
        """Nominal-probability-weighted discount rate."""
        return float(self.probabilities @ self.rates)


@dataclass(frozen=True)
class ReturnScenarios:
    """Discrete per-period gross-return scenarios for all assets."""

    gross: np.ndarray           # shape (T, K, N+1); gross[i, k] applies over moment i -> i+1
    probabilities: np.ndarray   # nominal q0 on the K-simplex

    def __post_init__(self):
        gross = _finite_array(self.gross, "gross returns")
        object.__setattr__(self, "gross", gross)
        gross.setflags(write=False)
        probs = check_simplex(self.probabilities, "return probabilities")
        object.__setattr__(self, "probabilities", probs)
        probs.setflags(write=False)
        if gross.ndim != 3:
            raise ValidationError(f"gross returns must be (T, K, N+1), got shape {gross.shape}")
        if gross.shape[1] != probs.size:
            raise ValidationError("number of return scenarios does not match probabilities")
        if gross.size and np.min(gross) <= 0.0:
            raise ValidationError("gross returns must be strictly positive")

    @property
    def n_scenarios(self) -> int:
        return self.probabilities.size

    @property
    def horizon(self) -> int:
        return self.gross.shape[0]

    @property
    def n_assets(self) -> int:
        return self.gross.shape[2]

    def expected_gross(self) -> np.ndarray:
        """Nominal expectation of gross returns, shape (T, N+1)."""
        return np.einsum("tkn,k->tn", self.gross, self.probabilities)


@dataclass(frozen=True)
class InvestmentStrategy:
    """Solved here-and-now plan: allocations x_0..x_{T-1} and rates y_1..y_T."""

    allocations: np.ndarray        # shape (T, N+1); row i is held over moment i -> i+1
    contribution_rates: np.ndarray  # length T; entry i applies at moment i+1
    objective_value: float
    model: str = ""

    def __post_init__(self):
        alloc = _finite_array(self.allocations, "allocations")
        rates = _finite_array(self.contribution_rates, "contribution_rates")
        object.__setattr__(self, "allocations", alloc)
        object.__setattr__(self, "contribution_rates", rates)
        alloc.setflags(write=False)
        rates.setflags(write=False)
        if alloc.ndim != 2 or rates.ndim != 1 or alloc.shape[0] != rates.size:
            raise ValidationError("allocations must be (T, N+1) and contribution_rates length T")
        if not math.isfinite(self.objective_value):
            raise ValidationError("objective_value must be finite")

    def weights(self) -> np.ndarray:
        """Per-period portfolio weights; rows with zero total fall back to cash."""
        totals = self.allocations.sum(axis=1)
        w = np.zeros_like(self.allocations)
        pos = totals > 0
        w[pos] = self.allocations[pos] / totals[pos, None]
        w[~pos, 0] = 1.0
        return w


def present_value(cashflows, rate: float, from_period: int = 0) -> float:
    """Discounted value of cashflows[from_period:] as of ``from_period``.

    ``cashflows[j]`` is paid at period j; the result is
    sum_{j >= from_period} cashflows[j] / (1 + rate)^(j - from_period).
    """
    c = _finite_array(cashflows, "cashflows")
    if c.ndim != 1:
        raise ValidationError("cashflows must be a 1-d vector")
    if not math.isfinite(rate) or rate <= -1.0:
        raise ValidationError(f"rate must be finite and > -1, got {rate}")
    if not 0 <= from_period <= c.size:
        raise ValidationError(f"from_period {from_period} outside 0..{c.size}")
    tail = c[from_period:]
    if tail.size == 0:
        return 0.0
    factors = (1.0 + rate) ** np.arange(tail.size)
    return float(np.sum(tail / factors))


def liability_value(benefits, rate: float, moment: int) -> float:
    """Value at decision moment ``moment`` of benefits still owed from then on.

    ``benefits[i]`` is paid at moment i+1; for moment in 1..T this returns
    sum_{tau >= moment} benefits[tau-1] / (1 + rate)^(tau - moment).
    """
    b = _finite_array(benefits, "benefits")
    if not 1 <= moment <= b.size:
        raise ValidationError(f"moment {moment} outside 1..{b.size}")
    tail = b[moment - 1:]
    factors = (1.0 + rate) ** np.arange(tail.size)
    return float(np.sum(tail / factors))


def build_discount_scenarios(wages, benefits, rates, probabilities) -> DiscountScenarios:
    """Derive the (T, S) matrices of discounted wages and liability values.

    Wages and benefit payments are perfectly correlated through the single
    random discount rate, so one scenario index s drives both.
    """
    w = _finite_array(wages, "wages")
    b = _finite_array(benefits, "benefits")
    if w.shape != b.shape or w.ndim != 1:
        raise ValidationError("wages and benefits must be 1-d vectors of equal length")
    gam = _finite_array(rates, "rates")
    if gam.ndim != 1 or gam.size == 0:
        raise ValidationError("rates must be a nonempty 1-d vector")
    if np.any(gam <= -1.0):
        raise ValidationError("rates must be > -1")
    p = check_simplex(probabilities, "discount probabilities")
    if p.size != gam.size:
        raise ValidationError("rates and probabilities must have equal length")

    T, S = w.size, gam.size
    periods = np.arange(1, T + 1)
    wages_pv = w[:, None] / (1.0 + gam[None, :]) ** periods[:, None]
    liab = np.empty((T, S))
    for s in range(S):
        for t in periods:
            liab[t - 1, s] = liability_value(b, float(gam[s]), int(t))
    return DiscountScenarios(rates=gam, probabilities=p,
                             wages_pv=wages_pv, liability_values=liab)


def validate(spec: FundSpec, ds: DiscountScenarios, rs: ReturnScenarios) -> list[str]:
    """Cross-check a full problem instance; returns all violations found.

    An empty list means the instance is consistent.  The constituent types
    enforce their own invariants at construction, so this focuses on
    cross-object shape and coherence checks.  Never mutates its inputs.
    """
    issues = list(spec.invariant_violations())
    T = spec.horizon
    if ds.horizon != T:
        issues.append(f"discount scenarios cover {ds.horizon} periods, fund horizon is {T}")
    if rs.horizon != T:
        issues.append(f"return scenarios cover {rs.horizon} periods, fund horizon is {T}")
    if rs.n_assets != spec.n_assets:
        issues.append(f"return scenarios cover {rs.n_assets} assets, fund has {spec.n_assets}")

    for name, probs in (("discount probabilities", ds.probabilities),
                        ("return probabilities", rs.probabilities)):
        try:
            check_simplex(probs, name)
        except ValidationError as exc:
            issues.append(str(exc))

    # Cash (asset 0) must earn one scenario-independent rate within a period.
    if rs.gross.size:
        cash = rs.gross[:, :, 0]
        if np.max(np.abs(cash - cash[:, :1])) > 1e-12:
            issues.append("risk-free asset return differs across return scenarios within a period")

    # The derived W matrix must match the spec's wage stream under each rate.
    if ds.horizon == T and ds.wages_pv.size:
        periods = np.arange(1, T + 1)
        expected = spec.wages[:, None] / (1.0 + ds.rates[None, :]) ** periods[:, None]
        if not np.allclose(ds.wages_pv, expected, rtol=1e-9, atol=1e-9):
            issues.append("discounted wages are inconsistent with the fund's wage stream")

    if spec.initial_budget < 0:
        issues.append(
            f"initial budget A_0 + w_0*y_0 - l_0 = {spec.initial_budget:.6g} is negative"
        )
    return issues
