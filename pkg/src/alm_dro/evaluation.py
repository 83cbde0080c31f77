"""Out-of-sample simulation, concentration metrics, and model comparison.

A solved strategy fixes per-period portfolio *weights* and contribution
rates; on each fresh return path the weights are rescaled to the realized
investable wealth (planned dollar amounts would violate the budget once
realized wealth drifts off plan).  Funding ratios divide realized assets by
the liability value under the path's discount rate; fund returns are the
pure portfolio return, excluding contribution and benefit flows.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import stats

from .fund import FundSpec, InvestmentStrategy, ValidationError, check_simplex, liability_value


@dataclass(frozen=True)
class BacktestPath:
    """One realized return path with its discount-rate draw."""

    gross_returns: np.ndarray       # (T, N+1), strictly positive
    discount_rate: float | None = None
    seed: int | None = None

    def __post_init__(self):
        arr = np.asarray(self.gross_returns, dtype=float)
        object.__setattr__(self, "gross_returns", arr)
        if arr.ndim != 2 or not np.all(np.isfinite(arr)) or np.any(arr <= 0):
            raise ValidationError("gross returns must be a finite positive (T, N+1) matrix")
        arr.setflags(write=False)


@dataclass
class OutOfSampleResult:
    """Per-path and aggregated funding-ratio / fund-return series."""

    funding_ratios: np.ndarray      # (paths, T); 0 from insolvency onward
    fund_returns: np.ndarray        # (paths, T); NaN from insolvency onward
    insolvent_at: np.ndarray        # (paths,), period of insolvency or 0 if none

    @property
    def n_paths(self) -> int:
        return self.funding_ratios.shape[0]

    @property
    def horizon(self) -> int:
        return self.funding_ratios.shape[1]

    @property
    def insolvency_rate(self) -> float:
        return float(np.mean(self.insolvent_at > 0))

    def mean_funding_ratio(self) -> np.ndarray:
        return self.funding_ratios.mean(axis=0)

    def std_funding_ratio(self) -> np.ndarray:
        return self.funding_ratios.std(axis=0)

    def mean_fund_return(self) -> np.ndarray:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.nanmean(self.fund_returns, axis=0)

    def std_fund_return(self) -> np.ndarray:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.nanstd(self.fund_returns, axis=0)


def simulate_out_of_sample(strategy: InvestmentStrategy, spec: FundSpec,
                           paths, default_rate: float | None = None) -> OutOfSampleResult:
    """Run the wealth recursion for a fixed strategy over fresh paths.

    Per path: investable wealth starts at the known t=0 budget, is allocated
    by the strategy's period weights, grows by the realized returns, and is
    adjusted by contributions w_t*y_t and benefits l_t.  A path whose assets
    drop to zero or below is flagged insolvent at that period: its funding
    ratio is recorded as 0 from then on and its returns are excluded from
    the aggregates.  Paths without a discount rate fall back to
    ``default_rate``.
    """
    T, n = strategy.allocations.shape
    if T != spec.horizon or n != spec.n_assets:
        raise ValidationError("strategy dimensions do not match the fund spec")
    path_list = list(paths)
    weights = strategy.weights()
    y = strategy.contribution_rates

    funding = np.zeros((len(path_list), T))
    returns = np.full((len(path_list), T), np.nan)
    insolvent_at = np.zeros(len(path_list), dtype=int)

    for p, path in enumerate(path_list):
        if path.gross_returns.shape != (T, n):
            raise ValidationError(f"path {p} has shape {path.gross_returns.shape}, "
                                  f"expected ({T}, {n})")
        rate = path.discount_rate if path.discount_rate is not None else default_rate
        if rate is None:
            raise ValidationError("path carries no discount rate and no default was given")
        liab = np.array([liability_value(spec.benefit_payments, rate, t)
                         for t in range(1, T + 1)])

        investable = spec.initial_budget
        for t in range(1, T + 1):
            if investable <= 0.0:
                insolvent_at[p] = insolvent_at[p] or t
                break
            holdings = weights[t - 1] * investable
            assets = float(path.gross_returns[t - 1] @ holdings)
            returns[p, t - 1] = assets / investable - 1.0
            if assets <= 0.0:
                insolvent_at[p] = t
                returns[p, t - 1] = np.nan
                break
            funding[p, t - 1] = assets / liab[t - 1] if liab[t - 1] > 0 else np.inf
            if t <= T - 1:
                investable = assets + spec.wages[t - 1] * y[t - 1] - spec.benefit_payments[t - 1]
    return OutOfSampleResult(funding_ratios=funding, fund_returns=returns,
                             insolvent_at=insolvent_at)


def nominal_path(spec: FundSpec, expected_gross: np.ndarray,
                 rate: float) -> BacktestPath:
    """The zero-volatility path that realizes the nominal expectations."""
    return BacktestPath(gross_returns=np.asarray(expected_gross, dtype=float),
                        discount_rate=rate)


def hhi(weights) -> float:
    """Herfindahl-Hirschman concentration of a weight vector: sum of squares.

    Squares are accumulated in extended precision and rounded once, so ten
    equal weights give exactly 0.1.
    """
    w = check_simplex(weights, "portfolio weights")
    wl = w.astype(np.longdouble)
    return float(np.sum(wl * wl))


def average_hhi(strategy) -> float:
    """Mean per-period HHI of a strategy's allocations.

    Periods with zero total holdings carry no weights and are skipped with a
    warning; negative holdings are a caller error.
    """
    alloc = strategy.allocations if isinstance(strategy, InvestmentStrategy) \
        else np.asarray(strategy, dtype=float)
    if np.any(alloc < 0):
        raise ValidationError("allocations must be nonnegative for HHI")
    totals = alloc.sum(axis=1)
    values = []
    for t, total in enumerate(totals):
        if total <= 0:
            warnings.warn(f"period {t} has zero holdings; skipped in average HHI")
            continue
        values.append(hhi(alloc[t] / total))
    if not values:
        raise ValidationError("no period with positive holdings")
    return float(np.mean(values))


class WelchResult(NamedTuple):
    statistic: float
    pvalue: float
    df: float


def welch_t_test(sample_a, sample_b) -> WelchResult:
    """Two-sided Welch unequal-variance t-test.

    Degrees of freedom via Welch-Satterthwaite; p-value from the Student-t
    survival function.  Two degenerate samples with equal means give
    (t=0, p=1); with different means the difference is certain, so (inf, 0).
    """
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.ndim != 1 or b.ndim != 1 or a.size < 2 or b.size < 2:
        raise ValidationError("Welch test needs two 1-d samples of size >= 2")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValidationError("samples must be finite")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    if va + vb == 0.0:
        if diff == 0.0:
            return WelchResult(0.0, 1.0, float(a.size + b.size - 2))
        return WelchResult(math.copysign(math.inf, diff), 0.0,
                           float(a.size + b.size - 2))
    t = diff / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    p = 2.0 * float(stats.t.sf(abs(t), df))
    return WelchResult(float(t), min(p, 1.0), float(df))


MODEL_PAIRS = (("MD", "BD"), ("MD", "WM"), ("MD", "SP"),
               ("BD", "WM"), ("BD", "SP"), ("WM", "SP"))


@dataclass
class EvaluationReport:
    """Cross-model out-of-sample summary in the shape of the result tables."""

    models: list[str]
    periods: int
    mean_funding: dict[str, np.ndarray]       # per-period mean across paths
    mean_return: dict[str, np.ndarray]
    avg_funding: dict[str, float]             # averages of the period means
    std_funding: dict[str, float]             # std dev of the period means
    avg_return: dict[str, float]
    std_return: dict[str, float]
    average_hhi: dict[str, float]
    insolvency_rate: dict[str, float]
    funding_tests: list[tuple[str, str, float, float]] = field(default_factory=list)
    return_tests: list[tuple[str, str, float, float]] = field(default_factory=list)


def summarize(results: dict[str, OutOfSampleResult],
              strategies: dict[str, InvestmentStrategy] | None = None) -> EvaluationReport:
    """Aggregate per-model simulations into one report.

    Pairwise comparisons run the Welch test on the per-period mean series of
    each metric, for every ordered pair in the canonical MD/BD/WM/SP listing
    that both models attend.
    """
    models = list(results)
    horizons = {r.horizon for r in results.values()}
    if len(horizons) != 1:
        raise ValidationError("all models must share one evaluation horizon")
    T = horizons.pop()

    mean_funding, mean_return = {}, {}
    for m, res in results.items():
        mean_funding[m] = res.mean_funding_ratio()
        mean_return[m] = res.mean_fund_return()

    report = EvaluationReport(
        models=models, periods=T,
        mean_funding=mean_funding, mean_return=mean_return,
        avg_funding={m: float(v.mean()) for m, v in mean_funding.items()},
        std_funding={m: float(v.std(ddof=1)) if T > 1 else 0.0
                     for m, v in mean_funding.items()},
        avg_return={m: float(np.nanmean(v)) for m, v in mean_return.items()},
        std_return={m: float(np.nanstd(v, ddof=1)) if T > 1 else 0.0
                    for m, v in mean_return.items()},
        average_hhi={m: average_hhi(strategies[m]) for m in models}
        if strategies else {},
        insolvency_rate={m: res.insolvency_rate for m, res in results.items()},
    )
    ordered = [p for p in MODEL_PAIRS if p[0] in results and p[1] in results]
    ordered += [(a, b) for i, a in enumerate(models) for b in models[i + 1:]
                if (a, b) not in MODEL_PAIRS and (b, a) not in MODEL_PAIRS]
    for a, b in ordered:
        t, p, _ = welch_t_test(mean_funding[a], mean_funding[b])
        report.funding_tests.append((a, b, t, p))
        t, p, _ = welch_t_test(mean_return[a], mean_return[b])
        report.return_tests.append((a, b, t, p))
    return report
