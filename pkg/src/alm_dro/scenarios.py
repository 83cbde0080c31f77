"""Regime-conditioned return simulation and scenario reduction.

Asset returns follow the arithmetic Euler step of geometric Brownian motion,
one step per decision period: simple return = drift*dt + vol*eps*sqrt(dt).
Cash (asset 0) bypasses the simulation and earns the configured risk-free
rate in every path and regime.  Each path draws its noise from a Philox
stream keyed by (seed, regime, stream) with the path index in the counter
block, so path m's returns do not depend on how many paths are requested or
on execution order.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .fund import ReturnScenarios, ValidationError, check_simplex


class InsufficientDataError(ValueError):
    """Not enough history or paths for the requested operation."""


@dataclass(frozen=True)
class GbmParams:
    """Per-asset drift and volatility for one regime (simple-return scale)."""

    drift: np.ndarray       # length n_assets; entry 0 (cash) is ignored
    volatility: np.ndarray  # length n_assets; entry 0 ignored
    dt: float = 1.0

    def __post_init__(self):
        mu = np.asarray(self.drift, dtype=float)
        sig = np.asarray(self.volatility, dtype=float)
        object.__setattr__(self, "drift", mu)
        object.__setattr__(self, "volatility", sig)
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sig))):
            raise ValidationError("GBM parameters must be finite")
        if mu.shape != sig.shape or mu.ndim != 1:
            raise ValidationError("drift and volatility must be 1-d vectors of equal length")
        if np.any(sig < 0):
            raise ValidationError("volatility must be nonnegative")
        if not self.dt > 0:
            raise ValidationError(f"dt must be positive, got {self.dt}")


@dataclass(frozen=True)
class RegimeModel:
    """A set of market regimes with occurrence probabilities."""

    regimes: tuple[GbmParams, ...]
    probabilities: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        probs = check_simplex(self.probabilities, "regime probabilities")
        object.__setattr__(self, "probabilities", probs)
        if len(self.regimes) < 1:
            raise ValidationError("at least one regime required")
        if probs.size != len(self.regimes):
            raise ValidationError("regime probabilities do not match regime count")
        if self.names and len(self.names) != len(self.regimes):
            raise ValidationError("regime names do not match regime count")

    @property
    def n_regimes(self) -> int:
        return len(self.regimes)


@dataclass(frozen=True)
class SimulationConfig:
    n_paths: int
    seed: int
    periods: int
    n_assets: int              # includes cash at index 0
    risk_free_rate: float = 0.0

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValidationError(f"n_paths must be >= 1, got {self.n_paths}")
        if self.periods < 1 or self.n_assets < 1:
            raise ValidationError("periods and n_assets must be >= 1")


def _path_generator(seed: int, regime: int, path: int, stream: int = 0) -> np.random.Generator:
    # Philox key carries (seed, regime/stream); the counter block separates
    # paths by 2^128 draws, making path output independent of batch size.
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
                    np.uint64(((stream & 0xFFFFFFFF) << 32) | (regime & 0xFFFFFFFF))],
                   dtype=np.uint64)
    bg = np.random.Philox(key=key, counter=[0, 0, np.uint64(path), 0])
    return np.random.Generator(bg)


def simulate_paths(params: GbmParams, config: SimulationConfig, regime: int = 0,
                   stream: int = 0) -> np.ndarray:
    """Simulate simple returns, shape (n_paths, periods, n_assets).

    Risky assets (index >= 1) follow drift*dt + vol*eps*sqrt(dt) with iid
    standard-normal eps; cash earns risk_free_rate*dt deterministically.
    Identical inputs give bitwise-identical output.
    """
    if params.drift.size != config.n_assets:
        raise ValidationError(
            f"params cover {params.drift.size} assets, config expects {config.n_assets}"
        )
    M, T, n = config.n_paths, config.periods, config.n_assets
    out = np.empty((M, T, n))
    out[:, :, 0] = config.risk_free_rate * params.dt
    n_risky = n - 1
    if n_risky:
        scale = params.volatility[1:] * np.sqrt(params.dt)
        base = params.drift[1:] * params.dt
        for m in range(M):
            eps = _path_generator(config.seed, regime, m, stream).standard_normal((T, n_risky))
            out[m, :, 1:] = base + scale * eps
    return out


def rolling_features(returns: np.ndarray, window: int,
                     long_term: tuple[float, float] | None = None) -> np.ndarray:
    """Per-window (mean, std) features of a market return series.

    A (time, assets) matrix is reduced to its cross-sectional mean first.
    Features are centered/scaled by the long-term mean and std (estimated
    from the full series when not supplied).
    """
    series = np.asarray(returns, dtype=float)
    if series.ndim == 2:
        series = series.mean(axis=1)
    if series.ndim != 1:
        raise ValidationError("returns must be a 1-d series or (time, assets) matrix")
    if window < 2:
        raise ValidationError(f"window must be >= 2, got {window}")
    n_win = series.size - window + 1
    if n_win < 1:
        raise InsufficientDataError(
            f"history of {series.size} steps is too short for window {window}"
        )
    if long_term is None:
        long_term = (float(series.mean()), float(series.std()))
    lt_mean, lt_std = long_term
    if lt_std <= 0:
        lt_std = 1.0
    sliding = np.lib.stride_tricks.sliding_window_view(series, window)
    feats = np.column_stack([(sliding.mean(axis=1) - lt_mean) / lt_std,
                             sliding.std(axis=1) / lt_std])
    return feats


def classify_regimes(returns: np.ndarray, window: int, n_regimes: int,
                     long_term: tuple[float, float] | None = None,
                     seed: int = 0, n_init: int = 100) -> np.ndarray:
    """k-means labels for each rolling window, ordered by regime quality.

    Clusters are relabeled by descending (window mean return / window
    volatility), so label 0 is the calmest growth regime and the last label
    the worst drawdown regime, independent of k-means' arbitrary numbering.
    Deterministic for a fixed seed.
    """
    from sklearn.cluster import KMeans

    feats = rolling_features(returns, window, long_term)
    n_win = feats.shape[0]
    if n_win < n_regimes:
        raise InsufficientDataError(f"{n_win} windows < {n_regimes} regimes")
    if n_regimes == 1 or np.allclose(feats, feats[0]):
        return np.zeros(n_win, dtype=int)

    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", append=True)
        km = KMeans(n_clusters=n_regimes, n_init=n_init, random_state=seed)
        raw = km.fit_predict(feats)

    # Rank clusters by mean/vol ratio of their member windows (raw scale).
    order = []
    for r in range(n_regimes):
        members = feats[raw == r]
        if members.size == 0:
            order.append((-np.inf, r))
            continue
        mean_part = members[:, 0].mean()
        vol_part = members[:, 1].mean()
        ratio = mean_part / vol_part if vol_part > 0 else np.inf * np.sign(mean_part or 1)
        order.append((ratio, -r))
    ranking = sorted(range(n_regimes), key=lambda r: order[r], reverse=True)
    relabel = np.empty(n_regimes, dtype=int)
    for new, old in enumerate(ranking):
        relabel[old] = new
    return relabel[raw]


def regime_probabilities(labels, n_regimes: int | None = None) -> np.ndarray:
    """Empirical regime frequencies from window labels."""
    lab = np.asarray(labels, dtype=int)
    if lab.size == 0:
        raise InsufficientDataError("no labels supplied")
    if n_regimes is None:
        n_regimes = int(lab.max()) + 1
    counts = np.bincount(lab, minlength=n_regimes)
    return counts / lab.size


def reduce_scenarios(raw_by_regime, probabilities) -> ReturnScenarios:
    """Average the simulated paths of each regime into one return scenario.

    The per-period mean simple return of regime k becomes scenario k's return
    vector (as gross returns), with the regime probabilities as the nominal
    scenario distribution, giving K = number of regimes.
    """
    tensors = [np.asarray(r, dtype=float) for r in raw_by_regime]
    if not tensors or any(t.size == 0 for t in tensors):
        raise InsufficientDataError("every regime needs at least one simulated path")
    shape = tensors[0].shape[1:]
    if any(t.ndim != 3 or t.shape[1:] != shape for t in tensors):
        raise ValidationError("all regime tensors must share (paths, T, assets) shape")
    means = np.stack([t.mean(axis=0) for t in tensors], axis=1)  # (T, K, n)
    return ReturnScenarios(gross=1.0 + means, probabilities=np.asarray(probabilities, float))


def estimate_regime_params(returns: np.ndarray, labels: np.ndarray, window: int,
                           n_regimes: int, dt: float = 1.0) -> list[GbmParams]:
    """Per-regime drift/vol estimates from the window labels of a history.

    Each window's underlying time steps contribute (with multiplicity) to the
    regime its window was assigned; cash column statistics are overwritten by
    the simulation config at draw time so only shape matters there.
    """
    series = np.asarray(returns, dtype=float)
    if series.ndim == 1:
        series = series[:, None]
    params = []
    for r in range(n_regimes):
        rows = []
        for w in np.nonzero(labels == r)[0]:
            rows.append(series[w:w + window])
        if not rows:
            raise InsufficientDataError(f"regime {r} has no member windows")
        block = np.concatenate(rows, axis=0)
        params.append(GbmParams(drift=block.mean(axis=0) / dt,
                                volatility=block.std(axis=0) / np.sqrt(dt), dt=dt))
    return params


def simulate_regime_switching_paths(model: RegimeModel, config: SimulationConfig,
                                    sticky: float = 0.0, stream: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Paths whose regime is redrawn each period from a sticky chain.

    With probability ``sticky`` the previous period's regime persists,
    otherwise a fresh regime is drawn from the model probabilities (which
    therefore remain the stationary distribution).  Returns (returns tensor
    (n_paths, T, n_assets), regime draws (n_paths, T)).
    """
    if not 0.0 <= sticky < 1.0:
        raise ValidationError(f"sticky must lie in [0, 1), got {sticky}")
    M, T, n = config.n_paths, config.periods, config.n_assets
    R = model.n_regimes
    for prm in model.regimes:
        if prm.drift.size != n:
            raise ValidationError("regime parameter length does not match n_assets")
    out = np.empty((M, T, n))
    regimes = np.empty((M, T), dtype=int)
    for m in range(M):
        g = _path_generator(config.seed, 0, m, stream)
        draws = g.random(T)
        eps = g.standard_normal((T, n - 1)) if n > 1 else np.empty((T, 0))
        reg = 0
        for t in range(T):
            if t == 0 or draws[t] >= sticky:
                # inverse-CDF draw keeps the stream usage fixed per period
                reg = int(np.searchsorted(np.cumsum(model.probabilities),
                                          g.random(), side="right"))
                reg = min(reg, R - 1)
            regimes[m, t] = reg
            prm = model.regimes[reg]
            out[m, t, 0] = config.risk_free_rate * prm.dt
            if n > 1:
                out[m, t, 1:] = (prm.drift[1:] * prm.dt
                                 + prm.volatility[1:] * np.sqrt(prm.dt) * eps[t])
    return out, regimes


def synthetic_history(model: RegimeModel, n_steps: int, seed: int,
                      n_assets: int, risk_free_rate: float = 0.0,
                      sticky: float = 0.9) -> tuple[np.ndarray, np.ndarray]:
    """One long regime-switching return history for classification demos."""
    config = SimulationConfig(n_paths=1, seed=seed, periods=n_steps,
                              n_assets=n_assets, risk_free_rate=risk_free_rate)
    rets, regs = simulate_regime_switching_paths(model, config, sticky=sticky, stream=2)
    return rets[0], regs[0]


# -- CSV interface -----------------------------------------------------------

def load_returns_csv(path) -> tuple[list[str], np.ndarray]:
    """Read a returns history: header of asset names, one row per time step."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty returns file") from None
        rows = []
        for i, row in enumerate(reader):
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}: row {i + 2} has {len(row)} fields, "
                                      f"header has {len(header)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ValidationError(f"{path}: row {i + 2}: {exc}") from None
    if not rows:
        raise InsufficientDataError(f"{path}: no data rows")
    return header, np.asarray(rows)


def write_returns_csv(path, names: list[str], returns: np.ndarray) -> None:
    arr = np.asarray(returns, dtype=float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in arr:
            writer.writerow([format(v, ".12g") for v in row])


def write_scenarios_csv(outdir, names: list[str], scenarios: ReturnScenarios,
                        prefix: str = "returns_scenario") -> list[str]:
    """Dump each scenario as a history-schema CSV plus a probability sidecar."""
    from pathlib import Path

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for k in range(scenarios.n_scenarios):
        p = outdir / f"{prefix}_{k}.csv"
        write_returns_csv(p, names, scenarios.gross[:, k, :] - 1.0)
        written.append(str(p))
    sidecar = outdir / f"{prefix}_probs.csv"
    with open(sidecar, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "probability"])
        for k, q in enumerate(scenarios.probabilities):
            writer.writerow([k, format(q, ".12g")])
    written.append(str(sidecar))
    return written
