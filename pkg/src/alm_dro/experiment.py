"""Configuration-driven orchestration of the full model comparison.

One YAML document describes the fund, the discount and return scenario
machinery, per-model ambiguity rules, the funding-threshold sweep, and the
out-of-sample evaluation.  ``run`` builds and solves every requested
(model, threshold) cell, evaluates the strategies on fresh paths, and
writes the result tables, a re-aggregatable raw dump, and a manifest with
content hashes.  All result artifacts are a pure function of (config,
seeds); the manifest additionally carries wall-clock provenance.
"""

from __future__ import annotations

import concurrent.futures
import csv
import datetime
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import conic, evaluation, formulations, scenarios
from .fund import (
    DiscountScenarios,
    FundSpec,
    GroupConstraint,
    InvestmentStrategy,
    RegulatorySets,
    ReturnScenarios,
    build_discount_scenarios,
    validate,
)

CANONICAL_MODELS = ("MD", "BD", "WM", "SP")
FLOAT_FMT = ".12g"


class ConfigError(ValueError):
    """Invalid experiment configuration; carries every problem found."""

    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))


def _fmt(value: float) -> str:
    return format(float(value), FLOAT_FMT)


# -- configuration -------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Validated experiment description (thin typed view over the YAML tree)."""

    raw: dict
    path: str = ""

    @property
    def name(self) -> str:
        return self.raw.get("name", "experiment")

    @property
    def models(self) -> list[str]:
        requested = self.raw["models"]
        return [m for m in CANONICAL_MODELS if m in requested]

    @property
    def psi_sweep(self) -> list[float]:
        return [float(v) for v in self.raw["psi_sweep"]]

    @property
    def evaluation_psi(self) -> float:
        return float(self.raw["evaluation"]["psi"])

    @property
    def output_dir(self) -> str:
        return self.raw.get("output_dir", "runs/" + self.name)

    @property
    def jobs(self) -> int:
        return int(self.raw.get("jobs", 1))

    @property
    def solver_tols(self) -> tuple[float, float]:
        block = self.raw.get("solver", {})
        return (float(block.get("tol_feas", 1e-9)), float(block.get("tol_obj", 1e-9)))

    def with_overrides(self, seed: int | None = None, out: str | None = None,
                       models: list[str] | None = None, psi: list[float] | None = None,
                       jobs: int | None = None) -> "ExperimentConfig":
        raw = json.loads(json.dumps(self.raw))  # deep copy of plain data
        if seed is not None:
            raw["scenarios"]["seed"] = int(seed)
            raw.setdefault("evaluation", {})["seed"] = int(seed) + 1
        if out is not None:
            raw["output_dir"] = out
        if models is not None:
            raw["models"] = models
        if psi is not None:
            raw["psi_sweep"] = [float(v) for v in psi]
            if raw["evaluation"]["psi"] not in raw["psi_sweep"]:
                raw["evaluation"]["psi"] = raw["psi_sweep"][0]
        if jobs is not None:
            raw["jobs"] = jobs
        cfg = ExperimentConfig(raw=raw, path=self.path)
        errors = _static_errors(raw, base_dir=Path(self.path).parent if self.path else Path("."))
        if errors:
            raise ConfigError(errors)
        return cfg

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.raw, sort_keys=True).encode()).hexdigest()


def _require(block: dict, key: str, errors: list[str], context: str, kind=None):
    if key not in block:
        errors.append(f"{context}: missing required key {key!r}")
        return None
    value = block[key]
    if kind is not None and not isinstance(value, kind):
        errors.append(f"{context}.{key}: expected {kind}, got {type(value).__name__}")
        return None
    return value


def _static_errors(raw: dict, base_dir: Path) -> list[str]:
    errors: list[str] = []
    if not isinstance(raw, dict):
        return ["top level must be a mapping"]

    fund = _require(raw, "fund", errors, "config", dict)
    if fund is not None:
        for key in ("horizon", "asset_names", "initial_assets", "initial_wage",
                    "initial_contribution_rate", "initial_liability", "wages", "benefits"):
            _require(fund, key, errors, "fund")
        names = fund.get("asset_names")
        if isinstance(names, list) and names and names[0] != "cash":
            errors.append("fund.asset_names: index 0 must be the cash/risk-free asset "
                          "named 'cash'")
        reg = fund.get("regulatory", {})
        for gi, g in enumerate(reg.get("groups", []) or []):
            for key in ("assets", "op", "fraction"):
                _require(g, key, errors, f"fund.regulatory.groups[{gi}]")
            if isinstance(names, list):
                for a in g.get("assets", []):
                    if a not in names:
                        errors.append(f"fund.regulatory.groups[{gi}]: unknown asset {a!r}")

    disc = _require(raw, "discount", errors, "config", dict)
    if disc is not None:
        rates = _require(disc, "rates", errors, "discount", list)
        probs = _require(disc, "probabilities", errors, "discount", list)
        if rates is not None and probs is not None and len(rates) != len(probs):
            errors.append("discount: rates and probabilities differ in length")

    data = _require(raw, "data", errors, "config", dict)
    if data is not None:
        source = data.get("source")
        if source not in ("synthetic", "csv"):
            errors.append(f"data.source must be 'synthetic' or 'csv', got {source!r}")
        if source == "synthetic":
            regs = _require(data, "regimes", errors, "data", list)
            if regs is not None and not regs:
                errors.append("data.regimes: at least one regime required")
            _require(data, "epoch_probabilities", errors, "data", list)
        if source == "csv":
            path = _require(data, "csv_path", errors, "data", str)
            if path is not None and not (base_dir / path).expanduser().exists():
                errors.append(f"data.csv_path: file not found: {path}")
            _require(data, "window", errors, "data", int)

    scen = _require(raw, "scenarios", errors, "config", dict)
    if scen is not None:
        for key in ("paths_per_regime", "seed"):
            _require(scen, key, errors, "scenarios")

    models = _require(raw, "models", errors, "config", list)
    if models is not None:
        if not models:
            errors.append("models: at least one model required")
        for m in models:
            if m not in CANONICAL_MODELS:
                errors.append(f"models: unknown model {m!r} (expected subset of "
                              f"{'/'.join(CANONICAL_MODELS)})")

    sweep = _require(raw, "psi_sweep", errors, "config", list)
    if sweep is not None:
        if not sweep:
            errors.append("psi_sweep: at least one threshold required")
        elif any(not isinstance(v, (int, float)) or v <= 0 for v in sweep):
            errors.append("psi_sweep: thresholds must be positive numbers")

    ev = _require(raw, "evaluation", errors, "config", dict)
    if ev is not None:
        psi = _require(ev, "psi", errors, "evaluation")
        _require(ev, "n_paths", errors, "evaluation")
        _require(ev, "seed", errors, "evaluation")
        if psi is not None and isinstance(sweep, list) and psi not in sweep:
            errors.append(f"evaluation.psi {psi} must be one of psi_sweep")
        mode = ev.get("discount_mode", "sampled")
        if mode not in ("sampled", "nominal_mean"):
            errors.append(f"evaluation.discount_mode must be 'sampled' or 'nominal_mean', "
                          f"got {mode!r}")
    return errors


def load_config(path) -> ExperimentConfig:
    """Parse and statically validate a YAML experiment config.

    Raises ConfigError listing every problem found, not just the first.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError([f"YAML parse error: {exc}"]) from None
    errors = _static_errors(raw, base_dir=path.parent)
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(raw=raw, path=str(path))


def default_config_path() -> Path:
    return Path(__file__).parent / "data" / "default_config.yaml"


# -- instance assembly ----------------------------------------------------------

@dataclass
class ModelInputs:
    """Everything the builders need, derived deterministically from config."""

    spec: FundSpec
    discount: DiscountScenarios
    returns: ReturnScenarios
    regime_model: scenarios.RegimeModel
    epoch_probabilities: np.ndarray   # (epochs, R); row 0 = current epoch
    asset_names: list[str]
    mean_asset_return: float


def _expand_stream(value, horizon: int, growth_key_value: float = 0.0) -> np.ndarray:
    """Scalar -> geometric stream with optional growth; list passes through."""
    if isinstance(value, (int, float)):
        return float(value) * (1.0 + growth_key_value) ** np.arange(horizon)
    arr = np.asarray(value, dtype=float)
    if arr.shape != (horizon,):
        raise ConfigError([f"stream of length {arr.size} does not match horizon {horizon}"])
    return arr


def build_fund_spec(cfg: ExperimentConfig) -> tuple[FundSpec, list[str]]:
    fund = cfg.raw["fund"]
    names = list(fund["asset_names"])
    T = int(fund["horizon"])
    n = len(names)
    reg_block = fund.get("regulatory", {})
    groups = []
    for g in reg_block.get("groups", []) or []:
        groups.append(GroupConstraint(assets=tuple(names.index(a) for a in g["assets"]),
                                      op=g["op"], fraction=float(g["fraction"])))
    regulatory = RegulatorySets(
        contribution_bounds=tuple(reg_block.get("contribution_bounds", [0.0, 1.0])),
        group_constraints=tuple(groups),
        nonnegative=bool(reg_block.get("nonnegative", True)),
    )
    holdings = fund.get("initial_holdings")
    if holdings is None:
        holdings = np.zeros(n)
        holdings[0] = float(fund["initial_assets"])
    spec = FundSpec(
        horizon=T,
        n_assets=n,
        initial_assets=float(fund["initial_assets"]),
        initial_wage=float(fund["initial_wage"]),
        initial_contribution_rate=float(fund["initial_contribution_rate"]),
        initial_liability=float(fund["initial_liability"]),
        initial_holdings=np.asarray(holdings, dtype=float),
        wages=_expand_stream(fund["wages"], T, float(fund.get("wage_growth", 0.0))),
        benefit_payments=_expand_stream(fund["benefits"], T,
                                        float(fund.get("benefit_growth", 0.0))),
        funding_threshold=cfg.evaluation_psi,
        regulatory=regulatory,
    )
    return spec, names


def _regime_model_from_config(data: dict, n_assets: int,
                              epoch_probabilities: np.ndarray) -> scenarios.RegimeModel:
    params = []
    names = []
    for block in data["regimes"]:
        drift = np.asarray(block["drift"], dtype=float)
        vol = np.asarray(block["volatility"], dtype=float)
        if drift.size == n_assets - 1:   # risky-only spec; prepend cash placeholder
            drift = np.concatenate([[0.0], drift])
            vol = np.concatenate([[0.0], vol])
        params.append(scenarios.GbmParams(drift=drift, volatility=vol,
                                          dt=float(data.get("dt", 1.0))))
        names.append(str(block.get("name", f"regime{len(names)}")))
    return scenarios.RegimeModel(regimes=tuple(params),
                                 probabilities=epoch_probabilities[0],
                                 names=tuple(names))


def _regime_model_from_csv(cfg: ExperimentConfig, spec: FundSpec,
                           seed: int) -> tuple[scenarios.RegimeModel, np.ndarray]:
    data = cfg.raw["data"]
    base = Path(cfg.path).parent if cfg.path else Path(".")
    _, history = scenarios.load_returns_csv((base / data["csv_path"]).expanduser())
    window = int(data["window"])
    n_regimes = len(data.get("regimes", [])) or int(data.get("n_regimes", 4))
    labels = scenarios.classify_regimes(history, window, n_regimes, seed=seed)
    n_epochs = int(data.get("epochs", 3))
    chunks = np.array_split(np.arange(labels.size), n_epochs)
    epoch_probs = [scenarios.regime_probabilities(labels[c], n_regimes)
                   for c in reversed(chunks)]   # most recent epoch first
    params = scenarios.estimate_regime_params(history, labels, window, n_regimes,
                                              dt=float(data.get("dt", 1.0)))
    if history.shape[1] == spec.n_assets - 1:
        params = [scenarios.GbmParams(drift=np.concatenate([[0.0], p.drift]),
                                      volatility=np.concatenate([[0.0], p.volatility]),
                                      dt=p.dt) for p in params]
    epoch_matrix = np.asarray(epoch_probs)
    model = scenarios.RegimeModel(regimes=tuple(params), probabilities=epoch_matrix[0])
    return model, epoch_matrix


def build_inputs(cfg: ExperimentConfig) -> ModelInputs:
    """Deterministically derive the full problem instance from the config."""
    spec, names = build_fund_spec(cfg)
    data = cfg.raw["data"]
    scen = cfg.raw["scenarios"]
    seed = int(scen["seed"])

    if data["source"] == "synthetic":
        epoch_matrix = np.asarray(data["epoch_probabilities"], dtype=float)
        regime_model = _regime_model_from_config(data, spec.n_assets, epoch_matrix)
    else:
        regime_model, epoch_matrix = _regime_model_from_csv(cfg, spec, seed)

    sim = scenarios.SimulationConfig(
        n_paths=int(scen["paths_per_regime"]),
        seed=seed,
        periods=spec.horizon,
        n_assets=spec.n_assets,
        risk_free_rate=float(scen.get("risk_free_rate", 0.0)),
    )
    raw = [scenarios.simulate_paths(regime_model.regimes[r], sim, regime=r)
           for r in range(regime_model.n_regimes)]
    rs = scenarios.reduce_scenarios(raw, regime_model.probabilities)

    disc = cfg.raw["discount"]
    ds = build_discount_scenarios(spec.wages, spec.benefit_payments,
                                  np.asarray(disc["rates"], dtype=float),
                                  np.asarray(disc["probabilities"], dtype=float))
    issues = validate(spec, ds, rs)
    if issues:
        raise ConfigError([f"derived instance invalid: {msg}" for msg in issues])
    mean_ret = float(np.mean(rs.gross[:, :, 1:] - 1.0)) if spec.n_assets > 1 else 0.0
    return ModelInputs(spec=spec, discount=ds, returns=rs, regime_model=regime_model,
                       epoch_probabilities=epoch_matrix, asset_names=names,
                       mean_asset_return=mean_ret)


# -- ambiguity derivation --------------------------------------------------------

def _half_ranges(epoch_matrix: np.ndarray, include_uniform: bool) -> np.ndarray:
    """Per-regime half of the range of probabilities seen across epochs."""
    rows = [np.asarray(r, dtype=float) for r in epoch_matrix]
    if include_uniform:
        rows.append(np.full(rows[0].size, 1.0 / rows[0].size))
    mat = np.vstack(rows)
    return (mat.max(axis=0) - mat.min(axis=0)) / 2.0


def derive_ambiguity(cfg: ExperimentConfig, inputs: ModelInputs) -> dict[str, object]:
    """Concrete per-model ambiguity specs from the configured rules.

    Mixture: the epoch-wise regime probability vectors plus (optionally) the
    uniform vector.  Box: symmetric per-coordinate half-range widths, clipped
    to keep probabilities valid.  Wasserstein: radius = mean half-range times
    the mean asset return; wage/liability radii additionally carry the
    discounted-wage scale so they live in currency units.
    """
    amb_block = cfg.raw.get("ambiguity", {})
    ds, rs = inputs.discount, inputs.returns
    epoch_matrix = inputs.epoch_probabilities
    include_uniform = bool(cfg.raw.get("data", {}).get("include_uniform", True))
    out: dict[str, object] = {}

    if "MD" in cfg.models:
        rows = [np.asarray(r, dtype=float) for r in epoch_matrix]
        if include_uniform:
            rows.append(np.full(rows[0].size, 1.0 / rows[0].size))
        q_likelihoods = np.vstack(rows)
        disc_block = cfg.raw.get("discount", {})
        if "epoch_probabilities" in disc_block:
            p_rows = [np.asarray(r, dtype=float)
                      for r in disc_block["epoch_probabilities"]]
            if include_uniform:
                p_rows.append(np.full(ds.n_scenarios, 1.0 / ds.n_scenarios))
            p_likelihoods = np.vstack(p_rows)
        elif ds.n_scenarios == rs.n_scenarios:
            p_likelihoods = q_likelihoods
        else:
            p_likelihoods = ds.probabilities[None, :]
        out["MD"] = formulations.MixtureAmbiguity(discount_likelihoods=p_likelihoods,
                                                  return_likelihoods=q_likelihoods)

    box_cfg = amb_block.get("box", {})
    wass_cfg = amb_block.get("wasserstein", {})
    q_half = _half_ranges(epoch_matrix, include_uniform)
    disc_block = cfg.raw.get("discount", {})
    if "epoch_probabilities" in disc_block:
        p_half = _half_ranges(np.asarray(disc_block["epoch_probabilities"], dtype=float),
                              include_uniform)
    elif ds.n_scenarios == rs.n_scenarios:
        p_half = q_half
    else:
        p_half = np.zeros(ds.n_scenarios)

    if "BD" in cfg.models:
        dh = box_cfg.get("discount_half_widths")
        rh = box_cfg.get("return_half_widths")
        out["BD"] = formulations.BoxAmbiguity.symmetric(
            ds.probabilities, rs.probabilities,
            np.asarray(dh, dtype=float) if dh is not None else p_half,
            np.asarray(rh, dtype=float) if rh is not None else q_half,
        )

    if "WM" in cfg.models:
        mean_ret = wass_cfg.get("mean_asset_return")
        mean_ret = inputs.mean_asset_return if mean_ret is None else float(mean_ret)
        base = float(np.mean(q_half)) * mean_ret
        wage_scale = float(np.mean(np.abs(ds.wages_pv)))
        wage_radius = wass_cfg.get("wage_radius")
        if wage_radius is None:
            wage_radius = float(np.mean(p_half)) * mean_ret * wage_scale
        return_radius = wass_cfg.get("return_radius")
        if return_radius is None:
            return_radius = base
        out["WM"] = formulations.wasserstein_from_scenarios(
            ds, rs,
            wage_radius=float(wage_radius),
            return_radius=float(return_radius),
            liability_radius=wass_cfg.get("liability_radius"),
            widen=float(wass_cfg.get("support_widen", 0.2)),
        )
    return out


def build_model(model: str, spec: FundSpec, inputs: ModelInputs,
                ambiguities: dict[str, object]) -> formulations.BuiltModel:
    if model == "SP":
        return formulations.build_sp(spec, inputs.discount, inputs.returns)
    if model == "MD":
        return formulations.build_mixture(spec, inputs.discount, inputs.returns,
                                          ambiguities["MD"])
    if model == "BD":
        return formulations.build_box(spec, inputs.discount, inputs.returns,
                                      ambiguities["BD"])
    if model == "WM":
        return formulations.build_wasserstein(spec, inputs.discount, inputs.returns,
                                              ambiguities["WM"])
    raise ValueError(f"unknown model {model!r}")


@dataclass
class CellResult:
    model: str
    psi: float
    status: str
    objective: float | None = None
    strategy: InvestmentStrategy | None = None
    binding_periods: list[int] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)


def solve_cell(model: str, psi: float, inputs: ModelInputs,
               ambiguities: dict[str, object], tol_feas: float,
               tol_obj: float) -> CellResult:
    """Build and solve one (model, threshold) cell; never raises on solver state."""
    from dataclasses import replace

    spec = replace(inputs.spec, funding_threshold=float(psi))
    built = build_model(model, spec, inputs, ambiguities)
    result = conic.solve(built.problem, tol_feas, tol_obj)
    cell = CellResult(model=model, psi=float(psi), status=result.status,
                      diagnostics=result.diagnostics)
    if result.status == "optimal":
        cell.objective = float(result.objective)
        cell.strategy = formulations.extract_strategy(built, result)
    elif result.status == "infeasible":
        cell.binding_periods = formulations.locate_funding_infeasibility(built)
    return cell


# -- out-of-sample machinery ------------------------------------------------------

def generate_backtest_paths(cfg: ExperimentConfig, inputs: ModelInputs) -> list[evaluation.BacktestPath]:
    ev = cfg.raw["evaluation"]
    n_paths = int(ev["n_paths"])
    seed = int(ev["seed"])
    sim = scenarios.SimulationConfig(
        n_paths=n_paths, seed=seed, periods=inputs.spec.horizon,
        n_assets=inputs.spec.n_assets,
        risk_free_rate=float(cfg.raw["scenarios"].get("risk_free_rate", 0.0)),
    )
    rets, _ = scenarios.simulate_regime_switching_paths(
        inputs.regime_model, sim, sticky=float(ev.get("sticky", 0.0)), stream=1)
    ds = inputs.discount
    mode = ev.get("discount_mode", "sampled")
    if mode == "nominal_mean":
        rates = np.full(n_paths, ds.mean_rate())
    else:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        cum = np.cumsum(ds.probabilities)
        draws = rng.random(n_paths)
        rates = ds.rates[np.minimum(np.searchsorted(cum, draws, side="right"),
                                    ds.n_scenarios - 1)]
    return [evaluation.BacktestPath(gross_returns=1.0 + rets[p],
                                    discount_rate=float(rates[p]), seed=seed)
            for p in range(n_paths)]


# -- artifact writing --------------------------------------------------------------

def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_contribution_table(path: Path, models: list[str], sweep: list[float],
                             cells: dict[tuple[str, float], CellResult]) -> None:
    """Table-2 layout: one row per model, one column per threshold.

    The reported rate is the horizon average of the optimal per-period rates
    (the per-period rates themselves are in the strategy CSVs).
    """
    header = ["model"] + [f"psi={psi:g}" for psi in sweep]
    rows = []
    for m in models:
        row = [m]
        for psi in sweep:
            cell = cells[(m, psi)]
            if cell.strategy is not None:
                row.append(_fmt(cell.strategy.contribution_rates.mean()))
            else:
                row.append(cell.status)
        rows.append(row)
    _write_csv(path, header, rows)


def write_out_of_sample_table(path: Path, report: evaluation.EvaluationReport) -> None:
    """Table-5 layout: period rows plus Average / Std. Dev. summary rows."""
    header = ["decision_moment"]
    for m in report.models:
        header += [f"{m}_funding_ratio", f"{m}_fund_return"]
    rows = []
    for t in range(report.periods):
        row = [str(t + 1)]
        for m in report.models:
            row += [_fmt(report.mean_funding[m][t]), _fmt(report.mean_return[m][t])]
        rows.append(row)
    avg = ["Average"]
    std = ["Std. Dev."]
    for m in report.models:
        avg += [_fmt(report.avg_funding[m]), _fmt(report.avg_return[m])]
        std += [_fmt(report.std_funding[m]), _fmt(report.std_return[m])]
    rows += [avg, std]
    _write_csv(path, header, rows)


def write_test_tables(outdir: Path, report: evaluation.EvaluationReport) -> list[Path]:
    paths = []
    for fname, table in (("tests_funding_ratio.csv", report.funding_tests),
                         ("tests_fund_return.csv", report.return_tests)):
        path = outdir / fname
        _write_csv(path, ["comparison", "t_statistic", "p_value"],
                   [[f"{a} vs {b}", _fmt(t), _fmt(p)] for a, b, t, p in table])
        paths.append(path)
    return paths


def write_hhi_table(path: Path, report: evaluation.EvaluationReport) -> None:
    _write_csv(path, ["model", "average_hhi"],
               [[m, _fmt(report.average_hhi[m])] for m in report.models])


def write_long_format(path: Path, report: evaluation.EvaluationReport) -> None:
    rows = []
    for m in report.models:
        for t in range(report.periods):
            rows.append([m, str(t + 1), "funding_ratio", _fmt(report.mean_funding[m][t])])
            rows.append([m, str(t + 1), "fund_return", _fmt(report.mean_return[m][t])])
    _write_csv(path, ["model", "period", "metric", "value"], rows)


def write_strategy_csv(path: Path, strategy: InvestmentStrategy,
                       asset_names: list[str]) -> None:
    header = ["period", "contribution_rate"] + list(asset_names)
    rows = []
    for t in range(strategy.allocations.shape[0]):
        rows.append([str(t), _fmt(strategy.contribution_rates[t])]
                    + [_fmt(v) for v in strategy.allocations[t]])
    _write_csv(path, header, rows)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _versions() -> dict[str, str]:
    import clarabel
    import scipy
    import sklearn

    return {"alm_dro": "0.1.0", "numpy": np.__version__, "scipy": scipy.__version__,
            "clarabel": getattr(clarabel, "__version__", "unknown"),
            "scikit-learn": sklearn.__version__}


# -- full run ------------------------------------------------------------------------

def run(cfg: ExperimentConfig) -> int:
    """Execute the experiment; returns the process exit code.

    0 when every requested solve ended optimal or reported infeasibility as a
    result; 1 when any cell hit a numerical failure (the manifest records
    which).  All result tables are byte-deterministic given (config, seeds).
    """
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest_path = outdir / "manifest.json"
    manifest = {
        "name": cfg.name,
        "config_hash": cfg.config_hash(),
        "config_path": cfg.path,
        "seeds": {"scenarios": int(cfg.raw["scenarios"]["seed"]),
                  "evaluation": int(cfg.raw["evaluation"]["seed"])},
        "versions": _versions(),
        "started_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "status": "running",
        "cells": {},
        "artifacts": {},
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))

    inputs = build_inputs(cfg)
    ambiguities = derive_ambiguity(cfg, inputs)
    tol_feas, tol_obj = cfg.solver_tols
    models, sweep = cfg.models, cfg.psi_sweep

    cells: dict[tuple[str, float], CellResult] = {}
    grid = [(m, psi) for m in models for psi in sweep]
    if cfg.jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = {pool.submit(solve_cell, m, psi, inputs, ambiguities,
                                   tol_feas, tol_obj): (m, psi) for m, psi in grid}
            for fut in concurrent.futures.as_completed(futures):
                m, psi = futures[fut]
                cells[(m, psi)] = fut.result()
    else:
        for m, psi in grid:
            cells[(m, psi)] = solve_cell(m, psi, inputs, ambiguities, tol_feas, tol_obj)

    for (m, psi), cell in sorted(cells.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        entry = {"status": cell.status}
        if cell.objective is not None:
            entry["objective"] = cell.objective
        if cell.binding_periods:
            entry["binding_periods"] = cell.binding_periods
        manifest["cells"][f"{m}@psi={psi:g}"] = entry

    artifacts: list[Path] = []

    scen_dir = outdir / "scenarios"
    artifacts += [Path(p) for p in scenarios.write_scenarios_csv(
        scen_dir, inputs.asset_names, inputs.returns)]
    disc_path = scen_dir / "discount_scenarios.csv"
    _write_csv(disc_path, ["scenario", "rate", "probability"],
               [[str(s), _fmt(inputs.discount.rates[s]), _fmt(inputs.discount.probabilities[s])]
                for s in range(inputs.discount.n_scenarios)])
    artifacts.append(disc_path)

    for (m, psi), cell in cells.items():
        if cell.strategy is not None:
            p = outdir / "strategies" / f"{m}_psi_{psi:g}.csv"
            write_strategy_csv(p, cell.strategy, inputs.asset_names)
            artifacts.append(p)

    tables = outdir / "tables"
    contrib_path = tables / "contribution_rates.csv"
    write_contribution_table(contrib_path, models, sweep, cells)
    artifacts.append(contrib_path)

    eval_psi = cfg.evaluation_psi
    eval_models = [m for m in models if cells[(m, eval_psi)].strategy is not None]
    raw_dump = {"models": models, "psi_sweep": sweep, "evaluation_psi": eval_psi,
                "per_model": {}}
    if eval_models:
        paths = generate_backtest_paths(cfg, inputs)
        default_rate = inputs.discount.mean_rate()
        results = {}
        strategies = {}
        for m in eval_models:
            strat = cells[(m, eval_psi)].strategy
            results[m] = evaluation.simulate_out_of_sample(strat, inputs.spec, paths,
                                                           default_rate=default_rate)
            strategies[m] = strat
        report = evaluation.summarize(results, strategies)
        oos_path = tables / "out_of_sample.csv"
        write_out_of_sample_table(oos_path, report)
        artifacts.append(oos_path)
        artifacts += write_test_tables(tables, report)
        hhi_path = tables / "hhi_summary.csv"
        write_hhi_table(hhi_path, report)
        artifacts.append(hhi_path)
        long_path = tables / "long_format.csv"
        write_long_format(long_path, report)
        artifacts.append(long_path)

        for m in eval_models:
            strat = strategies[m]
            raw_dump["per_model"][m] = {
                "objective": cells[(m, eval_psi)].objective,
                "mean_funding": [float(v) for v in report.mean_funding[m]],
                "mean_return": [float(v) for v in report.mean_return[m]],
                "average_hhi": report.average_hhi[m],
                "insolvency_rate": report.insolvency_rate[m],
                "contribution_rates": [float(v) for v in strat.contribution_rates],
                "allocations": [[float(v) for v in row] for row in strat.allocations],
            }
    raw_dump["contribution_table"] = {
        m: {f"{psi:g}": (cells[(m, psi)].strategy.contribution_rates.mean()
                         if cells[(m, psi)].strategy is not None else None)
            for psi in sweep} for m in models}
    raw_path = outdir / "raw" / "raw_results.json"
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_text(json.dumps(raw_dump, indent=2, sort_keys=True))
    artifacts.append(raw_path)

    for p in artifacts:
        manifest["artifacts"][str(p.relative_to(outdir))] = f"sha256:{_sha256(p)}"
    failed = [key for key, entry in manifest["cells"].items()
              if entry["status"] not in ("optimal", "infeasible")]
    manifest["status"] = "failed" if failed else "ok"
    manifest["failed_cells"] = failed
    manifest["finished_at"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return 1 if failed else 0


def reaggregate(outdir) -> int:
    """Rebuild the result tables from a previous run's raw dump."""
    outdir = Path(outdir)
    raw_path = outdir / "raw" / "raw_results.json"
    if not raw_path.exists():
        raise FileNotFoundError(f"no raw results at {raw_path}")
    dump = json.loads(raw_path.read_text())
    tables = outdir / "tables"

    header = ["model"] + [f"psi={float(psi):g}" for psi in dump["psi_sweep"]]
    rows = []
    for m in dump["models"]:
        row = [m]
        for psi in dump["psi_sweep"]:
            v = dump["contribution_table"][m][f"{float(psi):g}"]
            row.append(_fmt(v) if v is not None else "infeasible")
        rows.append(row)
    _write_csv(tables / "contribution_rates.csv", header, rows)

    per_model = dump["per_model"]
    if per_model:
        strategies = {}
        for m, block in per_model.items():
            strategies[m] = InvestmentStrategy(
                allocations=np.asarray(block["allocations"], dtype=float),
                contribution_rates=np.asarray(block["contribution_rates"], dtype=float),
                objective_value=float(block["objective"]), model=m)
        models = [m for m in dump["models"] if m in per_model]
        report = evaluation.EvaluationReport(
            models=models,
            periods=len(next(iter(per_model.values()))["mean_funding"]),
            mean_funding={m: np.asarray(per_model[m]["mean_funding"]) for m in models},
            mean_return={m: np.asarray(per_model[m]["mean_return"]) for m in models},
            avg_funding={m: float(np.mean(per_model[m]["mean_funding"])) for m in models},
            std_funding={m: float(np.std(per_model[m]["mean_funding"], ddof=1)) for m in models},
            avg_return={m: float(np.mean(per_model[m]["mean_return"])) for m in models},
            std_return={m: float(np.std(per_model[m]["mean_return"], ddof=1)) for m in models},
            average_hhi={m: float(per_model[m]["average_hhi"]) for m in models},
            insolvency_rate={m: float(per_model[m]["insolvency_rate"]) for m in models},
        )
        for a, b in [p for p in evaluation.MODEL_PAIRS if p[0] in models and p[1] in models]:
            t, p, _ = evaluation.welch_t_test(report.mean_funding[a], report.mean_funding[b])
            report.funding_tests.append((a, b, t, p))
            t, p, _ = evaluation.welch_t_test(report.mean_return[a], report.mean_return[b])
            report.return_tests.append((a, b, t, p))
        write_out_of_sample_table(tables / "out_of_sample.csv", report)
        write_test_tables(tables, report)
        write_hhi_table(tables / "hhi_summary.csv", report)
        write_long_format(tables / "long_format.csv", report)
    return 0
