"""End-to-end runs driven by a YAML config, producing a reproducible report bundle."""
from __future__ import annotations

import contextlib
import copy
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import analysis, benchmarks, plotting, portfolio as pf, transition
from .errors import ComputeError, EmptyLegWarning, StatefolioError, ValidationError
from .learners import (PredictionSet, TreeEnsembleModel, cross_validate, fit, predict_proba,
                       spec_from_name, tuning_grid)
from .panel import (CrossSectionalSplit, Panel, TimeSeriesSplit, add_months, assign_return_states, load_panel,
                    normalize_features, split_masks, split_sample)
from .reports import ACCURACY_COLUMNS, accuracy_row, by_class_table
from .synth import SynthSpec, generate_panel

DEFAULTS = {
    "output_dir": "statefolio_out",
    "seed": 0,
    "data": {"panel": None, "schema": None, "synth": None, "factors": None, "rf": None},
    "label": True,
    "normalize": {"expanding": []},
    "split": {"kind": "time", "train_end": None, "train_parity": "odd"},
    "models": ["gbm4_50", "mlp1_32"],
    "model_params": {},
    "cv": {"tune": False, "folds": 5},
    "portfolio": {"rule": "maxprob", "weights": "equal", "cap_cutoff": 0.0, "top_fraction": 0.10,
                  "allocation": [1.0, 1.0], "gamma": 1.0},
    "benchmark": {"iters": 1000, "draw": 4886},
    "analysis": {"factor_models": ["FF3F"], "windows": [1, 6, 12, 24, 36, 60, 120]},
    "reports": {"evaluate": True, "portfolio": True, "transitions": True, "benchmark": True,
                "analyze": True, "figures": True},
}


def _merge(base: dict, over: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if k not in base:
            raise ValidationError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and base[k] and k != "model_params":
            if not isinstance(v, dict):
                raise ValidationError(f"config key {path + k!r} must be a mapping")
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


def apply_override(cfg: dict, assignment: str) -> None:
    """Set ``a.b.c=value`` in a nested mapping; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ValidationError(f"override {assignment!r} must look like key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ValidationError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node and node is not cfg.get("model_params"):
        raise ValidationError(f"unknown config key {key!r}")
    node[parts[-1]] = yaml.safe_load(raw)


@dataclass
class RunConfig:
    values: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, d: dict, base_dir=None, overrides=()) -> "RunConfig":
        merged = _merge(DEFAULTS, d or {})
        for o in overrides:
            apply_override(merged, o)
        cfg = cls(merged, Path(base_dir) if base_dir else Path.cwd())
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, overrides=()) -> "RunConfig":
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ValidationError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ValidationError("config must be a mapping")
        return cls.from_dict(raw, Path(path).resolve().parent, overrides)

    def __getitem__(self, key):
        return self.values[key]

    def path(self, p) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def validate(self) -> None:
        v = self.values
        data = v["data"]
        if (data["panel"] is None) == (data["synth"] is None):
            raise ValidationError("config needs exactly one of data.panel or data.synth")
        for key in ("panel", "factors", "rf"):
            if data[key] is not None and not self.path(data[key]).is_file():
                raise ValidationError(f"data.{key} file not found: {self.path(data[key])}")
        if data["synth"] is not None:
            SynthSpec.from_dict(data["synth"]).validate()
        if v["split"]["kind"] not in ("time", "cross_section"):
            raise ValidationError("split.kind must be 'time' or 'cross_section'")
        if not v["models"]:
            raise ValidationError("config lists no models")
        for name in v["models"]:
            spec_from_name(name, **v["model_params"].get(name, {}))
        p = v["portfolio"]
        pf.make_rule(p["rule"], p["top_fraction"])
        pf.WeightScheme(p["weights"], p["cap_cutoff"])
        for m in v["analysis"]["factor_models"]:
            if m not in analysis.FACTOR_MODELS:
                raise ValidationError(f"unknown factor model {m!r}")
        if int(v["cv"]["folds"]) < 2:
            raise ValidationError("cv.folds must be at least 2")


@contextlib.contextmanager
def stage(name: str):
    """Tag any failure with the pipeline stage it happened in."""
    try:
        yield
    except StatefolioError as exc:
        exc.args = (f"[{name}] {exc}",) + exc.args[1:]
        raise
    except (ArithmeticError, np.linalg.LinAlgError, MemoryError) as exc:
        raise ComputeError(f"[{name}] {type(exc).__name__}: {exc}") from exc


def model_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _split_spec(cfg: RunConfig, panel: Panel):
    s = cfg["split"]
    if s["kind"] == "cross_section":
        return CrossSectionalSplit(s["train_parity"])
    months = panel.months
    end = s["train_end"] if s["train_end"] is not None else int(months[(len(months) - 1) // 2])
    return TimeSeriesSplit((int(months[0]), int(end)), (add_months(int(end), 1), int(months[-1])))


def _load_rf(path) -> pd.Series:
    df = pd.read_csv(path, float_precision="round_trip")
    cols = [c.lower() for c in df.columns]
    if "yyyymm" not in cols or "rf" not in cols:
        raise ValidationError("risk-free file needs yyyymm and rf columns")
    df.columns = cols
    return df.set_index("yyyymm")["rf"]


def _rf_for(rf: pd.Series | None, months):
    if rf is None:
        return None
    missing = np.setdiff1d(months, rf.index.to_numpy())
    if missing.size:
        raise ValidationError(f"risk-free rate missing for month {missing[0]}")
    return rf.loc[months].to_numpy(float)


def oos_martingale_accuracy(panel: Panel, test_mask) -> float:
    """Share of test-region rows whose state repeats the same stock's prior-month state."""
    prior = panel.prior_state()
    rows = test_mask & (prior > 0)
    if not rows.any():
        raise ValidationError("no test rows with a prior-month state")
    return float(np.mean(panel.state[rows] == prior[rows]))


def _write_csv(df: pd.DataFrame, path: Path, files: list) -> None:
    df.to_csv(path, index=False)
    files.append(path)


def run_pipeline(cfg: RunConfig) -> dict:
    """Execute every enabled stage and write the bundle; returns ``{file name: path}``."""
    v = cfg.values
    out = cfg.path(v["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    toggles = v["reports"]
    seeds = {"run": int(v["seed"])}

    with stage("ingest"):
        data = v["data"]
        if data["panel"] is not None:
            panel = load_panel(cfg.path(data["panel"]), data["schema"])
        else:
            spec = SynthSpec.from_dict(data["synth"])
            seeds["synth"] = spec.seed
            panel = generate_panel(spec)
        factors = analysis.load_factors(cfg.path(data["factors"])) if data["factors"] else None
        rf = _load_rf(cfg.path(data["rf"])) if data["rf"] else None
    with stage("label"):
        if v["label"] or not panel.is_labeled:
            panel = assign_return_states(panel)
    with stage("normalize"):
        panel = normalize_features(panel, v["normalize"]["expanding"])
    with stage("split"):
        split = _split_spec(cfg, panel)
        train, test = split_sample(panel, split)
        _, test_mask = split_masks(panel.month, split)

    preds: dict[str, PredictionSet] = {}
    models = {}
    for i, name in enumerate(v["models"]):
        with stage(f"train:{name}"):
            seeds[name] = model_seed(int(v["seed"]), i)
            spec = spec_from_name(name, seed=seeds[name], **v["model_params"].get(name, {}))
            if v["cv"]["tune"]:
                res = cross_validate(tuning_grid(spec), train, int(v["cv"]["folds"]))
                spec = res.best_spec
                _write_csv(pd.DataFrame({"candidate": range(len(res.mean_loss)), "mean_loss": res.mean_loss}),
                           out / f"cv_{name}.csv", files)
            models[name] = fit(spec, train)
        with stage(f"predict:{name}"):
            preds[name] = predict_proba(models[name], test)
            preds[name].model_name = name
            preds[name].write_csv(out / f"predictions_{name}.csv")
            files.append(out / f"predictions_{name}.csv")

    if toggles["evaluate"]:
        with stage("evaluate"):
            no_info = benchmarks.no_information_accuracy(test.state_distribution())
            mart = oos_martingale_accuracy(panel, test_mask)
            rows = [accuracy_row(n, p, no_info, mart) for n, p in preds.items()]
            _write_csv(pd.DataFrame(rows, columns=ACCURACY_COLUMNS), out / "accuracy.csv", files)
            for n, p in preds.items():
                _write_csv(by_class_table(p), out / f"by_class_{n}.csv", files)

    ls_series = {}
    if toggles["portfolio"]:
        with stage("portfolio"):
            p = v["portfolio"]
            rule = pf.make_rule(p["rule"], p["top_fraction"])
            scheme = pf.WeightScheme(p["weights"], p["cap_cutoff"])
            bh = pf.buy_hold(test, weighting="value" if p["weights"] == "value" else "equal")
            tables = [pd.DataFrame([pf.performance_row("buy_hold", bh, _rf_for(rf, bh.months), p["gamma"])])]
            returns = {"yyyymm": bh.months, "buy_hold": bh.returns}
            for n, pr in preds.items():
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", EmptyLegWarning)
                    res = pf.form_portfolio(pr, test, rule, scheme, tuple(p["allocation"]))
                if not np.array_equal(res.long.months, bh.months):
                    raise ValidationError("portfolio months differ from the market portfolio")
                tables.append(pf.performance_table(res, n, _rf_for(rf, res.long.months), p["gamma"]))
                for leg in ("long", "short", "long_short"):
                    returns[f"{n}:{leg}"] = getattr(res, leg).returns
                ls_series[n] = res.long_short
            _write_csv(pd.concat(tables, ignore_index=True), out / "performance.csv", files)
            _write_csv(pd.DataFrame(returns), out / "portfolio_returns.csv", files)

    if toggles["transitions"]:
        with stage("transitions"):
            tp = transition.transition_matrix(panel)
            tr = transition.transition_mean_returns(panel)
            _write_csv(tp.to_frame().reset_index(), out / "transition_probability.csv", files)
            _write_csv(tr.to_frame().reset_index(), out / "transition_mean_return.csv", files)
            accs = [transition.per_transition_accuracy(panel, p) for p in preds.values()]
            avg = transition.average_matrices(accs)
            _write_csv(avg.to_frame().reset_index(), out / "transition_accuracy.csv", files)

    if toggles["benchmark"]:
        with stage("benchmark"):
            b = v["benchmark"]
            seeds["benchmark"] = model_seed(int(v["seed"]), 10_000)
            samples = benchmarks.monte_carlo_benchmark_study(panel, split, int(b["draw"]), int(b["iters"]),
                                                             seeds["benchmark"])
            recs = benchmarks.benchmark_table(samples)
            df = pd.DataFrame([{"pair": f"{r.group_a}-{r.group_b}", "diff": r.diff, "ci_lo": r.ci_lo,
                                "ci_hi": r.ci_hi, "p_value": r.p_value} for r in recs])
            _write_csv(df, out / "benchmark_tukey.csv", files)
            _write_csv(pd.DataFrame([{"classifier": k.label, "mean_accuracy": s.mean}
                                     for k, s in samples.items()]), out / "benchmark_means.csv", files)

    if toggles["analyze"]:
        with stage("analyze"):
            for n, p in preds.items():
                agg = analysis.monthly_aggregates(p, test)
                windows = [w for w in v["analysis"]["windows"] if w <= len(agg) - 1]
                _write_csv(analysis.rolling_relation_table(agg, windows), out / f"rolling_{n}.csv", files)
                for target in ("accuracy", "certainty"):
                    lt = analysis.lifetime_regression(test, p, target)
                    _write_csv(lt.records(), out / f"lifetime_{target}_{n}.csv", files)
                if isinstance(models[n], TreeEnsembleModel):
                    _write_csv(analysis.feature_importance(models[n]), out / f"importance_{n}.csv", files)
            if factors is not None and ls_series:
                rows = []
                for n, s in ls_series.items():
                    for fm in v["analysis"]["factor_models"]:
                        res = analysis.factor_regression(s, factors, fm)
                        rows.append({"model": n, "factor_model": fm, "alpha": res.coefficients[0],
                                     "alpha_t": res.t_stats[0], "alpha_p": res.p_values[0],
                                     "r_squared": res.r_squared})
                _write_csv(pd.DataFrame(rows), out / "factor_alphas.csv", files)

    if toggles["figures"]:
        with stage("figures"):
            if ls_series:
                series = {f"{n} long-short": (s.months, s.returns) for n, s in ls_series.items()}
                series["buy-hold"] = (bh.months, bh.returns)
                plotting.plot_cumulative_returns(series, out / "cumulative_returns.png")
                files.append(out / "cumulative_returns.png")
            if toggles["transitions"]:
                plotting.plot_transition_heatmap(tp.values, out / "transition_probability.png",
                                                 "transition probability")
                files.append(out / "transition_probability.png")

    manifest = {
        # the bundle's own location is left out so relocated runs stay byte-identical
        "config": {k: x for k, x in v.items() if k != "output_dir"},
        "seeds": seeds,
        "split": {"kind": type(split).__name__, **{k: list(x) if isinstance(x, tuple) else x
                                                   for k, x in split.__dict__.items()}},
        "versions": _versions(),
        "files": {p.name: _sha256(p) for p in sorted(files)},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return {p.name: p for p in files} | {"manifest.json": out / "manifest.json"}


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    from . import __version__

    out = {"statefolio": __version__}
    for pkg in ("numpy", "scipy", "pandas", "numba", "matplotlib", "pyyaml"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def example_config() -> str:
    """A small self-contained config on synthetic data."""
    return yaml.safe_dump({
        "output_dir": "statefolio_out",
        "seed": 7,
        "data": {"synth": {"n_stocks": 500, "n_months": 48, "seed": 7, "transition": "empirical"}},
        "models": ["gbm4_30", "mlp1_16"],
        "benchmark": {"iters": 200, "draw": 1000},
    }, sort_keys=False)

