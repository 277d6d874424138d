"""``statefolio`` command line: one subcommand per stage plus ``run`` for the whole pipeline.

Exit codes: 0 success, 1 invalid input or configuration, 2 computation failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import analysis, benchmarks, plotting, portfolio as pf, transition
from .errors import StatefolioError, ValidationError
from .learners import (PredictionSet, cross_validate, fit, load_model, predict_proba, save_model,
                       spec_from_name, tuning_grid)
from .panel import (CrossSectionalSplit, TimeSeriesSplit, assign_return_states, load_panel, normalize_features,
                    split_sample, write_panel)
from .pipeline import RunConfig, _load_rf, _rf_for, oos_martingale_accuracy, run_pipeline
from .reports import ACCURACY_COLUMNS, accuracy_row, by_class_table
from .synth import SynthSpec, generate_panel


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(f"{self.prog}: {message}")


def _read_yaml(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            d = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path} is not valid YAML: {exc}") from exc
    if not isinstance(d, dict):
        raise ValidationError(f"{path} must hold a mapping")
    return d


def _overrides(pairs) -> dict:
    d: dict = {}
    for p in pairs or ():
        if "=" not in p:
            raise ValidationError(f"override {p!r} must look like key=value")
        k, v = p.split("=", 1)
        d[k.strip()] = yaml.safe_load(v)
    return d


def _panel(args, normalize: bool = False):
    panel = load_panel(args.panel, _read_yaml(getattr(args, "schema", None)) or None)
    if getattr(args, "relabel", False) or (normalize and not panel.is_labeled):
        panel = assign_return_states(panel)
    if normalize and not getattr(args, "raw_features", False):
        panel = normalize_features(panel, getattr(args, "expanding", None) or ())
    return panel


def _split(args):
    if args.mode == "cs":
        return CrossSectionalSplit(args.train_parity)
    if args.train_end is not None:
        return TimeSeriesSplit.at(args.train_end)
    if args.train_range and args.test_range:
        return TimeSeriesSplit(tuple(args.train_range), tuple(args.test_range))
    raise ValidationError("time-series split needs --train-end or --train-range with --test-range")


def _write(df: pd.DataFrame, out) -> None:
    if out is None or str(out) == "-":
        df.to_csv(sys.stdout, index=False)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(out, index=False)


# -- subcommands ----------------------------------------------------------------------


def cmd_ingest(args):
    panel = _panel(args)
    write_panel(panel, args.out)
    print(f"{len(panel.stock_id)} rows, {len(panel.months)} months, {panel.n_features} features", file=sys.stderr)


def cmd_label(args):
    panel = assign_return_states(load_panel(args.panel, _read_yaml(args.schema) or None))
    write_panel(panel, args.out)


def cmd_split(args):
    train, test = split_sample(load_panel(args.panel), _split(args))
    write_panel(train, args.out_train)
    write_panel(test, args.out_test)


def cmd_synth(args):
    d = _read_yaml(args.spec)
    d.update(_overrides(args.set))
    if args.seed is not None:
        d["seed"] = args.seed
    spec = SynthSpec.from_dict(d)
    write_panel(generate_panel(spec), args.out)


def cmd_train(args):
    panel = _panel(args, normalize=True)
    spec = spec_from_name(args.model, seed=args.seed, **_overrides(args.set))
    if args.tune:
        res = cross_validate(tuning_grid(spec), panel, args.folds)
        spec = res.best_spec
        print(f"cv picked candidate {res.best_index} (mean loss {res.mean_loss[res.best_index]:.6f})",
              file=sys.stderr)
    model = fit(spec, panel)
    save_model(model, args.out)
    print(json.dumps(model.report.to_dict()), file=sys.stderr)


def cmd_predict(args):
    model = load_model(args.model)
    panel = _panel(args, normalize=True)
    preds = predict_proba(model, panel)
    preds.write_csv(args.out)


def cmd_evaluate(args):
    rows, tables = [], {}
    panel = _panel(args) if args.panel else None
    for path in args.pred:
        preds = PredictionSet.read_csv(path, Path(path).stem)
        if not preds.has_truth:
            raise ValidationError(f"{path} has no realized state column")
        dist = np.bincount(preds.truth, minlength=11)[1:] / len(preds.truth)
        no_info = benchmarks.no_information_accuracy(dist)
        if panel is not None:
            mask = np.isin(panel.month, np.unique(preds.month))
            mart = oos_martingale_accuracy(assign_return_states(panel) if not panel.is_labeled else panel, mask)
        elif args.benchmark == "martingale":
            raise ValidationError("the martingale benchmark needs --panel")
        else:
            mart = np.nan
        rows.append(accuracy_row(preds.model_name, preds, no_info, mart, args.ci_level))
        tables[preds.model_name] = by_class_table(preds)
    table = pd.DataFrame(rows, columns=ACCURACY_COLUMNS)
    if args.benchmark == "no-info":
        table = table.drop(columns=["martingale_accuracy", "martingale_p"])
    elif args.benchmark == "martingale":
        table = table.drop(columns=["no_info_accuracy", "no_info_p"])
    _write(table, args.out)
    if args.by_class:
        Path(args.by_class).mkdir(parents=True, exist_ok=True)
        for name, t in tables.items():
            t.to_csv(Path(args.by_class) / f"by_class_{name}.csv", index=False)


def cmd_portfolio(args):
    preds = PredictionSet.read_csv(args.pred)
    panel = _panel(args)
    rule = pf.make_rule(args.rule, args.top_fraction)
    scheme = pf.WeightScheme(args.weights, args.cap_cutoff)
    rf = _load_rf(args.rf) if args.rf else None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = pf.form_portfolio(preds, panel, rule, scheme, tuple(args.allocation))
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    table = pf.performance_table(res, args.name, _rf_for(rf, res.long.months), args.gamma)
    if args.buy_hold:
        bh = pf.buy_hold(panel, res.long.months, "value" if args.weights == "value" else "equal")
        row = pf.performance_row("buy_hold", bh, _rf_for(rf, bh.months), args.gamma)
        table = pd.concat([pd.DataFrame([row]), table], ignore_index=True)
    _write(table, args.out)
    if args.returns_out:
        pd.DataFrame({"yyyymm": res.long.months, "long": res.long.returns, "short": res.short.returns,
                      "long_short": res.long_short.returns}).to_csv(args.returns_out, index=False)


def cmd_transitions(args):
    panel = _panel(args)
    if not panel.is_labeled:
        panel = assign_return_states(panel)
    if args.pred:
        mats = [transition.per_transition_accuracy(panel, PredictionSet.read_csv(p)) for p in args.pred]
        mat = transition.average_matrices(mats)
    elif args.kind == "mean_return":
        mat = transition.transition_mean_returns(panel)
    else:
        mat = transition.transition_matrix(panel)
    _write(mat.to_frame().reset_index(), args.out)
    if args.figure:
        plotting.plot_transition_heatmap(mat.values, args.figure, mat.kind.replace("_", " "))


def cmd_benchmark(args):
    panel = _panel(args)
    if not panel.is_labeled:
        panel = assign_return_states(panel)
    samples = benchmarks.monte_carlo_benchmark_study(panel, _split(args), args.draw, args.iters, args.seed)
    recs = benchmarks.benchmark_table(samples, args.alpha)
    means = ", ".join(f"{k.value}={s.mean:.4f}" for k, s in samples.items())
    print(f"mean accuracy: {means}", file=sys.stderr)
    _write(pd.DataFrame([{"pair": f"{r.group_a}-{r.group_b}", "diff": r.diff, "ci_lo": r.ci_lo,
                          "ci_hi": r.ci_hi, "p_value": r.p_value} for r in recs]), args.out)


def cmd_analyze(args):
    if args.what == "importance":
        if not args.model:
            raise ValidationError("--what importance needs --model")
        _write(analysis.feature_importance(load_model(args.model)), args.out)
        return
    if not args.pred or not args.panel:
        raise ValidationError(f"--what {args.what} needs --pred and --panel")
    preds = PredictionSet.read_csv(args.pred)
    panel = _panel(args)
    if args.what == "certainty":
        agg = analysis.monthly_aggregates(preds, panel)
        if args.windows:
            _write(analysis.rolling_relation_table(agg, args.windows), args.out)
        else:
            _write(agg, args.out)
    elif args.what == "lifetime":
        if not panel.is_labeled:
            panel = assign_return_states(panel)
        res = analysis.lifetime_regression(panel, preds, args.target)
        if res.excluded:
            print(f"excluded constant columns: {', '.join(res.excluded)}", file=sys.stderr)
        _write(res.records(), args.out)
    else:  # factors
        if not args.factors:
            raise ValidationError("--what factors needs --factors")
        factors = analysis.load_factors(args.factors)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = pf.form_portfolio(preds, panel, pf.make_rule(args.rule), pf.WeightScheme(args.weights))
        out = [analysis.factor_regression(res.long_short, factors, m).records().assign(factor_model=m)
               for m in args.factor_model]
        _write(pd.concat(out, ignore_index=True), args.out)


def cmd_run(args):
    cfg = RunConfig.from_file(args.config, args.set or ())
    if args.out:
        cfg.values["output_dir"] = str(Path(args.out).resolve())
    files = run_pipeline(cfg)
    print(f"wrote {len(files)} files to {cfg.path(cfg['output_dir'])}", file=sys.stderr)


# -- parser -------------------------------------------------------------------------


def _split_args(p):
    p.add_argument("--train-end", type=int, help="last training month (YYYYMM); test is everything after")
    p.add_argument("--train-range", type=int, nargs=2, metavar=("FIRST", "LAST"))
    p.add_argument("--test-range", type=int, nargs=2, metavar=("FIRST", "LAST"))
    p.add_argument("--mode", choices=("ts", "cs"), default="ts", help="time-series or odd/even month split")
    p.add_argument("--train-parity", choices=("odd", "even"), default="odd", help="training months under --mode cs")


def _panel_args(p, required=True):
    p.add_argument("--panel", required=required, help="panel CSV")
    p.add_argument("--schema", help="YAML column mapping for the panel CSV")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="statefolio", description="Return-state classification and state-based portfolios.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="validate a panel CSV and write it in canonical form")
    _panel_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("label", help="assign monthly return-decile states")
    _panel_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("split", help="split a panel into training and test files")
    _panel_args(p)
    _split_args(p)
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-test", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("synth", help="generate a synthetic labeled panel")
    p.add_argument("--spec", help="YAML synth spec")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a classifier")
    p.add_argument("--model", required=True, help="model name, e.g. gbm8, dart8, drf8, mlp2_32")
    _panel_args(p)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="hyperparameter override")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tune", action="store_true", help="pick hyperparameters by month-fold cross-validation")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--raw-features", action="store_true", help="skip monthly feature z-scoring")
    p.add_argument("--relabel", action="store_true")
    p.add_argument("--out", required=True, help="model file (.npz)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write out-of-sample state probabilities")
    p.add_argument("--model", required=True)
    _panel_args(p)
    p.add_argument("--raw-features", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="accuracy and kappa with binomial tests")
    p.add_argument("--pred", required=True, nargs="+")
    _panel_args(p, required=False)
    p.add_argument("--benchmark", choices=("no-info", "martingale", "both"), default="both")
    p.add_argument("--ci-level", type=float, default=0.99)
    p.add_argument("--by-class", metavar="DIR")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("portfolio", help="form state portfolios and report performance")
    p.add_argument("--pred", required=True)
    _panel_args(p)
    p.add_argument("--rule", choices=("maxprob", "probadj"), default="maxprob")
    p.add_argument("--weights", choices=pf.WEIGHTINGS, default="equal")
    p.add_argument("--cap-cutoff", type=float, default=0.0, help="drop this bottom share of stocks by size")
    p.add_argument("--top-fraction", type=float, default=0.10)
    p.add_argument("--allocation", type=float, nargs=2, default=(1.0, 1.0), metavar=("LONG", "SHORT"))
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--rf", help="CSV with yyyymm, rf")
    p.add_argument("--buy-hold", action="store_true", help="add the market portfolio row")
    p.add_argument("--name", default="model")
    p.add_argument("--returns-out")
    p.add_argument("--out")
    p.set_defaults(func=cmd_portfolio)

    p = sub.add_parser("transitions", help="state transition grids (see --kind and --pred)")
    _panel_args(p)
    p.add_argument("--pred", nargs="+", help="prediction files; gives the averaged accuracy matrix")
    p.add_argument("--kind", choices=("probability", "mean_return"), default="probability")
    p.add_argument("--figure")
    p.add_argument("--out")
    p.set_defaults(func=cmd_transitions)

    p = sub.add_parser("benchmark", help="Monte Carlo comparison of naive classifiers")
    _panel_args(p)
    _split_args(p)
    p.add_argument("--iters", type=int, default=10_000)
    p.add_argument("--draw", type=int, default=4886)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("analyze", help="post-hoc analysis of predictions or a fitted model (see --what)")
    p.add_argument("--what", required=True, choices=("certainty", "lifetime", "factors", "importance"))
    p.add_argument("--pred")
    _panel_args(p, required=False)
    p.add_argument("--model", help="model file, for importance")
    p.add_argument("--target", choices=("accuracy", "certainty"), default="accuracy")
    p.add_argument("--windows", type=int, nargs="+")
    p.add_argument("--factors")
    p.add_argument("--factor-model", nargs="+", default=["FF3F"], choices=sorted(analysis.FACTOR_MODELS))
    p.add_argument("--rule", choices=("maxprob", "probadj"), default="maxprob")
    p.add_argument("--weights", choices=pf.WEIGHTINGS, default="equal")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("run", help="run the full pipeline from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except StatefolioError as exc:
        print(f"compute error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        # unreadable files and malformed inputs surface here
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"compute error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
