"""Command-line interface.

Subcommands: ``generate`` (synthetic data), ``knockoff`` (knockoff copies of
CSV columns), ``train``, ``eval``, and ``reproduce`` (replicated scenario
grids, sweeps, and plots). ``--config FILE`` merges a flat key-value file
with the flags; flags win. Every command prints its effective configuration,
which is sufficient to reproduce the run.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import causal_eval, dataio, experiments, knockoff, scm_synth, trainer
from ._kernels import backend
from .dataio import DataError, RoleMap
from .knockoff import KnockoffError
from .scevae_core import NumericalError, ScevaeParams

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

logger = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _print_config(title: str, kv: dict[str, str]) -> None:
    print(f"# effective {title}")
    for key, value in kv.items():
        print(f"{key} = {value}")


def _merge_config(path: str | None, flag_kv: dict[str, str]) -> dict[str, str]:
    kv = dataio.read_kv(path) if path else {}
    kv.update(flag_kv)
    return kv


def _run_dir(arg: str | None) -> Path:
    path = Path(arg) if arg else Path("runs") / time.strftime("%Y%m%d-%H%M%S")
    path.mkdir(parents=True, exist_ok=True)
    return path


SCM_FLOAT_FLAGS = ("a", "s", "c1", "c2", "d1", "d2", "g", "h",
                   "intervention_noise_var", "z0", "w0", "y0")


def _add_scm_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", choices=[s for s in experiments.SCENARIOS
                                          if s != "real_data"])
    p.add_argument("--n", "--n-steps", dest="n_steps", type=int)
    p.add_argument("--link", choices=scm_synth.LINKS)
    p.add_argument("--b", dest="proxy_strength",
                   help="fixed proxy coefficient or 'time_varying'")
    p.add_argument("--tau", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-vars", help="four comma-separated variances")
    p.add_argument("--zero-noise", action="store_true",
                   help="set all structural noise variances to 0")
    for name in SCM_FLOAT_FLAGS:
        p.add_argument(f"--{name.replace('_', '-')}", dest=f"scm_{name}", type=float)


def _scm_config_from_args(args) -> scm_synth.ScmConfig:
    kv: dict[str, str] = {}
    if args.scenario:
        base = experiments.scenario_config(args.scenario)
        kv.update({"link": base.link, "proxy_strength": str(base.proxy_strength)})
    for name in SCM_FLOAT_FLAGS:
        value = getattr(args, f"scm_{name}")
        if value is not None:
            kv[name] = repr(value)
    if args.n_steps is not None:
        kv["n_steps"] = str(args.n_steps)
    if args.link:
        kv["link"] = args.link
    if args.proxy_strength is not None:
        kv["proxy_strength"] = args.proxy_strength
    if args.tau is not None:
        kv["tau"] = str(args.tau)
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    if args.noise_vars:
        for j, raw in enumerate(args.noise_vars.split(","), start=1):
            kv[f"noise_var_{j}"] = raw
    if args.zero_noise:
        for j in (1, 2, 3, 4):
            kv[f"noise_var_{j}"] = "0.0"
    merged = _merge_config(getattr(args, "config", None), kv)
    try:
        return scm_synth.ScmConfig.from_kv(merged)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window-len", type=int)
    p.add_argument("--windows-per-epoch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", "--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--mc-samples", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--replications", type=int)
    p.add_argument("--train-seed", type=int)
    p.add_argument("--latent-dim", type=int, default=5)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--layers", type=int, default=2)


def _train_config_from_args(args, base: trainer.TrainConfig | None = None
                            ) -> trainer.TrainConfig:
    kv: dict[str, str] = {} if base is None else base.to_kv()
    file_kv = dataio.read_kv(args.config) if getattr(args, "config", None) else {}
    kv.update(file_kv)
    overrides = {
        "window_len": args.window_len,
        "windows_per_epoch": args.windows_per_epoch,
        "epochs": args.epochs,
        "learning_rate": args.learning_rate,
        "weight_decay": args.weight_decay,
        "lambda": args.lam,
        "mc_samples": args.mc_samples,
        "patience": args.patience,
        "grad_clip": args.grad_clip,
        "replications": args.replications,
        "seed": args.train_seed,
    }
    for key, value in overrides.items():
        if value is not None:
            kv[key] = repr(value) if isinstance(value, float) else str(value)
    try:
        return trainer.TrainConfig.from_kv(kv)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _add_role_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="input CSV")
    p.add_argument("--effect", default="y")
    p.add_argument("--cause", default="w")
    p.add_argument("--proxies", default="x", help="comma-separated proxy columns")
    p.add_argument("--proxy-mode", choices=dataio.PROXY_MODES, default="columns")
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--length", type=int)


def _role_map_from_args(args) -> RoleMap:
    return RoleMap(
        effect=args.effect,
        cause=args.cause,
        proxies=[c for c in args.proxies.split(",") if c],
        proxy_mode=args.proxy_mode,
    )


def _load_series(args, seed: int = 0) -> dataio.LoadedSeries:
    role_map = _role_map_from_args(args)
    return dataio.load_csv(args.data, role_map, seed=seed,
                           start=args.start, length=args.length)


def cmd_generate(args) -> int:
    cfg = _scm_config_from_args(args)
    _print_config("scm config", cfg.to_kv())
    data = scm_synth.generate(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataio.export_dataset(data, out)
    dataio.write_kv(out.with_suffix(out.suffix + ".config"), cfg.to_kv())
    print(f"wrote {data.n_steps} rows to {out}")
    return EXIT_OK


def cmd_knockoff(args) -> int:
    columns = dataio.load_numeric_csv(args.input)
    names = [c for c in args.columns.split(",") if c]
    for name in names:
        if name not in columns:
            raise DataError(f"{args.input}: missing column {name!r} "
                            f"(available: {', '.join(columns)})")
    raw = np.column_stack([columns[n] for n in names])
    fm = knockoff.FeatureMatrix.from_raw(raw, names)
    model = knockoff.fit_knockoff_model(
        fm, method=args.method, k_range=tuple(range(1, args.max_components + 1)),
        seed=args.seed,
    )
    tilde = knockoff.sample_knockoffs(model, raw, seed=args.seed)
    report = knockoff.exchangeability_diagnostics(fm, tilde, model.s_vector)
    _print_config("knockoff config", {
        "input": args.input, "columns": args.columns, "method": args.method,
        "max_components": str(args.max_components), "seed": str(args.seed),
        "n_components": str(model.gmm.n_components),
    })
    print(report.render())
    out_columns = dict(columns)
    for j, name in enumerate(names):
        out_columns[f"{name}_ko"] = tilde[:, j]
    if args.out:
        dataio.write_csv_columns(args.out, out_columns)
        print(f"wrote knockoffs to {args.out}")
    return EXIT_OK


def _train_inputs(args, train_cfg):
    """Splits plus proxy dimension for train/eval style commands."""
    if args.data:
        series = _load_series(args, seed=train_cfg.seed)
        splits = trainer.split_and_normalize(series.as_dict())
        return splits, series.x.shape[1]
    if not args.scenario:
        raise UsageError("either --data or --scenario is required")
    case = experiments.prepare_synthetic_case(
        args.scenario, args.seed if args.seed is not None else 0, "none",
        n_steps=args.n_steps or 1000,
    )
    return case.splits, 1


def cmd_train(args) -> int:
    train_cfg = _train_config_from_args(args)
    splits, proxy_dim = _train_inputs(args, train_cfg)
    run_dir = _run_dir(args.outdir)
    kv = train_cfg.to_kv()
    kv.update({"latent_dim": str(args.latent_dim), "hidden": str(args.hidden),
               "layers": str(args.layers), "backend": backend()})
    _print_config("train config", kv)
    params = ScevaeParams.init(
        seed=train_cfg.seed, latent_dim=args.latent_dim, hidden=args.hidden,
        layers=args.layers, proxy_dim=proxy_dim,
    )
    result = trainer.train(params, train_cfg, splits)
    dataio.write_kv(run_dir / "config", kv)
    result.params.save(run_dir / "checkpoint")
    trainer.write_history_csv(result.history, run_dir / "history.csv")
    status = "diverged" if result.diverged else "ok"
    print(f"training {status}: best epoch {result.best_epoch}, "
          f"best val loss {result.best_val_loss:.6g}")
    print(f"artifacts in {run_dir}")
    return EXIT_NUMERICAL if result.diverged else EXIT_OK


def _metric_list(args) -> list[str] | None:
    if not args.metric:
        return None
    return [m.strip() for m in args.metric.split(",") if m.strip()]


def cmd_eval(args) -> int:
    params = ScevaeParams.load(args.checkpoint)
    metrics = _metric_list(args)
    run_dir = _run_dir(args.outdir)
    kv = {
        "checkpoint": args.checkpoint,
        "intervention": args.intervention,
        "scenario": args.scenario or "",
        "data": args.data or "",
        "seed": str(args.seed if args.seed is not None else 0),
    }
    _print_config("eval config", kv)
    dataio.write_kv(run_dir / "config", kv)

    if args.data:
        if metrics and "rmse_ite" in metrics:
            raise DataError(
                "rmse_ite needs ground-truth effects: ITE ground truth "
                "requires synthetic mode (--scenario), not observational data"
            )
        series = _load_series(args, seed=args.seed or 0)
        if series.x.shape[1] != params.proxy_dim:
            raise DataError(
                f"checkpoint expects {params.proxy_dim} proxies, "
                f"data has {series.x.shape[1]}"
            )
        splits = trainer.split_and_normalize(series.as_dict())
        n = series.n_steps
        if args.intervention == "knockoff":
            q_full = np.column_stack([series.w, series.x])
            model = knockoff.fit_knockoff_model(
                q_full[: splits.n_train], seed=args.seed or 0
            )
            w_hat_raw = knockoff.sample_knockoffs(model, q_full, seed=args.seed or 0)
            w_hat_n = splits.stats.normalize("w", w_hat_raw[:, 0])
        elif args.intervention == "gaussian":
            rng = np.random.default_rng(args.seed or 0)
            w_hat_n = rng.normal(0.0, np.sqrt(0.6), n)
        else:
            w_hat_n = np.concatenate(
                [splits.train["w"], splits.val["w"], splits.test["w"]]
            )
        test_sl = slice(n - splits.n_test, n)
        train_sl = slice(0, splits.n_train)
        fact_te, cf_te = causal_eval.infer_counterfactual(
            params, splits.test["x"], splits.test["w"], splits.test["y"],
            w_hat_n[test_sl], use_observed=args.use_observed,
        )
        fact_tr, cf_tr = causal_eval.infer_counterfactual(
            params, splits.train["x"], splits.train["w"], splits.train["y"],
            w_hat_n[train_sl], use_observed=args.use_observed,
        )
        rows = [
            ["metric", "value"],
            ["rmse_y", format(causal_eval.rmse_factual(splits.test["y"], fact_te), ".17g")],
            ["ate_train", format(causal_eval.ate(fact_tr, cf_tr), ".17g")],
            ["ate_test", format(causal_eval.ate(fact_te, cf_te), ".17g")],
            ["ate_test_abs", format(abs(causal_eval.ate(fact_te, cf_te)), ".17g")],
        ]
        y_test, y_hat_n = splits.test["y"], None
    else:
        if not args.scenario:
            raise UsageError("either --data or --scenario is required")
        case = experiments.prepare_synthetic_case(
            args.scenario, args.seed if args.seed is not None else 0,
            args.intervention, n_steps=args.n_steps or 1000,
        )
        if params.proxy_dim != 1:
            raise DataError(
                f"checkpoint expects {params.proxy_dim} proxies, synthetic has 1"
            )
        splits = case.splits
        w_hat_n, y_hat_n, ite_n = case.normalized_test_targets()
        fact_te, cf_te = causal_eval.infer_counterfactual(
            params, splits.test["x"], splits.test["w"], splits.test["y"],
            w_hat_n, use_observed=args.use_observed,
        )
        rows = [
            ["metric", "value"],
            ["rmse_ite", format(causal_eval.rmse_ite(ite_n, fact_te, cf_te), ".17g")],
            ["rmse_y", format(causal_eval.rmse_factual(splits.test["y"], fact_te), ".17g")],
            ["rmse_y_hat", format(causal_eval.rmse_counterfactual(y_hat_n, cf_te), ".17g")],
            ["ate_test", format(causal_eval.ate(fact_te, cf_te), ".17g")],
            ["ate_test_abs", format(abs(causal_eval.ate(fact_te, cf_te)), ".17g")],
        ]
        y_test = splits.test["y"]
    if metrics:
        keep = {"metric"} | set(metrics)
        missing = set(metrics) - {r[0] for r in rows}
        if missing:
            raise UsageError(f"unknown metric(s): {', '.join(sorted(missing))}")
        rows = [rows[0]] + [r for r in rows[1:] if r[0] in keep]
    report_path = run_dir / "report.csv"
    with open(report_path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(",".join(row) + "\n")
    for name, value in rows[1:]:
        print(f"{name}: {float(value):.4f}")
    if args.dump_series:
        series_cols = {"t": np.arange(len(fact_te)), "y": y_test,
                       "factual": fact_te}
        if y_hat_n is not None:
            series_cols["y_hat"] = y_hat_n
        series_cols["counterfactual"] = cf_te
        dataio.write_csv_columns(run_dir / "series.csv", series_cols)
    plots = run_dir / "plots"
    plots.mkdir(exist_ok=True)
    experiments.plot_branch_overlay(y_test, fact_te, y_hat_n, cf_te,
                                    plots / "branches.png")
    print(f"artifacts in {run_dir}")
    return EXIT_OK


def _check_reproduction(results) -> list[str]:
    """Ordering and band checks on the time-varying scenarios."""
    failures = []
    for link in ("linear", "nonlinear"):
        scenario = f"{link}_tv_b"
        ko = results.get((scenario, "knockoff"))
        ga = results.get((scenario, "gaussian"))
        if ko is None or ga is None:
            continue
        if not ko.rmse_ite.mean < ga.rmse_ite.mean:
            failures.append(
                f"{scenario}: knockoff RMSE_ITE {ko.rmse_ite.mean:.3f} not "
                f"below gaussian {ga.rmse_ite.mean:.3f}"
            )
        if not ko.rmse_y_hat.mean < ga.rmse_y_hat.mean:
            failures.append(
                f"{scenario}: knockoff RMSE_Yhat {ko.rmse_y_hat.mean:.3f} not "
                f"below gaussian {ga.rmse_y_hat.mean:.3f}"
            )
    ko_lin = results.get(("linear_tv_b", "knockoff"))
    if ko_lin is not None and abs(ko_lin.rmse_ite.mean - 0.34) > 0.15:
        failures.append(
            f"linear_tv_b knockoff RMSE_ITE {ko_lin.rmse_ite.mean:.3f} "
            "outside 0.34 +/- 0.15"
        )
    ko_non = results.get(("nonlinear_tv_b", "knockoff"))
    if ko_non is not None and abs(ko_non.rmse_y_hat.mean - 0.70) > 0.20:
        failures.append(
            f"nonlinear_tv_b knockoff RMSE_Yhat {ko_non.rmse_y_hat.mean:.3f} "
            "outside 0.70 +/- 0.20"
        )
    return failures


def cmd_reproduce(args) -> int:
    base_train = trainer.desk_config()
    train_cfg = _train_config_from_args(args, base=base_train)
    spec = experiments.ExperimentSpec(
        scenario="linear_tv_b" if args.scenario in (None, "all") else args.scenario,
        intervention="knockoff",
        replications=args.replications,
        seed=args.seed if args.seed is not None else 0,
        n_steps=args.n_steps or 1000,
        latent_dim=args.latent_dim,
        train=train_cfg,
        use_observed=args.use_observed,
    )
    run_dir = _run_dir(args.outdir)
    kv = train_cfg.to_kv()
    kv.update({
        "scenario": args.scenario or "all",
        "interventions": args.intervention,
        "sweep": args.sweep or "none",
        "replications": str(args.replications),
        "seed": str(spec.seed),
        "latent_dim": str(args.latent_dim),
        "n_steps": str(spec.n_steps),
        "backend": backend(),
    })
    _print_config("reproduce config", kv)
    dataio.write_kv(run_dir / "config", kv)
    plots = run_dir / "plots"
    plots.mkdir(exist_ok=True)

    if args.sweep:
        if args.sweep == "latent_dim":
            dims, d2s = experiments.LATENT_DIMS, experiments.CONFOUNDING_GRID
        else:
            dims, d2s = (args.latent_dim,), experiments.CONFOUNDING_GRID
        results = experiments.run_sweep(spec, latent_dims=dims, confounding=d2s,
                                        jobs=args.jobs)
        rows = experiments.sweep_csv_rows(results)
        experiments.plot_sweep(results, plots / "sweep_rmse_y.png", "rmse_y")
        experiments.plot_sweep(results, plots / "sweep_rmse_y_hat.png", "rmse_y_hat")
    elif (args.scenario or "all") == "real_data":
        if not args.data:
            raise UsageError("real_data reproduction requires --data")
        series = _load_series(args, seed=spec.seed)
        interventions = (["knockoff", "gaussian"] if args.intervention == "both"
                         else [args.intervention])
        real_results = {}
        for iv in interventions:
            cell_spec = replace(spec, scenario="real_data", intervention=iv)
            report, reps = experiments.run_cell(cell_spec, series=series)
            real_results[iv] = report
            experiments.plot_branches(report, plots / f"branches_real_{iv}.png")
            experiments.plot_history(reps[0].history, plots / f"history_real_{iv}.png")
        proxy = ("uniform" if args.proxy_mode == "uniform_noise"
                 else "meteorological")
        rows = experiments.real_table_csv_rows(real_results, proxy)
    else:
        scenarios = ([s for s in experiments.SCENARIOS if s != "real_data"]
                     if args.scenario in (None, "all") else [args.scenario])
        interventions = (list(experiments.INTERVENTIONS)
                         if args.intervention == "both" else [args.intervention])
        results = experiments.run_table(spec, scenarios=scenarios,
                                        interventions=interventions, jobs=args.jobs)
        rows = experiments.table_csv_rows(results)
        for (scenario, iv), report in results.items():
            experiments.plot_branches(report, plots / f"branches_{scenario}_{iv}.png")

    with open(run_dir / "report.csv", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(",".join(row) + "\n")
    table = experiments.format_table(rows)
    print(table)
    (run_dir / "summary.txt").write_text(table + "\n", encoding="utf-8")
    print(f"artifacts in {run_dir}")

    if args.check and not args.sweep and (args.scenario or "all") != "real_data":
        failures = _check_reproduction(results)
        for line in failures:
            print(f"CHECK FAIL: {line}")
        if failures:
            return EXIT_NUMERICAL
        print("CHECK PASS: knockoff dominates gaussian within tolerance bands")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="scevae", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic dataset CSV")
    _add_scm_flags(p)
    p.add_argument("--config", help="flat key-value scm config file")
    p.add_argument("--out", default="scm_dataset.csv")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("knockoff", help="build knockoff copies of CSV columns")
    p.add_argument("--input", required=True)
    p.add_argument("--columns", required=True, help="comma-separated column names")
    p.add_argument("--method", choices=knockoff.METHODS, default="sdp")
    p.add_argument("--max-components", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_knockoff)

    p = sub.add_parser("train", help="train on synthetic or CSV data")
    _add_role_flags(p)
    p.add_argument("--scenario", choices=[s for s in experiments.SCENARIOS
                                          if s != "real_data"])
    p.add_argument("--seed", type=int, help="scenario seed")
    p.add_argument("--n", "--n-steps", dest="n_steps", type=int)
    p.add_argument("--config", help="flat key-value train config file")
    _add_train_flags(p)
    p.add_argument("--outdir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under an intervention")
    p.add_argument("--checkpoint", required=True)
    _add_role_flags(p)
    p.add_argument("--scenario", choices=[s for s in experiments.SCENARIOS
                                          if s != "real_data"])
    p.add_argument("--seed", type=int)
    p.add_argument("--n", "--n-steps", dest="n_steps", type=int)
    p.add_argument("--intervention", choices=("knockoff", "gaussian", "none"),
                   default="knockoff")
    p.add_argument("--metric", help="comma-separated subset of metrics")
    p.add_argument("--use-observed", action="store_true",
                   help="condition the latent on observed (w, y)")
    p.add_argument("--dump-series", action="store_true")
    p.add_argument("--outdir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reproduce", help="replicated scenario grids and sweeps")
    _add_role_flags(p)
    p.add_argument("--scenario", choices=list(experiments.SCENARIOS) + ["all"])
    p.add_argument("--intervention", choices=("knockoff", "gaussian", "both"),
                   default="both")
    p.add_argument("--replications", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.add_argument("--n", "--n-steps", dest="n_steps", type=int)
    p.add_argument("--sweep", choices=("latent_dim", "confounding"))
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--check", action="store_true",
                   help="validate orderings and tolerance bands")
    p.add_argument("--use-observed", action="store_true")
    p.add_argument("--config", help="flat key-value train config file")
    _add_train_flags(p)
    p.add_argument("--outdir")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (KnockoffError, NumericalError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
