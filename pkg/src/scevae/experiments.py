"""End-to-end experiment runners: generate or load data, build interventions,
train, evaluate, aggregate over replications, and plot.

A scenario names a synthetic setting (causal link x proxy-coefficient kind)
or the real-data pipeline. One replication is: simulate (or load), split and
normalize, fit the knockoff model on the training segment and sample the
intervention series (or draw Gaussian noise), regenerate the ground-truth
counterfactual, train, and evaluate the branch metrics on the test segment.
Replication seeds are derived arithmetically from the base seed so cells
are independent and reproducible in parallel.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import causal_eval, knockoff, scm_synth, trainer
from .causal_eval import CausalReport, MetricSummary
from .dataio import DataError, LoadedSeries, RoleMap, load_csv
from .scevae_core import ScevaeParams
from .scm_synth import ScmConfig, TIME_VARYING
from .trainer import SplitData, SplitSpec, TrainConfig, split_and_normalize

logger = logging.getLogger(__name__)

SCENARIOS = ("linear_tv_b", "linear_fixed_b", "nonlinear_tv_b",
             "nonlinear_fixed_b", "real_data")
INTERVENTIONS = ("knockoff", "gaussian")
FIXED_B = 0.95
LATENT_DIMS = (1, 5, 10, 20)
CONFOUNDING_GRID = (0.8, 1.0, 1.2, 1.6)

_KNOCKOFF_SEED = 1_000_003
_INTERVENTION_SEED = 2_000_003
_TRAIN_SEED = 3_000_017


@dataclass
class ExperimentSpec:
    """One reproduction request: scenario, intervention, replication count,
    and the sweep axes."""

    scenario: str = "linear_tv_b"
    intervention: str = "knockoff"
    proxy_mode: str = "columns"
    replications: int = 5
    seed: int = 0
    n_steps: int = 1000
    latent_dim: int = 5
    latent_dims: tuple[int, ...] = LATENT_DIMS
    confounding: tuple[float, ...] = CONFOUNDING_GRID
    train: TrainConfig = field(default_factory=trainer.desk_config)
    knockoff_method: str = "sdp"
    knockoff_k_range: tuple[int, ...] = knockoff.DEFAULT_K_RANGE
    use_observed: bool = False

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if self.intervention not in INTERVENTIONS:
            raise ValueError(f"intervention must be one of {INTERVENTIONS}")


def scenario_config(scenario: str, seed: int = 0, n_steps: int = 1000,
                    d2: float | None = None) -> ScmConfig:
    """Structural-model configuration for a named synthetic scenario."""
    if scenario == "real_data":
        raise ValueError("real_data has no synthetic configuration")
    link = "linear" if scenario.startswith("linear") else "nonlinear"
    b = TIME_VARYING if scenario.endswith("tv_b") else FIXED_B
    cfg = ScmConfig(link=link, proxy_strength=b, n_steps=n_steps, seed=seed)
    if d2 is not None:
        cfg = replace(cfg, d2=d2)
    return cfg


def build_intervention(
    data: scm_synth.ScmDataset,
    splits: SplitData,
    intervention: str,
    seed: int,
    method: str = "sdp",
    k_range=knockoff.DEFAULT_K_RANGE,
) -> tuple[np.ndarray, str, knockoff.KnockoffModel | None]:
    """Raw-scale intervention series over the full length.

    Knockoffs are fitted on the training segment of [w, proxies] and sampled
    row-wise over the whole series; the Gaussian intervention draws
    N(0, intervention_noise_var) per step.
    """
    if intervention == "knockoff":
        q_full = np.column_stack([data.w, data.x])
        model = knockoff.fit_knockoff_model(
            q_full[: splits.n_train], method=method, k_range=k_range,
            seed=_KNOCKOFF_SEED + seed,
        )
        w_hat = knockoff.sample_knockoffs(
            model, q_full, seed=_INTERVENTION_SEED + seed
        )[:, 0]
        return w_hat, "knockoff", model
    w_hat = scm_synth.gaussian_intervention(data.config, _INTERVENTION_SEED + seed)
    return w_hat, "gaussian_noise", None


@dataclass
class SyntheticCase:
    """Prepared data for one synthetic evaluation: generated series, splits,
    intervention, and ground-truth counterfactual."""

    config: ScmConfig
    data: scm_synth.ScmDataset
    splits: SplitData
    truth: scm_synth.ScmDataset
    w_hat_raw: np.ndarray

    def test_slice(self) -> slice:
        return slice(self.config.n_steps - self.splits.n_test, self.config.n_steps)

    def normalized_test_targets(self):
        """(w_hat, y_hat, ite) on the normalized test segment."""
        sl = self.test_slice()
        stats = self.splits.stats
        return (
            stats.normalize("w", self.w_hat_raw[sl]),
            stats.normalize("y", self.truth.y_hat[sl]),
            self.truth.ite_true[sl] / stats.std["y"],
        )


def prepare_synthetic_case(
    scenario: str,
    seed: int,
    intervention: str,
    n_steps: int = 1000,
    d2: float | None = None,
    knockoff_method: str = "sdp",
    k_range=knockoff.DEFAULT_K_RANGE,
) -> SyntheticCase:
    """Generate, split, intervene, and compute ground truth for one seed.

    ``intervention`` may also be ``none``: the cause is left untouched and
    the counterfactual equals the factual series.
    """
    cfg = scenario_config(scenario, seed=seed, n_steps=n_steps, d2=d2)
    data = scm_synth.generate(cfg)
    splits = split_and_normalize({"x": data.x[:, None], "w": data.w, "y": data.y})
    if intervention == "none":
        return SyntheticCase(cfg, data, splits, data, data.w.copy())
    w_hat_raw, kind, _ = build_intervention(
        data, splits, intervention, seed, method=knockoff_method, k_range=k_range
    )
    truth = scm_synth.apply_intervention(data, w_hat_raw, kind)
    return SyntheticCase(cfg, data, splits, truth, w_hat_raw)


@dataclass
class ReplicationResult:
    """Metrics and plotting series from one trained replication."""

    seed: int
    rmse_y: float
    rmse_y_hat: float | None
    rmse_ite: float | None
    ate_test: float
    ate_train: float | None
    history: list[trainer.EpochRecord]
    test_y: np.ndarray
    test_y_hat: np.ndarray | None
    factual: np.ndarray
    counterfactual: np.ndarray
    normalization: dict[str, tuple[float, float]]


def run_replication(
    spec: ExperimentSpec,
    rep: int,
    d2: float | None = None,
    latent_dim: int | None = None,
) -> ReplicationResult:
    """One synthetic replication end to end."""
    rep_seed = spec.seed + rep
    case = prepare_synthetic_case(
        spec.scenario, rep_seed, spec.intervention, n_steps=spec.n_steps, d2=d2,
        knockoff_method=spec.knockoff_method, k_range=spec.knockoff_k_range,
    )
    splits = case.splits
    stats = splits.stats

    train_cfg = replace(spec.train, seed=_TRAIN_SEED + rep_seed)
    params = ScevaeParams.init(
        seed=train_cfg.seed, latent_dim=latent_dim or spec.latent_dim, proxy_dim=1
    )
    result = trainer.train(params, train_cfg, splits)

    w_hat_n, y_hat_n, ite_n = case.normalized_test_targets()
    fact, cf = causal_eval.infer_counterfactual(
        result.params, splits.test["x"], splits.test["w"], splits.test["y"],
        w_hat_n, use_observed=spec.use_observed,
    )
    return ReplicationResult(
        seed=rep_seed,
        rmse_y=causal_eval.rmse_factual(splits.test["y"], fact),
        rmse_y_hat=causal_eval.rmse_counterfactual(y_hat_n, cf),
        rmse_ite=causal_eval.rmse_ite(ite_n, fact, cf),
        ate_test=causal_eval.ate(fact, cf),
        ate_train=None,
        history=result.history,
        test_y=splits.test["y"],
        test_y_hat=y_hat_n,
        factual=fact,
        counterfactual=cf,
        normalization={k: (float(np.asarray(stats.mean[k]).ravel()[0]),
                           float(np.asarray(stats.std[k]).ravel()[0]))
                       for k in ("w", "y")},
    )


def run_real_replication(
    spec: ExperimentSpec,
    series: LoadedSeries,
    rep: int,
) -> ReplicationResult:
    """One replication on observational data (no ground-truth effects)."""
    rep_seed = spec.seed + rep
    splits = split_and_normalize(
        {"x": series.x, "w": series.w, "y": series.y}
    )
    n = series.n_steps
    if spec.intervention == "knockoff":
        q_full = np.column_stack([series.w, series.x])
        model = knockoff.fit_knockoff_model(
            q_full[: splits.n_train], method=spec.knockoff_method,
            k_range=spec.knockoff_k_range, seed=_KNOCKOFF_SEED + rep_seed,
        )
        w_hat_raw = knockoff.sample_knockoffs(
            model, q_full, seed=_INTERVENTION_SEED + rep_seed
        )[:, 0]
        w_hat_n = splits.stats.normalize("w", w_hat_raw)
    else:
        rng = np.random.default_rng(_INTERVENTION_SEED + rep_seed)
        w_hat_n = rng.normal(0.0, np.sqrt(0.6), n)

    train_cfg = replace(spec.train, seed=_TRAIN_SEED + rep_seed)
    params = ScevaeParams.init(
        seed=train_cfg.seed, latent_dim=spec.latent_dim, proxy_dim=series.x.shape[1]
    )
    result = trainer.train(params, train_cfg, splits)

    test_sl = slice(n - splits.n_test, n)
    train_sl = slice(0, splits.n_train)
    fact_te, cf_te = causal_eval.infer_counterfactual(
        result.params, splits.test["x"], splits.test["w"], splits.test["y"],
        w_hat_n[test_sl], use_observed=spec.use_observed,
    )
    fact_tr, cf_tr = causal_eval.infer_counterfactual(
        result.params, splits.train["x"], splits.train["w"], splits.train["y"],
        w_hat_n[train_sl], use_observed=spec.use_observed,
    )
    return ReplicationResult(
        seed=rep_seed,
        rmse_y=causal_eval.rmse_factual(splits.test["y"], fact_te),
        rmse_y_hat=None,
        rmse_ite=None,
        ate_test=causal_eval.ate(fact_te, cf_te),
        ate_train=causal_eval.ate(fact_tr, cf_tr),
        history=result.history,
        test_y=splits.test["y"],
        test_y_hat=None,
        factual=fact_te,
        counterfactual=cf_te,
        normalization={k: (float(np.asarray(splits.stats.mean[k]).ravel()[0]),
                           float(np.asarray(splits.stats.std[k]).ravel()[0]))
                       for k in ("w", "y")},
    )


def aggregate(kind: str, reps: list[ReplicationResult]) -> CausalReport:
    if not reps:
        raise ValueError("no successful replications to aggregate")
    has_yhat = all(r.rmse_y_hat is not None for r in reps)
    has_ite = all(r.rmse_ite is not None for r in reps)
    has_train_ate = all(r.ate_train is not None for r in reps)
    first = reps[0]
    return CausalReport(
        intervention_kind=kind,
        replication_seeds=[r.seed for r in reps],
        rmse_y=MetricSummary.from_values(r.rmse_y for r in reps),
        rmse_y_hat=(MetricSummary.from_values(r.rmse_y_hat for r in reps)
                    if has_yhat else None),
        rmse_ite=(MetricSummary.from_values(r.rmse_ite for r in reps)
                  if has_ite else None),
        ate_train=(MetricSummary.from_values(r.ate_train for r in reps)
                   if has_train_ate else None),
        ate_test=MetricSummary.from_values(r.ate_test for r in reps),
        ate_test_abs=MetricSummary.from_values(abs(r.ate_test) for r in reps),
        factual_series=first.factual,
        counterfactual_series=first.counterfactual,
        normalization=first.normalization,
    )


def run_cell(
    spec: ExperimentSpec,
    d2: float | None = None,
    latent_dim: int | None = None,
    series: LoadedSeries | None = None,
) -> tuple[CausalReport, list[ReplicationResult]]:
    """Run all replications of one cell; a failed replication is logged and
    skipped rather than killing the cell."""
    reps: list[ReplicationResult] = []
    errors: list[str] = []
    for rep in range(spec.replications):
        try:
            if spec.scenario == "real_data":
                if series is None:
                    raise DataError("real_data scenario requires loaded series")
                reps.append(run_real_replication(spec, series, rep))
            else:
                reps.append(run_replication(spec, rep, d2=d2, latent_dim=latent_dim))
        except Exception as exc:  # noqa: BLE001 - isolate per replication
            logger.warning("replication %d failed: %s", rep, exc)
            errors.append(f"rep {rep}: {exc}")
    if not reps:
        raise RuntimeError(
            "all replications failed: " + "; ".join(errors)
        )
    kind = "knockoff" if spec.intervention == "knockoff" else "gaussian_noise"
    return aggregate(kind, reps), reps


def _table_cell_task(args):
    spec, scenario, intervention = args
    cell_spec = replace(spec, scenario=scenario, intervention=intervention)
    report, _ = run_cell(cell_spec)
    return scenario, intervention, report


def run_table(
    spec: ExperimentSpec,
    scenarios=("linear_tv_b", "linear_fixed_b", "nonlinear_tv_b", "nonlinear_fixed_b"),
    interventions=INTERVENTIONS,
    jobs: int = 1,
) -> dict[tuple[str, str], CausalReport]:
    """Scenario x intervention grid of aggregated reports."""
    tasks = [(spec, sc, iv) for sc in scenarios for iv in interventions]
    results: dict[tuple[str, str], CausalReport] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for scenario, intervention, report in pool.map(_table_cell_task, tasks):
                results[(scenario, intervention)] = report
    else:
        for task in tasks:
            scenario, intervention, report = _table_cell_task(task)
            results[(scenario, intervention)] = report
    return results


def _sweep_cell_task(args):
    spec, latent_dim, d2 = args
    report, _ = run_cell(spec, d2=d2, latent_dim=latent_dim)
    return latent_dim, d2, report


def run_sweep(
    spec: ExperimentSpec,
    latent_dims=None,
    confounding=None,
    jobs: int = 1,
) -> dict[tuple[int, float], CausalReport]:
    """(latent_dim, d2) grid of aggregated reports."""
    dims = tuple(latent_dims if latent_dims is not None else spec.latent_dims)
    d2s = tuple(confounding if confounding is not None else spec.confounding)
    tasks = [(spec, dim, d2) for dim in dims for d2 in d2s]
    results: dict[tuple[int, float], CausalReport] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for dim, d2, report in pool.map(_sweep_cell_task, tasks):
                results[(dim, d2)] = report
    else:
        for task in tasks:
            dim, d2, report = _sweep_cell_task(task)
            results[(dim, d2)] = report
    return results


def load_role_series(path, role_map: RoleMap, seed: int = 0,
                     start: int = 0, length: int | None = None) -> LoadedSeries:
    return load_csv(path, role_map, seed=seed, start=start, length=length)


def _summary_fields(ms: MetricSummary | None) -> tuple[str, str]:
    if ms is None:
        return "", ""
    return format(ms.mean, ".17g"), "" if ms.se is None else format(ms.se, ".17g")


def table_csv_rows(results: dict[tuple[str, str], CausalReport]) -> list[list[str]]:
    """Rows in the synthetic-table layout (link, b, intervention, metrics)."""
    rows = [[
        "causal_link", "b", "intervention",
        "rmse_ite_mean", "rmse_ite_se",
        "rmse_y_mean", "rmse_y_se",
        "rmse_y_hat_mean", "rmse_y_hat_se",
    ]]
    for (scenario, intervention), report in results.items():
        link = "linear" if scenario.startswith("linear") else "nonlinear"
        b = "time_varying" if scenario.endswith("tv_b") else str(FIXED_B)
        ite_m, ite_s = _summary_fields(report.rmse_ite)
        y_m, y_s = _summary_fields(report.rmse_y)
        yh_m, yh_s = _summary_fields(report.rmse_y_hat)
        rows.append([link, b, intervention, ite_m, ite_s, y_m, y_s, yh_m, yh_s])
    return rows


def real_table_csv_rows(results: dict[str, CausalReport], proxy: str) -> list[list[str]]:
    """Rows in the observational-table layout (intervention, proxy, ATEs)."""
    rows = [[
        "intervention", "proxy",
        "ate_train_mean", "ate_train_se",
        "ate_test_mean", "ate_test_se",
        "ate_test_abs_mean",
        "rmse_y_mean", "rmse_y_se",
    ]]
    for intervention, report in results.items():
        atr_m, atr_s = _summary_fields(report.ate_train)
        ate_m, ate_s = _summary_fields(report.ate_test)
        abs_m, _ = _summary_fields(report.ate_test_abs)
        y_m, y_s = _summary_fields(report.rmse_y)
        rows.append([intervention, proxy, atr_m, atr_s, ate_m, ate_s, abs_m, y_m, y_s])
    return rows


def sweep_csv_rows(results: dict[tuple[int, float], CausalReport]) -> list[list[str]]:
    rows = [["latent_dim", "d2",
             "rmse_y_mean", "rmse_y_se", "rmse_y_hat_mean", "rmse_y_hat_se"]]
    for (dim, d2), report in sorted(results.items()):
        y_m, y_s = _summary_fields(report.rmse_y)
        yh_m, yh_s = _summary_fields(report.rmse_y_hat)
        rows.append([str(dim), format(d2, "g"), y_m, y_s, yh_m, yh_s])
    return rows


def format_table(rows: list[list[str]]) -> str:
    widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
    lines = []
    for row in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return "\n".join(lines)


def plot_branches(report: CausalReport, path) -> None:
    """Observed vs expected outcome overlays for both branches."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(11, 3.5), sharey=True)
    t = np.arange(len(report.factual_series))
    axes[0].plot(t, report.factual_series, color="tab:orange", label="E[Y|W,Z]")
    axes[1].plot(t, report.counterfactual_series, color="tab:orange",
                 label="E[Y|W_hat,Z]")
    axes[0].set_title("factual branch")
    axes[1].set_title("counterfactual branch")
    for ax in axes:
        ax.set_xlabel("test step")
        ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_branch_overlay(y, factual, y_hat, counterfactual, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(11, 3.5), sharey=True)
    t = np.arange(len(factual))
    axes[0].plot(t, y, color="tab:blue", label="Y")
    axes[0].plot(t, factual, color="tab:orange", label="E[Y|W,Z]")
    axes[0].set_title("factual")
    if y_hat is not None:
        axes[1].plot(t, y_hat, color="tab:blue", label="Y_hat")
    axes[1].plot(t, counterfactual, color="tab:orange", label="E[Y|W_hat,Z]")
    axes[1].set_title("counterfactual")
    for ax in axes:
        ax.set_xlabel("test step")
        ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_history(history: list[trainer.EpochRecord], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [r.epoch for r in history]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(epochs, [r.rmse_y_train for r in history], color="tab:blue",
            label="train")
    ax.plot(epochs, [r.rmse_y_test for r in history], color="tab:orange",
            label="test")
    ax.set_xlabel("epoch")
    ax.set_ylabel("factual RMSE")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(results: dict[tuple[int, float], CausalReport], path,
               metric: str = "rmse_y") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    dims = sorted({k[0] for k in results})
    d2s = sorted({k[1] for k in results})
    width = 0.8 / len(dims)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for i, dim in enumerate(dims):
        means = [getattr(results[(dim, d2)], metric).mean for d2 in d2s]
        errs = [getattr(results[(dim, d2)], metric).se or 0.0 for d2 in d2s]
        pos = np.arange(len(d2s)) + (i - (len(dims) - 1) / 2) * width
        ax.bar(pos, means, width=width, yerr=errs, capsize=2, label=f"D_Z={dim}")
    ax.set_xticks(np.arange(len(d2s)), [format(v, "g") for v in d2s])
    ax.set_xlabel("confounding coefficient d2")
    ax.set_ylabel(metric)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
