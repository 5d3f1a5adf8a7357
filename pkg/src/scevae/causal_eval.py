"""Counterfactual inference through the trained model and causal metrics.

At evaluation time the latent path never sees the observed outcome: the
auxiliaries predict w* from x and y* from (x, w*), the posterior mean of
q(z | x, y*, w*) gives the latent series, and the outcome decoder is
evaluated twice on that shared latent: once with the observed cause
(factual branch) and once with the intervention series (counterfactual
branch). ``use_observed`` switches to conditioning on the observed (w, y)
instead, for ablation.

All metrics operate on the normalized scale; reports carry the
normalization statistics so raw-scale values are recoverable by the affine
inverse.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .scevae_core import ScevaeParams, aux_w, aux_y, decode_y, encode


def _series(arr, name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64).reshape(len(arr), -1)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains NaN or Inf")
    return out


def _flat(arr) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64).reshape(-1)


def infer_latent(
    params: ScevaeParams,
    x,
    w=None,
    y=None,
    use_observed: bool = False,
    variance_floor: float = 1e-6,
) -> np.ndarray:
    """Posterior-mean latent series from the test-time pipeline."""
    x = _series(x, "x")
    if use_observed:
        if w is None or y is None:
            raise ValueError("use_observed requires both w and y")
        w_star = _series(w, "w")
        y_star = _series(y, "y")
    else:
        w_star = aux_w(params, x, variance_floor).mean
        y_star = aux_y(params, x, w_star, variance_floor).mean
    return encode(params, x, y_star, w_star, variance_floor).mean


def infer_factual(
    params: ScevaeParams,
    x,
    w,
    y=None,
    use_observed: bool = False,
    variance_floor: float = 1e-6,
) -> np.ndarray:
    """Expected outcome series under the observed cause."""
    zbar = infer_latent(params, x, w, y, use_observed, variance_floor)
    return decode_y(params, _series(w, "w"), zbar, variance_floor).mean[:, 0]


def infer_counterfactual(
    params: ScevaeParams,
    x,
    w,
    y,
    w_hat,
    use_observed: bool = False,
    variance_floor: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray]:
    """Factual and counterfactual expected-outcome branches.

    Both branches share the inferred latent; they differ only in the cause
    series handed to the outcome decoder.
    """
    if not params.trained:
        warnings.warn("parameters are untrained; branch outputs reflect the "
                      "initialization only", stacklevel=2)
    x = _series(x, "x")
    w1 = _series(w, "w")
    w_hat1 = _series(w_hat, "w_hat")
    if not (len(x) == len(w1) == len(w_hat1)):
        raise ValueError("x, w and w_hat must have equal length")
    zbar = infer_latent(params, x, w1, y, use_observed, variance_floor)
    factual = decode_y(params, w1, zbar, variance_floor).mean[:, 0]
    counterfactual = decode_y(params, w_hat1, zbar, variance_floor).mean[:, 0]
    return factual, counterfactual


def rmse(pred, target) -> float:
    pred = _flat(pred)
    target = _flat(target)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {target.shape}")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def rmse_ite(ite_true, factual, counterfactual) -> float:
    """RMSE between the ground-truth per-step effect and the predicted
    branch contrast. Requires ground truth, i.e. synthetic mode."""
    if ite_true is None:
        raise ValueError(
            "rmse_ite needs ground-truth per-step effects, which only "
            "synthetic data provides"
        )
    return rmse(_flat(counterfactual) - _flat(factual), ite_true)


def rmse_factual(y, factual_branch) -> float:
    return rmse(factual_branch, y)


def rmse_counterfactual(y_hat, counterfactual_branch) -> float:
    return rmse(counterfactual_branch, y_hat)


def ate(factual, counterfactual) -> float:
    """Mean branch contrast over the evaluated steps."""
    f = _flat(factual)
    c = _flat(counterfactual)
    if f.shape != c.shape:
        raise ValueError(f"length mismatch: {f.shape} vs {c.shape}")
    return float(np.mean(c - f))


@dataclass
class MetricSummary:
    """Mean with standard error over replications (None below 2)."""

    mean: float
    se: float | None = None

    @classmethod
    def from_values(cls, values) -> "MetricSummary":
        vals = np.asarray(list(values), dtype=np.float64)
        if vals.size == 0:
            raise ValueError("no values to summarize")
        se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size >= 2 else None
        return cls(float(vals.mean()), se)

    def __str__(self) -> str:
        if self.se is None:
            return f"{self.mean:.4f}"
        return f"{self.mean:.4f} +/- {self.se:.4f}"


@dataclass
class CausalReport:
    """Aggregated causal metrics for one scenario cell."""

    intervention_kind: str
    replication_seeds: list[int]
    rmse_y: MetricSummary
    rmse_y_hat: MetricSummary | None = None
    rmse_ite: MetricSummary | None = None
    ate_train: MetricSummary | None = None
    ate_test: MetricSummary | None = None
    ate_test_abs: MetricSummary | None = None
    factual_series: np.ndarray | None = None
    counterfactual_series: np.ndarray | None = None
    normalization: dict[str, tuple[float, float]] = field(default_factory=dict)

    def summary_lines(self) -> list[str]:
        lines = [f"intervention: {self.intervention_kind}",
                 f"replications: {len(self.replication_seeds)}"]
        if self.rmse_ite is not None:
            lines.append(f"RMSE_ITE : {self.rmse_ite}")
        lines.append(f"RMSE_Y   : {self.rmse_y}")
        if self.rmse_y_hat is not None:
            lines.append(f"RMSE_Yhat: {self.rmse_y_hat}")
        if self.ate_train is not None:
            lines.append(f"ATE train: {self.ate_train}")
        if self.ate_test is not None:
            lines.append(f"ATE test : {self.ate_test}")
        if self.ate_test_abs is not None:
            lines.append(f"|ATE| test: {self.ate_test_abs}")
        return lines
