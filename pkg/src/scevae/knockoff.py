"""Second-order knockoff copies of observed time-series columns.

A knockoff matrix Q~ preserves the marginal distribution and cross-column
correlation of Q while being decorrelated from it: with Sigma the Gram
matrix of the column-normalized Q, the target joint covariance of [Q, Q~] is

    G = [[Sigma, Sigma - diag(s)], [Sigma - diag(s), Sigma]]

for a non-negative vector s with 2*Sigma - diag(s) >= 0. The sampler fits a
Gaussian mixture to the rows by EM (components chosen by BIC), draws a
mixture assignment from its posterior per row, and samples the knockoff row
from the Gaussian conditional that enforces G within the assigned component.

For a single-component fit the conditional noise is additionally whitened
against the data columns so the empirical second moments of [Q, Q~] hit G
exactly; the Gram conditions are equalities, and finite-sample Monte-Carlo
error would otherwise dominate them at moderate n.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

METHODS = ("sdp", "equicorrelated")
DEFAULT_K_RANGE = (1, 2, 3, 4, 5)
EM_MAX_ITER = 100
EM_RESTARTS = 5
EM_RIDGE = 1e-6
EM_TOL = 1e-5
_PSD_SLACK = 1e-9


class KnockoffError(RuntimeError):
    """Knockoff construction failure; may carry ``loglik_trace``."""

    def __init__(self, message: str, loglik_trace=None):
        super().__init__(message)
        self.loglik_trace = loglik_trace


@dataclass
class FeatureMatrix:
    """Column-normalized observation matrix: rows are time steps.

    ``q`` has centered columns scaled to unit l2 norm, so the Gram matrix
    q.T @ q has unit diagonal; ``mean`` and ``scale`` restore raw units.
    """

    q: np.ndarray
    column_names: list[str]
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def from_raw(cls, raw, column_names=None) -> "FeatureMatrix":
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2:
            raise KnockoffError("feature matrix must be 2-dimensional")
        if not np.all(np.isfinite(raw)):
            raise KnockoffError("feature matrix contains NaN or Inf")
        n, p = raw.shape
        if column_names is None:
            column_names = [f"q{j}" for j in range(p)]
        mean = raw.mean(axis=0)
        centered = raw - mean
        scale = np.linalg.norm(centered, axis=0)
        bad = np.flatnonzero(scale == 0)
        if bad.size:
            names = ", ".join(column_names[j] for j in bad)
            raise KnockoffError(
                f"degenerate covariance: constant column(s) {names}; "
                "add variation or drop the column"
            )
        return cls(centered / scale, list(column_names), mean, scale)

    @property
    def n_rows(self) -> int:
        return self.q.shape[0]

    @property
    def n_cols(self) -> int:
        return self.q.shape[1]

    def sigma(self) -> np.ndarray:
        """Gram matrix (= correlation matrix) with unit diagonal."""
        return self.q.T @ self.q

    def std(self) -> np.ndarray:
        """Per-column standard deviation (denominator n) in raw units."""
        return self.scale / np.sqrt(self.n_rows)


@dataclass
class GmmFit:
    """EM-fitted Gaussian mixture over matrix rows."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    loglik_trace: list[float]
    converged: bool

    @property
    def n_components(self) -> int:
        return len(self.weights)


@dataclass
class KnockoffModel:
    """Fitted mixture plus the second-order decorrelation vector."""

    method: str
    s_vector: np.ndarray
    gmm: GmmFit
    sigma: np.ndarray
    bic_by_k: dict[int, float]
    column_names: list[str]
    mean: np.ndarray
    std: np.ndarray


def _log_gauss(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    p = cov.shape[0]
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise KnockoffError(
            "degenerate covariance during EM; increase the ridge regularization"
        ) from exc
    sol = solve_triangular(chol, (x - mean).T, lower=True)
    quad = np.sum(sol**2, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (quad + logdet + p * np.log(2.0 * np.pi))


def _em_once(x, k, rng, max_iter, ridge, tol):
    n, p = x.shape
    idx = rng.choice(n, size=k, replace=False)
    means = x[idx].copy()
    base_cov = np.cov(x, rowvar=False, bias=True) + ridge * np.eye(p)
    covs = np.repeat(base_cov[None, :, :], k, axis=0)
    weights = np.full(k, 1.0 / k)
    trace: list[float] = []
    converged = False
    for _ in range(max_iter):
        log_resp = np.stack(
            [np.log(weights[j]) + _log_gauss(x, means[j], covs[j]) for j in range(k)],
            axis=1,
        )
        log_norm = logsumexp(log_resp, axis=1)
        ll = float(log_norm.sum())
        resp = np.exp(log_resp - log_norm[:, None])
        if trace and abs(ll - trace[-1]) / n < tol:
            trace.append(ll)
            converged = True
            break
        trace.append(ll)
        nk = resp.sum(axis=0) + 1e-12
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        for j in range(k):
            diff = x - means[j]
            covs[j] = (resp[:, j, None] * diff).T @ diff / nk[j] + ridge * np.eye(p)
    return GmmFit(weights, means, covs, trace, converged), (trace[-1] if trace else -np.inf)


def fit_gmm(
    x: np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = EM_MAX_ITER,
    restarts: int = EM_RESTARTS,
    ridge: float = EM_RIDGE,
) -> GmmFit:
    """Fit a k-component full-covariance Gaussian mixture by EM with random
    restarts, keeping the best converged fit."""
    rng = np.random.default_rng(seed)
    n_restarts = 1 if k == 1 else restarts
    best: GmmFit | None = None
    best_ll = -np.inf
    last_trace = None
    for _ in range(n_restarts):
        fit, ll = _em_once(x, k, rng, max_iter, ridge, EM_TOL)
        last_trace = fit.loglik_trace
        if fit.converged and ll > best_ll:
            best, best_ll = fit, ll
    if best is None:
        raise KnockoffError(
            f"EM did not converge within {max_iter} iterations for K={k}",
            loglik_trace=last_trace,
        )
    return best


def _check_sigma(sigma: np.ndarray) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise KnockoffError("sigma must be square")
    if not np.allclose(sigma, sigma.T, atol=1e-10):
        raise KnockoffError("sigma must be symmetric")
    if not np.allclose(np.diag(sigma), 1.0, atol=1e-8):
        raise KnockoffError("sigma must have unit diagonal")
    if np.linalg.eigvalsh(sigma)[0] < -1e-8:
        raise KnockoffError("sigma is not positive semidefinite")
    return sigma


def _equicorrelated_s(sigma: np.ndarray) -> np.ndarray:
    lam_min = float(np.linalg.eigvalsh(sigma)[0])
    value = min(1.0, max(0.0, 2.0 * lam_min))
    return np.full(sigma.shape[0], value)


def _min_eig(sigma2: np.ndarray, s: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(sigma2 - np.diag(s))[0])


def _coordinate_ascent(sigma: np.ndarray, s: np.ndarray, passes: int = 50,
                       gain_tol: float = 1e-7) -> np.ndarray:
    sigma2 = 2.0 * sigma
    p = len(s)
    if _min_eig(sigma2, s) < _PSD_SLACK:
        return s
    for _ in range(passes):
        improved = 0.0
        for j in range(p):
            lo = s[j]
            hi = 1.0
            if hi - lo < 1e-12:
                continue
            trial = s.copy()
            trial[j] = hi
            if _min_eig(sigma2, trial) >= _PSD_SLACK:
                improved += hi - s[j]
                s[j] = hi
                continue
            for _ in range(50):
                mid = 0.5 * (lo + hi)
                trial[j] = mid
                if _min_eig(sigma2, trial) >= _PSD_SLACK:
                    lo = mid
                else:
                    hi = mid
            improved += lo - s[j]
            s[j] = lo
        if improved < gain_tol:
            break
    return s


def select_s(sigma: np.ndarray, method: str = "sdp") -> np.ndarray:
    """Decorrelation vector for a unit-diagonal PSD correlation matrix.

    ``equicorrelated`` uses the closed form min(1, 2*lambda_min).  ``sdp``
    maximizes sum(s) subject to 0 <= s_j <= 1 and 2*Sigma - diag(s) PSD by
    projected coordinate ascent with bisection on the smallest eigenvalue,
    and never returns a smaller sum than the equicorrelated solution.
    """
    sigma = _check_sigma(sigma)
    if method not in METHODS:
        raise KnockoffError(f"method must be one of {METHODS}, got {method!r}")
    s_eq = _equicorrelated_s(sigma)
    if method == "equicorrelated":
        return s_eq
    best = s_eq
    for start in (np.zeros(len(s_eq)), 0.95 * s_eq):
        cand = _coordinate_ascent(sigma, start.copy())
        if cand.sum() > best.sum():
            best = cand
    return best


def fit_knockoff_model(
    q,
    method: str = "sdp",
    k_range=DEFAULT_K_RANGE,
    seed: int = 0,
    max_iter: int = EM_MAX_ITER,
    restarts: int = EM_RESTARTS,
    ridge: float = EM_RIDGE,
) -> KnockoffModel:
    """Fit the sampling model on ``q`` (FeatureMatrix or raw array).

    The mixture is fitted on standardized rows with the component count
    chosen by minimum BIC over ``k_range``; the s-vector is selected on the
    Gram matrix per ``method``.
    """
    fm = q if isinstance(q, FeatureMatrix) else FeatureMatrix.from_raw(q)
    n, p = fm.n_rows, fm.n_cols
    if n <= p:
        raise KnockoffError(f"need more rows than columns, got {n} x {p}")
    x = fm.q * np.sqrt(n)  # unit variance scale
    fits: dict[int, GmmFit] = {}
    bic_by_k: dict[int, float] = {}
    last_error: KnockoffError | None = None
    for k in k_range:
        try:
            fit = fit_gmm(x, k, seed=seed + k, max_iter=max_iter,
                          restarts=restarts, ridge=ridge)
        except KnockoffError as exc:
            logger.warning("skipping K=%d: %s", k, exc)
            last_error = exc
            continue
        n_params = (k - 1) + k * p + k * p * (p + 1) // 2
        bic_by_k[k] = -2.0 * fit.loglik_trace[-1] + n_params * np.log(n)
        fits[k] = fit
    if not fits:
        raise KnockoffError(
            "EM converged for no component count in k_range",
            loglik_trace=None if last_error is None else last_error.loglik_trace,
        )
    best_k = min(bic_by_k, key=bic_by_k.get)
    sigma = fm.sigma()
    s = select_s(sigma, method)
    return KnockoffModel(
        method=method,
        s_vector=s,
        gmm=fits[best_k],
        sigma=sigma,
        bic_by_k=bic_by_k,
        column_names=fm.column_names,
        mean=fm.mean.copy(),
        std=fm.std(),
    )


def _psd_sqrt(mat: np.ndarray, label: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    if vals[0] < -1e-10:
        logger.warning(
            "%s not PSD (min eigenvalue %.3e); clipping at 0", label, vals[0]
        )
    vals = np.clip(vals, 0.0, None)
    return vecs @ np.diag(np.sqrt(vals)) @ vecs.T


def _conditional_params(cov: np.ndarray, s: np.ndarray):
    inv = np.linalg.inv(cov)
    a_mat = np.eye(len(s)) - np.diag(s) @ inv
    v = 2.0 * np.diag(s) - np.diag(s) @ inv @ np.diag(s)
    return a_mat, v


def sample_knockoffs(
    model: KnockoffModel,
    q,
    seed: int = 0,
    match_moments: bool = True,
) -> np.ndarray:
    """Sample a knockoff copy of ``q`` (raw units in, raw units out).

    Per row, a mixture assignment is drawn from the posterior and the
    knockoff row from the Gaussian conditional enforcing the joint target
    covariance within that component. With a single component and
    ``match_moments`` the conditional noise is orthogonalized against the
    data and rescaled so the Gram conditions hold exactly. Deterministic
    given ``seed``.
    """
    if isinstance(q, FeatureMatrix):
        raw = q.q * q.scale + q.mean
    else:
        raw = np.asarray(q, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != len(model.mean):
        raise KnockoffError(
            f"q must be 2-dimensional with {len(model.mean)} columns"
        )
    x = (raw - model.mean) / model.std
    n, p = x.shape
    rng = np.random.default_rng(seed)
    gmm = model.gmm
    s = model.s_vector

    if gmm.n_components == 1:
        a_mat, v = _conditional_params(gmm.covariances[0], s)
        mu = gmm.means[0]
        base = mu + (x - mu) @ a_mat.T
        noise = rng.standard_normal((n, p))
        v_half = _psd_sqrt(v, "conditional covariance")
        if match_moments and n > 2 * p + 2:
            design = np.concatenate([np.ones((n, 1)), x], axis=1)
            coef, *_ = np.linalg.lstsq(design, noise, rcond=None)
            resid = noise - design @ coef
            w_cov = resid.T @ resid / n
            w_half = _psd_sqrt(w_cov, "noise covariance")
            noise = resid @ np.linalg.inv(w_half) @ v_half
        else:
            noise = noise @ v_half.T
        tilde = base + noise
    else:
        log_resp = np.stack(
            [
                np.log(gmm.weights[j]) + _log_gauss(x, gmm.means[j], gmm.covariances[j])
                for j in range(gmm.n_components)
            ],
            axis=1,
        )
        resp = np.exp(log_resp - logsumexp(log_resp, axis=1)[:, None])
        u = rng.random(n)
        assign = (u[:, None] > np.cumsum(resp, axis=1)).sum(axis=1)
        assign = np.minimum(assign, gmm.n_components - 1)
        noise = rng.standard_normal((n, p))
        tilde = np.empty_like(x)
        for j in range(gmm.n_components):
            rows = assign == j
            if not rows.any():
                continue
            a_mat, v = _conditional_params(gmm.covariances[j], s)
            v_half = _psd_sqrt(v, f"conditional covariance (component {j})")
            mu = gmm.means[j]
            tilde[rows] = mu + (x[rows] - mu) @ a_mat.T + noise[rows] @ v_half.T
    return tilde * model.std + model.mean


@dataclass
class ExchangeabilityReport:
    """Deviations of the realized knockoffs from the Gram conditions."""

    marginal_deviation: float
    cross_deviation: float
    achieved_s: np.ndarray
    s_vector: np.ndarray | None = None
    column_names: list[str] = field(default_factory=list)

    @property
    def s_deviation(self) -> float | None:
        if self.s_vector is None:
            return None
        return float(np.max(np.abs(self.achieved_s - self.s_vector)))

    def render(self) -> str:
        lines = ["knockoff exchangeability diagnostics"]
        lines.append(f"  max |Q~'Q~ - Sigma|            : {self.marginal_deviation:.6f}")
        lines.append(f"  max off-diag |Q'Q~ - Sigma|    : {self.cross_deviation:.6f}")
        names = self.column_names or [f"q{j}" for j in range(len(self.achieved_s))]
        for j, name in enumerate(names):
            target = "" if self.s_vector is None else f" (target {self.s_vector[j]:.6f})"
            lines.append(f"  achieved s[{name}]: {self.achieved_s[j]:.6f}{target}")
        if self.s_vector is not None:
            lines.append(f"  max |achieved s - target s|    : {self.s_deviation:.6f}")
        return "\n".join(lines)


def exchangeability_diagnostics(
    q,
    q_tilde: np.ndarray,
    s_vector: np.ndarray | None = None,
    normalized: bool = False,
) -> ExchangeabilityReport:
    """Compare the realized Gram structure of (Q, Q~) to the target.

    ``q_tilde`` is taken in raw units and mapped through Q's normalization
    unless ``normalized`` is set.
    """
    fm = q if isinstance(q, FeatureMatrix) else FeatureMatrix.from_raw(q)
    q_tilde = np.asarray(q_tilde, dtype=np.float64)
    if q_tilde.shape != fm.q.shape:
        raise KnockoffError(
            f"q_tilde shape {q_tilde.shape} != q shape {fm.q.shape}"
        )
    qt = q_tilde if normalized else (q_tilde - fm.mean) / fm.scale
    sigma = fm.sigma()
    marg = qt.T @ qt - sigma
    cross = fm.q.T @ qt - sigma
    off = ~np.eye(fm.n_cols, dtype=bool)
    return ExchangeabilityReport(
        marginal_deviation=float(np.max(np.abs(marg))),
        cross_deviation=float(np.max(np.abs(cross[off]))) if off.any() else 0.0,
        achieved_s=-np.diag(cross).copy(),
        s_vector=None if s_vector is None else np.asarray(s_vector, dtype=np.float64),
        column_names=fm.column_names,
    )
