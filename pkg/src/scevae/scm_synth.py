"""Synthetic confounded time-series generator with ground-truth counterfactuals.

The structural model (all noise Gaussian, mutually independent):

    z_t = a * z_{t-1} + e1_t                        hidden confounder, AR(1)
    x_t = b_t * tanh(z_{t-tau}) + s * e2_t          delayed proxy
    w_t = c1 * w_{t-1} + c2 * z_t + e3_t            cause
    y_t = d1 * y_{t-1} + d2 * z_t + link(w_t) + e4_t

with link(w) = g * w (linear) or g * exp(h * w) (nonlinear). Interventions
replace w by an externally supplied series and re-run the effect recursion
with the stored e4 draws, so the counterfactual differs from the factual
only through the intervention path.

Series are indexed t = 0..N-1; the initial values z0, w0, y0 sit one step
before the series, and z indices earlier than that resolve to z0.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

LINKS = ("linear", "nonlinear")
INTERVENTION_KINDS = ("knockoff", "gaussian_noise", "none")
TIME_VARYING = "time_varying"


@dataclass(frozen=True)
class ScmConfig:
    """Structural-model coefficients. Defaults are the reference experiment
    values; ``proxy_strength`` is either a fixed scalar b or ``"time_varying"``."""

    a: float = 0.88
    proxy_strength: float | str = TIME_VARYING
    s: float = 0.5
    tau: int = 100
    c1: float = 0.6
    c2: float = 0.2
    d1: float = 0.4
    d2: float = 0.8
    g: float = 0.5
    h: float = 0.5
    link: str = "nonlinear"
    noise_vars: tuple[float, float, float, float] = (0.5, 0.8, 0.7, 0.5)
    intervention_noise_var: float = 0.6
    n_steps: int = 1000
    z0: float = 0.1
    w0: float = 0.1
    y0: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.link not in LINKS:
            raise ValueError(f"link must be one of {LINKS}, got {self.link!r}")
        if self.n_steps < 2:
            raise ValueError("n_steps must be >= 2")
        if not (0 <= self.tau < self.n_steps):
            raise ValueError("tau must satisfy 0 <= tau < n_steps")
        if any(v < 0 for v in self.noise_vars) or self.intervention_noise_var < 0:
            raise ValueError("noise variances must be >= 0")
        if isinstance(self.proxy_strength, str) and self.proxy_strength != TIME_VARYING:
            raise ValueError(
                f"proxy_strength must be a number or {TIME_VARYING!r}, "
                f"got {self.proxy_strength!r}"
            )

    def proxy_series(self) -> np.ndarray:
        """Per-step proxy coefficient b_t of length n_steps."""
        if self.proxy_strength == TIME_VARYING:
            return time_varying_b(self.n_steps)
        return np.full(self.n_steps, float(self.proxy_strength))

    def to_kv(self) -> dict[str, str]:
        d = {
            "a": repr(self.a),
            "proxy_strength": str(self.proxy_strength),
            "s": repr(self.s),
            "tau": str(self.tau),
            "c1": repr(self.c1),
            "c2": repr(self.c2),
            "d1": repr(self.d1),
            "d2": repr(self.d2),
            "g": repr(self.g),
            "h": repr(self.h),
            "link": self.link,
            "noise_var_1": repr(self.noise_vars[0]),
            "noise_var_2": repr(self.noise_vars[1]),
            "noise_var_3": repr(self.noise_vars[2]),
            "noise_var_4": repr(self.noise_vars[3]),
            "intervention_noise_var": repr(self.intervention_noise_var),
            "n_steps": str(self.n_steps),
            "z0": repr(self.z0),
            "w0": repr(self.w0),
            "y0": repr(self.y0),
            "seed": str(self.seed),
        }
        return d

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ScmConfig":
        kv = dict(kv)
        kwargs = {}
        if "proxy_strength" in kv:
            raw = kv.pop("proxy_strength")
            kwargs["proxy_strength"] = raw if raw == TIME_VARYING else float(raw)
        noise = [kv.pop(f"noise_var_{j}", None) for j in (1, 2, 3, 4)]
        if any(v is not None for v in noise):
            default = cls().noise_vars
            kwargs["noise_vars"] = tuple(
                float(v) if v is not None else default[j] for j, v in enumerate(noise)
            )
        for name, conv in (
            ("a", float), ("s", float), ("tau", int), ("c1", float), ("c2", float),
            ("d1", float), ("d2", float), ("g", float), ("h", float), ("link", str),
            ("intervention_noise_var", float), ("n_steps", int), ("z0", float),
            ("w0", float), ("y0", float), ("seed", int),
        ):
            if name in kv:
                kwargs[name] = conv(kv.pop(name))
        if kv:
            raise ValueError(f"unknown config keys: {sorted(kv)}")
        return cls(**kwargs)


@dataclass
class ScmDataset:
    """Generated series plus ground-truth counterfactuals.

    ``y`` and ``y_hat`` share the e4 noise realization, so
    ``ite_true = y_hat - y`` is the deterministic causal contrast of the
    intervention.
    """

    z: np.ndarray
    x: np.ndarray
    w: np.ndarray
    y: np.ndarray
    w_hat: np.ndarray
    y_hat: np.ndarray
    ite_true: np.ndarray
    config: ScmConfig
    intervention_kind: str = "none"
    eps4: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.intervention_kind not in INTERVENTION_KINDS:
            raise ValueError(
                f"intervention_kind must be one of {INTERVENTION_KINDS}"
            )
        n = {len(s) for s in (self.z, self.x, self.w, self.y, self.w_hat,
                              self.y_hat, self.ite_true)}
        if len(n) != 1:
            raise ValueError("all series must have identical length")

    @property
    def n_steps(self) -> int:
        return len(self.z)


def time_varying_b(n_steps: int) -> np.ndarray:
    """Triangular proxy coefficient over ``n_steps``: rises linearly with
    slope 2/(N-2) to a peak of 1 near mid-series, then mirrors back down."""
    n = int(n_steps)
    if n < 4:
        raise ValueError("time-varying b requires n_steps >= 4")
    if n % 2 != 0:
        raise ValueError("time-varying b requires even n_steps")
    b = np.zeros(n)
    t = np.arange(1, n // 2)
    b[t] = 2.0 * t / (n - 2)
    upper = np.arange(n // 2, n)
    b[upper] = b[n - 1 - upper]
    return b


def _effect_recursion(cfg: ScmConfig, z: np.ndarray, w: np.ndarray,
                      eps4: np.ndarray) -> np.ndarray:
    y = np.empty(cfg.n_steps)
    prev = cfg.y0
    if cfg.link == "linear":
        drive = cfg.g * w
    else:
        drive = cfg.g * np.exp(cfg.h * w)
    for t in range(cfg.n_steps):
        prev = cfg.d1 * prev + cfg.d2 * z[t] + drive[t] + eps4[t]
        y[t] = prev
    return y


def generate(config: ScmConfig) -> ScmDataset:
    """Simulate the structural model. Deterministic given ``config.seed``."""
    cfg = config
    n = cfg.n_steps
    rng = np.random.default_rng(cfg.seed)
    sds = [np.sqrt(v) for v in cfg.noise_vars]
    e1 = rng.normal(0.0, sds[0], n)
    e2 = rng.normal(0.0, sds[1], n)
    e3 = rng.normal(0.0, sds[2], n)
    e4 = rng.normal(0.0, sds[3], n)

    z = np.empty(n)
    prev = cfg.z0
    for t in range(n):
        prev = cfg.a * prev + e1[t]
        z[t] = prev

    b = cfg.proxy_series()
    z_delayed = np.full(n, cfg.z0)
    if cfg.tau < n:
        z_delayed[cfg.tau :] = z[: n - cfg.tau]
    x = b * np.tanh(z_delayed) + cfg.s * e2

    w = np.empty(n)
    prev = cfg.w0
    for t in range(n):
        prev = cfg.c1 * prev + cfg.c2 * z[t] + e3[t]
        w[t] = prev

    y = _effect_recursion(cfg, z, w, e4)
    return ScmDataset(
        z=z, x=x, w=w, y=y,
        w_hat=w.copy(), y_hat=y.copy(), ite_true=np.zeros(n),
        config=cfg, intervention_kind="none", eps4=e4,
    )


def apply_intervention(data: ScmDataset, w_hat, kind: str) -> ScmDataset:
    """Return a copy of ``data`` with the cause replaced by ``w_hat``, the
    counterfactual effect regenerated under the stored e4 draws, and
    ``ite_true`` set to the resulting per-step contrast."""
    if kind not in ("knockoff", "gaussian_noise"):
        raise ValueError(f"kind must be 'knockoff' or 'gaussian_noise', got {kind!r}")
    w_hat = np.asarray(w_hat, dtype=np.float64).reshape(-1)
    if len(w_hat) != data.n_steps:
        raise ValueError(
            f"w_hat length {len(w_hat)} != dataset length {data.n_steps}"
        )
    if data.eps4 is None:
        raise ValueError("dataset carries no stored e4 draws")
    y_hat = _effect_recursion(data.config, data.z, w_hat, data.eps4)
    return ScmDataset(
        z=data.z.copy(), x=data.x.copy(), w=data.w.copy(), y=data.y.copy(),
        w_hat=w_hat.copy(), y_hat=y_hat, ite_true=y_hat - data.y,
        config=data.config, intervention_kind=kind, eps4=data.eps4.copy(),
    )


def gaussian_intervention(config: ScmConfig, seed: int) -> np.ndarray:
    """Draws from N(0, intervention_noise_var), one per step."""
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, np.sqrt(config.intervention_noise_var), config.n_steps)


def with_seed(config: ScmConfig, seed: int) -> ScmConfig:
    return replace(config, seed=seed)
