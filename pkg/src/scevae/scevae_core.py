"""Sequential causal-effect VAE core.

Six LSTM-parameterized conditional distributions over aligned time series
(proxy x, cause w, effect y, latent confounder z):

    f1  decoder   p(w_t | z_t)
    f2  decoder   p(x_t | z_t)       (Bernoulli logits for binary components)
    f3  decoder   p(y_t | w_t, z_t)
    f4  encoder   q(z_t | x_t, y_t, w_t)
    f5  auxiliary q(w_t | x_t)
    f6  auxiliary q(y_t | x_t, w_t)

Every head emits a per-step Gaussian (mean, variance); variances go through
softplus plus a floor and are never fixed. The training objective is the
negated variational bound: a lambda-weighted prior-regularization term plus
reconstruction terms, estimated with reparameterized posterior samples, plus
the two auxiliary prediction terms. ``elbo_and_grad`` implements the exact
reverse-mode gradient of that scalar.
"""

from __future__ import annotations

import copy as _copy
from dataclasses import dataclass, field

import numpy as np

from .recurrent import head_backward, head_forward, init_head

LOG_2PI = float(np.log(2.0 * np.pi))
HEAD_NAMES = ("f1", "f2", "f3", "f4", "f5", "f6")
CHECKPOINT_MAGIC = "scevae-checkpoint"
CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    """Raised when an objective term becomes non-finite."""


def softplus(u: np.ndarray) -> np.ndarray:
    """ln(1 + e^u), overflow-safe."""
    u = np.asarray(u, dtype=np.float64)
    return np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u)))


def softplus_inv(v: np.ndarray | float) -> np.ndarray | float:
    """Inverse of softplus for v > 0."""
    v = np.asarray(v, dtype=np.float64)
    out = v + np.log(-np.expm1(-v))
    return out if out.ndim else float(out)


def sigmoid(u: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * np.asarray(u, dtype=np.float64)) + 1.0)


@dataclass
class GaussianSequence:
    """Per-timestep Gaussian parameters: mean and variance, both (T, d)."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.variance = np.asarray(self.variance, dtype=np.float64)
        if self.mean.shape != self.variance.shape:
            raise ValueError(
                f"mean shape {self.mean.shape} != variance shape {self.variance.shape}"
            )
        if self.variance.size and not np.all(self.variance > 0):
            raise ValueError("variance must be strictly positive")

    def __len__(self) -> int:
        return self.mean.shape[0]


@dataclass
class ElboConfig:
    """Objective settings: KL weight, Monte-Carlo samples, variance floor."""

    lam: float = 0.1
    mc_samples: int = 1
    variance_floor: float = 1e-6

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")


@dataclass
class ScevaeParams:
    """All head weights plus architecture hyperparameters."""

    latent_dim: int = 5
    hidden: int = 32
    layers: int = 2
    proxy_dim: int = 1
    binary_proxy: np.ndarray | None = None
    arrays: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    trained: bool = False

    @classmethod
    def init(
        cls,
        seed: int = 0,
        latent_dim: int = 5,
        hidden: int = 32,
        layers: int = 2,
        proxy_dim: int = 1,
        binary_proxy: np.ndarray | None = None,
    ) -> "ScevaeParams":
        if binary_proxy is not None:
            binary_proxy = np.asarray(binary_proxy, dtype=bool)
            if binary_proxy.shape != (proxy_dim,):
                raise ValueError("binary_proxy mask must have shape (proxy_dim,)")
        n_bin = int(binary_proxy.sum()) if binary_proxy is not None else 0
        n_cont = proxy_dim - n_bin
        rng = np.random.default_rng(seed)
        arrays = {
            "f1": init_head(rng, latent_dim, hidden, layers, 1),
            "f2": init_head(rng, latent_dim, hidden, layers, n_cont, n_logit=n_bin),
            "f3": init_head(rng, 1 + latent_dim, hidden, layers, 1),
            "f4": init_head(rng, proxy_dim + 2, hidden, layers, latent_dim),
            "f5": init_head(rng, proxy_dim, hidden, layers, 1),
            "f6": init_head(rng, proxy_dim + 1, hidden, layers, 1),
        }
        return cls(latent_dim, hidden, layers, proxy_dim, binary_proxy, arrays)

    @property
    def n_binary(self) -> int:
        return int(self.binary_proxy.sum()) if self.binary_proxy is not None else 0

    def copy(self) -> "ScevaeParams":
        return ScevaeParams(
            self.latent_dim,
            self.hidden,
            self.layers,
            self.proxy_dim,
            None if self.binary_proxy is None else self.binary_proxy.copy(),
            _copy.deepcopy(self.arrays),
            self.trained,
        )

    def flat_items(self):
        """Deterministically ordered (head, key, array) triples."""
        for head in sorted(self.arrays):
            for key in sorted(self.arrays[head]):
                yield head, key, self.arrays[head][key]

    def zero_grads(self) -> dict[str, dict[str, np.ndarray]]:
        return {
            head: {key: np.zeros_like(arr) for key, arr in hd.items()}
            for head, hd in self.arrays.items()
        }

    def save(self, path) -> None:
        """Write a versioned, portable text checkpoint."""
        lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
        lines.append(f"latent_dim {self.latent_dim}")
        lines.append(f"hidden {self.hidden}")
        lines.append(f"layers {self.layers}")
        lines.append(f"proxy_dim {self.proxy_dim}")
        if self.binary_proxy is None:
            lines.append("binary_proxy none")
        else:
            lines.append(
                "binary_proxy " + ",".join("1" if b else "0" for b in self.binary_proxy)
            )
        lines.append(f"trained {int(self.trained)}")
        for head, key, arr in self.flat_items():
            shape = " ".join(str(n) for n in arr.shape)
            lines.append(f"array {head}.{key} {shape}")
            mat = np.atleast_2d(arr)
            for row in mat:
                lines.append(" ".join(format(v, ".17g") for v in row))
        lines.append("end")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ScevaeParams":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines or not lines[0].startswith(CHECKPOINT_MAGIC):
            raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} file")
        version = int(lines[0].split()[1])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta: dict[str, str] = {}
        arrays: dict[str, dict[str, np.ndarray]] = {}
        i = 1
        while i < len(lines):
            parts = lines[i].split()
            if parts[0] == "end":
                break
            if parts[0] == "array":
                name = parts[1]
                shape = tuple(int(n) for n in parts[2:])
                n_rows = shape[0] if len(shape) == 2 else 1
                rows = [
                    [float(v) for v in lines[i + 1 + r].split()] for r in range(n_rows)
                ]
                arr = np.asarray(rows, dtype=np.float64).reshape(shape)
                head, key = name.split(".")
                arrays.setdefault(head, {})[key] = arr
                i += 1 + n_rows
            else:
                meta[parts[0]] = parts[1]
                i += 1
        mask = None
        if meta.get("binary_proxy", "none") != "none":
            mask = np.array(
                [c == "1" for c in meta["binary_proxy"].split(",")], dtype=bool
            )
        return cls(
            latent_dim=int(meta["latent_dim"]),
            hidden=int(meta["hidden"]),
            layers=int(meta["layers"]),
            proxy_dim=int(meta["proxy_dim"]),
            binary_proxy=mask,
            arrays=arrays,
            trained=bool(int(meta.get("trained", "0"))),
        )


def _as_matrix(arr, name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim == 1:
        out = out[:, None]
    if out.ndim != 2:
        raise ValueError(f"{name} must be 1- or 2-dimensional")
    if out.size and not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains NaN or Inf")
    return out


def _check_aligned(*series: np.ndarray) -> int:
    lengths = {s.shape[0] for s in series}
    if len(lengths) > 1:
        raise ValueError(f"series lengths differ: {sorted(lengths)}")
    return lengths.pop()


def _head_gaussian(
    params: ScevaeParams, name: str, inp: np.ndarray, variance_floor: float
):
    mu, rawv, logits, cache = head_forward(params.arrays[name], inp)
    var = softplus(rawv) + variance_floor
    return mu, var, rawv, logits, cache


def encode(
    params: ScevaeParams,
    x,
    y,
    w,
    variance_floor: float = 1e-6,
) -> GaussianSequence:
    """Per-step posterior q(z_t | x_t, y_t, w_t)."""
    x = _as_matrix(x, "x")
    y = _as_matrix(y, "y")
    w = _as_matrix(w, "w")
    _check_aligned(x, y, w)
    inp = np.concatenate([x, y, w], axis=1)
    mu, var, _, _, _ = _head_gaussian(params, "f4", inp, variance_floor)
    return GaussianSequence(mu, var)


def decode_w(params: ScevaeParams, z, variance_floor: float = 1e-6) -> GaussianSequence:
    """Per-step p(w_t | z_t)."""
    z = _as_matrix(z, "z")
    mu, var, _, _, _ = _head_gaussian(params, "f1", z, variance_floor)
    return GaussianSequence(mu, var)


def decode_x(
    params: ScevaeParams, z, variance_floor: float = 1e-6
) -> tuple[GaussianSequence, np.ndarray | None]:
    """Per-step p(x_t | z_t): Gaussian for continuous components plus
    Bernoulli probabilities for binary components (None when there are none)."""
    z = _as_matrix(z, "z")
    mu, var, rawv, logits, _ = _head_gaussian(params, "f2", z, variance_floor)
    probs = sigmoid(logits) if logits is not None else None
    return GaussianSequence(mu, var), probs


def decode_y(
    params: ScevaeParams, w, z, variance_floor: float = 1e-6
) -> GaussianSequence:
    """Per-step p(y_t | w_t, z_t)."""
    w = _as_matrix(w, "w")
    z = _as_matrix(z, "z")
    _check_aligned(w, z)
    inp = np.concatenate([w, z], axis=1)
    mu, var, _, _, _ = _head_gaussian(params, "f3", inp, variance_floor)
    return GaussianSequence(mu, var)


def aux_w(params: ScevaeParams, x, variance_floor: float = 1e-6) -> GaussianSequence:
    """Per-step q(w_t | x_t)."""
    x = _as_matrix(x, "x")
    mu, var, _, _, _ = _head_gaussian(params, "f5", x, variance_floor)
    return GaussianSequence(mu, var)


def aux_y(params: ScevaeParams, x, w, variance_floor: float = 1e-6) -> GaussianSequence:
    """Per-step q(y_t | x_t, w_t)."""
    x = _as_matrix(x, "x")
    w = _as_matrix(w, "w")
    _check_aligned(x, w)
    inp = np.concatenate([x, w], axis=1)
    mu, var, _, _, _ = _head_gaussian(params, "f6", inp, variance_floor)
    return GaussianSequence(mu, var)


def _gauss_ll(target: np.ndarray, mu: np.ndarray, var: np.ndarray) -> np.ndarray:
    return -0.5 * ((target - mu) ** 2 / var + np.log(var) + LOG_2PI)


def _dgauss(target, mu, var, coeff):
    """Gradients of coeff * sum(gauss_ll) w.r.t. mu and var."""
    resid = target - mu
    dmu = coeff * resid / var
    dvar = coeff * 0.5 * (resid**2 / var - 1.0) / var
    return dmu, dvar


def _split_proxy(params: ScevaeParams, x: np.ndarray):
    if params.n_binary == 0:
        return x, None
    mask = params.binary_proxy
    return x[:, ~mask], x[:, mask]


def elbo(
    params: ScevaeParams,
    cfg: ElboConfig,
    x,
    w,
    y,
    rng: np.random.Generator,
) -> tuple[float, dict[str, float]]:
    """Training loss (negated variational bound) and per-term breakdown.

    The breakdown keys are loss contributions that sum to ``total``:
    ``kl`` (lambda-weighted prior regularization), ``recon_x``, ``recon_w``,
    ``recon_y`` and the auxiliary terms ``aux_w``, ``aux_y``.
    """
    loss, breakdown, _ = _elbo_impl(params, cfg, x, w, y, rng, want_grad=False)
    return loss, breakdown


def elbo_and_grad(
    params: ScevaeParams,
    cfg: ElboConfig,
    x,
    w,
    y,
    rng: np.random.Generator,
):
    """Like :func:`elbo` but also returns exact gradients for every array."""
    return _elbo_impl(params, cfg, x, w, y, rng, want_grad=True)


def _elbo_impl(params, cfg, x, w, y, rng, want_grad):
    x = _as_matrix(x, "x")
    w1 = _as_matrix(w, "w")
    y1 = _as_matrix(y, "y")
    T = _check_aligned(x, w1, y1)
    if x.shape[1] != params.proxy_dim:
        raise ValueError(f"x has {x.shape[1]} columns, expected {params.proxy_dim}")
    floor = cfg.variance_floor
    lam = cfg.lam
    S = cfg.mc_samples
    xc, xb = _split_proxy(params, x)

    mu5, v5, rv5, _, cache5 = _head_gaussian(params, "f5", x, floor)
    ll_aux_w = float(_gauss_ll(w1, mu5, v5).sum())
    in6 = np.concatenate([x, w1], axis=1)
    mu6, v6, rv6, _, cache6 = _head_gaussian(params, "f6", in6, floor)
    ll_aux_y = float(_gauss_ll(y1, mu6, v6).sum())

    enc_in = np.concatenate([x, y1, w1], axis=1)
    mu_z, var_z, rv_z, _, cache4 = _head_gaussian(params, "f4", enc_in, floor)
    sd_z = np.sqrt(var_z)

    sum_lp = sum_lq = sum_lx = sum_lw = sum_ly = 0.0
    samples = []
    for _ in range(S):
        eps = rng.standard_normal((T, params.latent_dim))
        z = mu_z + sd_z * eps
        mu1, v1, rv1, _, c1 = _head_gaussian(params, "f1", z, floor)
        mu2, v2, rv2, logits2, c2 = _head_gaussian(params, "f2", z, floor)
        in3 = np.concatenate([w1, z], axis=1)
        mu3, v3, rv3, _, c3 = _head_gaussian(params, "f3", in3, floor)

        llw = _gauss_ll(w1, mu1, v1).sum()
        llx = _gauss_ll(xc, mu2, v2).sum()
        if xb is not None:
            llx += (xb * logits2 - softplus(logits2)).sum()
        lly = _gauss_ll(y1, mu3, v3).sum()
        lp = -0.5 * (z**2 + LOG_2PI)
        lq = -0.5 * (eps**2 + np.log(var_z) + LOG_2PI)
        sum_lp += lp.sum()
        sum_lq += lq.sum()
        sum_lx += llx
        sum_lw += llw
        sum_ly += lly
        if want_grad:
            samples.append((eps, z, mu1, v1, rv1, c1, mu2, v2, rv2, logits2, c2, mu3, v3, rv3, c3))

    breakdown = {
        "kl": -lam * (sum_lp - sum_lq) / S,
        "recon_x": -sum_lx / S,
        "recon_w": -sum_lw / S,
        "recon_y": -sum_ly / S,
        "aux_w": -ll_aux_w,
        "aux_y": -ll_aux_y,
    }
    loss = float(sum(breakdown.values()))
    breakdown["total"] = loss
    for name, value in breakdown.items():
        if not np.isfinite(value):
            raise NumericalError(f"non-finite objective term '{name}'")
    if not want_grad:
        return loss, breakdown, None

    grads = params.zero_grads()

    def accumulate(head, new):
        acc = grads[head]
        for k, v in new.items():
            acc[k] += v

    coeff = -1.0 / S
    dmu_z = np.zeros_like(mu_z)
    dvar_z = np.zeros_like(var_z)
    for eps, z, mu1, v1, rv1, c1, mu2, v2, rv2, logits2, c2, mu3, v3, rv3, c3 in samples:
        dmu1, dv1 = _dgauss(w1, mu1, v1, coeff)
        g1, dz1 = head_backward(
            params.arrays["f1"], c1, dmu1, dv1 * sigmoid(rv1)
        )
        accumulate("f1", g1)

        dmu2, dv2 = _dgauss(xc, mu2, v2, coeff)
        dlogits = coeff * (xb - sigmoid(logits2)) if xb is not None else None
        g2, dz2 = head_backward(
            params.arrays["f2"], c2, dmu2, dv2 * sigmoid(rv2), dlogits
        )
        accumulate("f2", g2)

        dmu3, dv3 = _dgauss(y1, mu3, v3, coeff)
        g3, din3 = head_backward(
            params.arrays["f3"], c3, dmu3, dv3 * sigmoid(rv3)
        )
        accumulate("f3", g3)

        dz = dz1 + dz2 + din3[:, 1:] + coeff * lam * (-z)
        dmu_z += dz
        dvar_z += dz * eps / (2.0 * sd_z)

    dvar_z += -lam / (2.0 * var_z)
    g4, _ = head_backward(params.arrays["f4"], cache4, dmu_z, dvar_z * sigmoid(rv_z))
    accumulate("f4", g4)

    dmu5, dv5 = _dgauss(w1, mu5, v5, -1.0)
    g5, _ = head_backward(params.arrays["f5"], cache5, dmu5, dv5 * sigmoid(rv5))
    accumulate("f5", g5)

    dmu6, dv6 = _dgauss(y1, mu6, v6, -1.0)
    g6, _ = head_backward(params.arrays["f6"], cache6, dmu6, dv6 * sigmoid(rv6))
    accumulate("f6", g6)

    return loss, breakdown, grads
