"""Data splitting, normalization, window batching, and optimization.

Splits are contiguous and unshuffled: the last ``test_fraction`` of every
variable is held out, then the last ``val_fraction`` of the remainder.
Normalization statistics come from the training portion only. Training
draws uniformly random contiguous windows from the training segment and
takes one adaptive-moment gradient step per window with decoupled weight
decay; checkpoint selection is by validation loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import causal_eval, scevae_core
from .dataio import DataError
from .scevae_core import ElboConfig, NumericalError, ScevaeParams

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Optimization settings. The defaults follow the reference protocol:
    100-step windows, learning rate 1e-5, weight decay 1e-3, KL weight 0.1,
    a budget of 100 windows (one per epoch), early stopping patience 20."""

    window_len: int = 100
    windows_per_epoch: int = 1
    epochs: int = 100
    learning_rate: float = 1e-5
    weight_decay: float = 1e-3
    seed: int = 0
    elbo: ElboConfig = field(default_factory=ElboConfig)
    patience: int = 20
    replications: int = 5
    grad_clip: float = 5.0

    def to_kv(self) -> dict[str, str]:
        return {
            "window_len": str(self.window_len),
            "windows_per_epoch": str(self.windows_per_epoch),
            "epochs": str(self.epochs),
            "learning_rate": repr(self.learning_rate),
            "weight_decay": repr(self.weight_decay),
            "seed": str(self.seed),
            "lambda": repr(self.elbo.lam),
            "mc_samples": str(self.elbo.mc_samples),
            "variance_floor": repr(self.elbo.variance_floor),
            "patience": str(self.patience),
            "replications": str(self.replications),
            "grad_clip": repr(self.grad_clip),
        }

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "TrainConfig":
        kv = dict(kv)
        elbo = ElboConfig(
            lam=float(kv.pop("lambda", 0.1)),
            mc_samples=int(kv.pop("mc_samples", 1)),
            variance_floor=float(kv.pop("variance_floor", 1e-6)),
        )
        kwargs = {"elbo": elbo}
        for name, conv in (
            ("window_len", int), ("windows_per_epoch", int), ("epochs", int),
            ("learning_rate", float), ("weight_decay", float), ("seed", int),
            ("patience", int), ("replications", int), ("grad_clip", float),
        ):
            if name in kv:
                kwargs[name] = conv(kv.pop(name))
        if kv:
            raise ValueError(f"unknown training config keys: {sorted(kv)}")
        return cls(**kwargs)


@dataclass
class SplitSpec:
    """Contiguous split fractions; test is taken from the end of the series,
    validation from the end of what remains."""

    test_fraction: float = 0.10
    val_fraction: float = 0.10

    def __post_init__(self):
        if not (0 < self.test_fraction < 1 and 0 <= self.val_fraction < 1):
            raise ValueError("split fractions must lie in (0, 1)")


@dataclass
class SplitStats:
    """Per-variable normalization statistics from the training portion."""

    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]

    def normalize(self, name: str, arr: np.ndarray) -> np.ndarray:
        return (np.asarray(arr, dtype=np.float64) - self.mean[name]) / self.std[name]

    def denormalize(self, name: str, arr: np.ndarray) -> np.ndarray:
        return np.asarray(arr, dtype=np.float64) * self.std[name] + self.mean[name]


@dataclass
class SplitData:
    train: dict[str, np.ndarray]
    val: dict[str, np.ndarray]
    test: dict[str, np.ndarray]
    stats: SplitStats
    n_train: int
    n_val: int
    n_test: int


def split_and_normalize(
    series: dict[str, np.ndarray], spec: SplitSpec = SplitSpec()
) -> SplitData:
    """Split every variable contiguously and normalize with train statistics.

    Raises on zero-variance variables (undefined normalization).
    """
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in series.items()}
    lengths = {v.shape[0] for v in arrays.values()}
    if len(lengths) != 1:
        raise DataError(f"series lengths differ: {sorted(lengths)}")
    n = lengths.pop()
    n_test = int(round(n * spec.test_fraction))
    n_val = int(round((n - n_test) * spec.val_fraction))
    n_train = n - n_test - n_val
    if min(n_train, n_val, n_test) < 1:
        raise DataError(f"series of length {n} is too short for the split")
    mean: dict[str, np.ndarray] = {}
    std: dict[str, np.ndarray] = {}
    for name, arr in arrays.items():
        head = arr[:n_train]
        mean[name] = head.mean(axis=0)
        std[name] = head.std(axis=0)
        if np.any(std[name] == 0):
            raise DataError(f"variable {name!r} has zero variance on the train split")
    stats = SplitStats(mean, std)
    segments = {
        "train": slice(0, n_train),
        "val": slice(n_train, n_train + n_val),
        "test": slice(n_train + n_val, n),
    }
    parts = {
        seg: {name: stats.normalize(name, arr[sl]) for name, arr in arrays.items()}
        for seg, sl in segments.items()
    }
    return SplitData(parts["train"], parts["val"], parts["test"], stats,
                     n_train, n_val, n_test)


def sample_window(segment_len: int, window_len: int, rng: np.random.Generator) -> slice:
    """Uniformly random contiguous window of exact length ``window_len``."""
    if window_len < 1:
        raise ValueError("window_len must be >= 1")
    if window_len > segment_len:
        raise ValueError(
            f"window_len {window_len} exceeds segment length {segment_len}"
        )
    start = int(rng.integers(0, segment_len - window_len + 1))
    return slice(start, start + window_len)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    rmse_y_train: float
    rmse_y_test: float


@dataclass
class TrainResult:
    params: ScevaeParams
    history: list[EpochRecord]
    best_epoch: int
    best_val_loss: float
    diverged: bool = False
    clip_events: int = 0


class _Adam:
    """Adaptive-moment optimizer with decoupled weight decay and global-norm
    gradient clipping."""

    def __init__(self, params: ScevaeParams, lr: float, weight_decay: float,
                 clip: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.wd = weight_decay
        self.clip = clip
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {(h, k): np.zeros_like(a) for h, k, a in params.flat_items()}
        self.v = {(h, k): np.zeros_like(a) for h, k, a in params.flat_items()}

    def step(self, params: ScevaeParams, grads) -> bool:
        self.t += 1
        gsq = 0.0
        for head, key, _ in params.flat_items():
            gsq += float(np.sum(grads[head][key] ** 2))
        gnorm = np.sqrt(gsq)
        clipped = self.clip > 0 and gnorm > self.clip
        scale = self.clip / gnorm if clipped else 1.0
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for head, key, arr in params.flat_items():
            g = grads[head][key] * scale
            m = self.m[(head, key)]
            v = self.v[(head, key)]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g**2
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            arr -= self.lr * (update + self.wd * arr)
        return clipped


def _segment_loss(params, cfg, segment, seed) -> float:
    loss, _ = scevae_core.elbo(
        params, cfg.elbo, segment["x"], segment["w"], segment["y"],
        np.random.default_rng(seed),
    )
    return loss


def _factual_rmse(params, segment, floor) -> float:
    branch = causal_eval.infer_factual(
        params, segment["x"], segment["w"], variance_floor=floor
    )
    return causal_eval.rmse_factual(segment["y"], branch)


def train(params: ScevaeParams, config: TrainConfig, data: SplitData) -> TrainResult:
    """Optimize ``params`` in place on the training segment.

    Returns the best-validation checkpoint together with the per-epoch
    history (train/val loss and factual reconstruction RMSE on the train and
    test segments). On divergence the last finite checkpoint is returned
    with ``diverged`` set.
    """
    rng = np.random.default_rng(config.seed)
    eval_seed = config.seed + 0x5EED
    opt = _Adam(params, config.learning_rate, config.weight_decay, config.grad_clip)
    seg_len = data.train["w"].shape[0]
    history: list[EpochRecord] = []
    best = params.copy()
    best_val = np.inf
    best_epoch = -1
    clip_events = 0
    diverged = False
    floor = config.elbo.variance_floor
    since_best = 0
    for epoch in range(config.epochs):
        losses = []
        try:
            for _ in range(config.windows_per_epoch):
                win = sample_window(seg_len, config.window_len, rng)
                loss, _, grads = scevae_core.elbo_and_grad(
                    params, config.elbo,
                    data.train["x"][win], data.train["w"][win], data.train["y"][win],
                    rng,
                )
                losses.append(loss)
                if opt.step(params, grads):
                    clip_events += 1
                    logger.debug("gradient clipped at epoch %d", epoch)
            val_loss = _segment_loss(params, config, data.val, eval_seed)
        except NumericalError as exc:
            logger.warning("training diverged at epoch %d: %s", epoch, exc)
            diverged = True
            break
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            val_loss=val_loss,
            rmse_y_train=_factual_rmse(params, data.train, floor),
            rmse_y_test=_factual_rmse(params, data.test, floor),
        )
        history.append(record)
        if val_loss < best_val:
            best_val = val_loss
            best = params.copy()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if config.patience > 0 and since_best >= config.patience:
                logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    if best_epoch < 0:
        best = params.copy()
        best_epoch = 0
        best_val = history[0].val_loss if history else np.inf
    best.trained = True
    return TrainResult(best, history, best_epoch, best_val,
                       diverged=diverged, clip_events=clip_events)


def write_history_csv(history: list[EpochRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_loss,rmse_y_train,rmse_y_test\n")
        for rec in history:
            fh.write(
                f"{rec.epoch},{rec.train_loss:.17g},{rec.val_loss:.17g},"
                f"{rec.rmse_y_train:.17g},{rec.rmse_y_test:.17g}\n"
            )


def desk_config(seed: int = 0, **overrides) -> TrainConfig:
    """Budget tuned for CPU-scale reproduction runs: more windows and a
    larger step size than the reference protocol, same objective."""
    cfg = TrainConfig(
        windows_per_epoch=25,
        epochs=40,
        learning_rate=2e-3,
        seed=seed,
        patience=10,
    )
    return replace(cfg, **overrides) if overrides else cfg
