"""Training loop: mixed-label L1 loss, AdamW, warmup+cosine schedule, EMA.

The recipe: per-epoch shuffled mini-batches; inputs are compressed once up
front; augmentations run per batch in the order drop, shift, mixup; the
loss is the lambda-weighted L1 to both mixup labels; AdamW with decoupled
weight decay (matrices only — norm gains and biases are exempt); a cosine
learning-rate schedule with linear warmup, stepped once per epoch; and an
exponential moving average of the weights, also per epoch by default,
which is what evaluation uses.

Everything is deterministic given TrainConfig.seed: initialization,
shuffling, and augmentation draws run on separate child streams, so
toggling one augmentation does not reshuffle the data.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, drop_rows, shift_rows, srm_mixup_batch
from .compression import CompressionParams, compress_matrix
from .dataio import PdpMatrix, labels_array, powers_array
from .model import ModelConfig, ModelParams, clone_params, forward, init_params, named_params
from .tensor import Tensor
from .tokenizer import tokenize_batch

__all__ = [
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "lr_at",
    "srm_loss",
    "srm_loss_batch",
    "AdamW",
    "Ema",
    "ema_update",
    "train",
    "write_training_log",
]


class TrainingDivergedError(RuntimeError):
    """Raised when a loss or gradient turns non-finite; carries the step."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 400
    lr_min: float = 1e-5
    lr_max: float = 2e-3
    warmup_fraction: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.001
    ema_alpha: float = 0.9
    ema_per_step: bool = False
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.lr_min <= self.lr_max:
            raise ValueError("need 0 <= lr_min <= lr_max")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if not 0.0 <= self.ema_alpha < 1.0:
            raise ValueError("ema_alpha must be in [0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be 'float64' or 'float32'")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Schedule value for one step (epochs, at the default granularity).

    Linear ramp from lr_min reaching lr_max exactly at the end of warmup
    (ceil(warmup_fraction * total) steps), then cosine decay that lands on
    lr_min exactly at the final step.
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warmup = math.ceil(cfg.warmup_fraction * total_steps)
    span = cfg.lr_max - cfg.lr_min
    if step < warmup:
        return cfg.lr_min + span * (step / warmup)
    progress = (step - warmup) / max(1, total_steps - 1 - warmup)
    return cfg.lr_min + 0.5 * span * (1.0 + math.cos(math.pi * progress))


def srm_loss_batch(pred: Tensor, y_a: np.ndarray, y_b: np.ndarray, lam: np.ndarray) -> Tensor:
    """Mean over the batch of lam * |pred - y_a|_1 + (1 - lam) * |pred - y_b|_1."""
    dtype = pred.data.dtype
    b = pred.shape[0]
    lam = np.asarray(lam, dtype=dtype)
    la = T.reduce_sum(T.absolute(T.sub(pred, Tensor(np.asarray(y_a, dtype=dtype)))), axis=-1)
    lb = T.reduce_sum(T.absolute(T.sub(pred, Tensor(np.asarray(y_b, dtype=dtype)))), axis=-1)
    mixed = T.add(T.hadamard(la, Tensor(lam)), T.hadamard(lb, Tensor(1.0 - lam)))
    return T.scale(T.reduce_sum(mixed), 1.0 / b)


def srm_loss(pred: Tensor, y_a, y_b, lam: float) -> Tensor:
    """Single-sample form; lam = 1 for unmixed samples."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be in [0, 1]")
    flat = T.reshape(pred, (1, pred.data.size))
    return srm_loss_batch(
        flat,
        np.asarray(y_a).reshape(1, -1),
        np.asarray(y_b).reshape(1, -1),
        np.array([lam]),
    )


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    Decay applies to matrix-shaped parameters only (ndim >= 2): weights,
    the embedding, the class token, and the positional table. Norm gains
    and biases (1D) are exempt.
    """

    def __init__(self, params: list[tuple[str, Tensor]], cfg: TrainConfig):
        self.cfg = cfg
        self.named = params
        self.step_count = 0
        self.m = [np.zeros_like(t.data) for _, t in params]
        self.v = [np.zeros_like(t.data) for _, t in params]

    def step(self, lr: float) -> float:
        """Apply one update; returns the global gradient norm."""
        cfg = self.cfg
        self.step_count += 1
        tstep = self.step_count
        sq_norm = 0.0
        for (name, t), m, v in zip(self.named, self.m, self.v):
            if t.grad is None:
                raise ValueError(f"parameter {name} has no gradient")
            g = t.grad
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError(
                    f"non-finite gradient in {name} at optimizer step {tstep}", step=tstep
                )
            sq_norm += float(np.vdot(g, g))
            m += (1.0 - cfg.beta1) * (g - m)
            v += (1.0 - cfg.beta2) * (g * g - v)
            mhat = m / (1.0 - cfg.beta1**tstep)
            vhat = v / (1.0 - cfg.beta2**tstep)
            t.data -= lr * (mhat / (np.sqrt(vhat) + cfg.eps))
            if cfg.weight_decay and t.data.ndim >= 2:
                t.data -= lr * cfg.weight_decay * t.data
        return math.sqrt(sq_norm)

    def zero_grad(self) -> None:
        for _, t in self.named:
            t.grad = None


def ema_update(shadow: np.ndarray, value: np.ndarray, alpha: float) -> np.ndarray:
    """One exponential-moving-average step: alpha*shadow + (1-alpha)*value."""
    return alpha * shadow + (1.0 - alpha) * value


class Ema:
    """Shadow copy of the parameters, initialized to their starting values."""

    def __init__(self, params: list[tuple[str, Tensor]], alpha: float):
        self.alpha = alpha
        self.named = params
        self.shadow = [t.data.copy() for _, t in params]

    def update(self) -> None:
        for i, (_, t) in enumerate(self.named):
            self.shadow[i] = ema_update(self.shadow[i], t.data, self.alpha)


@dataclass
class TrainResult:
    params: ModelParams
    ema_params: ModelParams
    loss_history: list[float] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)
    grad_norm_history: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0


def train(
    dataset: list[PdpMatrix],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    aug_cfg: AugmentConfig | None = None,
    comp: CompressionParams | None = None,
) -> TrainResult:
    """Optimize a freshly initialized model on `dataset`.

    Returns both raw and EMA weights plus per-epoch histories (mean batch
    loss, learning rate, mean gradient norm).
    """
    if not dataset:
        raise ValueError("empty dataset")
    aug_cfg = aug_cfg or AugmentConfig()
    comp = comp or CompressionParams()
    dtype = train_cfg.np_dtype

    sample_rate = 1.0 / dataset[0].sample_period
    inputs = compress_matrix(powers_array(dataset).astype(np.float64), comp).astype(dtype)
    labels = labels_array(dataset).astype(dtype)
    n = inputs.shape[0]

    init_seed, shuffle_seed, aug_seed = (
        int(s) for s in np.random.SeedSequence(train_cfg.seed).generate_state(3)
    )
    params = init_params(model_cfg, seed=init_seed, dtype=dtype)
    # Start the head at the training-label centroid. Adam moves each
    # parameter by roughly the learning rate per step, so asking it to
    # carry the output bias tens of meters from zero would eat the whole
    # step budget of a short run before any input-dependent fitting.
    params.head_b.data = labels.mean(axis=0).astype(dtype)
    named = named_params(params)
    opt = AdamW(named, train_cfg)
    ema = Ema(named, train_cfg.ema_alpha)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    aug_rng = np.random.default_rng(aug_seed)

    result = TrainResult(params=params, ema_params=params)  # ema replaced below
    start = time.perf_counter()
    step_index = 0
    for epoch in range(train_cfg.epochs):
        lr = lr_at(epoch, train_cfg.epochs, train_cfg)
        order = shuffle_rng.permutation(n)
        losses: list[float] = []
        gnorms: list[float] = []
        for lo in range(0, n, train_cfg.batch_size):
            idx = order[lo : lo + train_cfg.batch_size]
            xb = inputs[idx]
            yb_a = labels[idx]
            if aug_cfg.enable_drop:
                xb = drop_rows(xb, aug_rng, aug_cfg)
            if aug_cfg.enable_shift:
                xb = shift_rows(xb, aug_rng, aug_cfg, sample_rate)
            if aug_cfg.enable_mixup:
                xb, ya, ybm, lam = srm_mixup_batch(xb, yb_a, aug_rng, aug_cfg)
                yb_a, yb_b = ya.astype(dtype), ybm.astype(dtype)
            else:
                yb_b = yb_a
                lam = np.ones(len(idx), dtype=dtype)
            tokens = tokenize_batch(xb, model_cfg.tokenizer)
            pred, _ = forward(params, model_cfg, tokens)
            loss = srm_loss_batch(pred, yb_a, yb_b, lam)
            step_index += 1
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise TrainingDivergedError(
                    f"non-finite loss {loss_val} at step {step_index} (epoch {epoch})",
                    step=step_index,
                )
            loss.backward()
            gnorms.append(opt.step(lr))
            opt.zero_grad()
            losses.append(loss_val)
            if train_cfg.ema_per_step:
                ema.update()
        if not train_cfg.ema_per_step:
            ema.update()
        result.loss_history.append(float(np.mean(losses)))
        result.lr_history.append(lr)
        result.grad_norm_history.append(float(np.mean(gnorms)))
    result.wall_time_s = time.perf_counter() - start
    result.ema_params = clone_params(params, ema.shadow)
    return result


def write_training_log(path: str | Path, result: TrainResult) -> None:
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "lr", "loss", "grad_norm"])
        rows = zip(result.lr_history, result.loss_history, result.grad_norm_history)
        for epoch, (lr, loss, gn) in enumerate(rows):
            writer.writerow([epoch, repr(lr), repr(loss), repr(gn)])
