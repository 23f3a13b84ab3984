"""2D localization-error statistics, CDFs, and sensor-attention summaries.

The headline metric is the per-sample Euclidean distance between the
predicted and true device position, summarized by its mean and the 50th,
67th, 80th, and 90th percentiles (the latter written d90 here). Quantiles
use linear interpolation between order statistics. Evaluation always runs
on the EMA weights of a checkpoint.

For sensor-aligned tokens (the one-token-per-sensor layout) the attention
maps admit a direct physical reading: averaging each layer's maps over
samples, heads, and query rows gives one non-negative score per sensor,
summing to one — how much of the layer's attention budget lands on that
sensor.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .compression import CompressionParams, compress_matrix
from .dataio import PdpMatrix, labels_array, powers_array
from .model import Checkpoint, ModelConfig, ModelParams, average_attention, forward, named_params

__all__ = [
    "ErrorSummary",
    "percentile",
    "improvement_pct",
    "summarize_errors",
    "predict",
    "evaluate_params",
    "evaluate",
    "sensor_attention_report",
    "write_errors_csv",
    "write_summary_csv",
    "write_attention_csv",
    "write_cdf_svg",
]

PERCENTILE_LEVELS = (50.0, 67.0, 80.0, 90.0)


def percentile(errors: np.ndarray, q: float) -> float:
    """Quantile with linear interpolation between order statistics.

    E.g. q=90 over {1..10} -> 9.1; q=50 over {0, 10} -> 5.0.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("cannot take a percentile of zero errors")
    if not 0.0 < q < 100.0:
        raise ValueError(f"percentile level must be in (0, 100), got {q}")
    return float(np.percentile(errors, q, method="linear"))


def improvement_pct(a: float, b: float) -> float:
    """Percentage improvement of error `a` over baseline error `b`."""
    if b <= 0:
        raise ValueError(f"baseline must be > 0, got {b}")
    return 100.0 * (b - a) / b


@dataclass(frozen=True)
class ErrorSummary:
    """Per-sample 2D errors (meters) with their summary statistics."""

    errors: np.ndarray  # [n_samples] float64, >= 0
    mean: float
    std: float
    d50: float
    d67: float
    d80: float
    d90: float
    cdf: np.ndarray  # [n_samples, 2] (sorted error, cumulative fraction)

    @property
    def n_samples(self) -> int:
        return self.errors.size

    def as_dict(self) -> dict[str, float]:
        return {
            "count": float(self.n_samples),
            "mean_m": self.mean,
            "std_m": self.std,
            "d50_m": self.d50,
            "d67_m": self.d67,
            "d80_m": self.d80,
            "d90_m": self.d90,
        }


def summarize_errors(errors: np.ndarray) -> ErrorSummary:
    errors = np.asarray(errors, dtype=np.float64)
    if errors.ndim != 1 or errors.size == 0:
        raise ValueError(f"expected a non-empty 1D error array, got shape {errors.shape}")
    if float(errors.min()) < 0:
        raise ValueError("errors must be non-negative")
    ordered = np.sort(errors)
    n = errors.size
    cdf = np.column_stack([ordered, np.arange(1, n + 1) / n])
    d50, d67, d80, d90 = (percentile(errors, q) for q in PERCENTILE_LEVELS)
    return ErrorSummary(
        errors=errors,
        mean=float(errors.mean()),
        std=float(errors.std()),
        d50=d50,
        d67=d67,
        d80=d80,
        d90=d90,
        cdf=cdf,
    )


def predict(
    params: ModelParams,
    config: ModelConfig,
    dataset: list[PdpMatrix],
    comp: CompressionParams | None = None,
    batch_size: int = 256,
) -> np.ndarray:
    """Model positions for every sample, [n_samples, 2] float64.

    Inputs are compressed with `comp` and cast to the parameter dtype, so
    results are independent of how samples are batched.
    """
    if not dataset:
        raise ValueError("empty dataset")
    comp = comp or CompressionParams()
    shape = dataset[0].powers.shape
    if shape != (config.n_sensors, config.n_time_samples):
        raise ValueError(
            f"dataset samples are {shape}, model expects "
            f"({config.n_sensors}, {config.n_time_samples})"
        )
    dtype = named_params(params)[0][1].data.dtype
    x = compress_matrix(powers_array(dataset).astype(np.float64), comp).astype(dtype)
    preds = np.empty((len(dataset), 2), dtype=np.float64)
    for lo in range(0, len(dataset), batch_size):
        out, _ = forward(params, config, x[lo : lo + batch_size])
        preds[lo : lo + batch_size] = out.data.astype(np.float64)
    return preds


def evaluate_params(
    params: ModelParams,
    config: ModelConfig,
    dataset: list[PdpMatrix],
    comp: CompressionParams | None = None,
    batch_size: int = 256,
) -> ErrorSummary:
    """Error summary for a specific parameter set (no EMA indirection)."""
    preds = predict(params, config, dataset, comp, batch_size)
    labels = labels_array(dataset).astype(np.float64)
    errors = np.linalg.norm(preds - labels, axis=1)
    return summarize_errors(errors)


def evaluate(
    checkpoint: Checkpoint,
    dataset: list[PdpMatrix],
    comp: CompressionParams | None = None,
    batch_size: int = 256,
) -> ErrorSummary:
    """Error summary for a checkpoint, using its EMA weights."""
    return evaluate_params(checkpoint.ema_params, checkpoint.config, dataset, comp, batch_size)


def sensor_attention_report(
    params: ModelParams,
    config: ModelConfig,
    dataset: list[PdpMatrix],
    comp: CompressionParams | None = None,
    layers: list[int] | None = None,
    batch_size: int = 64,
) -> dict[int, np.ndarray]:
    """Per-layer attention mass per sensor, averaged over samples, heads,
    and query rows. Requires sensor-aligned tokens (tokenizer kind 'sst'),
    where key j of every attention map is exactly sensor j.

    When a class token is present its column is dropped and the remaining
    sensor scores are renormalized, so every returned vector sums to 1.
    """
    if config.tokenizer.kind != "sst":
        raise ValueError(
            f"sensor attention needs sensor-aligned tokens, got {config.tokenizer.kind!r}"
        )
    if not dataset:
        raise ValueError("empty dataset")
    layers = list(range(config.n_layers)) if layers is None else list(layers)
    for layer in layers:
        if not 0 <= layer < config.n_layers:
            raise ValueError(f"layer {layer} out of range [0, {config.n_layers})")
    comp = comp or CompressionParams()
    dtype = named_params(params)[0][1].data.dtype
    x = compress_matrix(powers_array(dataset).astype(np.float64), comp).astype(dtype)
    totals = {layer: np.zeros(config.seq_len, dtype=np.float64) for layer in layers}
    n = len(dataset)
    for lo in range(0, n, batch_size):
        xb = x[lo : lo + batch_size]
        _, record = forward(params, config, xb, capture_attention=True)
        for layer in layers:
            # average_attention averages over the batch too; reweight so
            # uneven final batches still average over samples uniformly.
            totals[layer] += average_attention(record, layer) * (xb.shape[0] / n)
    report: dict[int, np.ndarray] = {}
    for layer in layers:
        scores = totals[layer][: config.token_count]  # drop the class column if any
        report[layer] = scores / scores.sum()
    return report


# ---------------------------------------------------------------------------
# artifact writers


def write_errors_csv(
    path: str | Path,
    dataset: list[PdpMatrix],
    preds: np.ndarray,
    errors: np.ndarray,
) -> None:
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "x", "y", "x_hat", "y_hat", "error_m"])
        for i, sample in enumerate(dataset):
            writer.writerow(
                [
                    i,
                    repr(float(sample.label[0])),
                    repr(float(sample.label[1])),
                    repr(float(preds[i, 0])),
                    repr(float(preds[i, 1])),
                    repr(float(errors[i])),
                ]
            )


def write_summary_csv(path: str | Path, summary: ErrorSummary) -> None:
    stats = summary.as_dict()
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(list(stats))
        writer.writerow([repr(v) for v in stats.values()])


def write_attention_csv(path: str | Path, scores: np.ndarray) -> None:
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sensor", "score"])
        for i, s in enumerate(np.asarray(scores)):
            writer.writerow([i, repr(float(s))])


def write_cdf_svg(path: str | Path, summary: ErrorSummary, title: str = "Localization error CDF") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.step(summary.cdf[:, 0], summary.cdf[:, 1], where="post")
    ax.axvline(summary.d90, linestyle="--", linewidth=0.8, color="gray")
    ax.set_xlabel("2D error (m)")
    ax.set_ylabel("CDF")
    ax.set_ylim(0, 1.02)
    ax.set_title(f"{title} (d90 = {summary.d90:.3f} m)")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
