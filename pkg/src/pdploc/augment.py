"""Training-time RF augmentations on PDP batches.

Three independent effects, applied to model inputs (post-compression):

  drop    zero out D = round(d_max * beta) whole sensor rows per sample,
          beta ~ Beta(0.1, 0.1), so roughly 39% of samples lose nothing
          and 39% lose the maximum — sensor outages at both extremes.
  shift   circularly shift each sensor row by k = round(delta * f_s) bins,
          delta ~ truncated normal (zero mean, sigma 25 ns, limits +-2
          sigma) — timing jitter. Row power is preserved exactly.
  mixup   convex-combine each sample with a batch partner drawn with
          probability proportional to exp(-d^2 / (2 sigma_mix^2)), where
          d is the distance between the two device positions, self
          included; lambda ~ Beta(2, 2). The loss then mixes the two
          labels with the same lambda.

The array functions operate on [batch, n_sensors, n_time] stacks; the
PdpMatrix wrappers handle single samples. Everything is deterministic
given the Generator passed in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .dataio import PdpMatrix

__all__ = [
    "AugmentConfig",
    "drop_count",
    "drop_rows",
    "apply_row_shifts",
    "shift_rows",
    "mixup_weights",
    "srm_mixup_batch",
    "random_drop",
    "random_shift",
    "srm_mixup",
]


@dataclass(frozen=True)
class AugmentConfig:
    d_max: int = 7
    drop_beta: tuple[float, float] = (0.1, 0.1)
    shift_sigma: float = 25e-9  # seconds
    mix_sigma_sq: float = 4.0  # meters^2
    mix_lambda: tuple[float, float] = (2.0, 2.0)
    enable_drop: bool = True
    enable_shift: bool = True
    enable_mixup: bool = True

    def __post_init__(self) -> None:
        if self.d_max < 0:
            raise ValueError("d_max must be >= 0")
        if self.shift_sigma < 0:
            raise ValueError("shift_sigma must be >= 0")
        if self.mix_sigma_sq <= 0:
            raise ValueError("mix_sigma_sq must be > 0")
        if min(self.drop_beta) <= 0 or min(self.mix_lambda) <= 0:
            raise ValueError("beta distribution parameters must be > 0")


def drop_count(beta: float, d_max: int) -> int:
    """Continuous Beta draw -> number of rows to drop."""
    return int(np.rint(d_max * beta))


def drop_rows(powers: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Zero out randomly chosen sensor rows of each sample in the stack."""
    x = np.array(powers)  # copy, input untouched
    batched = x.ndim == 3
    if not batched:
        x = x[None]
    n_sensors = x.shape[1]
    if cfg.d_max > n_sensors:
        raise ValueError(f"d_max={cfg.d_max} exceeds sensor count {n_sensors}")
    a, b = cfg.drop_beta
    for i in range(x.shape[0]):
        n_drop = drop_count(rng.beta(a, b), cfg.d_max)
        if n_drop:
            rows = rng.choice(n_sensors, size=n_drop, replace=False)
            x[i, rows] = 0.0
    return x if batched else x[0]


_TN_LO = float(ndtr(-2.0))
_TN_HI = float(ndtr(2.0))


def _truncated_normal(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    """Zero-mean normal with std parameter sigma, truncated to +-2 sigma,
    sampled through the inverse CDF."""
    u = rng.uniform(_TN_LO, _TN_HI, size=shape)
    return ndtri(u) * sigma


def apply_row_shifts(powers: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Circularly shift row (i, s) right by k[i, s] bins (numpy roll
    convention: positive k moves content toward later delay)."""
    x = np.asarray(powers)
    t = x.shape[-1]
    cols = (np.arange(t)[None, None, :] - np.asarray(k)[:, :, None]) % t
    return np.take_along_axis(x, cols, axis=-1)


def shift_rows(
    powers: np.ndarray,
    rng: np.random.Generator,
    cfg: AugmentConfig,
    sample_rate: float,
) -> np.ndarray:
    """Circularly shift every sensor row by an independently drawn integer
    number of bins; total power per row is untouched."""
    x = np.asarray(powers)
    batched = x.ndim == 3
    if not batched:
        x = x[None]
    b, s, t = x.shape
    if cfg.shift_sigma == 0:
        out = x.copy()
        return out if batched else out[0]
    delta = _truncated_normal(rng, (b, s), cfg.shift_sigma)
    k = np.rint(delta * sample_rate).astype(np.int64)  # bins, sign = later arrival
    out = apply_row_shifts(x, k)
    return out if batched else out[0]


def mixup_weights(labels: np.ndarray, sigma_sq: float) -> np.ndarray:
    """Unnormalized partner weights exp(-||y_i - y_j||^2 / (2 sigma_sq));
    the diagonal (self pairing, distance zero) is always 1, the row maximum."""
    y = np.asarray(labels, dtype=np.float64)
    diff = y[:, None, :] - y[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    return np.exp(-d2 / (2.0 * sigma_sq))


def srm_mixup_batch(
    powers: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    cfg: AugmentConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Mix each sample with a spatially weighted batch partner.

    Returns (mixed powers, labels_a, labels_b, lambda). Partner indices are
    drawn first (one uniform per sample), then the lambdas, so results are
    reproducible for a given Generator state.
    """
    x = np.asarray(powers)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 3 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"expected [B,S,T] powers with [B,2] labels, got {x.shape} / {y.shape}")
    b = x.shape[0]
    cdf = np.cumsum(mixup_weights(y, cfg.mix_sigma_sq), axis=1)
    u = rng.random(b) * cdf[:, -1]
    partners = np.empty(b, dtype=np.int64)
    for i in range(b):
        partners[i] = np.searchsorted(cdf[i], u[i], side="right")
    lam = rng.beta(*cfg.mix_lambda, size=b)
    lam_x = lam[:, None, None].astype(x.dtype)
    mixed = lam_x * x + (1.0 - lam_x) * x[partners]
    return mixed, y, y[partners], lam


def random_drop(pdp: PdpMatrix, rng: np.random.Generator, cfg: AugmentConfig | None = None) -> PdpMatrix:
    cfg = cfg or AugmentConfig()
    return PdpMatrix(
        powers=drop_rows(pdp.powers, rng, cfg),
        label=pdp.label.copy(),
        sample_period=pdp.sample_period,
    )


def random_shift(pdp: PdpMatrix, rng: np.random.Generator, cfg: AugmentConfig | None = None) -> PdpMatrix:
    cfg = cfg or AugmentConfig()
    return PdpMatrix(
        powers=shift_rows(pdp.powers, rng, cfg, sample_rate=1.0 / pdp.sample_period),
        label=pdp.label.copy(),
        sample_period=pdp.sample_period,
    )


def srm_mixup(
    batch: list[PdpMatrix],
    rng: np.random.Generator,
    cfg: AugmentConfig | None = None,
) -> list[tuple[PdpMatrix, np.ndarray, np.ndarray, float]]:
    """PdpMatrix-level mixup: returns (mixed sample, label_a, label_b, lambda)
    per input sample. The mixed container keeps label_a."""
    cfg = cfg or AugmentConfig()
    if not batch:
        raise ValueError("empty batch")
    period = batch[0].sample_period
    powers = np.stack([p.powers for p in batch])
    labels = np.stack([p.label for p in batch])
    mixed, ya, yb, lam = srm_mixup_batch(powers, labels, rng, cfg)
    return [
        (
            PdpMatrix(powers=mixed[i], label=ya[i], sample_period=period),
            ya[i].copy(),
            yb[i].copy(),
            float(lam[i]),
        )
        for i in range(len(batch))
    ]
