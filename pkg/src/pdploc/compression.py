"""Per-sensor power compression of delay profiles.

Raw received powers span many orders of magnitude (path loss over tens of
meters), which is hostile to gradient training. Each sensor row is rescaled
by a power law of its own total power,

    out[d] = S^2 * total^(1/r - 1) * p[d],      total = sum_d p[d]

so the row total in dB becomes 20*log10(S) + (1/r)*(input total dB); with
the defaults r=5, S=10 a -100..-50 dB row lands in 0..10 dB. An optional
element-wise square root after the rescale converts power to an
amplitude-like scale, which trains slightly better and is on by default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["CompressionParams", "compress_pdp", "compress_matrix"]


@dataclass(frozen=True)
class CompressionParams:
    r: float = 5.0
    S: float = 10.0
    use_sqrt: bool = True

    def __post_init__(self) -> None:
        if self.r < 1:
            raise ValueError(f"compression ratio r must be >= 1, got {self.r}")
        if self.S <= 0:
            raise ValueError(f"scale S must be > 0, got {self.S}")


def compress_matrix(powers: np.ndarray, params: CompressionParams) -> np.ndarray:
    """Compress every delay-bin row of `powers` ([..., n_ts], linear power).

    Rows are treated independently; an all-zero row (e.g. a dropped sensor)
    stays all-zero, since the power law is undefined at zero total.
    """
    powers = np.asarray(powers)
    if powers.size and float(powers.min()) < 0.0:
        raise ValueError("negative power entry; linear PDP values must be >= 0")
    totals = powers.sum(axis=-1, keepdims=True)
    safe = np.where(totals > 0, totals, 1.0)
    gain = np.where(totals > 0, params.S**2 * safe ** (1.0 / params.r - 1.0), 0.0)
    out = powers * gain
    if params.use_sqrt:
        np.sqrt(out, out=out)
    return out


def compress_pdp(pdp_row: np.ndarray, params: CompressionParams) -> np.ndarray:
    """Compress one sensor's delay profile (vector form of compress_matrix)."""
    row = np.asarray(pdp_row)
    if row.ndim != 1:
        raise ValueError(f"expected a 1D delay profile, got shape {row.shape}")
    return compress_matrix(row, params)
