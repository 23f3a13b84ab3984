"""Compression formula, examples, and the dB mapping identity."""

from __future__ import annotations

import numpy as np
import pytest

from pdploc.compression import CompressionParams, compress_matrix, compress_pdp

NO_SQRT = CompressionParams(use_sqrt=False)


def test_total_power_examples():
    # A -100 dB row (total 1e-10) lands at 0 dB (total 1.0); -50 dB at 10 dB.
    rng = np.random.default_rng(0)
    for total, expected in [(1e-10, 1.0), (1e-5, 10.0)]:
        row = rng.random(128)
        row *= total / row.sum()
        out = compress_pdp(row, NO_SQRT)
        np.testing.assert_allclose(out.sum(), expected, rtol=1e-12)


def test_zero_row_maps_to_zero_row():
    out = compress_pdp(np.zeros(128), CompressionParams())
    np.testing.assert_array_equal(out, np.zeros(128))


def test_single_tap():
    # One nonzero bin: output = S^2 * total^(1/r).
    row = np.zeros(16)
    row[3] = 4e-8
    out = compress_pdp(row, NO_SQRT)
    expected = 10.0**2 * (4e-8) ** (1.0 / 5.0)
    np.testing.assert_allclose(out[3], expected, rtol=1e-12)
    assert np.all(out[np.arange(16) != 3] == 0.0)


def test_monotonicity_preserved():
    rng = np.random.default_rng(1)
    row = rng.random(64) * 1e-7
    out = compress_pdp(row, NO_SQRT)
    assert np.array_equal(np.argsort(row, kind="stable"), np.argsort(out, kind="stable"))
    out_sqrt = compress_pdp(row, CompressionParams())
    assert np.array_equal(np.argsort(row, kind="stable"), np.argsort(out_sqrt, kind="stable"))


@pytest.mark.parametrize("seed", range(5))
def test_db_identity(seed):
    # Output total in dB == 20*log10(S) + (1/r)*(input total in dB), exactly.
    rng = np.random.default_rng(seed)
    rows = rng.random((20, 128))
    # Scale rows to totals spread across -100..-50 dB.
    targets_db = rng.uniform(-100.0, -50.0, 20)
    rows *= (10 ** (targets_db / 10.0) / rows.sum(axis=1))[:, None]
    params = CompressionParams(r=5.0, S=10.0, use_sqrt=False)
    out = compress_matrix(rows, params)
    out_db = 10.0 * np.log10(out.sum(axis=1))
    expected_db = 20.0 * np.log10(params.S) + targets_db / params.r
    np.testing.assert_allclose(out_db, expected_db, rtol=1e-9)
    assert np.all(out_db >= -1e-9) and np.all(out_db <= 10.0 + 1e-9)


def test_sqrt_variant_is_elementwise_root():
    rng = np.random.default_rng(2)
    row = rng.random(32) * 1e-9
    base = compress_pdp(row, NO_SQRT)
    rooted = compress_pdp(row, CompressionParams(use_sqrt=True))
    np.testing.assert_allclose(rooted, np.sqrt(base), rtol=1e-12)


def test_batch_matches_per_row():
    rng = np.random.default_rng(3)
    mat = rng.random((6, 40)) * 1e-8
    mat[2] = 0.0  # dropped sensor
    params = CompressionParams()
    batch = compress_matrix(mat, params)
    for i in range(6):
        np.testing.assert_array_equal(batch[i], compress_pdp(mat[i], params))


def test_negative_entry_rejected():
    with pytest.raises(ValueError, match="negative"):
        compress_pdp(np.array([1e-9, -1e-12, 0.0]), CompressionParams())


def test_param_validation():
    with pytest.raises(ValueError):
        CompressionParams(r=0.5)
    with pytest.raises(ValueError):
        CompressionParams(S=0.0)


def test_requires_1d_row():
    with pytest.raises(ValueError, match="1D"):
        compress_pdp(np.zeros((2, 3)), CompressionParams())
