"""Tokenizer shapes, values, losslessness, and round trips."""

from __future__ import annotations

import numpy as np
import pytest

from pdploc.tokenizer import TokenizerSpec, detokenize, token_shape, tokenize, tokenize_batch

SST = TokenizerSpec(kind="sst")
TST = TokenizerSpec(kind="tst")
PBT = TokenizerSpec(kind="pbt", patch_h=3, patch_w=8)


def pdp_matrix(seed: int = 0, shape=(18, 128)) -> np.ndarray:
    return np.random.default_rng(seed).random(shape)


def test_shapes_on_default_input():
    assert token_shape(SST, 18, 128) == (18, 128)
    assert token_shape(TST, 18, 128) == (128, 18)
    assert token_shape(PBT, 18, 128) == (96, 24)


def test_sst_tokens_are_sensor_rows():
    x = pdp_matrix()
    toks = tokenize(x, SST).tokens
    assert toks.shape == (18, 128)
    np.testing.assert_array_equal(toks, x)
    np.testing.assert_array_equal(toks[5], x[5])


def test_tst_tokens_are_time_columns():
    x = pdp_matrix(1)
    toks = tokenize(x, TST).tokens
    assert toks.shape == (128, 18)
    np.testing.assert_array_equal(toks[17], x[:, 17])


def test_pbt_first_token_layout():
    # Token 0 covers sensor rows 0..2, time bins 0..7, flattened row-major.
    x = pdp_matrix(2)
    toks = tokenize(x, PBT).tokens
    assert toks.shape == (96, 24)
    np.testing.assert_array_equal(toks[0], x[0:3, 0:8].reshape(-1))
    # Grid is scanned time-major within a sensor group: token 1 is the next
    # time window of the same sensor rows; token 16 starts sensor rows 3..5.
    np.testing.assert_array_equal(toks[1], x[0:3, 8:16].reshape(-1))
    np.testing.assert_array_equal(toks[16], x[3:6, 0:8].reshape(-1))


def test_pbt_requires_divisibility():
    with pytest.raises(ValueError, match="tile"):
        tokenize(pdp_matrix(), TokenizerSpec(kind="pbt", patch_h=8, patch_w=3))


@pytest.mark.parametrize("spec", [SST, TST, PBT])
def test_losslessness_and_roundtrip(spec):
    x = pdp_matrix(3)
    toks = tokenize(x, spec)
    assert toks.tokens.size == x.size
    np.testing.assert_array_equal(np.sort(toks.tokens, axis=None), np.sort(x, axis=None))
    back = detokenize(toks, spec, x.shape)
    np.testing.assert_array_equal(back, x)


def test_single_cell_pbt():
    x = np.array([[7.25]])
    spec = TokenizerSpec(kind="pbt", patch_h=1, patch_w=1)
    toks = tokenize(x, spec)
    assert toks.tokens.shape == (1, 1)
    np.testing.assert_array_equal(detokenize(toks, spec, (1, 1)), x)


def test_token_count_ordering():
    # With fewer sensors than time bins, per-sensor tokenization yields the
    # shorter sequence.
    n_sst, _ = token_shape(SST, 18, 128)
    n_tst, _ = token_shape(TST, 18, 128)
    assert n_sst <= n_tst


def test_batch_matches_per_sample():
    batch = np.random.default_rng(4).random((5, 18, 128))
    for spec in (SST, TST, PBT):
        stacked = tokenize_batch(batch, spec)
        for i in range(5):
            np.testing.assert_array_equal(stacked[i], tokenize(batch[i], spec).tokens)
        back = detokenize(stacked, spec, (18, 128))
        np.testing.assert_array_equal(back, batch)


def test_detokenize_shape_mismatch():
    toks = tokenize(pdp_matrix(), SST)
    with pytest.raises(ValueError, match="does not match"):
        detokenize(toks, SST, (8, 128))


def test_unknown_kind_rejected():
    with pytest.raises(ValueError, match="unknown tokenizer"):
        TokenizerSpec(kind="columns")


def test_kind_case_insensitive():
    assert TokenizerSpec(kind="SST").kind == "sst"
