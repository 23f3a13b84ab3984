"""Lossless rearrangements of a PDP matrix into token sequences.

Three schemes over an [n_sensors, n_time] matrix:

  sst  one token per sensor: token i is row i            -> N_S  tokens of len N_ts
  tst  one token per time step: token t is column t      -> N_ts tokens of len N_S
  pbt  non-overlapping patches of patch_h sensor rows by
       patch_w time bins, flattened row-major, with the
       patch grid scanned row-major (sensor groups first) -> (N_S/patch_h)*(N_ts/patch_w) tokens

Every scheme preserves the multiset of values; detokenize inverts exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["TOKENIZER_KINDS", "TokenizerSpec", "TokenSequence", "token_shape", "tokenize", "tokenize_batch", "detokenize"]

TOKENIZER_KINDS = ("pbt", "tst", "sst")


@dataclass(frozen=True)
class TokenizerSpec:
    kind: str
    patch_h: int = 3  # sensor rows per patch (pbt only)
    patch_w: int = 8  # time bins per patch (pbt only)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", self.kind.lower())
        if self.kind not in TOKENIZER_KINDS:
            raise ValueError(f"unknown tokenizer kind {self.kind!r}; expected one of {TOKENIZER_KINDS}")
        if self.kind == "pbt" and (self.patch_h < 1 or self.patch_w < 1):
            raise ValueError("patch dimensions must be >= 1")


@dataclass
class TokenSequence:
    tokens: np.ndarray  # [n_tokens, token_len]
    kind: str


def token_shape(spec: TokenizerSpec, n_sensors: int, n_time: int) -> tuple[int, int]:
    """(token count, token length) for a given input shape."""
    if spec.kind == "sst":
        return n_sensors, n_time
    if spec.kind == "tst":
        return n_time, n_sensors
    if n_sensors % spec.patch_h or n_time % spec.patch_w:
        raise ValueError(
            f"patch {spec.patch_h}x{spec.patch_w} does not tile a {n_sensors}x{n_time} matrix"
        )
    return (n_sensors // spec.patch_h) * (n_time // spec.patch_w), spec.patch_h * spec.patch_w


def tokenize_batch(powers: np.ndarray, spec: TokenizerSpec) -> np.ndarray:
    """Rearrange [..., n_sensors, n_time] into [..., n_tokens, token_len]."""
    x = np.asarray(powers)
    s, t = x.shape[-2], x.shape[-1]
    n_tk, n_st = token_shape(spec, s, t)
    if spec.kind == "sst":
        return x.copy()
    if spec.kind == "tst":
        return np.ascontiguousarray(x.swapaxes(-1, -2))
    lead = x.shape[:-2]
    gh, gw = s // spec.patch_h, t // spec.patch_w
    x = x.reshape(*lead, gh, spec.patch_h, gw, spec.patch_w)
    x = np.moveaxis(x, -3, -2)  # [..., gh, gw, patch_h, patch_w]
    return np.ascontiguousarray(x).reshape(*lead, n_tk, n_st)


def tokenize(pdp, spec: TokenizerSpec) -> TokenSequence:
    """Tokenize one sample (a PdpMatrix or a bare [n_sensors, n_time] array)."""
    powers = getattr(pdp, "powers", pdp)
    powers = np.asarray(powers)
    if powers.ndim != 2:
        raise ValueError(f"expected a 2D matrix, got shape {powers.shape}")
    return TokenSequence(tokens=tokenize_batch(powers, spec), kind=spec.kind)


def detokenize(tokens, spec: TokenizerSpec, shape: tuple[int, int]) -> np.ndarray:
    """Invert tokenize back to an [n_sensors, n_time] matrix."""
    x = np.asarray(getattr(tokens, "tokens", tokens))
    s, t = shape
    n_tk, n_st = token_shape(spec, s, t)
    if x.shape[-2:] != (n_tk, n_st):
        raise ValueError(f"token array {x.shape[-2:]} does not match {(n_tk, n_st)} for shape {shape}")
    if spec.kind == "sst":
        return x.copy()
    if spec.kind == "tst":
        return np.ascontiguousarray(x.swapaxes(-1, -2))
    lead = x.shape[:-2]
    gh, gw = s // spec.patch_h, t // spec.patch_w
    x = x.reshape(*lead, gh, gw, spec.patch_h, spec.patch_w)
    x = np.moveaxis(x, -2, -3)  # [..., gh, patch_h, gw, patch_w]
    return np.ascontiguousarray(x).reshape(*lead, s, t)
