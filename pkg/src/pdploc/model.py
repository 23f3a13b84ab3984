"""Transformer regressors that map PDP token sequences to 2D positions.

Two families share the encoder skeleton (pre-norm residual blocks with
multi-head self-attention):

  vanilla   LayerNorm, ReLU MLP with biases, a learnable class token
            appended at the END of the sequence, a learnable positional
            table, prediction read from the class-token position.
  lswiglu   RMSNorm, gated FFN (swish(z W1) * (z W2)) W3 with no biases,
            no class token, no positional table; prediction comes from a
            re-normalized mean over tokens, which makes the model
            permutation-invariant across tokens.

The module also owns parameter initialization, FLOPs accounting under a
documented convention, attention-map capture, and checkpoint files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.special import ndtr, ndtri

from . import tensor as T
from .tensor import Tensor
from .tokenizer import TokenizerSpec, token_shape, tokenize_batch

__all__ = [
    "MODEL_FAMILIES",
    "PRESET_SIZES",
    "TABLE_PRESETS",
    "GATED_HIDDEN",
    "FLOP_BUDGETS",
    "FLOP_BUDGETS_8_SENSORS",
    "ModelConfig",
    "LayerParams",
    "ModelParams",
    "AttentionRecord",
    "Checkpoint",
    "preset_config",
    "init_params",
    "named_params",
    "param_count",
    "clone_params",
    "forward",
    "average_attention",
    "count_flops",
    "flops_breakdown",
    "budget_for",
    "config_to_dict",
    "config_from_dict",
    "save_checkpoint",
    "load_checkpoint",
]

MODEL_FAMILIES = ("vanilla", "lswiglu")
PRESET_SIZES = ("small", "medium", "large")

# {(tokenizer kind, size): (n_layers, d_emb, hidden_dim)} for the vanilla MLP.
TABLE_PRESETS: dict[tuple[str, str], tuple[int, int, int]] = {
    ("pbt", "small"): (5, 12, 18),
    ("pbt", "medium"): (8, 24, 44),
    ("pbt", "large"): (16, 36, 86),
    ("tst", "small"): (3, 12, 18),
    ("tst", "medium"): (5, 24, 44),
    ("tst", "large"): (13, 30, 86),
    ("sst", "small"): (6, 48, 68),
    ("sst", "medium"): (10, 72, 122),
    ("sst", "large"): (16, 96, 316),
}

# Gated-FFN hidden widths that keep the per-sensor presets on budget.
GATED_HIDDEN = {"small": 54, "medium": 94, "large": 231}

FLOP_BUDGETS = {"small": 4.5e6, "medium": 16.5e6, "large": 63.5e6}
# Same presets evaluated with 8 sensors instead of 18 (per-sensor tokens).
FLOP_BUDGETS_8_SENSORS = {"small": 1.8e6, "medium": 7.0e6, "large": 27.5e6}


@dataclass
class ModelConfig:
    family: str
    n_layers: int
    d_emb: int
    hidden_dim: int
    tokenizer: TokenizerSpec
    n_heads: int = 6
    n_sensors: int = 18
    n_time_samples: int = 128
    use_class_token: bool | None = None
    use_pos_emb: bool | None = None
    out_dim: int = 2
    norm_eps: float = 1e-5

    def __post_init__(self) -> None:
        self.family = self.family.lower()
        if self.family not in MODEL_FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {MODEL_FAMILIES}")
        if self.n_layers < 1 or self.d_emb < 1 or self.hidden_dim < 1:
            raise ValueError("n_layers, d_emb, hidden_dim must be >= 1")
        if self.d_emb % self.n_heads:
            raise ValueError(f"d_emb={self.d_emb} not divisible by n_heads={self.n_heads}")
        if self.use_class_token is None:
            self.use_class_token = self.family == "vanilla"
        if self.use_pos_emb is None:
            self.use_pos_emb = self.family == "vanilla"

    @property
    def head_dim(self) -> int:
        return self.d_emb // self.n_heads

    @property
    def token_count(self) -> int:
        n_tk, _ = token_shape(self.tokenizer, self.n_sensors, self.n_time_samples)
        return n_tk

    @property
    def token_len(self) -> int:
        _, n_st = token_shape(self.tokenizer, self.n_sensors, self.n_time_samples)
        return n_st

    @property
    def seq_len(self) -> int:
        return self.token_count + (1 if self.use_class_token else 0)


def preset_config(
    tokenizer_kind: str,
    size: str,
    family: str = "vanilla",
    n_sensors: int = 18,
    n_time_samples: int = 128,
    hidden_dim: int | None = None,
) -> ModelConfig:
    """Model configuration for a named preset size and tokenizer."""
    kind, size, family = tokenizer_kind.lower(), size.lower(), family.lower()
    key = (kind, size)
    if key not in TABLE_PRESETS:
        raise ValueError(f"no preset for tokenizer={kind!r}, size={size!r}")
    n_layers, d_emb, mlp_hidden = TABLE_PRESETS[key]
    if family == "lswiglu":
        if hidden_dim is None:
            if kind != "sst":
                raise ValueError(
                    "gated presets are defined for the sst tokenizer only; "
                    "pass hidden_dim explicitly for other tokenizers"
                )
            hidden_dim = GATED_HIDDEN[size]
    elif hidden_dim is None:
        hidden_dim = mlp_hidden
    return ModelConfig(
        family=family,
        n_layers=n_layers,
        d_emb=d_emb,
        hidden_dim=hidden_dim,
        tokenizer=TokenizerSpec(kind=kind),
        n_sensors=n_sensors,
        n_time_samples=n_time_samples,
    )


@dataclass
class LayerParams:
    norm1_gamma: Tensor
    norm1_beta: Tensor | None
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    norm2_gamma: Tensor
    norm2_beta: Tensor | None
    ffn_w1: Tensor
    ffn_b1: Tensor | None
    ffn_w2: Tensor
    ffn_b2: Tensor | None
    ffn_w3: Tensor | None


@dataclass
class ModelParams:
    embed: Tensor  # [token_len, d_emb]
    class_token: Tensor | None  # [1, d_emb]
    pos_table: Tensor | None  # [seq_len, d_emb]
    layers: list[LayerParams]
    final_norm_gamma: Tensor | None  # lswiglu only
    head_w: Tensor  # [d_emb, out_dim]
    head_b: Tensor  # [out_dim]


def named_params(params: ModelParams) -> list[tuple[str, Tensor]]:
    """(name, tensor) pairs in fixed declaration order; Nones skipped.

    This order defines the checkpoint blob layout and the optimizer state
    indexing, so it must stay stable.
    """
    out: list[tuple[str, Tensor]] = [("embed", params.embed)]
    if params.class_token is not None:
        out.append(("class_token", params.class_token))
    if params.pos_table is not None:
        out.append(("pos_table", params.pos_table))
    for i, lp in enumerate(params.layers):
        for f in fields(LayerParams):
            t = getattr(lp, f.name)
            if t is not None:
                out.append((f"layers.{i}.{f.name}", t))
    if params.final_norm_gamma is not None:
        out.append(("final_norm_gamma", params.final_norm_gamma))
    out.append(("head_w", params.head_w))
    out.append(("head_b", params.head_b))
    return out


def param_count(params: ModelParams) -> int:
    return sum(t.data.size for _, t in named_params(params))


def clone_params(params: ModelParams, arrays: list[np.ndarray] | None = None) -> ModelParams:
    """Structural copy of a parameter set. When `arrays` is given it must
    align with named_params order and supplies the new values (copied)."""

    tensors = [t for _, t in named_params(params)]
    if arrays is None:
        arrays = [t.data for t in tensors]
    if len(arrays) != len(tensors):
        raise ValueError(f"expected {len(tensors)} arrays, got {len(arrays)}")
    replace = {id(t): Tensor(np.array(a), requires_grad=t.requires_grad) for t, a in zip(tensors, arrays)}

    def sub(t: Tensor | None) -> Tensor | None:
        return None if t is None else replace[id(t)]

    return ModelParams(
        embed=sub(params.embed),
        class_token=sub(params.class_token),
        pos_table=sub(params.pos_table),
        layers=[
            LayerParams(**{f.name: sub(getattr(lp, f.name)) for f in fields(LayerParams)})
            for lp in params.layers
        ],
        final_norm_gamma=sub(params.final_norm_gamma),
        head_w=sub(params.head_w),
        head_b=sub(params.head_b),
    )


# Standard deviation of a standard normal truncated to [-2, 2]; dividing by
# it makes the sample std of truncated draws match the requested std.
_TRUNC_LO = float(ndtr(-2.0))
_TRUNC_HI = float(ndtr(2.0))
_TRUNC_STD = 0.8796256610342398


def _trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float, dtype) -> np.ndarray:
    u = rng.uniform(_TRUNC_LO, _TRUNC_HI, size=shape)
    return (ndtri(u) * (std / _TRUNC_STD)).astype(dtype)


def _weight_std(fan_in: int, fan_out: int) -> float:
    return min(0.02, float(np.sqrt(2.0 / (fan_in + fan_out))))


def init_params(config: ModelConfig, seed: int, dtype=np.float64) -> ModelParams:
    """Deterministic initialization: weight matrices get truncated-normal
    draws with std min(0.02, sqrt(2/(fan_in+fan_out))); biases, the class
    token, and the positional table start at zero; norm gains at one."""
    rng = np.random.default_rng(seed)
    d, h = config.d_emb, config.hidden_dim

    def weight(fan_in: int, fan_out: int) -> Tensor:
        w = _trunc_normal(rng, (fan_in, fan_out), _weight_std(fan_in, fan_out), dtype)
        return Tensor(w, requires_grad=True)

    def zeros(*shape: int) -> Tensor:
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(*shape: int) -> Tensor:
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    vanilla = config.family == "vanilla"
    embed = weight(config.token_len, d)
    class_token = zeros(1, d) if config.use_class_token else None
    pos_table = zeros(config.seq_len, d) if config.use_pos_emb else None
    layers: list[LayerParams] = []
    for _ in range(config.n_layers):
        layers.append(
            LayerParams(
                norm1_gamma=ones(d),
                norm1_beta=zeros(d) if vanilla else None,
                w_q=weight(d, d),
                w_k=weight(d, d),
                w_v=weight(d, d),
                w_o=weight(d, d),
                norm2_gamma=ones(d),
                norm2_beta=zeros(d) if vanilla else None,
                ffn_w1=weight(d, h),
                ffn_b1=zeros(h) if vanilla else None,
                ffn_w2=weight(h, d) if vanilla else weight(d, h),
                ffn_b2=zeros(d) if vanilla else None,
                ffn_w3=None if vanilla else weight(h, d),
            )
        )
    return ModelParams(
        embed=embed,
        class_token=class_token,
        pos_table=pos_table,
        layers=layers,
        final_norm_gamma=None if vanilla else ones(d),
        head_w=weight(d, config.out_dim),
        head_b=zeros(config.out_dim),
    )


@dataclass
class AttentionRecord:
    """Row-stochastic attention maps captured during one forward pass.

    maps[layer] has shape [n_heads, seq, seq] for a single sample or
    [batch, n_heads, seq, seq] for a batched forward.
    """

    maps: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.maps)


def average_attention(record: AttentionRecord, layer: int) -> np.ndarray:
    """Mean attention paid to each key token in one layer, averaged over
    heads and query rows (and the batch, if present). Sums to 1."""
    if not 0 <= layer < record.n_layers:
        raise ValueError(f"layer {layer} out of range [0, {record.n_layers})")
    m = record.maps[layer]
    return m.mean(axis=tuple(range(m.ndim - 1)))


def _norm(config: ModelConfig, z: Tensor, gamma: Tensor, beta: Tensor | None) -> Tensor:
    if config.family == "vanilla":
        return T.layernorm(z, gamma, beta, eps=config.norm_eps)
    return T.rmsnorm(z, gamma, eps=config.norm_eps)


def _mha(config: ModelConfig, z: Tensor, lp: LayerParams, capture: bool):
    # Scaling by 1/sqrt(d_k) is folded into Q; the scores and maps are
    # identical to scaling after the product.
    merged, captured = T.attention_context(
        T.matmul(z, lp.w_q),
        T.matmul(z, lp.w_k),
        T.matmul(z, lp.w_v),
        n_heads=config.n_heads,
        scale=1.0 / np.sqrt(config.head_dim),
        capture=capture,
    )
    return T.matmul(merged, lp.w_o), captured


def _ffn(config: ModelConfig, z: Tensor, lp: LayerParams) -> Tensor:
    if config.family == "vanilla":
        hidden = T.relu(T.add(T.matmul(z, lp.ffn_w1), lp.ffn_b1))
        return T.add(T.matmul(hidden, lp.ffn_w2), lp.ffn_b2)
    gate = T.swish(T.matmul(z, lp.ffn_w1))
    return T.matmul(T.hadamard(gate, T.matmul(z, lp.ffn_w2)), lp.ffn_w3)


def forward(
    params: ModelParams,
    config: ModelConfig,
    pdp,
    capture_attention: bool = False,
) -> tuple[Tensor, AttentionRecord | None]:
    """Run the model on one sample or a batch.

    `pdp` may be a PdpMatrix, an [n_sensors, n_time] array, a pre-tokenized
    [n_tokens, token_len] array, or batched 3D versions of either array
    form. Returns the prediction tensor ([out_dim] for a single sample,
    [batch, out_dim] for batches) plus the captured attention maps.
    """
    x = np.asarray(getattr(pdp, "powers", pdp))
    single = x.ndim == 2
    if single:
        x = x[None]
    n_tk, n_st = token_shape(config.tokenizer, config.n_sensors, config.n_time_samples)
    if x.shape[-2:] == (config.n_sensors, config.n_time_samples) and x.shape[-2:] != (n_tk, n_st):
        x = tokenize_batch(x, config.tokenizer)
    if x.shape[-2:] != (n_tk, n_st):
        raise ValueError(
            f"input shape {x.shape[-2:]} matches neither the PDP shape "
            f"{(config.n_sensors, config.n_time_samples)} nor tokens {(n_tk, n_st)}"
        )
    dtype = params.embed.data.dtype
    z = T.matmul(Tensor(x.astype(dtype, copy=False)), params.embed)  # [B, n_tk, D]
    b = z.shape[0]
    if config.use_class_token:
        cls = T.broadcast_to(params.class_token, (b, 1, config.d_emb))
        z = T.concat([z, cls], axis=-2)  # class token appended last
    if config.use_pos_emb:
        z = T.add(z, params.pos_table)
    maps: list[np.ndarray] = []
    for lp in params.layers:
        attn_out, captured = _mha(config, _norm(config, z, lp.norm1_gamma, lp.norm1_beta), lp, capture_attention)
        if captured is not None:
            maps.append(captured)
        z = T.add(z, attn_out)
        z = T.add(z, _ffn(config, _norm(config, z, lp.norm2_gamma, lp.norm2_beta), lp))
    if config.use_class_token:
        h = T.select_index(z, -1, axis=-2)  # [B, D], the class-token row
    else:
        h = T.rmsnorm(T.mean_tokens(z), params.final_norm_gamma, eps=config.norm_eps)
    pred = T.add(T.matmul(h, params.head_w), params.head_b)  # [B, out_dim]
    if single:
        pred = T.reshape(pred, (config.out_dim,))
        record = AttentionRecord(maps=[m[0] for m in maps]) if capture_attention else None
    else:
        record = AttentionRecord(maps=maps) if capture_attention else None
    return pred, record


def flops_breakdown(config: ModelConfig) -> dict[str, int]:
    """Forward-pass FLOPs for one sample, itemized.

    Convention: a matmul [m,k]x[k,n] costs 2mkn; the attention score and
    attention-times-value products each cost 2*seq^2*d_emb per layer
    (summed over heads); softmax costs 5 FLOPs per score element; each
    norm costs 4 FLOPs per element; every remaining element-wise op
    (bias/residual adds, activations, gating, pooling) costs 1 per element.
    """
    n = config.seq_len
    d = config.d_emb
    h = config.hidden_dim
    nh = config.n_heads
    L = config.n_layers
    out = config.out_dim
    n_tk, n_st = token_shape(config.tokenizer, config.n_sensors, config.n_time_samples)

    embedding = 2 * n_tk * n_st * d
    elementwise = n * d if config.use_pos_emb else 0
    projections = L * 4 * 2 * n * d * d  # Wq, Wk, Wv, Wo
    attention = L * 2 * (2 * n * n * d)  # scores + weighted values
    softmax = L * 5 * nh * n * n
    norms = L * 2 * 4 * n * d
    elementwise += L * 2 * n * d  # residual adds
    if config.family == "vanilla":
        ffn = L * (2 * n * d * h + 2 * n * h * d)
        elementwise += L * (2 * n * h + n * d)  # bias1 + relu, bias2
        head = 2 * d * out + out
    else:
        ffn = L * (2 * (2 * n * d * h) + 2 * n * h * d)
        elementwise += L * 2 * n * h  # swish + gate product
        elementwise += n * d  # mean over tokens
        norms += 4 * d  # final re-normalization
        head = 2 * d * out + out
    return {
        "embedding": embedding,
        "projections": projections,
        "attention": attention,
        "softmax": softmax,
        "ffn": ffn,
        "norms": norms,
        "elementwise": elementwise,
        "head": head,
    }


def count_flops(config: ModelConfig) -> int:
    return sum(flops_breakdown(config).values())


def budget_for(size: str, n_sensors: int = 18) -> float | None:
    """Published FLOPs budget for a preset size, if one exists."""
    if n_sensors == 18:
        return FLOP_BUDGETS.get(size)
    if n_sensors == 8:
        return FLOP_BUDGETS_8_SENSORS.get(size)
    return None


def config_to_dict(config: ModelConfig) -> dict:
    return {
        "family": config.family,
        "n_layers": config.n_layers,
        "d_emb": config.d_emb,
        "hidden_dim": config.hidden_dim,
        "n_heads": config.n_heads,
        "tokenizer": {
            "kind": config.tokenizer.kind,
            "patch_h": config.tokenizer.patch_h,
            "patch_w": config.tokenizer.patch_w,
        },
        "n_sensors": config.n_sensors,
        "n_time_samples": config.n_time_samples,
        "use_class_token": config.use_class_token,
        "use_pos_emb": config.use_pos_emb,
        "out_dim": config.out_dim,
        "norm_eps": config.norm_eps,
    }


def config_from_dict(d: dict) -> ModelConfig:
    tok = d["tokenizer"]
    return ModelConfig(
        family=d["family"],
        n_layers=d["n_layers"],
        d_emb=d["d_emb"],
        hidden_dim=d["hidden_dim"],
        n_heads=d["n_heads"],
        tokenizer=TokenizerSpec(kind=tok["kind"], patch_h=tok["patch_h"], patch_w=tok["patch_w"]),
        n_sensors=d["n_sensors"],
        n_time_samples=d["n_time_samples"],
        use_class_token=d["use_class_token"],
        use_pos_emb=d["use_pos_emb"],
        out_dim=d["out_dim"],
        norm_eps=d["norm_eps"],
    )


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    ema_params: ModelParams
    meta: dict


_CKPT_MAGIC = b"PDPCKPT1"


def save_checkpoint(
    path: str | Path,
    config: ModelConfig,
    params: ModelParams,
    ema_params: ModelParams,
    meta: dict | None = None,
) -> None:
    """Write config JSON plus two float32 parameter blobs (raw weights and
    their EMA shadow), each flattened in declaration order."""

    def blob(p: ModelParams) -> bytes:
        return b"".join(
            np.ascontiguousarray(t.data, dtype="<f4").tobytes() for _, t in named_params(p)
        )

    raw, ema = blob(params), blob(ema_params)
    if len(raw) != len(ema):
        raise ValueError("raw and EMA parameter sets differ in size")
    header = json.dumps(
        {"config": config_to_dict(config), "meta": meta or {}, "n_floats": len(raw) // 4}
    ).encode()
    with Path(path).open("wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(raw)
        f.write(ema)


def load_checkpoint(path: str | Path, dtype=np.float32) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16 : 16 + hlen].decode())
    config = config_from_dict(header["config"])
    n_floats = header["n_floats"]
    body = np.frombuffer(raw, dtype="<f4", count=2 * n_floats, offset=16 + hlen)
    if body.size != 2 * n_floats:
        raise ValueError(f"{path}: truncated parameter blob")

    def unpack(flat: np.ndarray) -> ModelParams:
        p = init_params(config, seed=0, dtype=dtype)
        offset = 0
        for _, t in named_params(p):
            size = t.data.size
            t.data = flat[offset : offset + size].astype(dtype).reshape(t.data.shape)
            offset += size
        if offset != n_floats:
            raise ValueError(f"{path}: blob holds {n_floats} floats, model needs {offset}")
        return p

    return Checkpoint(
        config=config,
        params=unpack(body[:n_floats]),
        ema_params=unpack(body[n_floats:]),
        meta=header["meta"],
    )
