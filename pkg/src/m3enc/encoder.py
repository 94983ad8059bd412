"""Bidirectional transformer encoder with per-layer hidden-state taps and a
shared truncatable MLM head.

The architecture modernizations (SwiGLU, RMSNorm, pre-norm residuals, bias
removal, dropout removal) are individually toggleable through ``ModelConfig``
so ablation arms can revert each one. Hidden states can be tapped at any
configured layer; the MLM head projects the first ``d`` coordinates of a
tapped state through the first ``d`` rows of the shared projection matrix,
so one set of weights serves every (layer, dim) cell of the granularity grid.

Tapped states are the raw post-residual block outputs. The final norm (only
present for pre-norm configs) is applied to the last layer's output, so the
tap at the top layer equals the final state. Truncating a model to its first
``l`` layers drops the final norm, which keeps the truncated model's output
bit-identical to the full model's tap at layer ``l``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .rng import named_rng
from .tensor import Tensor

ACTIVATIONS = ("swiglu", "gelu")
NORMS = ("rmsnorm", "layernorm")
NORM_PLACEMENTS = ("pre", "post")

NORM_EPS = 1e-6
INIT_STD = 0.02


@dataclass(frozen=True)
class GranularitySet:
    """The (layer, dim) grid jointly optimized during training."""

    layers: tuple[int, ...]
    dims: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(v) for v in self.layers))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        for name, values in (("layers", self.layers), ("dims", self.dims)):
            if not values:
                raise ConfigError(f"granularity.{name} must be non-empty")
            if list(values) != sorted(set(values)):
                raise ConfigError(f"granularity.{name} must be strictly increasing: {values}")
            if values[0] < 1:
                raise ConfigError(f"granularity.{name} entries must be >= 1")

    @property
    def grid(self) -> list[tuple[int, int]]:
        return [(l, d) for l in self.layers for d in self.dims]

    def __len__(self) -> int:
        return len(self.layers) * len(self.dims)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    hidden: int
    n_heads: int
    vocab: int
    max_seq: int
    granularity: GranularitySet
    ffn_mult: float = 8.0 / 3.0
    activation: str = "swiglu"
    norm: str = "rmsnorm"
    norm_placement: str = "pre"
    use_bias: bool = False
    hidden_dropout: float = 0.0

    def __post_init__(self):
        if self.n_layers < 1 or self.hidden < 1 or self.vocab < 1 or self.max_seq < 1:
            raise ConfigError("n_layers, hidden, vocab and max_seq must be positive")
        if self.n_heads < 1 or self.hidden % self.n_heads != 0:
            raise ConfigError(f"n_heads={self.n_heads} must divide hidden={self.hidden}")
        if self.ffn_mult <= 0:
            raise ConfigError("ffn_mult must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}")
        if self.norm_placement not in NORM_PLACEMENTS:
            raise ConfigError(f"norm_placement must be one of {NORM_PLACEMENTS}")
        if not (0.0 <= self.hidden_dropout < 1.0):
            raise ConfigError("hidden_dropout must lie in [0, 1)")
        if max(self.granularity.layers) > self.n_layers:
            raise ConfigError(
                f"granularity layer {max(self.granularity.layers)} exceeds n_layers={self.n_layers}")
        if max(self.granularity.dims) > self.hidden:
            raise ConfigError(
                f"granularity dim {max(self.granularity.dims)} exceeds hidden={self.hidden}")

    @property
    def intermediate(self) -> int:
        return int(round(self.ffn_mult * self.hidden))

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads


@dataclass
class LayerParams:
    attn_q: Tensor
    attn_k: Tensor
    attn_v: Tensor
    attn_o: Tensor
    norm1_w: Tensor
    norm2_w: Tensor
    ffn_up: Tensor
    ffn_down: Tensor
    ffn_gate: Tensor | None = None
    attn_q_b: Tensor | None = None
    attn_k_b: Tensor | None = None
    attn_v_b: Tensor | None = None
    attn_o_b: Tensor | None = None
    ffn_gate_b: Tensor | None = None
    ffn_up_b: Tensor | None = None
    ffn_down_b: Tensor | None = None
    norm1_b: Tensor | None = None
    norm2_b: Tensor | None = None


@dataclass
class Parameters:
    """The full trainable weight collection, including the shared MLM head."""

    token_embedding: Tensor
    position_embedding: Tensor
    layers: list[LayerParams]
    mlm_head_w: Tensor
    mlm_head_b: Tensor
    final_norm_w: Tensor | None = None
    final_norm_b: Tensor | None = None

    def named(self) -> list[tuple[str, Tensor]]:
        """Stable (name, tensor) listing used by the optimizer and checkpoints."""
        out = [("token_embedding", self.token_embedding),
               ("position_embedding", self.position_embedding)]
        for i, lp in enumerate(self.layers):
            for f in ("attn_q", "attn_k", "attn_v", "attn_o",
                      "attn_q_b", "attn_k_b", "attn_v_b", "attn_o_b",
                      "norm1_w", "norm1_b", "norm2_w", "norm2_b",
                      "ffn_gate", "ffn_up", "ffn_down",
                      "ffn_gate_b", "ffn_up_b", "ffn_down_b"):
                t = getattr(lp, f)
                if t is not None:
                    out.append((f"layers.{i}.{f}", t))
        if self.final_norm_w is not None:
            out.append(("final_norm_w", self.final_norm_w))
        if self.final_norm_b is not None:
            out.append(("final_norm_b", self.final_norm_b))
        out.append(("mlm_head_w", self.mlm_head_w))
        out.append(("mlm_head_b", self.mlm_head_b))
        return out

    def count(self) -> int:
        return sum(t.data.size for _, t in self.named())


@dataclass
class ForwardOutput:
    tapped_states: dict[int, Tensor]
    final_state: Tensor


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two deviations."""
    x = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(x) > 2.0 * std
        n_bad = int(bad.sum())
        if n_bad == 0:
            break
        x[bad] = rng.normal(0.0, std, size=n_bad)
    return x.astype(dtype)


def init_parameters(config: ModelConfig, seed: int, dtype=np.float32) -> Parameters:
    """Deterministic initialization: truncated normal(0, 0.02) weights, unit
    norm weights, zero biases."""
    rng = named_rng(seed, "init")
    m, v, f = config.hidden, config.vocab, config.intermediate

    def w(*shape):
        return Tensor(_trunc_normal(rng, shape, INIT_STD, dtype), requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n, dtype=dtype), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

    layers = []
    for _ in range(config.n_layers):
        lp = LayerParams(
            attn_q=w(m, m), attn_k=w(m, m), attn_v=w(m, m), attn_o=w(m, m),
            norm1_w=ones(m), norm2_w=ones(m),
            ffn_up=w(m, f), ffn_down=w(f, m),
        )
        if config.activation == "swiglu":
            lp.ffn_gate = w(m, f)
        if config.use_bias:
            lp.attn_q_b, lp.attn_k_b = zeros(m), zeros(m)
            lp.attn_v_b, lp.attn_o_b = zeros(m), zeros(m)
            lp.ffn_up_b, lp.ffn_down_b = zeros(f), zeros(m)
            if config.activation == "swiglu":
                lp.ffn_gate_b = zeros(f)
        if config.norm == "layernorm":
            lp.norm1_b, lp.norm2_b = zeros(m), zeros(m)
        layers.append(lp)

    params = Parameters(
        token_embedding=w(v, m),
        position_embedding=w(config.max_seq, m),
        layers=layers,
        mlm_head_w=w(m, v),
        mlm_head_b=zeros(v),
    )
    if config.norm_placement == "pre":
        params.final_norm_w = ones(m)
        if config.norm == "layernorm":
            params.final_norm_b = zeros(m)
    return params


def _norm(x: Tensor, w: Tensor, b: Tensor | None, kind: str) -> Tensor:
    if kind == "rmsnorm":
        return T.rms_norm(x, w, NORM_EPS)
    return T.layer_norm(x, w, b, NORM_EPS)


def _linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    out = T.matmul(x, w)
    return out if b is None else T.add(out, b)


def _attention(x: Tensor, lp: LayerParams, config: ModelConfig, key_bias: np.ndarray) -> Tensor:
    bsz, s, m = x.shape
    h, dh = config.n_heads, config.head_dim

    def split_heads(t):
        return T.transpose(T.reshape(t, (bsz, s, h, dh)), (0, 2, 1, 3))

    q = split_heads(_linear(x, lp.attn_q, lp.attn_q_b))
    k = split_heads(_linear(x, lp.attn_k, lp.attn_k_b))
    v = split_heads(_linear(x, lp.attn_v, lp.attn_v_b))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    scores = T.add(scores, Tensor(key_bias))
    attn = T.softmax_rows(scores)
    ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (bsz, s, m))
    return _linear(ctx, lp.attn_o, lp.attn_o_b)


def _ffn(x: Tensor, lp: LayerParams, config: ModelConfig) -> Tensor:
    if config.activation == "swiglu":
        gate = T.activation(_linear(x, lp.ffn_gate, lp.ffn_gate_b), "silu")
        up = _linear(x, lp.ffn_up, lp.ffn_up_b)
        return _linear(T.mul(gate, up), lp.ffn_down, lp.ffn_down_b)
    hidden = T.activation(_linear(x, lp.ffn_up, lp.ffn_up_b), "gelu")
    return _linear(hidden, lp.ffn_down, lp.ffn_down_b)


def _dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / x.dtype.type(1.0 - rate)
    return T.mul(x, Tensor(keep))


def forward(
    params: Parameters,
    config: ModelConfig,
    tokens: np.ndarray,
    attn_mask: np.ndarray | None = None,
    *,
    taps: tuple[int, ...] | None = None,
    training: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> ForwardOutput:
    """Run the encoder, capturing hidden states at the tapped layers.

    ``tokens`` is an id array of shape [s] or [B x s]; ``attn_mask`` marks
    real (attendable) positions. Padding keys receive exactly zero attention
    weight from every query. ``taps`` defaults to the configured granularity
    layers.
    """
    tokens = np.asarray(tokens)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None, :]
    bsz, s = tokens.shape
    if s < 1:
        raise ContractError("forward requires at least one position")
    if s > config.max_seq:
        raise ContractError(f"sequence length {s} exceeds max_seq={config.max_seq}")
    if tokens.min() < 0 or tokens.max() >= config.vocab:
        raise ContractError(f"token id out of vocabulary range [0, {config.vocab})")
    if attn_mask is None:
        attn_mask = np.ones((bsz, s), dtype=bool)
    attn_mask = np.asarray(attn_mask, dtype=bool)
    if squeeze and attn_mask.ndim == 1:
        attn_mask = attn_mask[None, :]
    if attn_mask.shape != (bsz, s):
        raise ShapeError(f"attn_mask shape {attn_mask.shape} != tokens shape {(bsz, s)}")
    if taps is None:
        taps = config.granularity.layers
    tap_set = set(taps)
    if tap_set and max(tap_set) > config.n_layers:
        raise ConfigError(f"tap layer {max(tap_set)} exceeds n_layers={config.n_layers}")

    dtype = params.token_embedding.dtype
    key_bias = np.where(attn_mask, 0.0, T.MASK_OFFSET).astype(dtype)[:, None, None, :]

    h = T.add(T.take_rows(params.token_embedding, tokens),
              T.slice_rows(params.position_embedding, 0, s))

    def maybe_squeeze(t: Tensor) -> Tensor:
        return T.reshape(t, t.shape[1:]) if squeeze else t

    tapped: dict[int, Tensor] = {}
    n = config.n_layers
    for i, lp in enumerate(params.layers, start=1):
        if config.norm_placement == "pre":
            h = T.add(h, _attention(_norm(h, lp.norm1_w, lp.norm1_b, config.norm),
                                    lp, config, key_bias))
            h = T.add(h, _ffn(_norm(h, lp.norm2_w, lp.norm2_b, config.norm), lp, config))
        else:
            h = _norm(T.add(h, _attention(h, lp, config, key_bias)),
                      lp.norm1_w, lp.norm1_b, config.norm)
            h = _norm(T.add(h, _ffn(h, lp, config)), lp.norm2_w, lp.norm2_b, config.norm)
        if i < n and i in tap_set:
            tapped[i] = maybe_squeeze(h)
        if training and config.hidden_dropout > 0.0 and i < n:
            if dropout_rng is None:
                raise ContractError("dropout requires a dropout_rng in training mode")
            h = _dropout(h, config.hidden_dropout, dropout_rng)

    if params.final_norm_w is not None:
        h = _norm(h, params.final_norm_w, params.final_norm_b, config.norm)
    final = maybe_squeeze(h)
    if n in tap_set:
        tapped[n] = final
    return ForwardOutput(tapped_states=tapped, final_state=final)


def mlm_logits(params: Parameters, h: Tensor, d: int) -> Tensor:
    """Project the first ``d`` coordinates through the first ``d`` rows of
    the shared head: h[..., :d] @ W[:d, :] + b."""
    m, v = params.mlm_head_w.shape
    if d < 1 or d > m:
        raise ShapeError(f"head dimension {d} outside [1, {m}]")
    if h.shape[-1] < d:
        raise ShapeError(f"input extent {h.shape[-1]} smaller than head dimension {d}")
    truncated = T.slice_last(h, 0, d) if h.shape[-1] != d else h
    return T.add(T.matmul(truncated, T.slice_rows(params.mlm_head_w, 0, d)),
                 params.mlm_head_b)


def mlm_head(params: Parameters, h: Tensor, d: int) -> Tensor:
    """Row-stochastic token distributions from a (possibly truncated) state."""
    return T.softmax_rows(mlm_logits(params, h, d))


def pool(tapped_state: Tensor, attn_mask: np.ndarray, d: int) -> Tensor:
    """Sequence embedding: mean over unmasked positions of the first ``d``
    dimensions, then L2-normalized. Accepts [s x M] or [B x s x M]."""
    if d < 1 or d > tapped_state.shape[-1]:
        raise ShapeError(f"pool dimension {d} outside [1, {tapped_state.shape[-1]}]")
    mask = np.asarray(attn_mask, dtype=bool)
    if mask.shape != tapped_state.shape[:-1]:
        raise ShapeError(f"attn_mask shape {mask.shape} != state rows {tapped_state.shape[:-1]}")
    counts = mask.sum(axis=-1)
    if (counts == 0).any():
        raise ContractError("pool: a sequence has no unmasked positions")
    dtype = tapped_state.dtype
    weights = (mask.astype(dtype) / counts[..., None].astype(dtype))[..., None]
    truncated = T.slice_last(tapped_state, 0, d)
    mean = T.tsum(T.mul(truncated, Tensor(weights)), axis=-2)
    return T.l2_normalize_rows(mean)


def config_to_dict(config: ModelConfig) -> dict:
    return {
        "n_layers": config.n_layers,
        "hidden": config.hidden,
        "n_heads": config.n_heads,
        "vocab": config.vocab,
        "max_seq": config.max_seq,
        "ffn_mult": config.ffn_mult,
        "activation": config.activation,
        "norm": config.norm,
        "norm_placement": config.norm_placement,
        "use_bias": config.use_bias,
        "hidden_dropout": config.hidden_dropout,
        "granularity": {"layers": list(config.granularity.layers),
                        "dims": list(config.granularity.dims)},
    }


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    gran = d.pop("granularity")
    return ModelConfig(granularity=GranularitySet(layers=tuple(gran["layers"]),
                                                  dims=tuple(gran["dims"])), **d)


def truncate_to_prefix(params: Parameters, config: ModelConfig, l: int) -> tuple[Parameters, ModelConfig]:
    """The lite model: first ``l`` layers sharing the parent's weights.

    For l < n_layers the parent's final norm is dropped (layer ``l`` was an
    intermediate layer there), which makes the lite model's output
    bit-identical to the parent's tap at layer ``l``.
    """
    if not (1 <= l <= config.n_layers):
        raise ConfigError(f"prefix depth {l} outside [1, {config.n_layers}]")
    if l == config.n_layers:
        return params, config
    gran = GranularitySet(layers=(l,), dims=config.granularity.dims)
    cfg = replace(config, n_layers=l, granularity=gran)
    sub = Parameters(
        token_embedding=params.token_embedding,
        position_embedding=params.position_embedding,
        layers=params.layers[:l],
        mlm_head_w=params.mlm_head_w,
        mlm_head_b=params.mlm_head_b,
        final_norm_w=None,
        final_norm_b=None,
    )
    return sub, cfg
