"""Two-block pre-norm decoder transformer over trajectory features.

Per sequence: embed -> n_blocks x (x + MHA(LN(x)); h + FF(LN(h))) -> final
LN -> linear head emitting one (dlat, dlon, dt) prediction per position, in
normalized units.  Attention is causal by default; a bidirectional mode
serves masked infill.  Rotary position embeddings on q/k are optional.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from . import embedding as emb
from . import geo, masking

__all__ = [
    "BlockParams",
    "ModelConfig",
    "ModelParams",
    "apply_rope",
    "attention",
    "bind_params",
    "causal_mask",
    "forward_features",
    "init_params",
    "model_forward",
    "multi_head_attention",
    "named_parameters",
    "transformer_block",
]

ROPE_BASE = 10000.0
OUT_DIM = 3  # (dlat, dlon, dt) in normalized units


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and feature flags; defaults give the desk-scale model."""

    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    d_ff: int | None = None  # defaults to 4 * d_model
    max_seq: int = 256
    rope_enabled: bool = False
    attention_mode: str = "causal"  # "causal" | "bidirectional"
    use_positional_encoding: bool = True
    use_time2vec: bool = False
    time2vec_k: int = 8
    patch_len: int = 1
    use_dt_feature: bool = True

    def __post_init__(self):
        if self.d_model < 2 or self.d_model % 2:
            raise ValueError(f"d_model must be even and >= 2, got {self.d_model}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"n_heads {self.n_heads} must divide d_model {self.d_model}")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.max_seq < 1:
            raise ValueError("max_seq must be >= 1")
        if self.attention_mode not in ("causal", "bidirectional"):
            raise ValueError(f"unknown attention_mode {self.attention_mode!r}")
        if self.rope_enabled and self.head_dim % 2:
            raise ValueError(f"rotary embedding needs an even head_dim, got {self.head_dim}")
        if self.patch_len < 1:
            raise ValueError("patch_len must be >= 1")
        if self.use_time2vec and self.time2vec_k < 2:
            raise ValueError("time2vec_k must be >= 2")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ff_dim(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d_model

    @property
    def in_features(self) -> int:
        return emb.embedded_width(
            self.use_dt_feature, self.time2vec_k if self.use_time2vec else None, self.patch_len
        )

    @property
    def out_dim(self) -> int:
        return OUT_DIM

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class BlockParams:
    """One transformer block: attention projections, FF weights, two LayerNorms."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    bo: Tensor
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


@dataclass
class ModelParams:
    """Every learnable tensor in the model, in a stable named order."""

    proj: emb.ProjectionLayer
    blocks: list[BlockParams]
    ln_f_gain: Tensor
    ln_f_bias: Tensor
    w_out: Tensor  # [d_model, 3]
    b_out: Tensor  # [3]
    time2vec: emb.Time2VecLayer | None = None
    mask_emb: masking.MaskEmbedding | None = None


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Normal(0, 0.02) projections, zero biases, ones/zeros LayerNorms, and a
    zero output head (an untrained model predicts 'stay put')."""

    def w(*shape):
        return Tensor(rng.normal(0.0, emb.INIT_STD, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    d, dff = cfg.d_model, cfg.ff_dim
    proj = emb.init_projection(cfg.in_features, d, rng)
    blocks = [
        BlockParams(
            wq=w(d, d), wk=w(d, d), wv=w(d, d), wo=w(d, d),
            bq=zeros(d), bk=zeros(d), bv=zeros(d), bo=zeros(d),
            w_ff1=w(d, dff), b_ff1=zeros(dff), w_ff2=w(dff, d), b_ff2=zeros(d),
            ln1_gain=ones(d), ln1_bias=zeros(d), ln2_gain=ones(d), ln2_bias=zeros(d),
        )
        for _ in range(cfg.n_blocks)
    ]
    return ModelParams(
        proj=proj,
        blocks=blocks,
        ln_f_gain=ones(d),
        ln_f_bias=zeros(d),
        w_out=zeros(d, OUT_DIM),
        b_out=zeros(OUT_DIM),
        time2vec=emb.init_time2vec(cfg.time2vec_k, rng) if cfg.use_time2vec else None,
        mask_emb=masking.init_mask_embedding(rng),
    )


def named_parameters(params: ModelParams) -> dict[str, Tensor]:
    """Stable name -> tensor map (drives the optimizer and checkpoints)."""
    out: dict[str, Tensor] = {"proj.w": params.proj.w, "proj.b": params.proj.b}
    if params.time2vec is not None:
        out["time2vec.omega"] = params.time2vec.omega
        out["time2vec.phi"] = params.time2vec.phi
    if params.mask_emb is not None:
        out["mask.spatial"] = params.mask_emb.m_spatial
        out["mask.temporal"] = params.mask_emb.m_temporal
    for i, b in enumerate(params.blocks):
        for name in (
            "wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo",
            "w_ff1", "b_ff1", "w_ff2", "b_ff2",
            "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
        ):
            out[f"blocks.{i}.{name}"] = getattr(b, name)
    out["ln_f.gain"] = params.ln_f_gain
    out["ln_f.bias"] = params.ln_f_bias
    out["head.w"] = params.w_out
    out["head.b"] = params.b_out
    return out


def bind_params(params: ModelParams, tape: ad.Tape) -> None:
    """Watch every parameter on a fresh tape before a training forward pass."""
    for t in named_parameters(params).values():
        tape.watch(t)


def causal_mask(seq_len: int) -> np.ndarray:
    """Additive attention mask: 0 where j <= i, -inf where j > i."""
    m = np.zeros((seq_len, seq_len), dtype=np.float64)
    m[np.triu_indices(seq_len, k=1)] = -np.inf
    return m


def _rope_cos_sin(head_dim: int, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if head_dim % 2:
        raise ValueError(f"rotary embedding needs an even head_dim, got {head_dim}")
    i2 = np.arange(0, head_dim, 2, dtype=np.float64)
    theta = np.power(ROPE_BASE, -i2 / head_dim)  # [head_dim/2]
    ang = np.asarray(positions, dtype=np.float64)[:, None] * theta  # [S, head_dim/2]
    return np.cos(ang), np.sin(ang)


def apply_rope(x: Tensor, positions: np.ndarray) -> Tensor:
    """Rotate consecutive channel pairs (2i, 2i+1) by pos * 10000^(-2i/d).

    A pure rotation: norms are preserved and q/k dot products depend on
    relative position only.  Differentiable (the backward pass rotates the
    gradient by the opposite angle).
    """
    if x.ndim != 2:
        raise ad.ShapeMismatchError(f"apply_rope expects [S, head_dim], got {x.shape}")
    s, hd = x.shape
    positions = np.asarray(positions)
    if positions.shape != (s,):
        raise ad.ShapeMismatchError(f"positions shape {positions.shape} != ({s},)")
    cos, sin_ = _rope_cos_sin(hd, positions)
    xe, xo = x.data[:, 0::2], x.data[:, 1::2]
    out = np.empty_like(x.data)
    out[:, 0::2] = xe * cos - xo * sin_
    out[:, 1::2] = xe * sin_ + xo * cos

    def vjp(g: np.ndarray):
        ge, go = g[:, 0::2], g[:, 1::2]
        dx = np.empty_like(g)
        dx[:, 0::2] = ge * cos + go * sin_  # inverse rotation
        dx[:, 1::2] = -ge * sin_ + go * cos
        return (dx,)

    return ad.record_op((x,), out, vjp)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(head_dim) + mask) v for one head."""
    hd = q.shape[1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(hd))
    if mask is not None:
        scores = ad.add(scores, Tensor(mask))
    return ad.matmul(ad.softmax_rows(scores), v)


def multi_head_attention(
    x: Tensor,
    bp: BlockParams,
    cfg: ModelConfig,
    mask: np.ndarray | None,
    positions: np.ndarray,
) -> Tensor:
    """Project to q/k/v, split heads, attend per head, concat, project out."""
    q = ad.add_bias(ad.matmul(x, bp.wq), bp.bq)  # [S, d_model]
    k = ad.add_bias(ad.matmul(x, bp.wk), bp.bk)
    v = ad.add_bias(ad.matmul(x, bp.wv), bp.bv)
    hd = cfg.head_dim
    heads = []
    for h in range(cfg.n_heads):
        qh = ad.slice_axis(q, 1, h * hd, hd)
        kh = ad.slice_axis(k, 1, h * hd, hd)
        vh = ad.slice_axis(v, 1, h * hd, hd)
        if cfg.rope_enabled:
            qh = apply_rope(qh, positions)
            kh = apply_rope(kh, positions)
        heads.append(attention(qh, kh, vh, mask))
    merged = ad.concat(heads, axis=1)  # [S, d_model]
    return ad.add_bias(ad.matmul(merged, bp.wo), bp.bo)


def transformer_block(
    x: Tensor,
    bp: BlockParams,
    cfg: ModelConfig,
    mask: np.ndarray | None,
    positions: np.ndarray,
) -> Tensor:
    """Pre-norm residual block: x + MHA(LN(x)), then h + FF(LN(h))."""
    h = ad.add(x, multi_head_attention(ad.layer_norm(x, bp.ln1_gain, bp.ln1_bias), bp, cfg, mask, positions))
    ff_in = ad.layer_norm(h, bp.ln2_gain, bp.ln2_bias)
    ff = ad.add_bias(ad.matmul(ad.gelu(ad.add_bias(ad.matmul(ff_in, bp.w_ff1), bp.b_ff1)), bp.w_ff2), bp.b_ff2)
    return ad.add(h, ff)


def forward_features(
    features: np.ndarray | Tensor, params: ModelParams, cfg: ModelConfig
) -> Tensor:
    """One sequence end to end: [S, 7] features -> [S', 3] predictions."""
    s_in = features.shape[0]
    s_out = -(-s_in // cfg.patch_len)  # positions after patching
    if s_out > cfg.max_seq:
        raise ValueError(
            f"sequence of {s_in} points ({s_out} positions) exceeds max_seq {cfg.max_seq}"
        )
    pe = emb.sinusoidal_table(cfg.max_seq, cfg.d_model) if cfg.use_positional_encoding else None
    x = emb.embed_sequence(
        features,
        params.proj,
        pe_table=pe,
        time2vec_layer=params.time2vec,
        patch_len=cfg.patch_len,
        use_dt_feature=cfg.use_dt_feature,
    )
    positions = np.arange(s_out)
    mask = causal_mask(s_out) if cfg.attention_mode == "causal" else None
    for bp in params.blocks:
        x = transformer_block(x, bp, cfg, mask, positions)
    x = ad.layer_norm(x, params.ln_f_gain, params.ln_f_bias)
    return ad.add_bias(ad.matmul(x, params.w_out), params.b_out)


def model_forward(batch_features, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Batch forward: [B, S, 7] (array, Batch, or list of per-sequence inputs,
    each [S, 7] ndarray or Tensor) -> [B, S', 3] predictions.

    Sequences are processed independently, so results never depend on batch
    composition.
    """
    if hasattr(batch_features, "features"):  # a data_pipeline Batch
        batch_features = batch_features.features
    if isinstance(batch_features, np.ndarray):
        if batch_features.ndim != 3:
            raise ValueError(f"expected [B, S, F] features, got shape {batch_features.shape}")
        seqs = list(batch_features)
    else:
        seqs = list(batch_features)
    outs = [forward_features(f, params, cfg) for f in seqs]
    return ad.stack(outs, axis=0)
