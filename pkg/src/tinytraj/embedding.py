"""Input embeddings: learnable projection, sinusoidal positions, Time2Vec
channels, and fixed-stride patching.

The full pipeline (``embed_sequence``) runs: optional Time2Vec concat (to the
per-point features, before any projection) -> optional patchify -> learnable
linear projection to d_model -> additive sinusoidal position encoding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from . import geo

__all__ = [
    "PatchConfig",
    "ProjectionLayer",
    "Time2VecLayer",
    "embed_sequence",
    "init_projection",
    "init_time2vec",
    "patchify",
    "positional_encoding",
    "project",
    "sinusoidal_table",
    "time2vec",
    "time2vec_sequence",
    "unpatchify",
]

INIT_STD = 0.02  # weight init scale for all learnable projections


@dataclass
class ProjectionLayer:
    """Linear map from raw feature width to model width: x @ w + b."""

    w: Tensor  # [f_in, d_model]
    b: Tensor  # [d_model]


@dataclass
class Time2VecLayer:
    """Learnable time encoding: one linear channel plus k-1 sine channels."""

    omega: Tensor  # [k] frequencies
    phi: Tensor  # [k] phases

    @property
    def k(self) -> int:
        return self.omega.shape[0]


@dataclass(frozen=True)
class PatchConfig:
    """Group ``patch_len`` consecutive points into one token (stride = len)."""

    patch_len: int

    def __post_init__(self):
        if self.patch_len < 1:
            raise ValueError("patch_len must be >= 1")

    @property
    def stride(self) -> int:
        return self.patch_len


def init_projection(f_in: int, d_model: int, rng: np.random.Generator) -> ProjectionLayer:
    w = Tensor(rng.normal(0.0, INIT_STD, size=(f_in, d_model)), requires_grad=True)
    b = Tensor(np.zeros(d_model), requires_grad=True)
    return ProjectionLayer(w=w, b=b)


def init_time2vec(k: int, rng: np.random.Generator) -> Time2VecLayer:
    if k < 2:
        raise ValueError("time2vec needs k >= 2 (one linear + at least one sine channel)")
    omega = Tensor(rng.normal(0.0, 1.0, size=k), requires_grad=True)
    phi = Tensor(rng.normal(0.0, 1.0, size=k), requires_grad=True)
    return Time2VecLayer(omega=omega, phi=phi)


def project(x: Tensor | np.ndarray, layer: ProjectionLayer) -> Tensor:
    """Apply the learnable projection to a [S, f_in] sequence."""
    xt = x if isinstance(x, Tensor) else Tensor(x)
    return ad.add_bias(ad.matmul(xt, layer.w), layer.b)


def sinusoidal_table(max_seq: int, d_model: int) -> np.ndarray:
    """Fixed position-encoding table: sin on even dims, cos on odd dims.

    table[pos, 2i]   = sin(pos / 10000^(2i/d_model))
    table[pos, 2i+1] = cos(pos / 10000^(2i/d_model))
    """
    if max_seq < 1 or d_model < 2 or d_model % 2:
        raise ValueError("need max_seq >= 1 and even d_model >= 2")
    positions = np.arange(max_seq, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)
    inv_freq = np.power(10000.0, -i2 / d_model)
    angles = positions * inv_freq
    table = np.zeros((max_seq, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def positional_encoding(pos: int, d_model: int, max_seq: int) -> np.ndarray:
    """One row of the sinusoidal table, with range checking."""
    if not 0 <= pos < max_seq:
        raise ValueError(f"position {pos} outside [0, {max_seq})")
    return sinusoidal_table(max_seq, d_model)[pos]


def time2vec(tau: float, layer: Time2VecLayer) -> Tensor:
    """Encode one scalar time value; returns a length-k tensor."""
    return ad.reshape(time2vec_sequence(np.array([float(tau)]), layer), (layer.k,))


def time2vec_sequence(taus: np.ndarray, layer: Time2VecLayer) -> Tensor:
    """Encode a [S] vector of time values to [S, k].

    Channel 0 stays linear (omega*tau + phi); channels 1..k-1 pass through a
    sine.  Differentiable in omega and phi.
    """
    taus = np.asarray(taus, dtype=np.float64).reshape(-1, 1)  # [S, 1]
    k = layer.k
    # outer product via matmul keeps the op differentiable in omega
    angles = ad.add_bias(ad.matmul(Tensor(taus), ad.reshape(layer.omega, (1, k))), layer.phi)
    linear = ad.slice_axis(angles, 1, 0, 1)
    periodic = ad.sin(ad.slice_axis(angles, 1, 1, k - 1))
    return ad.concat([linear, periodic], axis=1)


def patchify(x: Tensor | np.ndarray, patch_len: int) -> tuple[Tensor, int]:
    """Group consecutive rows into flat patch vectors.

    [S, F] -> [ceil(S/P), P*F]; the last patch is zero-padded.  Returns the
    patched tensor and the original valid length S (for exact inversion).
    """
    xt = x if isinstance(x, Tensor) else Tensor(x)
    if xt.ndim != 2:
        raise ValueError(f"patchify expects [S, F], got shape {xt.shape}")
    s, f = xt.shape
    p = PatchConfig(patch_len).patch_len
    n_patches = -(-s // p)  # ceil
    pad = n_patches * p - s
    if pad:
        xt = ad.concat([xt, Tensor(np.zeros((pad, f)))], axis=0)
    return ad.reshape(xt, (n_patches, p * f)), s


def unpatchify(patched: np.ndarray, patch_len: int, valid_len: int, f: int) -> np.ndarray:
    """Invert ``patchify`` on the valid region; exact (pure reshaping)."""
    patched = np.asarray(patched, dtype=np.float64)
    n_patches = patched.shape[0]
    full = patched.reshape(n_patches * patch_len, f)
    return full[:valid_len]


def embed_sequence(
    features: Tensor | np.ndarray,
    proj: ProjectionLayer,
    *,
    pe_table: np.ndarray | None = None,
    time2vec_layer: Time2VecLayer | None = None,
    patch_len: int = 1,
    use_dt_feature: bool = True,
) -> Tensor:
    """Full input pipeline: [S, 7] point features -> [S', d_model] embeddings.

    Order: extract Time2Vec channels from the dt column and concatenate them
    to the per-point features, optionally drop the raw dt column, patchify,
    project, then add the position rows of ``pe_table`` (None disables PE).
    """
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.ndim != 2 or x.shape[1] != geo.FEATURE_DIM:
        raise ValueError(f"expected [S, {geo.FEATURE_DIM}] features, got shape {x.shape}")

    blocks = [x if use_dt_feature else ad.slice_axis(x, 1, 0, geo.DT_FEATURE_INDEX)]
    if time2vec_layer is not None:
        taus = x.data[:, geo.DT_FEATURE_INDEX]  # dt already scaled by the 60 s divisor
        blocks.append(time2vec_sequence(taus, time2vec_layer))
    x = blocks[0] if len(blocks) == 1 else ad.concat(blocks, axis=1)

    if patch_len > 1:
        x, _ = patchify(x, patch_len)

    out = project(x, proj)

    if pe_table is not None:
        s = out.shape[0]
        if s > pe_table.shape[0]:
            raise ValueError(f"sequence of {s} positions exceeds table of {pe_table.shape[0]}")
        out = ad.add(out, Tensor(pe_table[:s]))
    return out


def embedded_width(use_dt_feature: bool, time2vec_k: int | None, patch_len: int) -> int:
    """Width of the projection input implied by the embedding flags."""
    f = geo.FEATURE_DIM - (0 if use_dt_feature else 1)
    if time2vec_k:
        f += time2vec_k
    return f * patch_len
