"""Masked-infill corruption and loss weighting.

Two mask flavors: *dimension* masks hide the spatial or the temporal feature
slots independently per sampled position; *segment* masks hide one contiguous
run of positions across both slot groups.  Masked slots are overwritten with
learnable embedding values so the model can tell "hidden" from "zero", and
the loss only supervises what was hidden (or, for next-step training, every
position that has a ground-truth successor).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from . import geo

__all__ = [
    "DEFAULT_MASK_RATIO",
    "MaskEmbedding",
    "MaskSpec",
    "SPATIAL",
    "TEMPORAL",
    "apply_mask",
    "build_loss_mask",
    "init_mask_embedding",
    "sample_dimension_mask",
    "sample_segment_mask",
]

SPATIAL = "spatial"
TEMPORAL = "temporal"
_BOTH = frozenset((SPATIAL, TEMPORAL))
DEFAULT_MASK_RATIO = 0.15

_N_SPATIAL = geo.SPATIAL_SLOTS.stop - geo.SPATIAL_SLOTS.start  # 2
_N_TEMPORAL = geo.TEMPORAL_SLOTS.stop - geo.TEMPORAL_SLOTS.start  # 5


@dataclass(frozen=True)
class MaskSpec:
    """Which positions are hidden, and which feature groups at each.

    ``position_dims`` maps position -> subset of {spatial, temporal}; the
    flat views ``positions`` (sorted) and ``dims`` (union) are derived.
    """

    kind: str  # "dimension" | "segment"
    position_dims: dict[int, frozenset]
    mask_ratio: float = DEFAULT_MASK_RATIO

    def __post_init__(self):
        if self.kind not in ("dimension", "segment"):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio {self.mask_ratio} outside (0, 1)")
        for pos, dims in self.position_dims.items():
            if pos < 0:
                raise ValueError(f"negative mask position {pos}")
            if not dims or not dims <= _BOTH:
                raise ValueError(f"position {pos}: dims must be a non-empty subset of {{spatial, temporal}}")

    @property
    def positions(self) -> tuple[int, ...]:
        return tuple(sorted(self.position_dims))

    @property
    def dims(self) -> frozenset:
        out: frozenset = frozenset()
        for d in self.position_dims.values():
            out |= d
        return out


@dataclass
class MaskEmbedding:
    """Learnable fill-in values for hidden slots (one vector per slot group)."""

    m_spatial: Tensor  # [2] replaces x, y
    m_temporal: Tensor  # [5] replaces dow, hod, moh, soh, dt


def init_mask_embedding(rng: np.random.Generator) -> MaskEmbedding:
    return MaskEmbedding(
        m_spatial=Tensor(rng.normal(0.0, 0.02, size=_N_SPATIAL), requires_grad=True),
        m_temporal=Tensor(rng.normal(0.0, 0.02, size=_N_TEMPORAL), requires_grad=True),
    )


def sample_dimension_mask(
    seq_len: int, mask_ratio: float, rng: np.random.Generator
) -> MaskSpec:
    """Bernoulli(mask_ratio) per position; each hit hides spatial OR temporal
    slots with equal probability."""
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    position_dims: dict[int, frozenset] = {}
    for pos in range(seq_len):
        if rng.random() < mask_ratio:
            dim = SPATIAL if rng.random() < 0.5 else TEMPORAL
            position_dims[pos] = frozenset((dim,))
    return MaskSpec(kind="dimension", position_dims=position_dims, mask_ratio=mask_ratio)


def sample_segment_mask(seq_len: int, mask_ratio: float, rng: np.random.Generator) -> MaskSpec:
    """One contiguous run of round(ratio * S) positions (at least 1), start
    uniform over valid offsets; hides both slot groups."""
    if seq_len < 4:
        raise ValueError("segment masking needs seq_len >= 4")
    run = max(1, round(mask_ratio * seq_len))
    start = int(rng.integers(0, seq_len - run + 1))
    position_dims = {pos: _BOTH for pos in range(start, start + run)}
    return MaskSpec(kind="segment", position_dims=position_dims, mask_ratio=mask_ratio)


def _fill_rows(base: Tensor, rows: np.ndarray, cols: slice, value: Tensor) -> Tensor:
    """Differentiable row-group overwrite: out[rows, cols] = value (broadcast).

    Unmasked entries pass through bit-identically; gradients for ``value``
    accumulate over the overwritten rows, and the overwritten slots pass no
    gradient back to ``base``.
    """
    out = base.data.copy()
    out[rows, cols] = value.data

    def vjp(g: np.ndarray):
        dbase = g.copy()
        dbase[rows, cols] = 0.0
        dvalue = g[rows, cols].sum(axis=0)
        return dbase, dvalue

    return ad.record_op((base, value), out, vjp)


def apply_mask(features: np.ndarray | Tensor, spec: MaskSpec, emb: MaskEmbedding) -> Tensor:
    """Overwrite the masked slots of [S, 7] features with learnable values.

    The caller keeps the original array as the reconstruction target; the
    returned tensor is the corrupted model input.
    """
    x = features if isinstance(features, Tensor) else Tensor(features)
    s = x.shape[0]
    if x.ndim != 2 or x.shape[1] != geo.FEATURE_DIM:
        raise ValueError(f"expected [S, {geo.FEATURE_DIM}] features, got {x.shape}")
    if spec.position_dims and max(spec.position_dims) >= s:
        raise ValueError(
            f"mask position {max(spec.position_dims)} outside sequence of length {s}"
        )
    rows_spatial = np.array(
        [p for p, d in sorted(spec.position_dims.items()) if SPATIAL in d], dtype=np.int64
    )
    rows_temporal = np.array(
        [p for p, d in sorted(spec.position_dims.items()) if TEMPORAL in d], dtype=np.int64
    )
    out = x
    if rows_spatial.size:
        out = _fill_rows(out, rows_spatial, geo.SPATIAL_SLOTS, emb.m_spatial)
    if rows_temporal.size:
        out = _fill_rows(out, rows_temporal, geo.TEMPORAL_SLOTS, emb.m_temporal)
    return out


def build_loss_mask(spec: MaskSpec | None, mode: str, seq_len: int) -> np.ndarray:
    """Per-position, per-target-channel supervision weights in {0, 1}.

    next_step: weight 1 on every position with a ground-truth successor
    (all three channels), 0 on the last position.
    infill: weight 1 only at masked positions; spatial masks supervise the
    dlat/dlon channels, temporal masks the dt channel.
    """
    w = np.zeros((seq_len, 3), dtype=np.float64)
    if mode == "next_step":
        w[: seq_len - 1, :] = 1.0
        return w
    if mode != "infill":
        raise ValueError(f"unknown loss-mask mode {mode!r}")
    if spec is None:
        raise ValueError("infill mode requires a MaskSpec")
    for pos, dims in spec.position_dims.items():
        if pos >= seq_len:
            raise ValueError(f"mask position {pos} outside sequence of length {seq_len}")
        if SPATIAL in dims:
            w[pos, 0] = 1.0
            w[pos, 1] = 1.0
        if TEMPORAL in dims:
            w[pos, 2] = 1.0
    return w
