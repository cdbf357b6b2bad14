"""Optimization and persistence.

Weighted MSE/Huber losses over supervision masks, Adam with global-norm
gradient clipping, a deterministic epoch loop covering next-step and
masked-infill objectives, a pretext autoencoder check on the feature
encoding, and a versioned binary checkpoint format whose save -> load ->
save round trip is byte-identical.
"""

from __future__ import annotations

import csv
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import embedding as emb
from . import masking
from .autodiff import Tensor
from .data import Batch
from .geo import FEATURE_DIM, NormalizationParams
from .masking import MaskEmbedding, MaskSpec
from .model import (
    ModelConfig,
    ModelParams,
    bind_params,
    forward_features,
    init_params,
    named_parameters,
)

__all__ = [
    "AdamState",
    "Checkpoint",
    "CheckpointVersionError",
    "ConfigMismatchError",
    "CorruptCheckpointError",
    "HISTORY_COLUMNS",
    "NoSupervisionWarning",
    "NumericsError",
    "PretextReport",
    "TrainConfig",
    "TrainResult",
    "adam_step",
    "aggregate_patch_targets",
    "autoencoder_rmse",
    "clip_gradients",
    "global_grad_norm",
    "init_adam_state",
    "load_checkpoint",
    "loss",
    "make_checkpoint",
    "pretext_autoencoder_check",
    "restore_params",
    "save_checkpoint",
    "train",
    "write_history_csv",
]

OBJECTIVES = ("next_step", "infill", "alternating")
LOSS_KINDS = ("mse", "huber")
HISTORY_COLUMNS = ("epoch", "split", "objective", "loss")

CHECKPOINT_MAGIC = b"TTCK"
CHECKPOINT_VERSION = 1


class NumericsError(RuntimeError):
    """Training produced a non-finite loss."""


class CorruptCheckpointError(RuntimeError):
    """The checkpoint file is unreadable, truncated, or inconsistent."""


class CheckpointVersionError(RuntimeError):
    """The checkpoint was written by an incompatible format version."""


class ConfigMismatchError(RuntimeError):
    """The checkpoint's model configuration differs from the expected one."""


class NoSupervisionWarning(UserWarning):
    """A loss was requested over all-zero supervision weights."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings.

    ``objective`` selects next-step prediction, masked infill, or a 1:1
    alternation of the two; ``mask_kinds`` cycles per infill batch. A zero
    learning rate is allowed and leaves parameters untouched (useful for
    pipeline checks).
    """

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    epochs: int = 1
    batch_size: int = 8
    objective: str = "next_step"
    mask_ratio: float = masking.DEFAULT_MASK_RATIO
    mask_kinds: tuple[str, ...] = ("dimension", "segment")
    loss: str = "mse"
    huber_delta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not (0.0 < b < 1.0):
                raise ValueError(f"{name} must lie in (0, 1), got {b}")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.objective not in OBJECTIVES:
            raise ValueError(
                f"objective must be one of {OBJECTIVES}, got {self.objective!r}"
            )
        if not (0.0 < self.mask_ratio < 1.0):
            raise ValueError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if not self.mask_kinds or any(
            k not in ("dimension", "segment") for k in self.mask_kinds
        ):
            raise ValueError(f"unknown mask kinds: {self.mask_kinds}")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.huber_delta <= 0:
            raise ValueError(f"huber_delta must be > 0, got {self.huber_delta}")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "clip_norm": self.clip_norm,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "objective": self.objective,
            "mask_ratio": self.mask_ratio,
            "mask_kinds": list(self.mask_kinds),
            "loss": self.loss,
            "huber_delta": self.huber_delta,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "mask_kinds" in d:
            d["mask_kinds"] = tuple(d["mask_kinds"])
        return cls(**d)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def loss(
    pred: Tensor,
    targets: np.ndarray,
    weights: np.ndarray,
    *,
    kind: str = "mse",
    huber_delta: float = 1.0,
) -> Tensor:
    """Weighted mean of per-element squared or Huber error.

    ``weights`` are 0/1 supervision indicators; zero-weight entries
    contribute nothing to the value or the gradient. An all-zero weight
    array returns a constant 0 scalar and emits :class:`NoSupervisionWarning`.
    """
    targets = np.asarray(targets, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if pred.shape != targets.shape or pred.shape != weights.shape:
        raise ValueError(
            f"loss shapes disagree: pred {pred.shape}, targets {targets.shape}, "
            f"weights {weights.shape}"
        )
    total = float(weights.sum())
    if total == 0.0:
        warnings.warn(
            "loss over zero supervised entries; returning 0",
            NoSupervisionWarning,
            stacklevel=2,
        )
        return Tensor(0.0)
    diff = ad.sub(pred, Tensor(targets))
    if kind == "mse":
        elem = ad.mul(diff, diff)
    elif kind == "huber":
        elem = ad.huber(diff, huber_delta)
    else:
        raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {kind!r}")
    weighted = ad.mul(elem, Tensor(weights))
    return ad.scale(ad.tensor_sum(weighted), 1.0 / total)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators mirroring the parameter tree."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    def copy(self) -> "AdamState":
        return AdamState(
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            step=self.step,
        )


def init_adam_state(named: dict[str, Tensor]) -> AdamState:
    return AdamState(
        m={k: np.zeros(t.shape, dtype=np.float64) for k, t in named.items()},
        v={k: np.zeros(t.shape, dtype=np.float64) for k, t in named.items()},
    )


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(
    grads: dict[str, np.ndarray], clip_norm: float
) -> dict[str, np.ndarray]:
    """Scale all gradients by ``clip_norm / norm`` when the global L2 norm
    exceeds ``clip_norm``; otherwise return them unchanged (direction is
    always preserved)."""
    if clip_norm <= 0:
        raise ValueError(f"clip_norm must be > 0, got {clip_norm}")
    norm = global_grad_norm(grads)
    if norm <= clip_norm:
        return grads
    factor = clip_norm / norm
    return {k: g * factor for k, g in grads.items()}


def adam_step(
    named: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> AdamState:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, tensor in named.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(tensor.shape, dtype=np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        if cfg.lr == 0.0:  # moments still advance; parameters stay bit-frozen
            continue
        update = cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        tensor.data -= update
    return state


# ---------------------------------------------------------------------------
# patch-level supervision
# ---------------------------------------------------------------------------


def aggregate_patch_targets(
    targets: np.ndarray, length: int, patch_len: int
) -> tuple[np.ndarray, np.ndarray]:
    """Collapse per-point step targets to per-patch displacement targets.

    Patch ``j`` covers points ``[j*P, (j+1)*P)``; its target is the summed
    step sequence from the patch's first point to the next patch's first
    point, supervised only when that anchor point actually exists.
    Returns ``(patch_targets [S', 3], weights [S'])`` with S' = ceil(S / P).
    """
    if patch_len < 1:
        raise ValueError(f"patch_len must be >= 1, got {patch_len}")
    s = targets.shape[0]
    if not (2 <= length <= s):
        raise ValueError(f"length {length} out of range for {s} target rows")
    n_patches = -(-s // patch_len)
    out = np.zeros((n_patches, targets.shape[1]), dtype=np.float64)
    weights = np.zeros(n_patches, dtype=np.float64)
    for j in range(n_patches):
        lo = j * patch_len
        hi = min(lo + patch_len, s)
        if hi < length:  # the first point of patch j+1 is a real point
            out[j] = targets[lo:hi].sum(axis=0)
            weights[j] = 1.0
    return out, weights


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: "Checkpoint"
    history: list[dict]
    step_losses: list[float]


def _sample_mask_spec(
    length: int, kind: str, ratio: float, rng: np.random.Generator
) -> MaskSpec:
    # segment masks need room for a run; short sequences fall back to
    # per-position masking
    if kind == "segment" and length >= 4:
        return masking.sample_segment_mask(length, ratio, rng)
    return masking.sample_dimension_mask(length, ratio, rng)


def _batch_loss(
    batch: Batch,
    params: ModelParams,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    objective: str,
    rng: np.random.Generator | None,
) -> tuple[Tensor | None, float]:
    """Forward one batch under ``objective``; returns (loss, total weight).

    Returns ``(None, 0.0)`` when no entry is supervised (e.g. an infill
    draw that masked nothing).
    """
    preds: list[Tensor] = []
    target_rows: list[np.ndarray] = []
    weight_rows: list[np.ndarray] = []
    for row in range(batch.batch_size):
        length = batch.lengths[row]
        feats = batch.features[row, :length]
        targets = batch.targets[row, :length]
        if objective == "infill":
            kind = cfg.mask_kinds[rng.integers(0, len(cfg.mask_kinds))]
            spec = _sample_mask_spec(length, kind, cfg.mask_ratio, rng)
            x: Tensor | np.ndarray = masking.apply_mask(
                feats, spec, params.mask_emb
            )
            weights = masking.build_loss_mask(spec, "infill", length)
        else:
            x = feats
            if model_cfg.patch_len > 1:
                targets, patch_w = aggregate_patch_targets(
                    targets, length, model_cfg.patch_len
                )
                weights = np.repeat(patch_w[:, None], targets.shape[1], axis=1)
            else:
                weights = masking.build_loss_mask(None, "next_step", length)
        preds.append(forward_features(x, params, model_cfg))
        target_rows.append(targets)
        weight_rows.append(weights)
    all_targets = np.concatenate(target_rows, axis=0)
    all_weights = np.concatenate(weight_rows, axis=0)
    total = float(all_weights.sum())
    if total == 0.0:
        return None, 0.0
    pred = preds[0] if len(preds) == 1 else ad.concat(preds, axis=0)
    value = loss(
        pred, all_targets, all_weights, kind=cfg.loss, huber_delta=cfg.huber_delta
    )
    return value, total


def _resolve_objective(cfg_objective: str, batch_idx: int) -> str:
    if cfg_objective == "alternating":
        return "next_step" if batch_idx % 2 == 0 else "infill"
    return cfg_objective


def train(
    params: ModelParams,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    loader: Iterable[Batch],
    *,
    val_loader: Iterable[Batch] | None = None,
    norm_params: NormalizationParams | None = None,
    adam_state: AdamState | None = None,
    start_epoch: int = 0,
    history: list[dict] | None = None,
) -> TrainResult:
    """Run the epoch loop and return the final checkpoint plus metrics.

    Deterministic for a fixed seed on one platform: mask draws come from
    counter-based generators keyed by (seed, phase, epoch, batch), so a run
    resumed from a checkpoint at an epoch boundary reproduces the unbroken
    run exactly. A non-finite loss aborts with :class:`NumericsError` naming
    the epoch and batch.
    """
    if cfg.objective in ("infill", "alternating") and model_cfg.patch_len != 1:
        raise ValueError("infill objectives require patch_len == 1")
    named = named_parameters(params)
    state = adam_state if adam_state is not None else init_adam_state(named)
    history = list(history) if history else []
    step_losses: list[float] = []

    for epoch in range(start_epoch, cfg.epochs):
        epoch_losses: list[float] = []
        n_batches = 0
        for batch_idx, batch in enumerate(loader):
            n_batches += 1
            objective = _resolve_objective(cfg.objective, batch_idx)
            rng = np.random.default_rng([cfg.seed, 0, epoch, batch_idx])
            tape = ad.Tape()
            bind_params(params, tape)
            value, total = _batch_loss(
                batch, params, model_cfg, cfg, objective, rng
            )
            if value is None:
                tape.close()
                continue
            loss_val = float(value.data)
            if not math.isfinite(loss_val):
                raise NumericsError(
                    f"non-finite loss {loss_val!r} at epoch {epoch}, "
                    f"batch {batch_idx}"
                )
            ad.backward(value)
            grads = {name: t.grad for name, t in named.items()}
            grads = clip_gradients(grads, cfg.clip_norm)
            adam_step(named, grads, state, cfg)
            step_losses.append(loss_val)
            epoch_losses.append(loss_val)
        if n_batches == 0:
            raise ValueError("loader produced no batches")
        if epoch_losses:
            history.append(
                {
                    "epoch": epoch,
                    "split": "train",
                    "objective": cfg.objective,
                    "loss": float(np.mean(epoch_losses)),
                }
            )
        if val_loader is not None:
            val_losses = []
            for batch_idx, batch in enumerate(val_loader):
                objective = _resolve_objective(cfg.objective, batch_idx)
                rng = np.random.default_rng([cfg.seed, 1, epoch, batch_idx])
                value, total = _batch_loss(
                    batch, params, model_cfg, cfg, objective, rng
                )
                if value is not None:
                    val_losses.append(float(value.data))
            if val_losses:
                history.append(
                    {
                        "epoch": epoch,
                        "split": "val",
                        "objective": cfg.objective,
                        "loss": float(np.mean(val_losses)),
                    }
                )

    ckpt = make_checkpoint(
        params,
        model_cfg,
        norm_params=norm_params,
        adam=state,
        rng_state={"seed": cfg.seed, "next_epoch": cfg.epochs},
        history=history,
        train_config=cfg.to_dict(),
    )
    return TrainResult(checkpoint=ckpt, history=history, step_losses=step_losses)


def write_history_csv(history: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(HISTORY_COLUMNS))
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in HISTORY_COLUMNS})


# ---------------------------------------------------------------------------
# pretext autoencoder check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PretextReport:
    """Held-out reconstruction RMSE of the feature encoding, with and
    without the additive position table mixed in."""

    raw_rmse: float
    pe_rmse: float


def autoencoder_rmse(
    points: np.ndarray,
    d_latent: int,
    *,
    steps: int = 1000,
    lr: float = 1e-2,
    seed: int = 0,
    holdout_fraction: float = 0.2,
    targets: np.ndarray | None = None,
) -> float:
    """Train project -> gelu -> reconstruct for ``steps`` full-batch Adam
    updates; return RMSE on a held-out split.

    ``targets`` defaults to the inputs (an autoencoder); passing a
    different array turns it into a regression sanity probe.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 5:
        raise ValueError(f"need at least 5 points of shape [N, F], got {points.shape}")
    if d_latent < 1:
        raise ValueError(f"d_latent must be >= 1, got {d_latent}")
    targets = points if targets is None else np.asarray(targets, dtype=np.float64)
    if targets.shape != points.shape:
        raise ValueError("targets must match the points array shape")

    n, f = points.shape
    rng = np.random.default_rng([seed, 0])
    order = rng.permutation(n)
    n_hold = max(1, int(round(holdout_fraction * n)))
    hold, fit = order[:n_hold], order[n_hold:]
    if fit.size == 0:
        raise ValueError("holdout fraction leaves no training points")

    w1 = Tensor(rng.normal(0.0, 0.02, (f, d_latent)), requires_grad=True)
    b1 = Tensor(np.zeros(d_latent), requires_grad=True)
    w2 = Tensor(rng.normal(0.0, 0.02, (d_latent, f)), requires_grad=True)
    b2 = Tensor(np.zeros(f), requires_grad=True)
    named = {"w1": w1, "b1": b1, "w2": w2, "b2": b2}
    cfg = TrainConfig(lr=lr, clip_norm=1e9)
    state = init_adam_state(named)

    x_fit = Tensor(points[fit])
    y_fit = points[fit] if targets is points else targets[fit]
    ones = np.ones_like(y_fit)

    def reconstruct(x: Tensor) -> Tensor:
        hidden = ad.gelu(ad.add_bias(ad.matmul(x, w1), b1))
        return ad.add_bias(ad.matmul(hidden, w2), b2)

    for _ in range(steps):
        tape = ad.Tape()
        for t in named.values():
            tape.watch(t)
        value = loss(reconstruct(x_fit), y_fit, ones)
        ad.backward(value)
        adam_step(named, {k: t.grad for k, t in named.items()}, state, cfg)

    recon = reconstruct(Tensor(points[hold])).data
    y_hold = points[hold] if targets is points else targets[hold]
    return float(np.sqrt(np.mean((recon - y_hold) ** 2)))


def pretext_autoencoder_check(
    sequences: Sequence[np.ndarray],
    d_latent: int = 64,
    *,
    steps: int = 1000,
    lr: float = 1e-2,
    seed: int = 0,
) -> PretextReport:
    """Verify the feature encoding is invertible by a small autoencoder.

    Runs the probe twice — once on the raw per-point features and once
    after adding the sinusoidal position table (first F columns of an
    even-width table) — and reports both held-out RMSEs. Low values in both
    runs mean positions remain recoverable after the additive encoding.
    """
    seqs = [np.asarray(s, dtype=np.float64) for s in sequences]
    if not seqs or any(s.ndim != 2 or s.shape[1] != FEATURE_DIM for s in seqs):
        raise ValueError(f"need [S, {FEATURE_DIM}] feature sequences")
    raw = np.concatenate(seqs, axis=0)
    width = FEATURE_DIM + (FEATURE_DIM % 2)
    max_s = max(s.shape[0] for s in seqs)
    table = emb.sinusoidal_table(max_s, width)[:, :FEATURE_DIM]
    with_pe = np.concatenate(
        [s + table[: s.shape[0]] for s in seqs], axis=0
    )
    raw_rmse = autoencoder_rmse(raw, d_latent, steps=steps, lr=lr, seed=seed)
    pe_rmse = autoencoder_rmse(with_pe, d_latent, steps=steps, lr=lr, seed=seed)
    return PretextReport(raw_rmse=raw_rmse, pe_rmse=pe_rmse)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to resume or serve a model.

    ``arrays`` holds the named parameter tensors; ``rng_state`` records the
    counters that drive the (counter-keyed) training randomness, so resuming
    at an epoch boundary continues the exact stream.
    """

    model_config: ModelConfig
    arrays: dict[str, np.ndarray]
    norm_params: NormalizationParams | None = None
    adam: AdamState | None = None
    rng_state: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    train_config: dict | None = None
    version: int = CHECKPOINT_VERSION


def make_checkpoint(
    params: ModelParams,
    model_cfg: ModelConfig,
    *,
    norm_params: NormalizationParams | None = None,
    adam: AdamState | None = None,
    rng_state: dict | None = None,
    history: list | None = None,
    train_config: dict | None = None,
) -> Checkpoint:
    arrays = {name: t.data.copy() for name, t in named_parameters(params).items()}
    return Checkpoint(
        model_config=model_cfg,
        arrays=arrays,
        norm_params=norm_params,
        adam=adam.copy() if adam is not None else None,
        rng_state=dict(rng_state or {}),
        history=list(history or []),
        train_config=dict(train_config) if train_config else None,
    )


def restore_params(ckpt: Checkpoint) -> ModelParams:
    """Rebuild a parameter tree carrying the checkpoint's exact values."""
    params = init_params(ckpt.model_config, np.random.default_rng(0))
    named = named_parameters(params)
    if set(named) != set(ckpt.arrays):
        missing = sorted(set(named) ^ set(ckpt.arrays))
        raise CorruptCheckpointError(
            f"checkpoint arrays do not match the configuration: {missing}"
        )
    for name, tensor in named.items():
        stored = ckpt.arrays[name]
        if stored.shape != tensor.shape:
            raise CorruptCheckpointError(
                f"array {name!r} has shape {stored.shape}, expected {tensor.shape}"
            )
        tensor.data[:] = stored
    return params


def _array_entries(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    entries = [(f"params/{n}", a) for n, a in sorted(ckpt.arrays.items())]
    if ckpt.adam is not None:
        entries += [(f"adam_m/{n}", a) for n, a in sorted(ckpt.adam.m.items())]
        entries += [(f"adam_v/{n}", a) for n, a in sorted(ckpt.adam.v.items())]
    return entries


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write the versioned binary container.

    Layout: magic, format version, header length, JSON header (configs,
    history, array manifest), then each array's raw little-endian float64
    bytes in manifest order. Identical checkpoints serialize to identical
    bytes.
    """
    entries = _array_entries(ckpt)
    header = {
        "version": ckpt.version,
        "model_config": ckpt.model_config.to_dict(),
        "normalization": ckpt.norm_params.to_dict() if ckpt.norm_params else None,
        "adam_step": ckpt.adam.step if ckpt.adam is not None else None,
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
        "train_config": ckpt.train_config,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in entries],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode(
        "utf-8"
    )
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(
    path: str | Path, expect_config: ModelConfig | None = None
) -> Checkpoint:
    """Read a checkpoint; fails loudly on corruption, version skew, or a
    model configuration different from ``expect_config``."""
    raw = Path(path).read_bytes()
    prefix = len(CHECKPOINT_MAGIC) + 4 + 8
    if len(raw) < prefix or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {CHECKPOINT_VERSION}"
        )
    (header_len,) = struct.unpack_from("<Q", raw, len(CHECKPOINT_MAGIC) + 4)
    body_start = prefix + header_len
    if len(raw) < body_start:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[prefix:body_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from exc

    offset = body_start
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(int(d) for d in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise CorruptCheckpointError(
                f"{path}: truncated payload at array {entry['name']!r}"
            )
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise CorruptCheckpointError(f"{path}: {len(raw) - offset} trailing bytes")

    model_cfg = ModelConfig.from_dict(header["model_config"])
    if expect_config is not None and model_cfg != expect_config:
        raise ConfigMismatchError(
            f"{path}: checkpoint was written for a different model configuration"
        )

    params = {
        n[len("params/") :]: a for n, a in arrays.items() if n.startswith("params/")
    }
    adam = None
    if header.get("adam_step") is not None:
        adam = AdamState(
            m={n[len("adam_m/") :]: a for n, a in arrays.items() if n.startswith("adam_m/")},
            v={n[len("adam_v/") :]: a for n, a in arrays.items() if n.startswith("adam_v/")},
            step=int(header["adam_step"]),
        )
    norm = (
        NormalizationParams.from_dict(header["normalization"])
        if header.get("normalization")
        else None
    )
    return Checkpoint(
        model_config=model_cfg,
        arrays=params,
        norm_params=norm,
        adam=adam,
        rng_state=dict(header.get("rng_state") or {}),
        history=list(header.get("history") or []),
        train_config=header.get("train_config"),
        version=version,
    )
