"""tinytraj: a desk-scale trajectory sequence model, built from first principles.

A small decoder transformer over GPS tracks — (lat, lon, t) sequences — with
its own float64 tensor engine and tape-based reverse-mode autodiff, plus the
surrounding plumbing: reversible trajectory encodings, synthetic corpora,
masked-infill corruption, a deterministic training loop with binary
checkpoints, rollout, and haversine-based evaluation.  Everything is
deterministic down to the bit for a fixed seed.

The layers, bottom-up:

- :mod:`tinytraj.autodiff` — tensors, the tape, and the op set
- :mod:`tinytraj.geo` — trajectories, normalization, deltas, point features
- :mod:`tinytraj.embedding` — projections, positional encodings, patching
- :mod:`tinytraj.masking` — infill corruption and loss weights
- :mod:`tinytraj.model` — attention blocks and the full network
- :mod:`tinytraj.data` — synthetic generation, JSONL streaming, batching
- :mod:`tinytraj.training` — loss, Adam, the epoch loop, checkpoints
- :mod:`tinytraj.evaluation` — haversine metrics, rollout, report building
- :mod:`tinytraj.cli` — the ``tinytraj`` command
"""

from .autodiff import Tape, Tensor, backward
from .data import (
    Batch,
    BatchLoader,
    SyntheticConfig,
    batchify,
    generate_synthetic,
    split,
    stream_jsonl,
    write_jsonl,
)
from .evaluation import MetricsReport, evaluate, haversine, rollout
from .geo import (
    FEATURE_DIM,
    NormalizationParams,
    TrajPoint,
    Trajectory,
    compute_center,
    delta_decode,
    delta_encode,
    featurize,
)
from .model import ModelConfig, ModelParams, init_params, model_forward
from .training import (
    Checkpoint,
    TrainConfig,
    TrainResult,
    load_checkpoint,
    pretext_autoencoder_check,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "BatchLoader",
    "Checkpoint",
    "FEATURE_DIM",
    "MetricsReport",
    "ModelConfig",
    "ModelParams",
    "NormalizationParams",
    "SyntheticConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "TrajPoint",
    "Trajectory",
    "__version__",
    "backward",
    "batchify",
    "compute_center",
    "delta_decode",
    "delta_encode",
    "evaluate",
    "featurize",
    "generate_synthetic",
    "haversine",
    "init_params",
    "load_checkpoint",
    "model_forward",
    "pretext_autoencoder_check",
    "rollout",
    "save_checkpoint",
    "split",
    "stream_jsonl",
    "train",
    "write_jsonl",
]
