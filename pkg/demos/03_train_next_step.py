"""Train a small model to predict the next GPS fix, then checkpoint it.

Straight-line tracks make learning visible in seconds: the next delta is
(almost) the previous one, so the loss should collapse quickly.  The run is
fully deterministic — retraining with the same seed gives a byte-identical
checkpoint.
"""

import hashlib
import tempfile
from pathlib import Path

import numpy as np

from tinytraj import (
    BatchLoader,
    ModelConfig,
    SyntheticConfig,
    TrainConfig,
    compute_center,
    generate_synthetic,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train,
)

print("=== 1. corpus and model ===")
corpus_cfg = SyntheticConfig(
    n_traj=24, points_per_traj=12, n_waypoints=2, noise_sigma=0.0, seed=3
)
trajs = list(generate_synthetic(corpus_cfg))
norm = compute_center(trajs)
model_cfg = ModelConfig(d_model=16, n_heads=2, n_blocks=1, max_seq=12)
train_cfg = TrainConfig(lr=5e-3, epochs=10, batch_size=8, seed=1)
print(f"{len(trajs)} straight lines; model d={model_cfg.d_model}, "
      f"{model_cfg.n_blocks} block(s); {train_cfg.epochs} epochs")

print("\n=== 2. training ===")
params = init_params(model_cfg, np.random.default_rng(train_cfg.seed))
loader = BatchLoader(trajs, train_cfg.batch_size, 12, norm)
result = train(params, model_cfg, train_cfg, loader, norm_params=norm)
for row in result.history:
    print(f"  epoch {row['epoch']:2d}  {row['split']}  loss={row['loss']:.6f}")
first, last = result.step_losses[0], result.step_losses[-1]
print(f"step loss {first:.6f} -> {last:.6f} "
      f"({100 * (1 - last / first):.1f}% lower)")

print("\n=== 3. checkpoint round trip ===")
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "model.ckpt"
    save_checkpoint(result.checkpoint, path)
    print(f"checkpoint: {path.stat().st_size} bytes, "
          f"sha256 {hashlib.sha256(path.read_bytes()).hexdigest()[:16]}…")
    loaded = load_checkpoint(path, expect_config=model_cfg)
    same = all(
        np.array_equal(loaded.arrays[name], result.checkpoint.arrays[name])
        for name in result.checkpoint.arrays
    )
    print("reloaded arrays bit-identical:", same)
    assert same

print("\n=== 4. determinism ===")
params2 = init_params(model_cfg, np.random.default_rng(train_cfg.seed))
rerun = train(params2, model_cfg, train_cfg, BatchLoader(trajs, 8, 12, norm),
              norm_params=norm)
print("rerun losses identical:", rerun.step_losses == result.step_losses)
assert rerun.step_losses == result.step_losses
