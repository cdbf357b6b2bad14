"""Autoregressive rollout and meter-space scoring.

A trained (here: small and briefly trained) model extends a trajectory one
step at a time: predict (dlat, dlon, dt), decode to a real fix, re-featurize,
repeat.  Errors are measured with the haversine distance in meters, so the
numbers are physical.
"""

import numpy as np

from tinytraj import (
    BatchLoader,
    ModelConfig,
    SyntheticConfig,
    TrainConfig,
    compute_center,
    evaluate,
    generate_synthetic,
    haversine,
    init_params,
    rollout,
    train,
)
from tinytraj.training import restore_params

print("=== 1. haversine sanity ===")
print(f"equator, one degree of longitude: "
      f"{haversine((0.0, 0.0), (0.0, 1.0)):,.0f} m")
print(f"identical points: {haversine((52.5, 13.4), (52.5, 13.4))} m")

print("\n=== 2. train a small model on straight lines ===")
cfg = SyntheticConfig(
    n_traj=40, points_per_traj=16, n_waypoints=2,
    speed_min=1e-3, speed_max=3e-3, noise_sigma=0.0,
    bbox=(52.45, 13.25, 52.55, 13.35), seed=8,
)
trajs = list(generate_synthetic(cfg))
norm = compute_center(trajs)
model_cfg = ModelConfig(d_model=16, n_heads=2, n_blocks=1, max_seq=16)
train_cfg = TrainConfig(lr=1e-2, epochs=20, batch_size=10, seed=4)
untrained = init_params(model_cfg, np.random.default_rng(train_cfg.seed))
params = init_params(model_cfg, np.random.default_rng(train_cfg.seed))
result = train(params, model_cfg, train_cfg,
               BatchLoader(trajs, 10, 16, norm), norm_params=norm)
trained = restore_params(result.checkpoint)
print(f"loss {result.step_losses[0]:.5f} -> {result.step_losses[-1]:.5f} "
      f"over {len(result.step_losses)} steps")

print("\n=== 3. extend one trajectory ===")
from tinytraj.geo import Trajectory

source = trajs[0]
prefix = Trajectory(id=source.id, points=list(source.points[:11]))
predicted = rollout(trained, model_cfg, norm, prefix, horizon=5)
print("   predicted                         actual")
for pred, actual in zip(predicted, source.points[11:]):
    err = haversine(pred, actual)
    print(f"  ({pred.lat:.5f}, {pred.lon:.5f}, t={pred.t})   "
          f"({actual.lat:.5f}, {actual.lon:.5f}, t={actual.t})   "
          f"off by {err:,.0f} m")

print("\n=== 4. corpus-level report ===")
for label, p in (("untrained", untrained), ("trained", trained)):
    report = evaluate(p, model_cfg, trajs, norm, "rollout", horizon=5)
    print(f"  {label:>9}: ADE {report.ade_m:8.1f} m   FDE {report.fde_m:8.1f} m   "
          f"time MAE {report.time_mae_s:5.1f} s")

print("\n=== 5. reports do not depend on batch size ===")
outputs = {
    evaluate(trained, model_cfg, trajs, norm, "next_step", batch_size=b).to_json()
    for b in (1, 8, 64)
}
print("distinct reports across batch sizes 1/8/64:", len(outputs))
assert len(outputs) == 1
