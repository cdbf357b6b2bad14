"""From GPS fixes to model features and back, losslessly.

A trajectory is a list of (lat, lon, t) fixes.  The model never sees raw
degrees: positions are centered and scaled over the corpus, timestamps are
split into calendar components, and motion is expressed as deltas.  All of
it inverts.
"""

import numpy as np

from tinytraj import (
    SyntheticConfig,
    compute_center,
    delta_decode,
    delta_encode,
    featurize,
    generate_synthetic,
)
from tinytraj.geo import denormalize, normalize

print("=== 1. a synthetic corpus ===")
cfg = SyntheticConfig(n_traj=5, points_per_traj=6, noise_sigma=1e-4, seed=12)
trajs = list(generate_synthetic(cfg))
traj = trajs[0]
print(f"{len(trajs)} trajectories; first is {traj.id!r} with {len(traj)} points")
for p in traj.points[:3]:
    print(f"  ({p.lat:.6f}, {p.lon:.6f}, t={p.t})")

print("\n=== 2. corpus normalization round-trips ===")
norm = compute_center(trajs)
print(f"center=({norm.center_lat:.5f}, {norm.center_lon:.5f}) "
      f"scale=({norm.scale_lat:.2e}, {norm.scale_lon:.2e})")
p = traj.points[0]
x, y = normalize(p, norm)
lat, lon = denormalize(x, y, norm)
print(f"({p.lat:.9f}, {p.lon:.9f}) -> ({x:+.4f}, {y:+.4f}) -> "
      f"({lat:.9f}, {lon:.9f})")
assert abs(lat - p.lat) < 1e-9 and abs(lon - p.lon) < 1e-9

print("\n=== 3. delta encoding is exactly invertible ===")
decoded = delta_decode(delta_encode(traj))
t_exact = [q.t for q in decoded.points] == [p.t for p in traj.points]
coord_err = max(
    max(abs(q.lat - p.lat), abs(q.lon - p.lon))
    for q, p in zip(decoded.points, traj.points)
)
print(f"timestamps exact: {t_exact}; max coordinate error: {coord_err:.2e}")
assert t_exact and coord_err < 1e-12

print("\n=== 4. point features the model consumes ===")
fs = featurize(traj, norm)
print("features [S, 7]: x, y, day-of-week, hour, minute, second, dt/60")
with np.printoptions(precision=3, suppress=True):
    print(fs.features[:3])
print("targets  [S, 3]: next-step (dlat, dlon, dt), zero on the last row")
with np.printoptions(precision=3, suppress=True):
    print(fs.targets[:3])
