"""From lesion boxes to anchor targets to the soft-target focal loss.

Run: python3 demos/02_anchors_and_loss.py
"""

import numpy as np

from focalmix import (
    Box3D,
    DetectorConfig,
    FocalParams,
    assign_targets,
    detection_loss,
    focal_loss,
    soft_focal_loss,
)

grid = DetectorConfig().anchor_grid()
print(f"anchor grid over a {grid.patch_shape} patch: {grid.total_count} anchors")
for i, spec in enumerate(grid.levels):
    cells = grid.level_cells(i)
    print(f"  level {i}: stride {spec.stride}, edge {spec.base_edge}, "
          f"{cells[0]}x{cells[1]}x{cells[2]} cells")

# Assign targets for one lesion sitting on an anchor center.
gt = Box3D(center=(14.0, 14.0, 14.0), edge=7.0)
targets = assign_targets(grid, [gt])
pos = int((targets.cls == 1.0).sum())
ignored = int((~targets.train_mask).sum())
neg = grid.total_count - pos - ignored
print(f"\nlesion edge {gt.edge} at {gt.center}: "
      f"{pos} positive / {ignored} ignored / {neg} negative anchors")
print("positive anchors regress to the lesion; a few of their offsets:")
for i in np.flatnonzero(targets.has_reg)[:3]:
    print(f"  anchor {i} -> {np.round(targets.reg[i], 3)}")

# The soft-target focal loss collapses to the classic focal loss on
# binary targets, and interpolates smoothly in between.
params = FocalParams()
p = np.array([0.9, 0.9, 0.6])
y = np.array([1.0, 0.0, 0.7])
soft, _ = soft_focal_loss(p, y, params)
hard, _ = focal_loss(p[:2], y[:2], params)
print(f"\nsoft focal loss at p={p.tolist()}, y={y.tolist()}: {np.round(soft, 6)}")
print(f"hard focal loss on the binary pair:            {np.round(hard, 6)}")
print(f"agreement on binary targets: {np.abs(soft[:2] - hard).max():.2e}")

# Combined objective on random predictions: cls normalized by target
# mass, reg averaged over positive anchors.
rng = np.random.default_rng(0)
probs = rng.uniform(0.05, 0.6, grid.total_count)
reg = rng.standard_normal((grid.total_count, 4)) * 0.1
out = detection_loss(probs, reg, targets, params)
print(f"\ndetection loss: total {out.total:.4f} "
      f"(cls {out.cls_term:.4f} + reg {out.reg_term:.4f})")
print(f"ignored anchors get zero gradient: "
      f"{np.all(out.dprobs[~targets.train_mask] == 0.0)}")
