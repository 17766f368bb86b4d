"""The 48 cube symmetries and ensemble target prediction for unlabeled data.

Run: python3 demos/03_symmetry_ensemble.py
"""

import numpy as np

from focalmix import (
    DetectorConfig,
    SSLConfig,
    Volume3D,
    compose,
    enumerate_group,
    init_model,
    inverse,
    predict_targets,
    sharpen,
)
from focalmix.rng import make_rng
from focalmix.transforms import apply_to_anchor_index, apply_to_array

group = enumerate_group()
print(f"cube symmetry group: {len(group)} elements")
t = group[17]
print(f"element 17: perm {t.perm}, signs {t.signs}")
print(f"composed with its inverse -> identity: {compose(t, inverse(t)).is_identity}")

# A transform moves voxels and anchors consistently: transforming a
# per-anchor map as a volume equals indexing by the anchor permutation.
cfg = DetectorConfig(input_patch=(16, 16, 16), stage_channels=(4, 6, 8), fpn_channels=6)
grid = cfg.anchor_grid()
pi = apply_to_anchor_index(t, grid)
scores = np.arange(grid.total_count, dtype=float)
level0 = scores[:512].reshape(8, 8, 8)
moved = apply_to_array(t, level0).ravel()
print(f"anchor permutation consistent with the volume action: "
      f"{np.array_equal(moved, scores[pi[:512]])}")

# Sharpening pushes an averaged prediction away from 0.5.
for y in (0.3, 0.5, 0.8):
    print(f"sharpen({y}, T=0.7) = {sharpen(y, 0.7):.4f}")

# Ensemble target prediction: average the model over K random
# symmetries (mapped back through the anchor permutation), then sharpen.
state = init_model(cfg)
rng = np.random.default_rng(3)
patch = Volume3D(rng.standard_normal(cfg.input_patch).astype(np.float32), (1.0,) * 3)
targets = predict_targets(state, patch, grid, SSLConfig(), make_rng(0, 1))
print(f"\npredicted targets for an unlabeled patch: "
      f"min {targets.cls.min():.4f}, max {targets.cls.max():.4f}")
print(f"untrained model hovers near its background prior, sharpened down: "
      f"mean {targets.cls.mean():.4f}")
print(f"all anchors trainable: {targets.train_mask.all()}, "
      f"no regression targets: {not targets.has_reg.any()}")

# With the full group as the ensemble, prediction is equivariant:
# transforming the patch permutes the targets.
full = SSLConfig(ensemble_size=48)
base = predict_targets(state, patch, grid, full, make_rng(1, 1)).cls
movedp = Volume3D(apply_to_array(t, patch.voxels), patch.spacing)
got = predict_targets(state, movedp, grid, full, make_rng(1, 1)).cls
print(f"full-group ensemble equivariance: "
      f"max deviation {np.abs(got - base[pi]).max():.2e}")
