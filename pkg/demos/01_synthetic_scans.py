"""Generate a synthetic scan, look inside it, and crop a training patch.

Run: python3 demos/01_synthetic_scans.py
"""

import os
import tempfile

import numpy as np

from focalmix import GenConfig, crop_patch, generate_scan, normalize_patch, read_scan, write_scan

cfg = GenConfig(seed=7)
scan = generate_scan(cfg, 0)
vox = scan.volume.voxels

print(f"scan {scan.id}: shape {scan.volume.shape}, spacing {scan.volume.spacing}")
print(f"voxel stats: mean {vox.mean():.3f}, std {vox.std():.3f}, "
      f"range [{vox.min():.2f}, {vox.max():.2f}]")
print(f"{len(scan.boxes)} lesions:")
for b in scan.boxes:
    c = tuple(int(v) for v in b.center)
    print(f"  center {b.center} edge {b.edge:.2f}  voxel value there {vox[c]:.2f}")

# Lesions are bright spheres; distractors (tubes and diffuse blobs) are
# unannotated structures of similar intensity, giving the detector
# something to reject.
print(f"\nbrightest voxel: {vox.max():.2f} at {np.unravel_index(vox.argmax(), vox.shape)}")

# Crop a 32-cube around the first lesion, as the training loop would.
box = scan.boxes[0]
patch = crop_patch(scan, box.center, (32, 32, 32))
print(f"\npatch around lesion: {patch.volume.shape}, "
      f"{len(patch.boxes)} box(es) survive the crop")
print(f"box coordinates moved to patch frame: {patch.boxes[0].center}")

normalized = normalize_patch(patch.volume)
print(f"after normalization: mean {normalized.voxels.mean():.2e}, "
      f"std {normalized.voxels.std():.3f}")

# Scans round-trip through a raw float32 voxel file plus a JSON sidecar.
with tempfile.TemporaryDirectory() as tmp:
    path = os.path.join(tmp, scan.id)
    write_scan(scan, path)
    back = read_scan(path)
    print(f"\nround trip through {os.path.basename(path)}.vol/.json: "
          f"voxels identical = {np.array_equal(back.volume.voxels, vox.astype(np.float32))}, "
          f"boxes identical = {back.boxes == scan.boxes}")
