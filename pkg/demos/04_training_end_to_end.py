"""Train a small detector supervised, then with the semi-supervised recipe,
and compare CPM on held-out scans.  Takes a couple of minutes on one core.

Run: python3 demos/04_training_end_to_end.py
"""

import dataclasses
import time

from focalmix import (
    DetectorConfig,
    GenConfig,
    LabeledScan,
    SSLConfig,
    evaluate_scans,
    generate_scan,
    train,
)

gen = GenConfig(volume_shape=(32, 32, 32), seed=4)
model_cfg = DetectorConfig(input_patch=(16, 16, 16), stage_channels=(4, 6, 8), fpn_channels=6)
ssl = SSLConfig(
    labeled_per_batch=3, unlabeled_per_batch=3, ensemble_size=2,
    steps_per_epoch=6, base_lr=2e-3,
)
EPOCHS = 48

labeled = [generate_scan(gen, i) for i in range(3)]
unlabeled = [
    LabeledScan(volume=s.volume, boxes=[], id=s.id)
    for s in (generate_scan(gen, 100_000 + i) for i in range(12))
]
test = [generate_scan(gen, 200_000 + i) for i in range(12)]
n_lesions = sum(len(s.boxes) for s in test)
print(f"{len(labeled)} labeled / {len(unlabeled)} unlabeled scans; "
      f"{len(test)} test scans with {n_lesions} lesions\n")

supervised = dataclasses.replace(
    ssl, unlabeled_per_batch=0, image_mixup=False, object_mixup=False
)
t0 = time.time()
state_sup, log = train(labeled, [], supervised, model_cfg, epochs=EPOCHS)
_, cpm_sup = evaluate_scans(state_sup, test)
print(f"supervised baseline: CPM {cpm_sup:5.1f}  "
      f"(final loss {log[-1].loss_labeled:.4f}, {time.time() - t0:.0f}s)")

t0 = time.time()
state_mix, log = train(labeled, unlabeled, ssl, model_cfg, epochs=EPOCHS)
_, cpm_mix = evaluate_scans(state_mix, test)
print(f"semi-supervised:     CPM {cpm_mix:5.1f}  "
      f"(final labeled loss {log[-1].loss_labeled:.4f}, "
      f"unlabeled loss {log[-1].loss_unlabeled:.4f}, {time.time() - t0:.0f}s)")

print(f"\nCPM gain from unlabeled scans + MixUp: {cpm_mix - cpm_sup:+.1f}")
print("(a desk-scale illustration; run the CLI with configs/desk.json "
      "for the full experiment)")
