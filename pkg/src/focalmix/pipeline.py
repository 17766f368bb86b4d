"""Semi-supervised detector training: ensemble target prediction over the
cube symmetry group, two-level MixUp, batch assembly, and the train loop.

Unlabeled patches get soft anchor targets by averaging the model's
predictions over K randomly drawn cube symmetries (each prediction mapped
back through the matching anchor permutation) and sharpening the average
toward 0 or 1 with temperature T.  Labeled and unlabeled samples are then
blended two ways: image-level MixUp (voxelwise and anchor-target convex
blends with a Beta-drawn weight folded above 0.5) followed by
object-level MixUp (each lesion's sub-volume blended with another lesion
from the batch, rescaled to fit, targets untouched).  The combined batch
trains the detector with the soft-target focal loss; setting the
unlabeled count to zero and disabling MixUp yields the fully supervised
baseline on the identical code path.

All stochastic choices in an operation come from the caller-supplied
generator in a fixed documented order, so training is reproducible
bit-for-bit in single-threaded runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

from .anchors import AnchorGrid, AnchorTargets, Detection, assign_targets, decode_box, nms
from .exceptions import ConfigurationError, DivergenceError
from .loss import FocalParams, detection_loss
from .model import (
    DetectorConfig,
    ModelState,
    adam_step,
    backward,
    cosine_lr,
    forward,
    init_model,
)
from .rng import TRAIN_STREAM, make_rng
from .transforms import apply_to_anchor_index, apply_to_array, enumerate_group
from .volume import Box3D, LabeledScan, Volume3D, crop_patch, normalize_patch

__all__ = [
    "SSLConfig",
    "TrainingSample",
    "EpochMetrics",
    "sharpen",
    "predict_targets",
    "sample_mix_weight",
    "image_mixup",
    "object_mixup",
    "detect_scan",
    "select_unlabeled",
    "evaluate_scans",
    "train",
]

NMS_IOU = 0.1
DETECT_MIN_SCORE = 0.05
DETECT_MAX_PER_SCAN = 100
CROP_JITTER = 4  # voxels of random offset around a lesion-centered crop


@dataclass(frozen=True)
class SSLConfig:
    """Knobs of the semi-supervised pipeline."""

    ensemble_size: int = 4  # augmentations per unlabeled patch
    sharpen_temperature: float = 0.7
    mixup_alpha: float = 0.2  # Beta(alpha, alpha) mixing weight
    labeled_per_batch: int = 4
    unlabeled_per_batch: int = 4
    object_conf_threshold: float = 0.8
    seed: int = 0
    image_mixup: bool = True
    object_mixup: bool = True
    base_lr: float = 0.001
    steps_per_epoch: int = 8
    reg_weight: float = 1.0

    def __post_init__(self):
        if self.ensemble_size < 1:
            raise ConfigurationError(f"ensemble_size must be >= 1, got {self.ensemble_size}")
        if not (0.0 < self.sharpen_temperature <= 1.0):
            raise ConfigurationError(
                f"sharpen_temperature must lie in (0, 1], got {self.sharpen_temperature}"
            )
        if self.mixup_alpha <= 0:
            raise ConfigurationError(f"mixup_alpha must be > 0, got {self.mixup_alpha}")
        if self.labeled_per_batch < 1:
            raise ConfigurationError("labeled_per_batch must be >= 1")
        if self.unlabeled_per_batch < 0:
            raise ConfigurationError("unlabeled_per_batch must be >= 0")
        if not (0.0 <= self.object_conf_threshold <= 1.0):
            raise ConfigurationError("object_conf_threshold must lie in [0, 1]")
        if self.base_lr <= 0 or self.steps_per_epoch < 1 or self.reg_weight < 0:
            raise ConfigurationError("invalid optimizer settings")

    def to_json_dict(self) -> dict:
        return {
            "ensemble_size": self.ensemble_size,
            "sharpen_temperature": self.sharpen_temperature,
            "mixup_alpha": self.mixup_alpha,
            "labeled_per_batch": self.labeled_per_batch,
            "unlabeled_per_batch": self.unlabeled_per_batch,
            "object_conf_threshold": self.object_conf_threshold,
            "seed": self.seed,
            "image_mixup": self.image_mixup,
            "object_mixup": self.object_mixup,
            "base_lr": self.base_lr,
            "steps_per_epoch": self.steps_per_epoch,
            "reg_weight": self.reg_weight,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SSLConfig":
        return cls(**d)


@dataclass
class TrainingSample:
    """One patch ready for the loss: voxels, per-anchor targets, provenance.

    ``objects`` lists the lesion boxes used by object-level MixUp: ground
    truth for labeled samples, confident detections for unlabeled ones.
    """

    patch: Volume3D
    targets: AnchorTargets
    source: str  # "labeled" or "unlabeled"
    objects: list[Box3D] = field(default_factory=list)

    def __post_init__(self):
        if self.source not in ("labeled", "unlabeled"):
            raise ValueError(f"source must be labeled/unlabeled, got {self.source!r}")


def sharpen(y_bar, temperature: float):
    """Temperature sharpening of a two-class distribution (y, 1-y).

    y^(1/T) / (y^(1/T) + (1-y)^(1/T)); the identity at T=1, a step toward
    {0, 1} as T decreases.  Elementwise over arrays.
    """
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be > 0, got {temperature}")
    y = np.asarray(y_bar, dtype=np.float64)
    p = y ** (1.0 / temperature)
    q = (1.0 - y) ** (1.0 / temperature)
    out = p / (p + q)
    return float(out) if np.isscalar(y_bar) else out


def predict_targets(
    state: ModelState,
    patch: Volume3D,
    grid: AnchorGrid,
    cfg: SSLConfig,
    rng: np.random.Generator,
) -> AnchorTargets:
    """Soft anchor targets for an unlabeled patch.

    Draws K cube symmetries (without replacement while K <= 48), runs the
    model on each transformed patch, maps the per-anchor probabilities
    back through the inverse anchor permutation, averages, and sharpens.
    Every anchor is trainable; no regression targets are produced.
    """
    group = enumerate_group()
    k = cfg.ensemble_size
    picks = rng.choice(len(group), size=k, replace=k > len(group))
    acc = np.zeros(grid.total_count, dtype=np.float64)
    for t_index in picks:
        t = group[int(t_index)]
        transformed = apply_to_array(t, patch.voxels)
        probs = forward(state, transformed).probs.astype(np.float64)
        perm = apply_to_anchor_index(t, grid)
        # Anchor i of the transformed patch sits at original anchor perm[i].
        acc[perm] += probs
    mean = acc / k
    if not np.isfinite(mean).all():
        raise DivergenceError("model produced non-finite ensemble predictions")
    targets = sharpen(mean, cfg.sharpen_temperature)
    n = grid.total_count
    return AnchorTargets(
        cls=targets,
        reg=np.zeros((n, 4)),
        has_reg=np.zeros(n, dtype=bool),
        train_mask=np.ones(n, dtype=bool),
    )


def sample_mix_weight(alpha: float, rng: np.random.Generator) -> float:
    """Beta(alpha, alpha) draw folded onto [0.5, 1]."""
    lam = float(rng.beta(alpha, alpha))
    return max(lam, 1.0 - lam)


def image_mixup(a: TrainingSample, b: TrainingSample, mix_weight: float) -> TrainingSample:
    """Convex blend of two samples, dominated by ``a`` (mix_weight >= 0.5).

    Voxels and per-anchor classification targets blend linearly; anchors
    ignored in either source stay ignored; regression targets, provenance,
    and MixUp objects follow the dominant sample.
    """
    if not (0.5 <= mix_weight <= 1.0):
        raise ValueError(f"mix_weight must lie in [0.5, 1], got {mix_weight}")
    if a.patch.voxels.shape != b.patch.voxels.shape:
        raise ValueError("image_mixup requires identical patch shapes")
    if a.targets.cls.shape != b.targets.cls.shape:
        raise ValueError("image_mixup requires identical anchor grids")
    if mix_weight == 1.0:
        return TrainingSample(
            patch=Volume3D(a.patch.voxels.copy(), a.patch.spacing),
            targets=a.targets.copy(),
            source=a.source,
            objects=list(a.objects),
        )
    w = mix_weight
    voxels = w * a.patch.voxels + (1.0 - w) * b.patch.voxels
    cls = w * a.targets.cls + (1.0 - w) * b.targets.cls
    return TrainingSample(
        patch=Volume3D(voxels.astype(a.patch.voxels.dtype), a.patch.spacing),
        targets=AnchorTargets(
            cls=cls,
            reg=a.targets.reg.copy(),
            has_reg=a.targets.has_reg.copy(),
            train_mask=a.targets.train_mask & b.targets.train_mask,
        ),
        source=a.source,
        objects=list(a.objects),
    )


def _box_window(box: Box3D, shape: tuple[int, int, int]) -> tuple[tuple[int, int], ...]:
    """Integer voxel window covering the box, clipped to the volume."""
    half = box.edge / 2.0
    window = []
    for i in range(3):
        lo = int(np.floor(box.center[i] - half))
        hi = int(np.ceil(box.center[i] + half))
        lo = max(lo, 0)
        hi = min(hi, shape[i])
        window.append((lo, hi))
    return tuple(window)


def _resample_to(block: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """Trilinear resize of a 3D block to the given shape."""
    coords = np.meshgrid(
        *[
            (np.arange(shape[i]) + 0.5) * block.shape[i] / shape[i] - 0.5
            for i in range(3)
        ],
        indexing="ij",
    )
    out = ndimage.map_coordinates(
        block.astype(np.float64), np.stack([c.ravel() for c in coords]), order=1,
        mode="nearest",
    )
    return out.reshape(shape)


def object_mixup(
    batch: list[TrainingSample],
    mix_weight_sampler: Callable[[np.random.Generator], float],
    rng: np.random.Generator,
) -> list[TrainingSample]:
    """Blend each lesion with a randomly chosen other lesion of the batch.

    Donor sub-volumes are taken from an unmodified snapshot of the batch,
    rescaled trilinearly to the host lesion's window, and blended with a
    fresh weight per lesion.  Training targets are untouched.  With fewer
    than two lesions in the batch this is a no-op.

    Draw order per host lesion (batch order, then per-sample object
    order): donor index among the other lesions, then the mix weight.
    """
    objects = [
        (i, j, box) for i, s in enumerate(batch) for j, box in enumerate(s.objects)
    ]
    if len(objects) < 2:
        return batch
    snapshot = [s.patch.voxels.copy() for s in batch]
    out = [
        TrainingSample(
            patch=Volume3D(s.patch.voxels.copy(), s.patch.spacing),
            targets=s.targets,
            source=s.source,
            objects=list(s.objects),
        )
        for s in batch
    ]
    for k, (i, _, box) in enumerate(objects):
        donor_pick = int(rng.integers(len(objects) - 1))
        if donor_pick >= k:
            donor_pick += 1
        di, _, donor_box = objects[donor_pick]
        w = mix_weight_sampler(rng)

        host_win = _box_window(box, out[i].patch.voxels.shape)
        donor_win = _box_window(donor_box, snapshot[di].shape)
        host_shape = tuple(hi - lo for lo, hi in host_win)
        donor_shape = tuple(hi - lo for lo, hi in donor_win)
        if min(host_shape) < 1 or min(donor_shape) < 1:
            continue
        donor_block = snapshot[di][
            donor_win[0][0] : donor_win[0][1],
            donor_win[1][0] : donor_win[1][1],
            donor_win[2][0] : donor_win[2][1],
        ]
        resampled = _resample_to(donor_block, host_shape)
        region = out[i].patch.voxels[
            host_win[0][0] : host_win[0][1],
            host_win[1][0] : host_win[1][1],
            host_win[2][0] : host_win[2][1],
        ]
        region[...] = (w * region + (1.0 - w) * resampled).astype(region.dtype)
    return out


def _patch_detections(
    probs: np.ndarray,
    reg: np.ndarray,
    grid: AnchorGrid,
    min_score: float,
    max_keep: int = DETECT_MAX_PER_SCAN,
) -> list[Detection]:
    """Decode + suppress one patch's predictions, in anchor order."""
    keep = np.nonzero(probs >= min_score)[0]
    dets = [
        Detection(box=decode_box(grid.anchor_box(int(i)), reg[int(i)]), score=float(probs[int(i)]))
        for i in keep
    ]
    return nms(dets, NMS_IOU, max_keep=max_keep)


def detect_scan(
    state: ModelState,
    scan: LabeledScan,
    min_score: float = DETECT_MIN_SCORE,
    max_detections: int = DETECT_MAX_PER_SCAN,
) -> list[Detection]:
    """Sliding-window inference over a whole scan.

    Windows tile the scan with the patch size as stride, with a final
    flush window per axis when the scan size is not a multiple; each
    window is normalized exactly as in training.  Candidates above
    ``min_score`` are decoded into scan coordinates and merged with a
    global greedy suppression, keeping at most ``max_detections``.
    """
    patch_shape = state.config.input_patch
    grid = state.config.anchor_grid()
    shape = scan.volume.shape
    starts_per_axis = []
    for i in range(3):
        if shape[i] <= patch_shape[i]:
            starts = [0] if shape[i] == patch_shape[i] else [-((patch_shape[i] - shape[i]) // 2)]
        else:
            starts = list(range(0, shape[i] - patch_shape[i] + 1, patch_shape[i]))
            if starts[-1] != shape[i] - patch_shape[i]:
                starts.append(shape[i] - patch_shape[i])
        starts_per_axis.append(starts)

    candidates: list[Detection] = []
    for z0 in starts_per_axis[0]:
        for y0 in starts_per_axis[1]:
            for x0 in starts_per_axis[2]:
                center = tuple(s + p / 2.0 for s, p in zip((z0, y0, x0), patch_shape))
                window = crop_patch(scan, center, patch_shape)
                result = forward(state, normalize_patch(window.volume))
                for det in _patch_detections(
                    result.probs, result.reg, grid, min_score, max_keep=max_detections
                ):
                    shifted = Box3D(
                        center=(
                            det.box.center[0] + z0,
                            det.box.center[1] + y0,
                            det.box.center[2] + x0,
                        ),
                        edge=det.box.edge,
                    )
                    candidates.append(Detection(box=shifted, score=det.score))
    return nms(candidates, NMS_IOU, max_keep=max_detections)


def select_unlabeled(
    state: ModelState, pool: list[LabeledScan], threshold: float
) -> list[LabeledScan]:
    """Keep scans holding at least one confident post-suppression detection."""
    selected = []
    for scan in pool:
        dets = detect_scan(state, scan, min_score=min(threshold, DETECT_MIN_SCORE))
        if any(d.score >= threshold for d in dets):
            selected.append(scan)
    return selected


def evaluate_scans(state: ModelState, scans: list[LabeledScan]):
    """FROC curve + CPM of a model over labeled evaluation scans."""
    from .metrics import cpm, froc, match_detections

    dets = {scan.id: detect_scan(state, scan) for scan in scans}
    gts = {scan.id: scan.boxes for scan in scans}
    matched = match_detections(dets, gts)
    curve = froc(matched)
    return curve, cpm(curve)


@dataclass
class EpochMetrics:
    """One metrics-log row."""

    epoch: int
    lr: float
    loss_labeled: float
    loss_unlabeled: float
    cpm_val: float | None = None


def _random_crop_center(shape, patch_shape, rng) -> tuple[float, ...]:
    """Uniform patch placement fully inside the volume (per-axis clamp)."""
    center = []
    for i in range(3):
        half = patch_shape[i] // 2
        lo, hi = half, shape[i] - patch_shape[i] + half
        center.append(float(rng.integers(lo, hi + 1)) if hi >= lo else shape[i] / 2.0)
    return tuple(center)


def _labeled_sample(
    scan: LabeledScan, grid: AnchorGrid, patch_shape, rng
) -> TrainingSample:
    """Crop a labeled patch: half the time centered near a random lesion.

    Draw order: placement coin; then either lesion index + per-axis
    jitter, or the uniform center.
    """
    shape = scan.volume.shape
    lesion_centered = bool(scan.boxes) and rng.random() < 0.5
    if lesion_centered:
        box = scan.boxes[int(rng.integers(len(scan.boxes)))]
        jitter = rng.integers(-CROP_JITTER, CROP_JITTER + 1, size=3)
        center = []
        for i in range(3):
            half = patch_shape[i] // 2
            lo, hi = half, shape[i] - patch_shape[i] + half
            c = float(np.round(box.center[i])) + float(jitter[i])
            center.append(float(np.clip(c, lo, hi)) if hi >= lo else shape[i] / 2.0)
        center = tuple(center)
    else:
        center = _random_crop_center(shape, patch_shape, rng)
    patch = crop_patch(scan, center, patch_shape)
    return TrainingSample(
        patch=normalize_patch(patch.volume),
        targets=assign_targets(grid, patch.boxes),
        source="labeled",
        objects=list(patch.boxes),
    )


def _unlabeled_sample(
    scan: LabeledScan,
    state: ModelState,
    grid: AnchorGrid,
    patch_shape,
    cfg: SSLConfig,
    rng,
) -> TrainingSample:
    """Crop an unlabeled patch and predict its targets.

    Draw order: uniform center, then the K ensemble transforms.  The
    MixUp objects are the confident detections of one plain forward pass.
    """
    center = _random_crop_center(scan.volume.shape, patch_shape, rng)
    patch = crop_patch(scan, center, patch_shape)
    normalized = normalize_patch(patch.volume)
    targets = predict_targets(state, normalized, grid, cfg, rng)
    plain = forward(state, normalized)
    confident = _patch_detections(plain.probs, plain.reg, grid, cfg.object_conf_threshold)
    objects = [
        d.box
        for d in confident
        if all(0.0 <= d.box.center[i] < patch_shape[i] for i in range(3))
    ]
    return TrainingSample(
        patch=normalized, targets=targets, source="unlabeled", objects=objects
    )


def train(
    labeled: list[LabeledScan],
    unlabeled: list[LabeledScan],
    cfg: SSLConfig,
    model_cfg: DetectorConfig,
    focal: FocalParams = FocalParams(),
    epochs: int = 10,
    val_scans: list[LabeledScan] | None = None,
    state: ModelState | None = None,
) -> tuple[ModelState, list[EpochMetrics]]:
    """Run the full training loop; returns the final state and metrics log.

    Per step: draw the labeled half of the batch (with lesion-biased
    crops), then the unlabeled half (with predicted targets); apply
    image-level MixUp over the shuffled batch (each sample mixed once as
    the dominant partner), then object-level MixUp; accumulate gradients
    of the detection loss averaged over the batch; Adam step under the
    cosine schedule.  With unlabeled_per_batch = 0 and both MixUp stages
    off, this is exactly the supervised baseline.

    Per-step draw order on the single training stream: labeled scan
    indices and crops in batch order, unlabeled scan indices, crops, and
    ensemble transforms in batch order, the image-MixUp shuffle, one mix
    weight per pair, then the object-MixUp draws.
    """
    if not labeled:
        raise ConfigurationError("training requires at least one labeled scan")
    if cfg.unlabeled_per_batch > 0 and not unlabeled:
        raise ConfigurationError(
            "unlabeled_per_batch > 0 but the unlabeled pool is empty"
        )
    rng = make_rng(cfg.seed, TRAIN_STREAM)
    if state is None:
        state = init_model(model_cfg)
    grid = model_cfg.anchor_grid()
    patch_shape = model_cfg.input_patch
    total_steps = max(1, epochs * cfg.steps_per_epoch)
    log: list[EpochMetrics] = []

    global_step = 0
    for epoch in range(epochs):
        sums = {"labeled": 0.0, "unlabeled": 0.0}
        counts = {"labeled": 0, "unlabeled": 0}
        lr = cfg.base_lr
        for _ in range(cfg.steps_per_epoch):
            batch: list[TrainingSample] = []
            for _ in range(cfg.labeled_per_batch):
                scan = labeled[int(rng.integers(len(labeled)))]
                batch.append(_labeled_sample(scan, grid, patch_shape, rng))
            for _ in range(cfg.unlabeled_per_batch):
                scan = unlabeled[int(rng.integers(len(unlabeled)))]
                batch.append(
                    _unlabeled_sample(scan, state, grid, patch_shape, cfg, rng)
                )

            if cfg.image_mixup and len(batch) > 1:
                order = rng.permutation(len(batch))
                mixed: list[TrainingSample] = list(batch)
                for pos, idx in enumerate(order):
                    partner = batch[order[(pos + 1) % len(order)]]
                    w = sample_mix_weight(cfg.mixup_alpha, rng)
                    mixed[idx] = image_mixup(batch[idx], partner, w)
                batch = mixed
            if cfg.object_mixup:
                batch = object_mixup(
                    batch, lambda r: sample_mix_weight(cfg.mixup_alpha, r), rng
                )

            grads_total: dict[str, np.ndarray] = {}
            scale = 1.0 / len(batch)
            for sample in batch:
                result = forward(state, sample.patch)
                losses = detection_loss(
                    result.probs, result.reg, sample.targets, focal, cfg.reg_weight
                )
                if not np.isfinite(losses.total):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}, step {global_step}"
                    )
                sums[sample.source] += losses.total
                counts[sample.source] += 1
                grads = backward(
                    state, result, losses.dprobs * scale, losses.dreg * scale
                )
                for name, g in grads.items():
                    if name in grads_total:
                        grads_total[name] += g
                    else:
                        grads_total[name] = g
            lr = cosine_lr(global_step, total_steps, cfg.base_lr)
            adam_step(state, grads_total, lr)
            global_step += 1

        cpm_val = None
        if val_scans:
            _, cpm_val = evaluate_scans(state, val_scans)
        log.append(
            EpochMetrics(
                epoch=epoch,
                lr=lr,
                loss_labeled=sums["labeled"] / max(1, counts["labeled"]),
                loss_unlabeled=sums["unlabeled"] / max(1, counts["unlabeled"]),
                cpm_val=cpm_val,
            )
        )
    return state, log
