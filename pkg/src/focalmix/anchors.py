"""Anchor enumeration, 3D IoU, target assignment, box codec, and NMS.

Anchors are cubic (one per feature-map cell per level, no aspect ratios).
The linear index is level-major, then z-major C order within each level:

    index = level_offset + (z * Gy + y) * Gx + x

with G = patch_dim / stride cells per axis.  The anchor at cell (z, y, x)
of a level with stride s and base edge b is the cube centered at
((z+0.5)s, (y+0.5)s, (x+0.5)s) with edge b.

Assignment follows the strict IoU rule with an ignore band: max IoU over
ground truth above 0.3 makes an anchor positive (regressing to its argmax
box), below 0.1 negative, anything in between is excluded from training.
With no ground truth at all, every anchor is a trainable negative.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, DataError
from .volume import Box3D

__all__ = [
    "LevelSpec",
    "AnchorGrid",
    "AnchorTargets",
    "Detection",
    "build_anchor_grid",
    "iou3d",
    "iou3d_matrix",
    "assign_targets",
    "encode_box",
    "decode_box",
    "nms",
    "write_detections",
    "read_detections",
]

POSITIVE_IOU = 0.3
NEGATIVE_IOU = 0.1


@dataclass(frozen=True)
class LevelSpec:
    """One anchor level: feature stride and anchor base edge, in voxels."""

    stride: int
    base_edge: float

    def __post_init__(self):
        if self.stride < 1 or (self.stride & (self.stride - 1)) != 0:
            raise ConfigurationError(f"stride must be a power of two, got {self.stride}")
        if self.base_edge <= 0:
            raise ConfigurationError(f"base_edge must be > 0, got {self.base_edge}")


@dataclass(eq=False)
class AnchorGrid:
    """All anchors of a patch, with a stable level-major linear index."""

    patch_shape: tuple[int, int, int]
    levels: tuple[LevelSpec, ...]
    total_count: int
    centers: np.ndarray  # (total_count, 3) float64, (z, y, x)
    edges: np.ndarray  # (total_count,) float64
    level_slices: list[slice] = field(default_factory=list)

    def level_cells(self, level_index: int) -> tuple[int, int, int]:
        s = self.levels[level_index].stride
        return tuple(d // s for d in self.patch_shape)

    def linear_index(self, level_index: int, z: int, y: int, x: int) -> int:
        gz, gy, gx = self.level_cells(level_index)
        if not (0 <= z < gz and 0 <= y < gy and 0 <= x < gx):
            raise IndexError(f"cell ({z},{y},{x}) outside grid {(gz, gy, gx)}")
        return self.level_slices[level_index].start + (z * gy + y) * gx + x

    def anchor_box(self, index: int) -> Box3D:
        return Box3D(center=tuple(self.centers[index]), edge=float(self.edges[index]))


def build_anchor_grid(
    patch_shape: tuple[int, int, int], levels: list[LevelSpec] | tuple[LevelSpec, ...]
) -> AnchorGrid:
    """Enumerate every anchor of every level over the patch."""
    patch_shape = tuple(int(d) for d in patch_shape)
    levels = tuple(levels)
    if not levels:
        raise ConfigurationError("at least one anchor level is required")
    centers = []
    edges = []
    slices = []
    offset = 0
    for spec in levels:
        if any(d % spec.stride != 0 for d in patch_shape):
            raise ConfigurationError(
                f"stride {spec.stride} does not divide patch shape {patch_shape}"
            )
        cells = tuple(d // spec.stride for d in patch_shape)
        zz, yy, xx = np.meshgrid(
            (np.arange(cells[0]) + 0.5) * spec.stride,
            (np.arange(cells[1]) + 0.5) * spec.stride,
            (np.arange(cells[2]) + 0.5) * spec.stride,
            indexing="ij",
        )
        n = cells[0] * cells[1] * cells[2]
        centers.append(np.stack([zz.ravel(), yy.ravel(), xx.ravel()], axis=1))
        edges.append(np.full(n, float(spec.base_edge)))
        slices.append(slice(offset, offset + n))
        offset += n
    centers_arr = np.concatenate(centers, axis=0)
    edges_arr = np.concatenate(edges)
    centers_arr.setflags(write=False)
    edges_arr.setflags(write=False)
    return AnchorGrid(
        patch_shape=patch_shape,
        levels=levels,
        total_count=offset,
        centers=centers_arr,
        edges=edges_arr,
        level_slices=slices,
    )


@dataclass
class AnchorTargets:
    """Per-anchor training targets.

    ``cls`` holds the soft objectness target in [0, 1]; ``train_mask`` is
    False for ignored anchors; ``reg`` rows are valid only where
    ``has_reg`` is True (anchors matched to a ground-truth box).
    """

    cls: np.ndarray  # (N,) float
    reg: np.ndarray  # (N, 4) float: (dz, dy, dx, dlog_edge)
    has_reg: np.ndarray  # (N,) bool
    train_mask: np.ndarray  # (N,) bool

    def __post_init__(self):
        n = len(self.cls)
        if self.reg.shape != (n, 4) or self.has_reg.shape != (n,) or self.train_mask.shape != (n,):
            raise ValueError("inconsistent per-anchor array lengths")
        if not np.isfinite(self.cls).all() or self.cls.min(initial=0.0) < 0 or self.cls.max(initial=0.0) > 1:
            raise ValueError("cls targets must be finite and in [0, 1]")

    def copy(self) -> "AnchorTargets":
        return AnchorTargets(
            cls=self.cls.copy(),
            reg=self.reg.copy(),
            has_reg=self.has_reg.copy(),
            train_mask=self.train_mask.copy(),
        )


@dataclass(frozen=True)
class Detection:
    """A scored box prediction."""

    box: Box3D
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")


def iou3d(a: Box3D, b: Box3D) -> float:
    """Intersection over union of two axis-aligned cubes."""
    ca = np.asarray(a.center, dtype=np.float64)
    cb = np.asarray(b.center, dtype=np.float64)
    lo = np.maximum(ca - a.edge / 2.0, cb - b.edge / 2.0)
    hi = np.minimum(ca + a.edge / 2.0, cb + b.edge / 2.0)
    # Per-axis overlap capped at the smaller edge so identical boxes give
    # exactly 1.0 despite rounding in hi - lo.
    overlap = np.clip(hi - lo, 0.0, min(a.edge, b.edge))
    inter = float(np.prod(overlap))
    union = a.edge**3 + b.edge**3 - inter
    return inter / union


def iou3d_matrix(
    centers_a: np.ndarray, edges_a: np.ndarray, centers_b: np.ndarray, edges_b: np.ndarray
) -> np.ndarray:
    """Pairwise cube IoU, (len(a), len(b)) in double precision."""
    ca = np.asarray(centers_a, dtype=np.float64)[:, None, :]
    cb = np.asarray(centers_b, dtype=np.float64)[None, :, :]
    ea = np.asarray(edges_a, dtype=np.float64)[:, None]
    eb = np.asarray(edges_b, dtype=np.float64)[None, :]
    lo = np.maximum(ca - ea[..., None] / 2.0, cb - eb[..., None] / 2.0)
    hi = np.minimum(ca + ea[..., None] / 2.0, cb + eb[..., None] / 2.0)
    cap = np.minimum(ea, eb)[..., None]
    inter = np.prod(np.clip(hi - lo, 0.0, cap), axis=-1)
    union = ea**3 + eb**3 - inter
    return inter / union


def encode_box(anchor: Box3D, gt: Box3D) -> np.ndarray:
    """Offsets (dz, dy, dx, dlog_edge): center deltas over the anchor edge,
    log ratio of edges."""
    c = (np.asarray(gt.center) - np.asarray(anchor.center)) / anchor.edge
    return np.array([c[0], c[1], c[2], np.log(gt.edge / anchor.edge)], dtype=np.float64)


def decode_box(anchor: Box3D, offsets) -> Box3D:
    """Exact inverse of encode_box."""
    off = np.asarray(offsets, dtype=np.float64)
    center = np.asarray(anchor.center) + off[:3] * anchor.edge
    return Box3D(center=tuple(center), edge=float(anchor.edge * np.exp(off[3])))


def assign_targets(grid: AnchorGrid, gt: list[Box3D]) -> AnchorTargets:
    """Hard {0, 1} targets with the IoU ignore band, per the linear index."""
    n = grid.total_count
    cls = np.zeros(n, dtype=np.float64)
    reg = np.zeros((n, 4), dtype=np.float64)
    has_reg = np.zeros(n, dtype=bool)
    train = np.ones(n, dtype=bool)
    if gt:
        gt_centers = np.array([b.center for b in gt], dtype=np.float64)
        gt_edges = np.array([b.edge for b in gt], dtype=np.float64)
        iou = iou3d_matrix(grid.centers, grid.edges, gt_centers, gt_edges)
        best = iou.argmax(axis=1)
        best_iou = iou[np.arange(n), best]
        pos = best_iou > POSITIVE_IOU
        neg = best_iou < NEGATIVE_IOU
        cls[pos] = 1.0
        train[:] = pos | neg
        has_reg[:] = pos
        if pos.any():
            idx = np.nonzero(pos)[0]
            matched_c = gt_centers[best[idx]]
            matched_e = gt_edges[best[idx]]
            anchors_c = grid.centers[idx]
            anchors_e = grid.edges[idx]
            reg[idx, :3] = (matched_c - anchors_c) / anchors_e[:, None]
            reg[idx, 3] = np.log(matched_e / anchors_e)
    return AnchorTargets(cls=cls, reg=reg, has_reg=has_reg, train_mask=train)


def nms(
    dets: list[Detection], iou_threshold: float, max_keep: int | None = None
) -> list[Detection]:
    """Greedy suppression: descending score, ties broken by input order.

    Keeps a detection iff its IoU with every already-kept detection is
    below the threshold.  ``max_keep`` stops early; because survivors are
    produced best-first, the truncation equals the head of the full
    result.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[int] = []
    for i in order:
        if max_keep is not None and len(kept) >= max_keep:
            break
        if all(iou3d(dets[i].box, dets[j].box) < iou_threshold for j in kept):
            kept.append(i)
    return [dets[i] for i in kept]


def write_detections(path: str, per_scan: dict[str, list[Detection]]) -> None:
    """JSON lines, one {"scan_id", "center", "edge", "score"} per detection."""
    with open(path, "w") as f:
        for scan_id in per_scan:
            for d in per_scan[scan_id]:
                f.write(
                    json.dumps(
                        {
                            "scan_id": scan_id,
                            "center": list(d.box.center),
                            "edge": d.box.edge,
                            "score": d.score,
                        },
                        sort_keys=True,
                    )
                )
                f.write("\n")


def read_detections(path: str) -> dict[str, list[Detection]]:
    """Inverse of write_detections, preserving per-scan order."""
    per_scan: dict[str, list[Detection]] = {}
    try:
        with open(path) as f:
            for line_no, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                det = Detection(
                    box=Box3D(center=tuple(rec["center"]), edge=rec["edge"]),
                    score=float(rec["score"]),
                )
                per_scan.setdefault(str(rec["scan_id"]), []).append(det)
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise DataError(f"malformed detections file {path}: {e}") from e
    return per_scan
