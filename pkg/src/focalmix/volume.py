"""Synthetic CT-like volumes: data types, procedural generation, crops, I/O.

Volumes are dense float32 scalar fields indexed (z, y, x), row-major with z
slowest.  Continuous coordinates are corner-origin: voxel ``i`` spans the
interval [i, i+1) along its axis, so its center sits at i + 0.5 and a volume
of edge n spans [0, n].

Generated scans stand in for real CT.  The background is smoothed white
noise plus a low-frequency bias field; lesions are bright spheres with a
Gaussian-soft rim; unannotated distractors (tubes and diffuse blobs) make
the detection task non-trivial.  Generation is a pure function of
(config.seed, scan index) through a counter-based generator, so datasets
are reproducible scan by scan regardless of generation order.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .exceptions import ConfigurationError, DataError
from .rng import SCAN_STREAM, make_rng

__all__ = [
    "Volume3D",
    "Box3D",
    "LabeledScan",
    "GenConfig",
    "generate_scan",
    "crop_patch",
    "normalize_patch",
    "write_scan",
    "read_scan",
]


@dataclass
class Volume3D:
    """A dense 3D scalar field with voxel spacing in millimeters."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"voxels must be 3D, got shape {self.voxels.shape}")
        if not np.isfinite(self.voxels).all():
            raise ValueError("voxels contain non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True)
class Box3D:
    """An axis-aligned cube: center (z, y, x) in voxel coordinates + edge."""

    center: tuple[float, float, float]
    edge: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "edge", float(self.edge))
        if len(self.center) != 3 or not all(math.isfinite(c) for c in self.center):
            raise ValueError(f"center must be 3 finite reals, got {self.center}")
        if not (self.edge > 0 and math.isfinite(self.edge)):
            raise ValueError(f"edge must be positive and finite, got {self.edge}")

    def to_json_dict(self) -> dict:
        return {"center": list(self.center), "edge": self.edge}

    @classmethod
    def from_json_dict(cls, d: dict) -> "Box3D":
        return cls(center=tuple(d["center"]), edge=d["edge"])


@dataclass
class LabeledScan:
    """A volume plus its (possibly empty) lesion annotations."""

    volume: Volume3D
    boxes: list[Box3D] = field(default_factory=list)
    id: str = ""

    def __post_init__(self):
        shape = self.volume.shape
        for b in self.boxes:
            if any(not (0.0 <= b.center[i] <= shape[i]) for i in range(3)):
                raise ValueError(f"box center {b.center} outside volume bounds {shape}")


@dataclass(frozen=True)
class GenConfig:
    """Parameters of the procedural scan generator."""

    volume_shape: tuple[int, int, int] = (64, 64, 64)
    nodule_count_range: tuple[int, int] = (1, 3)
    nodule_diameter_range: tuple[float, float] = (5.0, 11.0)
    nodule_contrast_range: tuple[float, float] = (0.8, 1.6)
    distractor_count_range: tuple[int, int] = (2, 6)
    noise_sigma: float = 0.3
    seed: int = 0

    def __post_init__(self):
        shape = tuple(int(s) for s in self.volume_shape)
        object.__setattr__(self, "volume_shape", shape)
        if len(shape) != 3 or any(s <= 0 for s in shape):
            raise ConfigurationError(f"volume_shape must be 3 positive ints, got {shape}")
        for name in ("nodule_count_range", "distractor_count_range"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= hi):
                raise ConfigurationError(f"{name} must satisfy 0 <= min <= max, got {(lo, hi)}")
        for name in ("nodule_diameter_range", "nodule_contrast_range"):
            lo, hi = getattr(self, name)
            if not (lo <= hi):
                raise ConfigurationError(f"{name} must satisfy min <= max, got {(lo, hi)}")
        if self.nodule_diameter_range[0] < 3.0:
            raise ConfigurationError(
                f"nodule diameters must be >= 3 voxels, got {self.nodule_diameter_range}"
            )
        if self.nodule_contrast_range[0] <= 0:
            raise ConfigurationError("nodule contrast must be strictly positive")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        # A maximal nodule must fit inside the volume on every axis.
        if self.nodule_diameter_range[1] > min(shape):
            raise ConfigurationError(
                f"max nodule diameter {self.nodule_diameter_range[1]} does not fit "
                f"in volume {shape}"
            )

    def to_json_dict(self) -> dict:
        return {
            "volume_shape": list(self.volume_shape),
            "nodule_count_range": list(self.nodule_count_range),
            "nodule_diameter_range": list(self.nodule_diameter_range),
            "nodule_contrast_range": list(self.nodule_contrast_range),
            "distractor_count_range": list(self.distractor_count_range),
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "GenConfig":
        kwargs = {k: d[k] for k in d}
        for name in (
            "volume_shape",
            "nodule_count_range",
            "nodule_diameter_range",
            "nodule_contrast_range",
            "distractor_count_range",
        ):
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        return cls(**kwargs)


def _coordinate_grid(shape: tuple[int, int, int]) -> list[np.ndarray]:
    """Broadcastable voxel-center coordinates along each axis."""
    return [
        (np.arange(shape[i], dtype=np.float32) + 0.5).reshape(
            [-1 if j == i else 1 for j in range(3)]
        )
        for i in range(3)
    ]


def _render_sphere(vox, grid, center, diameter, contrast):
    """Bright plateau of the given diameter with a Gaussian-soft rim."""
    radius = diameter / 2.0
    sigma_edge = 0.15 * diameter
    r = np.sqrt(
        (grid[0] - center[0]) ** 2 + (grid[1] - center[1]) ** 2 + (grid[2] - center[2]) ** 2
    )
    outside = np.maximum(r - radius, 0.0)
    vox += (contrast * np.exp(-((outside / sigma_edge) ** 2))).astype(np.float32)


def _render_tube(vox, grid, p0, p1, radius, contrast):
    """Bright cylinder with soft walls along the segment p0 -> p1."""
    d = p1 - p0
    len2 = float(d @ d)
    if len2 < 1e-12:
        return
    t = ((grid[0] - p0[0]) * d[0] + (grid[1] - p0[1]) * d[1] + (grid[2] - p0[2]) * d[2]) / len2
    t = np.clip(t, 0.0, 1.0)
    dist2 = (
        (grid[0] - (p0[0] + t * d[0])) ** 2
        + (grid[1] - (p0[1] + t * d[1])) ** 2
        + (grid[2] - (p0[2] + t * d[2])) ** 2
    )
    outside = np.maximum(np.sqrt(dist2) - radius, 0.0)
    vox += (contrast * np.exp(-((outside / (0.5 * radius + 0.5)) ** 2))).astype(np.float32)


def _render_blob(vox, grid, center, sigmas, contrast):
    """Diffuse anisotropic Gaussian bump (no plateau, no sharp rim)."""
    q = (
        ((grid[0] - center[0]) / sigmas[0]) ** 2
        + ((grid[1] - center[1]) / sigmas[1]) ** 2
        + ((grid[2] - center[2]) / sigmas[2]) ** 2
    )
    vox += (contrast * np.exp(-0.5 * q)).astype(np.float32)


def _segment_point_distance(p0, p1, c):
    d = p1 - p0
    len2 = float(d @ d)
    if len2 < 1e-12:
        return float(np.linalg.norm(c - p0))
    t = float(np.clip((c - p0) @ d / len2, 0.0, 1.0))
    return float(np.linalg.norm(c - (p0 + t * d)))


def generate_scan(cfg: GenConfig, index: int) -> LabeledScan:
    """Generate scan ``index`` of the dataset defined by ``cfg``.

    Pure function of (cfg.seed, index).  Draws are consumed from a single
    per-scan stream in a fixed order (noise, bias field, nodule count,
    diameters, contrasts, centers, then distractors), so the output is
    stable by construction.
    """
    rng = make_rng(cfg.seed, SCAN_STREAM, index)
    shape = cfg.volume_shape
    grid = _coordinate_grid(shape)

    # Background: smoothed white noise plus a low-frequency bias field.
    vox = rng.standard_normal(shape, dtype=np.float32) * cfg.noise_sigma
    vox = ndimage.gaussian_filter(vox, sigma=1.2).astype(np.float32)
    coarse = rng.standard_normal((4, 4, 4)) * (0.5 * cfg.noise_sigma)
    coords = np.stack(
        np.meshgrid(
            *[(np.arange(s) + 0.5) / s * 3.0 - 0.5 for s in shape], indexing="ij"
        )
    )
    bias = ndimage.map_coordinates(coarse, coords.reshape(3, -1), order=1, mode="nearest")
    vox += bias.reshape(shape).astype(np.float32)

    # Nodules: annotated bright spheres, pairwise separated when possible.
    n_nodules = int(rng.integers(cfg.nodule_count_range[0], cfg.nodule_count_range[1] + 1))
    diameters = rng.uniform(*cfg.nodule_diameter_range, size=n_nodules)
    contrasts = rng.uniform(*cfg.nodule_contrast_range, size=n_nodules)
    centers: list[np.ndarray] = []
    for i in range(n_nodules):
        r = diameters[i] / 2.0
        for _ in range(64):
            c = np.array([rng.uniform(r, shape[ax] - r) for ax in range(3)])
            sep_ok = all(
                np.linalg.norm(c - centers[j]) >= (diameters[i] + diameters[j]) / 2.0 + 2.0
                for j in range(i)
            )
            if sep_ok:
                break
        centers.append(c)
    for i in range(n_nodules):
        _render_sphere(vox, grid, centers[i], diameters[i], contrasts[i])

    # Distractors: unannotated tubes and diffuse blobs, kept clear of nodules.
    n_distract = int(
        rng.integers(cfg.distractor_count_range[0], cfg.distractor_count_range[1] + 1)
    )
    c_lo, c_hi = cfg.nodule_contrast_range
    for _ in range(n_distract):
        kind = int(rng.integers(2))
        contrast = float(rng.uniform(c_lo, c_hi))
        if kind == 0:
            radius = float(rng.uniform(1.0, 2.0))
            placed = False
            for _ in range(32):
                p0 = np.array([rng.uniform(0, s) for s in shape])
                direction = rng.standard_normal(3)
                direction /= max(np.linalg.norm(direction), 1e-9)
                length = float(rng.uniform(0.3, 0.8) * min(shape))
                p1 = np.clip(p0 + direction * length, 0.0, np.array(shape, dtype=float))
                clear = all(
                    _segment_point_distance(p0, p1, centers[j])
                    > diameters[j] / 2.0 + radius + 2.0
                    for j in range(n_nodules)
                )
                if clear:
                    placed = True
                    break
            if placed:
                _render_tube(vox, grid, p0, p1, radius, 0.8 * contrast)
        else:
            sigmas = rng.uniform(2.0, 4.5, size=3)
            placed = False
            for _ in range(32):
                c = np.array([rng.uniform(0, s) for s in shape])
                clear = all(
                    np.linalg.norm(c - centers[j])
                    > diameters[j] / 2.0 + float(max(sigmas)) + 2.0
                    for j in range(n_nodules)
                )
                if clear:
                    placed = True
                    break
            if placed:
                _render_blob(vox, grid, c, sigmas, 0.5 * contrast)

    boxes = [
        Box3D(center=tuple(centers[i]), edge=float(diameters[i])) for i in range(n_nodules)
    ]
    return LabeledScan(
        volume=Volume3D(voxels=vox.astype(np.float32)),
        boxes=boxes,
        id=f"scan-{cfg.seed:x}-{index:06d}",
    )


def crop_patch(
    scan: LabeledScan,
    center: tuple[float, float, float],
    size: tuple[int, int, int],
    max_stride: int | None = None,
) -> LabeledScan:
    """Extract a zero-padded sub-volume with boxes moved to patch coordinates.

    The window starts at round(center - size/2) per axis.  Voxels outside
    the source volume are 0.  Boxes whose centers fall outside the patch
    are dropped.  When ``max_stride`` is given, every size component must
    be divisible by it (anchor grids require this).
    """
    size = tuple(int(s) for s in size)
    if any(s <= 0 for s in size):
        raise ConfigurationError(f"crop size must be positive, got {size}")
    if max_stride is not None and any(s % max_stride != 0 for s in size):
        raise ConfigurationError(f"crop size {size} not divisible by max stride {max_stride}")

    src = scan.volume.voxels
    shape = src.shape
    start = [int(round(float(center[i]) - size[i] / 2.0)) for i in range(3)]
    out = np.zeros(size, dtype=src.dtype)
    src_lo = [max(start[i], 0) for i in range(3)]
    src_hi = [min(start[i] + size[i], shape[i]) for i in range(3)]
    if all(src_lo[i] < src_hi[i] for i in range(3)):
        dst_lo = [src_lo[i] - start[i] for i in range(3)]
        dst_hi = [src_hi[i] - start[i] for i in range(3)]
        out[dst_lo[0] : dst_hi[0], dst_lo[1] : dst_hi[1], dst_lo[2] : dst_hi[2]] = src[
            src_lo[0] : src_hi[0], src_lo[1] : src_hi[1], src_lo[2] : src_hi[2]
        ]

    boxes = []
    for b in scan.boxes:
        c = tuple(b.center[i] - start[i] for i in range(3))
        if all(0.0 <= c[i] < size[i] for i in range(3)):
            boxes.append(Box3D(center=c, edge=b.edge))
    return LabeledScan(
        volume=Volume3D(voxels=out, spacing=scan.volume.spacing), boxes=boxes, id=scan.id
    )


def normalize_patch(v: Volume3D) -> Volume3D:
    """Zero-mean, unit-variance copy (variance floored for flat patches)."""
    x = v.voxels.astype(np.float32)
    mean = float(x.mean(dtype=np.float64))
    std = float(x.std(dtype=np.float64))
    return Volume3D(voxels=(x - mean) / max(std, 1e-6), spacing=v.spacing)


def _scan_paths(path: str) -> tuple[str, str]:
    base, ext = os.path.splitext(path)
    if ext not in (".vol", ".json"):
        base = path
    return base + ".vol", base + ".json"


def write_scan(scan: LabeledScan, path: str) -> None:
    """Write ``<path>.vol`` (raw little-endian float32, z-major) + sidecar."""
    vol_path, json_path = _scan_paths(path)
    vox = np.ascontiguousarray(scan.volume.voxels, dtype="<f4")
    sidecar = {
        "shape": list(vox.shape),
        "spacing_mm": list(scan.volume.spacing),
        "boxes": [b.to_json_dict() for b in scan.boxes],
        "id": scan.id,
    }
    with open(vol_path, "wb") as f:
        f.write(vox.tobytes())
    with open(json_path, "w") as f:
        json.dump(sidecar, f, sort_keys=True)
        f.write("\n")


def read_scan(path: str) -> LabeledScan:
    """Inverse of write_scan; validates byte length, shape, and finiteness."""
    vol_path, json_path = _scan_paths(path)
    try:
        with open(json_path) as f:
            sidecar = json.load(f)
        shape = tuple(int(s) for s in sidecar["shape"])
        spacing = tuple(sidecar["spacing_mm"])
        boxes = [Box3D.from_json_dict(d) for d in sidecar["boxes"]]
        scan_id = str(sidecar["id"])
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise DataError(f"malformed scan sidecar {json_path}: {e}") from e
    if len(shape) != 3 or any(s <= 0 for s in shape):
        raise DataError(f"bad shape {shape} in {json_path}")
    expected = 4 * shape[0] * shape[1] * shape[2]
    try:
        with open(vol_path, "rb") as f:
            payload = f.read()
    except OSError as e:
        raise DataError(f"cannot read voxel payload {vol_path}: {e}") from e
    if len(payload) != expected:
        raise DataError(
            f"{vol_path}: expected {expected} bytes for shape {shape}, got {len(payload)}"
        )
    vox = np.frombuffer(payload, dtype="<f4").reshape(shape)
    if not np.isfinite(vox).all():
        raise DataError(f"{vol_path}: non-finite voxels")
    try:
        return LabeledScan(
            volume=Volume3D(voxels=vox.copy(), spacing=spacing), boxes=boxes, id=scan_id
        )
    except ValueError as e:
        raise DataError(f"{json_path}: {e}") from e
