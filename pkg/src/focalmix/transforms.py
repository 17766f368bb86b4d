"""The 48 axis-aligned symmetries of a cube and their actions.

A symmetry is a signed axis permutation: output axis ``i`` reads input axis
``perm[i]``, reversed when ``signs[i] == -1``.  Concretely, for a volume of
edge ``n``::

    output[q0, q1, q2] = input[u0, u1, u2]
    u[perm[i]] = q[i]            if signs[i] == +1
    u[perm[i]] = n - 1 - q[i]    if signs[i] == -1

which is plain index relabeling: no interpolation, no value changes.  The
same map acts on anchor cell grids, and its continuous counterpart
(reflection ``x -> n - x`` about the cube center in corner-origin
coordinates) acts on box centers.

The canonical enumeration is lexicographic in (perm, signs) with perms in
lexicographic order and +1 sorting before -1, so element 0 is the identity.
There are 3! * 2^3 = 48 elements; the 24 with det +1 are proper rotations
and the rest are reflections.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CubeTransform",
    "enumerate_group",
    "identity_transform",
    "compose",
    "inverse",
    "apply_to_array",
    "apply_to_volume",
    "apply_to_box",
    "apply_to_anchor_index",
]


@dataclass(frozen=True)
class CubeTransform:
    """One signed axis permutation of the cube."""

    perm: tuple[int, int, int]
    signs: tuple[int, int, int]

    def __post_init__(self):
        if sorted(self.perm) != [0, 1, 2]:
            raise ValueError(f"perm must be a permutation of (0,1,2), got {self.perm}")
        if any(s not in (-1, 1) for s in self.signs):
            raise ValueError(f"signs must be +1 or -1, got {self.signs}")

    def matrix(self) -> np.ndarray:
        """3x3 signed permutation matrix M with M[perm[i], i] = signs[i]."""
        m = np.zeros((3, 3), dtype=np.int64)
        for i in range(3):
            m[self.perm[i], i] = self.signs[i]
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "CubeTransform":
        perm = [0, 0, 0]
        signs = [0, 0, 0]
        for i in range(3):
            col = m[:, i]
            (rows,) = np.nonzero(col)
            if len(rows) != 1:
                raise ValueError("not a signed permutation matrix")
            perm[i] = int(rows[0])
            signs[i] = int(col[rows[0]])
        return cls(tuple(perm), tuple(signs))

    @property
    def is_identity(self) -> bool:
        return self.perm == (0, 1, 2) and self.signs == (1, 1, 1)

    def to_json_dict(self) -> dict:
        return {"perm": list(self.perm), "signs": list(self.signs)}

    @classmethod
    def from_json_dict(cls, d: dict) -> "CubeTransform":
        return cls(tuple(d["perm"]), tuple(d["signs"]))


def identity_transform() -> CubeTransform:
    return CubeTransform((0, 1, 2), (1, 1, 1))


def enumerate_group() -> list[CubeTransform]:
    """All 48 symmetries in canonical order; element 0 is the identity."""
    group = []
    for perm in itertools.permutations((0, 1, 2)):
        for signs in itertools.product((1, -1), repeat=3):
            group.append(CubeTransform(perm, signs))
    return group


def compose(t1: CubeTransform, t2: CubeTransform) -> CubeTransform:
    """The transform applying t2 first, then t1.

    Satisfies ``apply(compose(t1, t2), v) == apply(t1, apply(t2, v))``.
    Because the index action is a pullback (output reads input), the matrix
    of the composite is M2 @ M1.
    """
    return CubeTransform.from_matrix(t2.matrix() @ t1.matrix())


def inverse(t: CubeTransform) -> CubeTransform:
    """Group inverse; signed permutation matrices are orthogonal."""
    return CubeTransform.from_matrix(t.matrix().T)


def _check_shape(t: CubeTransform, shape: tuple[int, ...]) -> None:
    # The transform must map the box onto itself, so permuted axes must agree.
    for i in range(3):
        if shape[t.perm[i]] != shape[i]:
            raise ValueError(
                f"transform {t.perm}/{t.signs} exchanges axes of unequal size {shape}"
            )


def apply_to_array(t: CubeTransform, arr: np.ndarray) -> np.ndarray:
    """Relabel the voxels of a 3D array under ``t`` (pure index bijection)."""
    if arr.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {arr.shape}")
    _check_shape(t, arr.shape)
    out = arr.transpose(t.perm)
    flipped = [i for i in range(3) if t.signs[i] == -1]
    if flipped:
        out = np.flip(out, axis=flipped)
    return np.ascontiguousarray(out)


def apply_to_volume(t: CubeTransform, v):
    """Transform a Volume3D; voxel values are moved, never altered."""
    from .volume import Volume3D

    voxels = apply_to_array(t, v.voxels)
    spacing = tuple(v.spacing[t.perm[i]] for i in range(3))
    return Volume3D(voxels=voxels, spacing=spacing)


def apply_to_box(t: CubeTransform, box, patch_shape: tuple[int, int, int]):
    """Map a box center under the continuous action; the edge is unchanged.

    Coordinates are corner-origin: voxel ``i`` spans [i, i+1), the patch
    spans [0, n].  A feature at position u in the input lands at the output
    position q with u[perm[i]] = q[i] (or n - q[i] under a flip).
    """
    from .volume import Box3D

    _check_shape(t, tuple(patch_shape))
    c = box.center
    q = [0.0, 0.0, 0.0]
    for i in range(3):
        u = c[t.perm[i]]
        q[i] = u if t.signs[i] == 1 else patch_shape[i] - u
    return Box3D(center=(q[0], q[1], q[2]), edge=box.edge)


def apply_to_anchor_index(t: CubeTransform, grid) -> np.ndarray:
    """Permutation pi over anchor indices induced by ``t``.

    ``pi[i]`` is the original-grid anchor whose spatial location maps onto
    anchor ``i`` of the transformed grid; equivalently, transformed
    per-anchor data satisfies ``flat(apply_to_array(t, data)) == data[pi]``
    level by level.  Levels are preserved because anchors are cubic.
    """
    d, h, w = grid.patch_shape
    if not (d == h == w):
        raise ValueError(f"anchor-index mapping requires a cubic patch, got {grid.patch_shape}")
    pieces = []
    offset = 0
    for level in grid.levels:
        g = d // level.stride
        q = np.indices((g, g, g))  # q[i] holds output coordinate i
        u = [None, None, None]
        for i in range(3):
            u[t.perm[i]] = q[i] if t.signs[i] == 1 else g - 1 - q[i]
        lin = (u[0] * g + u[1]) * g + u[2]
        pieces.append(lin.ravel() + offset)
        offset += g * g * g
    return np.concatenate(pieces)
