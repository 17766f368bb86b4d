"""The 48 cube symmetries and their actions on volumes, boxes, anchors."""

import itertools
import json

import numpy as np
import pytest

from focalmix import Box3D, LevelSpec, Volume3D, build_anchor_grid, iou3d
from focalmix.transforms import (
    CubeTransform,
    apply_to_anchor_index,
    apply_to_array,
    apply_to_box,
    apply_to_volume,
    compose,
    enumerate_group,
    identity_transform,
    inverse,
)

GROUP = enumerate_group()


class TestGroupStructure:
    def test_exactly_48_distinct_elements(self):
        assert len(GROUP) == 48
        assert len(set(GROUP)) == 48

    def test_element_zero_is_identity(self, rng):
        assert GROUP[0] == identity_transform()
        vol = rng.standard_normal((5, 5, 5))
        assert np.array_equal(apply_to_array(GROUP[0], vol), vol)

    def test_inverse_round_trips_for_every_element(self):
        e = identity_transform()
        for t in GROUP:
            assert compose(t, inverse(t)) == e
            assert compose(inverse(t), t) == e

    def test_closure_under_composition(self):
        members = set(GROUP)
        for t1, t2 in itertools.product(GROUP, repeat=2):
            assert compose(t1, t2) in members

    def test_associativity_on_random_triples(self, rng):
        for _ in range(500):
            t1, t2, t3 = (GROUP[int(i)] for i in rng.integers(48, size=3))
            assert compose(compose(t1, t2), t3) == compose(t1, compose(t2, t3))

    def test_compose_means_apply_second_then_first(self, rng):
        vol = rng.standard_normal((4, 4, 4))
        for _ in range(50):
            t1, t2 = (GROUP[int(i)] for i in rng.integers(48, size=2))
            via_compose = apply_to_array(compose(t1, t2), vol)
            via_sequential = apply_to_array(t1, apply_to_array(t2, vol))
            assert np.array_equal(via_compose, via_sequential)

    def test_transforms_fixing_one_axis_form_the_planar_eight(self):
        fixing_z = [t for t in GROUP if t.perm[0] == 0 and t.signs[0] == 1]
        assert len(fixing_z) == 8
        members = set(fixing_z)
        for t1, t2 in itertools.product(fixing_z, repeat=2):
            assert compose(t1, t2) in members

    def test_constructor_rejects_bad_perm_and_signs(self):
        with pytest.raises(ValueError):
            CubeTransform((0, 0, 2), (1, 1, 1))
        with pytest.raises(ValueError):
            CubeTransform((0, 1, 2), (1, 2, 1))

    def test_matrix_round_trip(self):
        for t in GROUP:
            assert CubeTransform.from_matrix(t.matrix()) == t

    def test_json_round_trip(self):
        for t in GROUP:
            blob = json.dumps(t.to_json_dict())
            assert CubeTransform.from_json_dict(json.loads(blob)) == t


class TestVolumeAction:
    def test_preserves_voxel_multiset(self, rng):
        vol = rng.standard_normal((6, 6, 6))
        for t in GROUP:
            out = apply_to_array(t, vol)
            assert sorted(out.ravel()) == sorted(vol.ravel())

    def test_inverse_restores_bit_exactly(self, rng):
        vol = rng.standard_normal((4, 4, 4)).astype(np.float32)
        for t in GROUP:
            assert np.array_equal(apply_to_array(inverse(t), apply_to_array(t, vol)), vol)

    def test_single_bright_voxel_under_last_axis_flip(self):
        vol = np.zeros((4, 4, 4))
        vol[0, 0, 0] = 1.0
        flip_x = CubeTransform((0, 1, 2), (1, 1, -1))
        out = apply_to_array(flip_x, vol)
        assert out[0, 0, 3] == 1.0
        assert out.sum() == 1.0

    def test_rejects_exchange_of_unequal_axes(self, rng):
        vol = rng.standard_normal((4, 4, 6))
        swap_yx = CubeTransform((0, 2, 1), (1, 1, 1))
        with pytest.raises(ValueError):
            apply_to_array(swap_yx, vol)
        # Exchanging the two equal axes is fine.
        swap_zy = CubeTransform((1, 0, 2), (1, 1, 1))
        apply_to_array(swap_zy, vol)

    def test_rejects_non_3d_input(self):
        with pytest.raises(ValueError):
            apply_to_array(GROUP[1], np.zeros((4, 4)))

    def test_volume_wrapper_permutes_spacing(self, rng):
        v = Volume3D(rng.standard_normal((4, 4, 4)), spacing=(1.0, 2.0, 3.0))
        t = CubeTransform((2, 0, 1), (1, 1, 1))
        out = apply_to_volume(t, v)
        assert out.spacing == tuple(v.spacing[t.perm[i]] for i in range(3))


class TestBoxAction:
    def test_patch_center_is_fixed_by_all_elements(self):
        box = Box3D(center=(8.0, 8.0, 8.0), edge=3.0)
        for t in GROUP:
            out = apply_to_box(t, box, (16, 16, 16))
            assert out.center == box.center
            assert out.edge == box.edge

    def test_iou_is_invariant(self, rng):
        for _ in range(20):
            a = Box3D(center=tuple(rng.uniform(4, 12, 3)), edge=float(rng.uniform(1, 6)))
            b = Box3D(center=tuple(rng.uniform(4, 12, 3)), edge=float(rng.uniform(1, 6)))
            base = iou3d(a, b)
            for t in GROUP:
                ta = apply_to_box(t, a, (16, 16, 16))
                tb = apply_to_box(t, b, (16, 16, 16))
                assert iou3d(ta, tb) == pytest.approx(base, abs=1e-12)

    def test_box_map_agrees_with_voxel_action(self):
        n = 5
        for t in GROUP:
            for voxel in [(0, 0, 0), (1, 2, 3), (4, 4, 4), (2, 0, 4)]:
                vol = np.zeros((n, n, n))
                vol[voxel] = 1.0
                moved = apply_to_array(t, vol)
                landed = tuple(int(i) for i in np.argwhere(moved == 1.0)[0])
                box = Box3D(center=tuple(v + 0.5 for v in voxel), edge=1.0)
                mapped = apply_to_box(t, box, (n, n, n))
                assert mapped.center == tuple(v + 0.5 for v in landed)


class TestAnchorIndexAction:
    def test_identity_gives_identity_permutation(self, small_grid):
        pi = apply_to_anchor_index(identity_transform(), small_grid)
        assert np.array_equal(pi, np.arange(small_grid.total_count))

    def test_matches_independent_volume_oracle(self, small_grid):
        # Tag each anchor cell with a unique ID, transform the ID volume,
        # and read back the permutation level by level.
        d = small_grid.patch_shape[0]
        for t in GROUP:
            pi = apply_to_anchor_index(t, small_grid)
            offset = 0
            for spec in small_grid.levels:
                g = d // spec.stride
                ids = np.arange(g**3, dtype=np.int64).reshape(g, g, g)
                moved = apply_to_array(t, ids).ravel()
                assert np.array_equal(moved, pi[offset : offset + g**3] - offset)
                offset += g**3

    def test_is_a_permutation_preserving_levels(self, small_grid):
        for t in GROUP:
            pi = apply_to_anchor_index(t, small_grid)
            assert np.array_equal(np.sort(pi), np.arange(small_grid.total_count))
            for sl in small_grid.level_slices:
                chunk = pi[sl]
                assert chunk.min() >= sl.start and chunk.max() < sl.stop

    def test_inverse_transform_gives_inverse_permutation(self, small_grid):
        n = small_grid.total_count
        for t in GROUP:
            pi = apply_to_anchor_index(t, small_grid)
            pi_inv = apply_to_anchor_index(inverse(t), small_grid)
            assert np.array_equal(pi_inv[pi], np.arange(n))

    def test_respects_composition(self, small_grid, rng):
        for _ in range(50):
            t1, t2 = (GROUP[int(i)] for i in rng.integers(48, size=2))
            p1 = apply_to_anchor_index(t1, small_grid)
            p2 = apply_to_anchor_index(t2, small_grid)
            pc = apply_to_anchor_index(compose(t1, t2), small_grid)
            assert np.array_equal(pc, p2[p1])

    def test_gather_semantics_on_per_anchor_scores(self, small_grid, rng):
        # Flattened transformed score maps must equal scores[pi].
        d = small_grid.patch_shape[0]
        scores = rng.standard_normal(small_grid.total_count)
        for t in GROUP[:12]:
            pi = apply_to_anchor_index(t, small_grid)
            offset = 0
            pieces = []
            for spec in small_grid.levels:
                g = d // spec.stride
                level_map = scores[offset : offset + g**3].reshape(g, g, g)
                pieces.append(apply_to_array(t, level_map).ravel())
                offset += g**3
            assert np.array_equal(np.concatenate(pieces), scores[pi])

    def test_requires_cubic_patch(self):
        grid = build_anchor_grid((16, 16, 8), [LevelSpec(2, 4.0)])
        with pytest.raises(ValueError):
            apply_to_anchor_index(GROUP[1], grid)
