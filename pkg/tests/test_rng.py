"""Keyed counter-based random streams."""

import numpy as np
import pytest

from focalmix.rng import INIT_STREAM, SCAN_STREAM, TRAIN_STREAM, make_rng


def test_same_key_same_sequence():
    a = make_rng(42, SCAN_STREAM, 7).standard_normal(100)
    b = make_rng(42, SCAN_STREAM, 7).standard_normal(100)
    assert np.array_equal(a, b)


def test_different_indexes_differ():
    a = make_rng(42, SCAN_STREAM, 0).standard_normal(100)
    b = make_rng(42, SCAN_STREAM, 1).standard_normal(100)
    assert not np.array_equal(a, b)


def test_different_streams_differ():
    a = make_rng(42, SCAN_STREAM, 0).standard_normal(100)
    b = make_rng(42, TRAIN_STREAM, 0).standard_normal(100)
    c = make_rng(42, INIT_STREAM, 0).standard_normal(100)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(b, c)


def test_different_seeds_differ():
    a = make_rng(1, SCAN_STREAM, 0).standard_normal(100)
    b = make_rng(2, SCAN_STREAM, 0).standard_normal(100)
    assert not np.array_equal(a, b)


def test_negative_seed_allowed():
    a = make_rng(-3, SCAN_STREAM, 0).standard_normal(10)
    b = make_rng(-3, SCAN_STREAM, 0).standard_normal(10)
    assert np.array_equal(a, b)


def test_index_out_of_range_rejected():
    with pytest.raises(ValueError):
        make_rng(0, SCAN_STREAM, 1 << 48)
    with pytest.raises(ValueError):
        make_rng(0, SCAN_STREAM, -1)
