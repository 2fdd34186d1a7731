#!/usr/bin/env python3
"""
Tensor helper tests.
"""

import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from errors import NonFiniteError, ShapeError, ValueRangeError
from tensor_core import (
    assert_finite,
    check_tensor,
    concat_channels,
    from_volume,
    split_channels,
    stack_volumes,
    to_volume,
)
from volume_io import Volume


def test_volume_round_trip():
    volume = Volume(np.arange(24, dtype=float).reshape(2, 3, 4), (1.0, 2.0, 3.0))
    t = from_volume(volume)
    assert t.shape == (1, 1, 2, 3, 4)
    assert t[0, 0, 1, 2, 3] == volume.data[1, 2, 3]
    assert to_volume(t, volume.spacing) == volume


def test_from_volume_copies():
    volume = Volume(np.zeros((2, 2, 2)))
    t = from_volume(volume)
    t[...] = 5.0
    assert volume.data.max() == 0.0


def test_to_volume_needs_single_sample_and_channel():
    with pytest.raises(ShapeError):
        to_volume(np.zeros((2, 1, 2, 2, 2)))
    with pytest.raises(ShapeError):
        check_tensor(np.zeros((2, 2, 2)))


def test_stack_volumes():
    batch = stack_volumes([Volume(np.zeros((2, 2, 2))), Volume(np.ones((2, 2, 2)))], np.float64)
    assert batch.shape == (2, 1, 2, 2, 2)
    assert batch.dtype == np.float64
    assert batch[1].min() == 1.0


def test_concat_then_split_is_identity():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((2, 3, 2, 2, 2))
    b = rng.standard_normal((2, 5, 2, 2, 2))
    joined = concat_channels(a, b)
    assert joined.shape == (2, 8, 2, 2, 2)
    left, right = split_channels(joined, 3)
    np.testing.assert_array_equal(left, a)
    np.testing.assert_array_equal(right, b)
    left[...] = 0
    assert joined[:, :3].any()


def test_concat_and_split_errors():
    with pytest.raises(ShapeError):
        concat_channels(np.zeros((1, 1, 2, 2, 2)), np.zeros((1, 1, 4, 2, 2)))
    with pytest.raises(ValueRangeError):
        split_channels(np.zeros((1, 2, 2, 2, 2)), 2)


def test_assert_finite():
    t = np.zeros((1, 1, 2, 2, 2))
    assert assert_finite(t) is t
    t[0, 0, 1, 1, 1] = np.inf
    with pytest.raises(NonFiniteError):
        assert_finite(t, "activations")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
