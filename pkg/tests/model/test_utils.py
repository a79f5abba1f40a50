import os

import numpy as np
import pytest

from fmsr.errors import ValidationError
from fmsr.model.utils import get_full_path, keyed_rng, split_times, torch_seed


def test_keyed_rng():
    a = keyed_rng(3, 1, 2, 0).standard_normal(4)
    b = keyed_rng(3, 1, 2, 0).standard_normal(4)
    np.testing.assert_array_equal(a, b)
    # streams are independent of request order and of neighbouring keys
    _ = keyed_rng(3, 0, 0, 0).standard_normal(100)
    np.testing.assert_array_equal(keyed_rng(3, 1, 2, 0).standard_normal(4), a)
    assert not np.array_equal(keyed_rng(3, 1, 3, 0).standard_normal(4), a)
    assert not np.array_equal(keyed_rng(4, 1, 2, 0).standard_normal(4), a)
    with pytest.raises(ValidationError):
        keyed_rng(-1)
    assert 0 <= torch_seed(keyed_rng(0)) < 2**62


def test_split_times():
    train, val, test = split_times(10, 5, 3, 2)
    assert list(train) == [0, 1, 2, 3, 4]
    assert list(val) == [5, 6, 7] and list(test) == [8, 9]

    train, val, test = split_times(20, 10, 5, 5, by="random", random_seed=3)
    assert len(set(train) & set(val)) == 0 and len(set(val) & set(test)) == 0
    assert len(train) + len(val) + len(test) == 20, "Splits should cover every index"
    again = split_times(20, 10, 5, 5, by="random", random_seed=3)
    np.testing.assert_array_equal(again[0], train)

    with pytest.raises(ValidationError):
        split_times(10, 5, 5, 5)
    with pytest.raises(ValidationError):
        split_times(10, 5, 3, 2, by="created_at")


def test_get_full_path():
    path = get_full_path("tests", "data", "test.txt")
    assert path == os.path.abspath(os.path.join("tests", "data", "test.txt"))
    assert os.path.exists(os.path.dirname(path)) and os.path.isdir(
        os.path.dirname(path)
    )
