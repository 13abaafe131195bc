import numpy as np
import pytest

from skpo.parallel import pmap
from skpo.seeding import child_seed, rng_for


def test_child_seed_deterministic_and_distinct():
    a = rng_for(0, "train", 3).random(4)
    np.testing.assert_array_equal(a, rng_for(0, "train", 3).random(4))
    assert not np.array_equal(a, rng_for(0, "train", 4).random(4))
    assert not np.array_equal(a, rng_for(1, "train", 3).random(4))
    assert not np.array_equal(rng_for(0, 1, 2).random(4), rng_for(0, 2, 1).random(4))


def test_nested_seed_sequences_compose():
    s = child_seed(5, "a")
    np.testing.assert_array_equal(rng_for(s, 2).random(3), rng_for(5, "a", 2).random(3))


def test_bad_seeds_raise():
    with pytest.raises(ValueError):
        child_seed(0, -1)
    with pytest.raises(ValueError):
        child_seed(None)


def _square(x):
    return x * x


def test_pmap_preserves_order():
    items = list(range(23))
    assert pmap(_square, items, workers=2) == [x * x for x in items]
    assert pmap(_square, items) == pmap(_square, items, workers=3)
    with pytest.raises(ValueError):
        pmap(_square, items, workers=0)
