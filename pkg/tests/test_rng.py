import numpy as np

from capsanom.rng import Rng


def test_same_seed_same_sequence():
    a = Rng(1234).uniform(0, 1, 100)
    b = Rng(1234).uniform(0, 1, 100)
    assert np.array_equal(a, b)


def test_different_seeds_differ():
    a = Rng(1).uniform(0, 1, 32)
    b = Rng(2).uniform(0, 1, 32)
    assert not np.array_equal(a, b)


def test_named_splits_are_independent_and_stable():
    root = Rng(99)
    init1 = root.split("init").uniform(0, 1, 8)
    shuffle1 = root.split("shuffle").permutation(10)

    # Consuming draws from one stream must not shift its sibling.
    root2 = Rng(99)
    root2.split("shuffle").permutation(10)
    init2 = root2.split("init").uniform(0, 1, 8)
    assert np.array_equal(init1, init2)

    shuffle2 = Rng(99).split("shuffle").permutation(10)
    assert np.array_equal(shuffle1, shuffle2)


def test_split_labels_distinguish_streams():
    a = Rng(5).split("a").uniform(0, 1, 16)
    b = Rng(5).split("b").uniform(0, 1, 16)
    assert not np.array_equal(a, b)


def test_nested_splits():
    a = Rng(5).split("x").split(0).uniform(0, 1, 4)
    b = Rng(5).split("x", 0).uniform(0, 1, 4)
    assert np.array_equal(a, b)
