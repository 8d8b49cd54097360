import numpy as np

from servopb.rng import substream


def test_same_path_same_stream():
    a = substream(42, "collect", 3).normal(size=8)
    b = substream(42, "collect", 3).normal(size=8)
    np.testing.assert_array_equal(a, b)


def test_different_paths_diverge():
    a = substream(42, "collect", 3).normal(size=8)
    b = substream(42, "collect", 4).normal(size=8)
    c = substream(42, "train", 3).normal(size=8)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_root_seed_changes_everything():
    a = substream(1, "x").normal(size=4)
    b = substream(2, "x").normal(size=4)
    assert not np.array_equal(a, b)


def test_draw_order_isolation():
    # consuming one stream must not affect a sibling
    s1 = substream(7, "a")
    s1.normal(size=1000)
    fresh = substream(7, "b").normal(size=8)
    np.testing.assert_array_equal(fresh, substream(7, "b").normal(size=8))
