import numpy as np
import pytest

from contactgf.parallel import map_chunks
from contactgf.rng import keyed_generator


def test_keyed_streams():
    a = keyed_generator(7, "probe", 3).standard_normal(5)
    b = keyed_generator(7, "probe", 3).standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, keyed_generator(7, "probe", 4).standard_normal(5))
    assert not np.array_equal(a, keyed_generator(7, "other", 3).standard_normal(5))
    assert not np.array_equal(a, keyed_generator(7 + 2 ** 32, "probe", 3).standard_normal(5))
    keyed_generator(2 ** 64 - 1, "probe", 0)
    with pytest.raises(ValueError):
        keyed_generator(-1, "probe", 0)


def _square(chunk, offset):
    return [float(x) ** 2 + offset for x in chunk[:, 0]]


def _fail_on_negative(chunk):
    if np.any(chunk < 0):
        raise ArithmeticError("negative")
    return [float(x) for x in chunk[:, 0]]


def test_map_chunks_order():
    grid = np.arange(37, dtype=float)[:, None]
    serial = map_chunks(_square, grid, 1, args=(1.0,))
    assert serial == map_chunks(_square, grid, 3, args=(1.0,))
    assert serial[5] == 26.0


def test_map_chunks_fallback():
    grid = np.array([[1.0], [-1.0], [2.0]])
    out = map_chunks(_fail_on_negative, grid, 1, fallback=lambda c: [None] * len(c))
    assert out == [None, None, None]
    with pytest.raises(ArithmeticError):
        map_chunks(_fail_on_negative, grid, 1)
