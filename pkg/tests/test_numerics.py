import math

import numpy as np
import pytest

from diloco.numerics import (DimensionError, UndefinedSimilarityError, all_finite, axpy,
                             cosine_similarity, dot, l2_norm, weighted_mean)


def test_axpy_examples():
    assert axpy([1, 2], 0, [5, 5]).tolist() == [1, 2]
    assert axpy([0, 0], 2, [1, -1]).tolist() == [2, -2]
    assert axpy([0.5, 0.5], -0.5, [1, 1]).tolist() == [0, 0]
    with pytest.raises(DimensionError):
        axpy([1, 2], 1.0, [1, 2, 3])


def test_weighted_mean_examples():
    assert weighted_mean([[2, 0], [0, 2]], [1, 1]).tolist() == [1, 1]
    assert weighted_mean([[1, 1]], [7]).tolist() == [1, 1]
    assert weighted_mean([[3, 0], [0, 6]], [2, 1]).tolist() == [2, 2]


@pytest.mark.parametrize("vs,ws", [([], []), ([[1.0]], [0]), ([[1.0], [2.0]], [1]),
                                   ([[1.0]], [-1])])
def test_weighted_mean_errors(vs, ws):
    with pytest.raises(ValueError):
        weighted_mean(vs, ws)


def test_weighted_mean_length_mismatch():
    with pytest.raises(DimensionError):
        weighted_mean([[1.0, 2.0], [1.0]], [1, 1])


def test_weighted_mean_is_deterministic():
    rng = np.random.default_rng(3)
    vs = [rng.standard_normal(1000) for _ in range(5)]
    ws = rng.uniform(1, 10, 5)
    assert np.array_equal(weighted_mean(vs, ws), weighted_mean(vs, ws))


def test_cosine_examples():
    assert cosine_similarity([1, 0], [1, 0]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    with pytest.raises(UndefinedSimilarityError):
        cosine_similarity([0, 0], [1, 0])


def test_cosine_stays_in_range():
    x = np.full(1001, 0.1)
    assert -1.0 <= cosine_similarity(x, x) <= 1.0
    assert cosine_similarity(x, -x) == -1.0


def test_norms(backend):
    assert l2_norm([3, 4]) == 5.0
    assert dot([1, 2], [3, 4]) == 11
    assert l2_norm(np.zeros(7)) == 0
    assert all_finite([1.0, 2.0]) and not all_finite([1.0, np.nan])
