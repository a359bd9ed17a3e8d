import math

import numpy as np
import pytest

from utils.errors import ValidationError
from utils.estimates import (
    EstimateWithError, agree, combined_se, concat_samples, estimate_from_samples, non_increasing, not_worse_than,
)
from utils.parallel import chunk_ranges, map_path_chunks, set_worker_count


def test_estimate_from_samples_exact():
    est = estimate_from_samples([1.0, 2.0, 3.0, 4.0])
    assert est.mean == pytest.approx(2.5)
    assert est.standard_error == pytest.approx(math.sqrt((1.25 * 4 / 3) / 4))
    assert est.n == 4


def test_single_sample_has_zero_error():
    est = estimate_from_samples([7.0])
    assert est.mean == 7.0
    assert est.standard_error == 0.0


def test_empty_samples_rejected():
    with pytest.raises(ValidationError):
        estimate_from_samples([])


def test_negative_standard_error_rejected():
    with pytest.raises(ValidationError):
        EstimateWithError(1.0, -0.1, 10)


def test_within_and_agree():
    a = EstimateWithError(1.0, 0.1, 100)
    b = EstimateWithError(1.5, 0.1, 100)
    assert a.within(1.25, band=3.0)
    assert not a.within(1.5, band=3.0)
    assert combined_se(a, b) == pytest.approx(math.sqrt(0.02))
    assert agree(a, b, band=4.0)
    assert not agree(a, b, band=3.0)


def test_non_increasing_with_slack():
    assert non_increasing([3.0, 2.0, 2.05], [0.1, 0.1, 0.1], band=1.0)
    assert not non_increasing([3.0, 2.0, 2.5], [0.1, 0.1, 0.1], band=1.0)


def test_not_worse_than_uses_band():
    best = EstimateWithError(1.0, 0.1, 100)
    close = EstimateWithError(0.8, 0.1, 100)
    far = EstimateWithError(0.4, 0.1, 100)
    assert not_worse_than(best, [close, EstimateWithError(2.0, 0.1, 100)], band=3.0)
    assert not not_worse_than(best, [close, far], band=3.0)
    assert not_worse_than(best, [], band=3.0)


def test_chunk_ranges_cover_all_paths():
    ranges = chunk_ranges(10, 4)
    assert ranges == [(0, 4), (4, 8), (8, 10)]


def test_map_path_chunks_independent_of_workers():
    def fn(a, b):
        return np.arange(a, b, dtype=float) ** 2

    set_worker_count(1)
    serial = concat_samples(map_path_chunks(fn, 1000, chunk_size=64))
    set_worker_count(4)
    threaded = concat_samples(map_path_chunks(fn, 1000, chunk_size=64))
    assert np.array_equal(serial, threaded)
    assert np.array_equal(serial, np.arange(1000, dtype=float) ** 2)
