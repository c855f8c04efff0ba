import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alqueue.core import (Dataset, Thresholds, bits_to_mask, dedup_key, insert_unique, mask_to_bits,
                          read_dataset_csv, stable_subset, top_fraction, write_dataset_csv)

from conftest import make_record


def test_mask_round_trip():
    bits = frozenset({0, 5, 63})
    assert mask_to_bits(bits_to_mask(bits)) == bits
    assert bits_to_mask([]) == 0


def test_dedup_key_ignores_sub_resolution_noise():
    a = make_record(1)
    b = make_record(1)
    object.__setattr__(b.candidate, "embedding", a.candidate.embedding + 1e-7)
    assert dedup_key(a.candidate) == dedup_key(b.candidate)
    c = make_record(2)
    assert dedup_key(a.candidate) != dedup_key(c.candidate)
    assert 0 <= dedup_key(a.candidate) < 2**63


def test_strain_is_set_once():
    r = make_record(1)
    r.record_strain(0.3)
    with pytest.raises(ValueError):
        r.record_strain(0.1)
    assert r.s_is == 0.3


def test_score_lookup_errors():
    r = make_record(1)
    with pytest.raises(ValueError):
        r.score("s_is")
    with pytest.raises(KeyError):
        r.score("s_xx")


def test_dataset_is_unique_by_key():
    d = Dataset()
    assert insert_unique(d, make_record(1, 0.1))
    assert not insert_unique(d, make_record(1, 0.2))
    assert len(d) == 1 and d[0].s_is == 0.1


def test_thresholds_are_strict():
    t = Thresholds()
    assert t.passes(make_record(1, 0.2499, 0.5, 0.5))
    assert not t.passes(make_record(1, 0.25, 0.5, 0.5))
    assert not t.passes(make_record(1, 0.1, 1.0, 0.5))
    with pytest.raises(ValueError):
        Thresholds(t_is=-1)
    with pytest.raises(ValueError):
        t.passes(make_record(2))


def test_stable_subset():
    d = Dataset([make_record(i, s) for i, s in enumerate([0.1, 0.3, 0.2, 0.25])])
    assert stable_subset(d, Thresholds()).ids() == [0, 2]


def test_top_fraction_rounds_up_and_breaks_ties_by_id():
    d = Dataset([make_record(i, s) for i, s in zip([5, 3, 9, 1], [0.2, 0.1, 0.1, 0.5])])
    assert top_fraction(d, 0.5).ids() == [3, 9]
    assert top_fraction(d, 0.3).ids() == [3, 9]  # ceil(1.2) = 2
    assert top_fraction(d, 0.25).ids() == [3]
    assert top_fraction(d, 1.0, lower_is_better=False).ids()[0] == 1


def test_top_fraction_errors():
    with pytest.raises(ValueError):
        top_fraction(Dataset(), 0.5)
    d = Dataset([make_record(1, 0.1)])
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError):
            top_fraction(d, bad)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=40), st.floats(0.01, 1.0))
def test_top_fraction_size_and_order(scores, frac):
    d = Dataset([make_record(i, s) for i, s in enumerate(scores)])
    top = top_fraction(d, frac)
    assert len(top) == math.ceil(frac * len(d) - 1e-9)
    rest = [r.s_is for r in d if r.key not in top]
    if rest:
        assert max(r.s_is for r in top) <= min(rest)


def test_csv_round_trip(tmp_path, bundle):
    w = bundle.world
    d = Dataset(list(bundle.holdout)[:20])
    write_dataset_csv(d, tmp_path / "d.csv")
    back = read_dataset_csv(tmp_path / "d.csv", w.build_candidates)
    assert back.ids() == d.ids()
    for a, b in zip(d, back):
        assert a.key == b.key and a.s_is == b.s_is and a.s_sa == b.s_sa and a.s_t == b.s_t
        np.testing.assert_array_equal(a.candidate.embedding, b.candidate.embedding)
