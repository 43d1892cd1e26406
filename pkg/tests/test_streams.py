import numpy as np
import pytest

from sgghmc.streams import SLOT_REFRESH, CounterRNG, StreamView, substep_slot


def test_slices_agree_with_full_range():
    rng = CounterRNG(5)
    full = rng.normal(3, SLOT_REFRESH, 0, 600, 3)
    assert np.array_equal(rng.normal(3, SLOT_REFRESH, 256, 512, 3), full[256:512])
    assert np.array_equal(rng.normal(3, SLOT_REFRESH, 17, 18, 3), full[17:18])


def test_same_key_same_draws():
    a = CounterRNG(11).uniform(7, 9, 0, 100, 5)
    b = CounterRNG(11).uniform(7, 9, 0, 100, 5)
    assert np.array_equal(a, b)


def test_different_counters_differ():
    rng = CounterRNG(1)
    base = rng.uniform(0, 0, 0, 10, 4)
    assert not np.array_equal(base, rng.uniform(1, 0, 0, 10, 4))
    assert not np.array_equal(base, rng.uniform(0, 1, 0, 10, 4))
    assert not np.array_equal(base, CounterRNG(2).uniform(0, 0, 0, 10, 4))


def test_uniforms_open_interval_and_moments():
    u = CounterRNG(0).uniform(0, 0, 0, 200_000, 1)[:, 0]
    assert u.min() > 0 and u.max() < 1
    assert abs(u.mean() - 0.5) < 4 * np.sqrt(1 / 12 / u.size)


def test_single_view_drops_member_axis():
    rng = CounterRNG(4)
    one = StreamView.for_member(rng, 6, 2).normal(SLOT_REFRESH, 3)
    many = StreamView.for_members(rng, 0, 10, 2).normal(SLOT_REFRESH, 3)
    assert one.shape == (3,)
    assert np.array_equal(one, many[6])


def test_substep_slots_are_distinct():
    slots = {substep_slot(k, w) for k in range(50) for w in range(3)}
    assert len(slots) == 150
    assert min(slots) > SLOT_REFRESH


def test_negative_seed_rejected():
    with pytest.raises(ValueError):
        CounterRNG(-1)
