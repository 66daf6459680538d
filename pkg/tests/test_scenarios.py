import calendar

import numpy as np
import pytest
import torch

from coms2t.data import SpatioTemporalDataset, make_windows
from coms2t.errors import ConfigError
from coms2t.scenarios import (SplitManifest, assert_no_leakage, calendar_months, haversine_km, nearest_donors,
                              node_copy_adjacency, node_involvement, node_removal, shrink_adjacency,
                              split_chronological, split_interval, split_month)


def dataset(T, N=4, interval=3600, start=1672531200):   # 2023-01-01 00:00 UTC
    return SpatioTemporalDataset(
        observations=np.zeros((T, N, 1)), adjacency=np.ones((N, N)) - np.eye(N),
        node_coords=np.column_stack([30 + np.arange(N) * 0.1, 120 + np.arange(N) * 0.1]),
        node_ids=np.arange(N), timestamps=start + interval * np.arange(T), interval_seconds=interval)


def test_interval_defaults_hours_per_day():
    ds = dataset(24 * 14)
    m = split_interval(ds)
    assert len(m.train) == 8 * 14 and len(m.val) == 8 * 14
    assert len(m.adapt) == 14 and len(m.test) == 6 * 14
    hod = (ds.timestamps % 86400) // 3600
    assert set(hod[m.adapt]) == {0}
    assert set(hod[m.test]) == set(range(1, 7))


def test_interval_all_train():
    m = split_interval(dataset(48), train_hours=(0, 24), val_hours=None, adapt_hours=None, test_hours=None)
    assert len(m.train) == 48 and not (m.val or m.test or m.adapt)


def test_interval_half_open_end():
    ds = dataset(24 * 60, interval=60)
    m = split_interval(ds)
    minute_of_day = (ds.timestamps % 86400) // 60
    at_0659 = np.flatnonzero(minute_of_day == 7 * 60 - 1)      # last minute inside [0, 7)
    at_0700 = np.flatnonzero(minute_of_day == 7 * 60)
    assert set(at_0659) <= set(m.test)
    assert not set(at_0700) & set(m.test)


def test_interval_overlap_rejected():
    with pytest.raises(ConfigError):
        split_interval(dataset(48), train_hours=(6, 12), val_hours=(10, 14))
    with pytest.raises(ConfigError):
        split_interval(dataset(48), adapt_hours=(7, 8))


def test_month_defaults_ratio():
    ds = dataset(2920, interval=10800)
    m = split_month(ds)
    days = np.array([31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31])
    expected = [days[:6].sum(), days[6:8].sum(), days[8], days[9:].sum()]
    got = [len(m.train), len(m.val), len(m.adapt), len(m.test)]
    assert got == [8 * d for d in expected]


def test_month_all_train_and_bad_months():
    ds = dataset(2920, interval=10800)
    m = split_month(ds, train_months=range(1, 13), val_months=(), adapt_months=(), test_months=())
    assert len(m.train) == 2920
    with pytest.raises(ConfigError):
        split_month(ds, train_months=(0, 1))
    with pytest.raises(ConfigError):
        split_month(ds, train_months=(1, 2), val_months=(2,))


def test_leap_february_calendar():
    start = calendar.timegm((2024, 1, 1, 0, 0, 0))
    ds = dataset(24 * 366, start=start)
    months = calendar_months(ds.timestamps)
    for mth in range(1, 13):
        assert (months == mth).sum() == 24 * calendar.monthrange(2024, mth)[1]


def test_manifest_json_round_trip_and_overlap_check(tmp_path):
    m = split_month(dataset(2920, interval=10800))
    m.save(tmp_path / "m.json")
    back = SplitManifest.load(tmp_path / "m.json")
    assert back == m
    with pytest.raises(ConfigError):
        SplitManifest("temp_month", 10, 2, train=[1, 2], test=[2])


def test_chronological_blocks():
    m = split_chronological(dataset(100))
    assert m.train == list(range(60)) and m.test == list(range(85, 100))
    assert m.adapt == list(range(80, 85))


def test_node_involvement_counts_and_seed():
    ds = dataset(100, N=8)
    m = node_involvement(ds, 0.25, seed=3)
    assert len(m.test_only_nodes) == 2 and len(m.train_nodes) == 6
    assert m.test_only_nodes == node_involvement(ds, 0.25, seed=3).test_only_nodes
    assert node_involvement(ds, 0.0).test_only_nodes == []
    with pytest.raises(ConfigError):
        node_involvement(dataset(100, N=2), 0.5)


def test_node_removal_shrinks_adjacency():
    ds = dataset(100, N=4)
    A = np.arange(16.0).reshape(4, 4)
    small = shrink_adjacency(A, [0, 1, 2])
    assert np.array_equal(small, A[:3, :3])
    assert node_removal(ds, 0.0).removed_nodes == []
    m = node_removal(dataset(100, N=8), 0.25, seed=1)
    assert len(m.removed_nodes) == 2 and not set(m.removed_nodes) & set(m.test_nodes)
    with pytest.raises(ConfigError):
        node_removal(dataset(100, N=2), 0.5)


def test_node_copy_examples():
    A = np.arange(9.0).reshape(3, 3)
    old = np.array([[30.0, 120.0], [30.0, 121.0], [31.0, 120.0]])
    ext, donors = node_copy_adjacency(A, old, old[[1]])
    assert donors.tolist() == [1]
    assert np.array_equal(ext[3, :3], A[1]) and np.array_equal(ext[:3, 3], A[:, 1])
    assert ext[3, 3] == A[1, 1]
    ext2, _ = node_copy_adjacency(A, old, np.array([[30.2, 120.3], [30.9, 120.1]]))
    assert ext2.shape == (5, 5) and np.array_equal(ext2[:3, :3], A)
    same, d0 = node_copy_adjacency(A, old, np.zeros((0, 2)))
    assert same is A and d0.size == 0
    t, _ = node_copy_adjacency(torch.as_tensor(A), old, old[[2]])
    assert np.array_equal(t.numpy(), node_copy_adjacency(A, old, old[[2]])[0])


def test_equidistant_donor_smallest_id():
    old = np.array([[0.0, 1.0], [0.0, -1.0]])
    assert nearest_donors(old, [[0.0, 0.0]], old_ids=[5, 2]).tolist() == [1]
    assert nearest_donors(old, [[0.0, 0.0]]).tolist() == [0]
    with pytest.raises(ConfigError):
        nearest_donors(np.zeros((0, 2)), [[0.0, 0.0]])


def test_haversine_known_distance():
    # one degree of latitude is about 111.2 km
    assert abs(haversine_km(0.0, 0.0, 1.0, 0.0) - 111.19) < 0.05


def test_no_leakage_exhaustive():
    ds = dataset(24 * 21)
    m = split_interval(ds)
    for name in ("train", "val", "test"):
        w = make_windows(ds, 2, 2, allowed_steps=m.steps(name))
        assert_no_leakage(w.anchors, 2, 2, m.steps(name))
    assert not set(m.adapt) & (set(m.train) | set(m.val))
    with pytest.raises(ConfigError):
        assert_no_leakage(np.array([5]), 3, 1, allowed=[3, 4, 5])
