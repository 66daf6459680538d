"""Out-of-distribution split construction and node-set surgery.

Temporal shifts split steps by hour-of-day or calendar month; structural
shifts hide nodes during training (involvement) or drop them at test time
(removal). Hour ranges are half-open ``[start, end)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .data import SECONDS_PER_DAY, SpatioTemporalDataset
from .errors import ConfigError

SCENARIOS = ("temp_interval", "temp_month", "temp_chrono", "node_involve", "node_remove")
STEP_SETS = ("train", "val", "test", "adapt")


@dataclass
class SplitManifest:
    scenario: str
    n_steps: int
    n_nodes: int
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)
    adapt: list = field(default_factory=list)
    train_nodes: list = field(default_factory=list)
    test_nodes: list = field(default_factory=list)
    test_only_nodes: list = field(default_factory=list)
    removed_nodes: list = field(default_factory=list)

    def __post_init__(self):
        for k in STEP_SETS + ("train_nodes", "test_nodes", "test_only_nodes", "removed_nodes"):
            setattr(self, k, sorted(int(i) for i in getattr(self, k)))
        if not self.train_nodes:
            self.train_nodes = list(range(self.n_nodes))
        if not self.test_nodes:
            self.test_nodes = list(range(self.n_nodes))
        self.validate()

    def validate(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        sets = [set(getattr(self, k)) for k in STEP_SETS]
        for i in range(4):
            for j in range(i + 1, 4):
                if sets[i] & sets[j]:
                    raise ConfigError(f"{STEP_SETS[i]} and {STEP_SETS[j]} steps overlap")
        if set(self.test_only_nodes) & set(self.train_nodes):
            raise ConfigError("test-only nodes leak into training nodes")
        if set(self.removed_nodes) & set(self.test_nodes):
            raise ConfigError("removed nodes still present at test time")

    def steps(self, name) -> np.ndarray:
        return np.asarray(getattr(self, name), dtype=np.int64)

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in self.__dataclass_fields__}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        return cls(**json.loads(text))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


def _hour_mask(hours_of_day, rng):
    if rng is None:
        return np.zeros(hours_of_day.shape, dtype=bool)
    lo, hi = rng
    if not 0 <= lo <= hi <= 24:
        raise ConfigError(f"hour range {rng} outside [0, 24]")
    return (hours_of_day >= lo) & (hours_of_day < hi)


def _overlap(a, b):
    return a is not None and b is not None and max(a[0], b[0]) < min(a[1], b[1])


def split_interval(ds: SpatioTemporalDataset, train_hours=(8, 16), val_hours=(16, 24),
                   adapt_hours=(0, 1), test_hours=(0, 7), utc_offset_hours: float = 0.0) -> SplitManifest:
    """Daily interval split. ``adapt_hours`` must sit inside ``test_hours``;
    adaptation steps are removed from the test set so the four sets stay
    disjoint."""
    ranges = {"train": train_hours, "val": val_hours, "test": test_hours}
    keys = list(ranges)
    for i in range(3):
        for j in range(i + 1, 3):
            if _overlap(ranges[keys[i]], ranges[keys[j]]):
                raise ConfigError(f"{keys[i]} and {keys[j]} hour ranges overlap")
    if adapt_hours is not None:
        if test_hours is None or not (test_hours[0] <= adapt_hours[0] <= adapt_hours[1] <= test_hours[1]):
            raise ConfigError("adapt_hours must lie inside test_hours")
    local = ds.timestamps + int(round(utc_offset_hours * 3600))
    hod = (local % SECONDS_PER_DAY) / 3600.0
    adapt = _hour_mask(hod, adapt_hours)
    test = _hour_mask(hod, test_hours) & ~adapt
    return SplitManifest(
        "temp_interval", ds.n_steps, ds.n_nodes,
        train=np.flatnonzero(_hour_mask(hod, train_hours)),
        val=np.flatnonzero(_hour_mask(hod, val_hours)),
        test=np.flatnonzero(test), adapt=np.flatnonzero(adapt),
    )


def calendar_months(timestamps) -> np.ndarray:
    ts = np.asarray(timestamps, dtype=np.int64)
    return ts.astype("datetime64[s]").astype("datetime64[M]").astype(np.int64) % 12 + 1


def split_month(ds: SpatioTemporalDataset, train_months=(1, 2, 3, 4, 5, 6), val_months=(7, 8),
                adapt_months=(9,), test_months=(10, 11, 12)) -> SplitManifest:
    groups = {"train": train_months, "val": val_months, "adapt": adapt_months, "test": test_months}
    seen = set()
    for name, months in groups.items():
        months = tuple(months or ())
        if any(not 1 <= m <= 12 for m in months):
            raise ConfigError(f"{name} months {months} outside 1-12")
        if seen & set(months):
            raise ConfigError(f"{name} months overlap another set")
        seen |= set(months)
    month = calendar_months(ds.timestamps)
    return SplitManifest(
        "temp_month", ds.n_steps, ds.n_nodes,
        **{k: np.flatnonzero(np.isin(month, tuple(v or ()))) for k, v in groups.items()})


def split_chronological(ds: SpatioTemporalDataset, fractions=(0.6, 0.2, 0.05, 0.15)) -> SplitManifest:
    """Contiguous train/val/adapt/test blocks in time order."""
    if len(fractions) != 4 or any(f < 0 for f in fractions) or sum(fractions) > 1 + 1e-12:
        raise ConfigError("fractions must be four non-negative numbers summing to <= 1")
    T = ds.n_steps
    cuts = np.floor(np.cumsum(fractions) * T).astype(int)
    tr, va, ad, te = (np.arange(a, b) for a, b in zip(np.r_[0, cuts[:-1]], cuts))
    return SplitManifest("temp_chrono", T, ds.n_nodes, train=tr, val=va, adapt=ad, test=te)


def _pick_nodes(N, fraction, seed):
    if not 0 <= fraction < 1:
        raise ConfigError("node fraction must lie in [0, 1)")
    k = int(math.floor(fraction * N))
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(N, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)


def node_involvement(ds: SpatioTemporalDataset, mask_fraction: float, seed: int = 0,
                     base: Optional[SplitManifest] = None) -> SplitManifest:
    """Hide ``floor(mask_fraction * N)`` nodes from training and validation;
    they reappear at adaptation and test time."""
    N = ds.n_nodes
    masked = _pick_nodes(N, mask_fraction, seed)
    if N - masked.size < 2:
        raise ConfigError("masking leaves fewer than 2 training nodes")
    base = base or split_chronological(ds)
    return SplitManifest(
        "node_involve", ds.n_steps, N, base.train, base.val, base.test, base.adapt,
        train_nodes=np.setdiff1d(np.arange(N), masked), test_nodes=np.arange(N),
        test_only_nodes=masked)


def node_removal(ds: SpatioTemporalDataset, remove_fraction: float, seed: int = 0,
                 base: Optional[SplitManifest] = None) -> SplitManifest:
    """Train on every node; drop ``floor(remove_fraction * N)`` at test time."""
    N = ds.n_nodes
    removed = _pick_nodes(N, remove_fraction, seed)
    if N - removed.size < 2:
        raise ConfigError("removal leaves fewer than 2 test nodes")
    base = base or split_chronological(ds)
    return SplitManifest(
        "node_remove", ds.n_steps, N, base.train, base.val, base.test, base.adapt,
        train_nodes=np.arange(N), test_nodes=np.setdiff1d(np.arange(N), removed),
        removed_nodes=removed)


def haversine_km(lat1, lon1, lat2, lon2):
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * 6371.0088 * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def nearest_donors(coords_old, coords_new, old_ids=None) -> np.ndarray:
    """Position of the nearest existing node for each new node (haversine);
    ties go to the smallest node id."""
    old = np.asarray(coords_old, dtype=np.float64).reshape(-1, 2)
    new = np.asarray(coords_new, dtype=np.float64).reshape(-1, 2)
    if old.shape[0] == 0:
        raise ConfigError("node copy needs at least one existing node")
    ids = np.arange(old.shape[0]) if old_ids is None else np.asarray(old_ids)
    donors = np.empty(new.shape[0], dtype=np.int64)
    for j, (lat, lon) in enumerate(new):
        dist = haversine_km(lat, lon, old[:, 0], old[:, 1])
        donors[j] = np.lexsort((ids, dist))[0]
    return donors


def node_copy_adjacency(A_learned, coords_old, coords_new, old_ids=None):
    """Extend an ``[N, N]`` adjacency to ``[N+M, N+M]`` for M new nodes.

    Each new node takes its donor's row, column and self entry; entries
    between two new nodes read the donors' mutual entry. Works on numpy
    arrays and torch tensors alike. Returns ``(A_extended, donors)``.
    """
    N = A_learned.shape[0]
    if len(np.asarray(coords_new).reshape(-1, 2)) == 0:
        return A_learned, np.zeros(0, dtype=np.int64)
    donors = nearest_donors(coords_old, coords_new, old_ids)
    full = np.concatenate([np.arange(N), donors])
    if torch.is_tensor(A_learned):
        idx = torch.as_tensor(full)
        return A_learned[idx][:, idx], donors
    A = np.asarray(A_learned)
    return A[np.ix_(full, full)], donors


def shrink_adjacency(A, keep):
    """Delete rows and columns not in ``keep`` (positions)."""
    keep = np.asarray(keep, dtype=np.int64)
    if torch.is_tensor(A):
        idx = torch.as_tensor(keep)
        return A[idx][:, idx]
    return np.asarray(A)[np.ix_(keep, keep)]


def window_steps(anchors, kappa, horizon) -> np.ndarray:
    """Every step index touched by windows with the given anchors."""
    anchors = np.asarray(anchors, dtype=np.int64)
    return anchors[:, None] + np.arange(-kappa + 1, horizon + 1)[None, :]


def assert_no_leakage(anchors, kappa, horizon, allowed) -> None:
    touched = np.unique(window_steps(anchors, kappa, horizon))
    stray = np.setdiff1d(touched, np.asarray(allowed, dtype=np.int64))
    if stray.size:
        raise ConfigError(f"windows touch {stray.size} steps outside the allowed set")
