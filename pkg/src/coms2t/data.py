"""Spatiotemporal datasets: bundle I/O, synthetic generation, windowing,
normalization and environment descriptors.

Arrays are numpy float64 throughout; torch only appears downstream.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, EmptyWindowError, LoadError, SchemaError

log = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400
MANIFEST_KEYS = ("n_nodes", "n_steps", "n_features", "interval_seconds",
                 "feature_units", "projection_seed")


@dataclass
class SpatioTemporalDataset:
    observations: np.ndarray          # [T, N, F]
    adjacency: np.ndarray             # [N, N]
    node_coords: np.ndarray           # [N, 2] (lat, long) degrees
    node_ids: np.ndarray              # [N]
    timestamps: np.ndarray            # [T] epoch seconds
    interval_seconds: int
    feature_units: list = field(default_factory=list)
    projection_seed: int = 0
    self_loops: bool = False

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        self.node_coords = np.asarray(self.node_coords, dtype=np.float64)
        self.node_ids = np.asarray(self.node_ids, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.interval_seconds = int(self.interval_seconds)
        if not self.feature_units:
            self.feature_units = ["unit"] * self.observations.shape[-1]
        self.validate()

    @property
    def n_steps(self) -> int:
        return self.observations.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.observations.shape[1]

    @property
    def n_features(self) -> int:
        return self.observations.shape[2]

    @property
    def steps_per_day(self) -> int:
        return max(1, -(-SECONDS_PER_DAY // self.interval_seconds))

    def validate(self):
        obs = self.observations
        if obs.ndim != 3:
            raise SchemaError(f"observations must be [T,N,F], got shape {obs.shape}")
        T, N, F = obs.shape
        if T < 2 or N < 2 or F < 1:
            raise SchemaError(f"need T>=2, N>=2, F>=1; got {obs.shape}")
        if self.adjacency.shape != (N, N):
            raise SchemaError(f"adjacency {self.adjacency.shape} does not match N={N}")
        if np.any(self.adjacency < 0):
            raise SchemaError("adjacency must be non-negative")
        if not self.self_loops and np.any(np.diag(self.adjacency) != 0):
            raise SchemaError("adjacency has a non-zero diagonal but self_loops is False")
        if self.node_coords.shape != (N, 2):
            raise SchemaError(f"node_coords {self.node_coords.shape} != ({N}, 2)")
        if self.node_ids.shape != (N,):
            raise SchemaError("node_ids length does not match N")
        if self.timestamps.shape != (T,):
            raise SchemaError("timestamps length does not match T")
        if self.interval_seconds <= 0:
            raise SchemaError("interval_seconds must be positive")
        gaps = np.diff(self.timestamps)
        if np.any(gaps <= 0):
            raise SchemaError("timestamps must be strictly increasing")
        if np.any(gaps != self.interval_seconds):
            raise SchemaError("timestamps are not spaced by interval_seconds")
        if len(self.feature_units) != F:
            raise SchemaError("feature_units length does not match F")

    def subset_nodes(self, nodes: Sequence[int]) -> "SpatioTemporalDataset":
        """Dataset restricted to (and reordered by) the given node positions."""
        idx = np.asarray(nodes, dtype=np.int64)
        return replace(
            self,
            observations=self.observations[:, idx],
            adjacency=self.adjacency[np.ix_(idx, idx)],
            node_coords=self.node_coords[idx],
            node_ids=self.node_ids[idx],
        )

    def day_of_week(self) -> np.ndarray:
        # 1970-01-01 was a Thursday (weekday 3 with Monday = 0)
        return ((self.timestamps // SECONDS_PER_DAY) + 3) % 7

    def step_of_day(self) -> np.ndarray:
        return (self.timestamps % SECONDS_PER_DAY) // self.interval_seconds


# ---------------------------------------------------------------- bundle I/O

def _fmt(x) -> str:
    return repr(float(x))


def save_dataset(ds: SpatioTemporalDataset, path) -> str:
    """Write ``ds`` as a directory bundle. Floats are written with 17
    significant digits so a reload is value-exact."""
    os.makedirs(path, exist_ok=True)
    T, N, F = ds.observations.shape
    manifest = {
        "n_nodes": N,
        "n_steps": T,
        "n_features": F,
        "interval_seconds": ds.interval_seconds,
        "feature_units": list(ds.feature_units),
        "projection_seed": int(ds.projection_seed),
        "self_loops": bool(ds.self_loops),
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    steps = np.repeat(np.arange(T), N)
    nodes = np.tile(np.arange(N), T)
    flat = ds.observations.reshape(T * N, F)
    table = np.column_stack([steps, nodes, flat])
    header = "step,node," + ",".join(f"f{k}" for k in range(F))
    np.savetxt(os.path.join(path, "observations.csv"), table, delimiter=",",
               fmt=["%d", "%d"] + ["%.17g"] * F, header=header, comments="")
    np.savetxt(os.path.join(path, "adjacency.csv"), ds.adjacency, delimiter=",", fmt="%.17g")
    nodes_tab = np.column_stack([ds.node_ids, ds.node_coords])
    np.savetxt(os.path.join(path, "nodes.csv"), nodes_tab, delimiter=",",
               fmt=["%d", "%.17g", "%.17g"], header="node_id,lat,long", comments="")
    np.savetxt(os.path.join(path, "timestamps.csv"), ds.timestamps, fmt="%d")
    return path


def _read(path, name, **kw):
    full = os.path.join(path, name)
    if not os.path.exists(full):
        raise LoadError(f"missing bundle file: {full}")
    try:
        return np.loadtxt(full, delimiter=",", dtype=np.float64, ndmin=2, **kw)
    except ValueError as exc:
        raise SchemaError(f"{name}: {exc}") from exc


def load_dataset(path) -> SpatioTemporalDataset:
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise LoadError(f"missing bundle file: {mpath}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    missing = [k for k in MANIFEST_KEYS if k not in manifest]
    if missing:
        raise SchemaError(f"manifest lacks keys {missing}")
    N, T, F = manifest["n_nodes"], manifest["n_steps"], manifest["n_features"]

    obs_tab = _read(path, "observations.csv", skiprows=1)
    if obs_tab.shape != (T * N, 2 + F):
        raise SchemaError(f"observations.csv has shape {obs_tab.shape}, expected {(T * N, 2 + F)}")
    step = obs_tab[:, 0].astype(np.int64)
    node = obs_tab[:, 1].astype(np.int64)
    if step.min() < 0 or step.max() >= T or node.min() < 0 or node.max() >= N:
        raise SchemaError("observations.csv step/node index out of range")
    obs = np.full((T, N, F), np.nan)
    obs[step, node] = obs_tab[:, 2:]
    if np.isnan(obs).any():
        raise SchemaError("observations.csv does not cover every (step, node) pair")

    adj = _read(path, "adjacency.csv")
    if adj.shape != (N, N):
        raise SchemaError(f"adjacency.csv is {adj.shape}, manifest says N={N}")
    nodes_tab = _read(path, "nodes.csv", skiprows=1)
    if nodes_tab.shape != (N, 3):
        raise SchemaError(f"nodes.csv is {nodes_tab.shape}, expected ({N}, 3)")
    tpath = os.path.join(path, "timestamps.csv")
    if not os.path.exists(tpath):
        raise LoadError(f"missing bundle file: {tpath}")
    ts = np.loadtxt(tpath, dtype=np.int64, ndmin=1)
    if ts.shape != (T,):
        raise SchemaError(f"timestamps.csv has {ts.shape[0]} rows, manifest says {T}")
    return SpatioTemporalDataset(
        observations=obs,
        adjacency=adj,
        node_coords=nodes_tab[:, 1:],
        node_ids=nodes_tab[:, 0].astype(np.int64),
        timestamps=ts,
        interval_seconds=manifest["interval_seconds"],
        feature_units=list(manifest["feature_units"]),
        projection_seed=manifest["projection_seed"],
        self_loops=bool(manifest.get("self_loops", False)),
    )


# ------------------------------------------------------------ synthetic data

@dataclass
class Regime:
    """(mu, sigma) applied to steps matching every given key.

    ``hours`` is a half-open [start, end) hour-of-day range, ``months`` a list
    of calendar months (1-12), ``weekdays`` a list with Monday = 0. A
    ``node_mu`` list replaces the static per-node effect on matching steps.
    """
    mu: float
    sigma: float
    hours: Optional[tuple] = None
    months: Optional[list] = None
    weekdays: Optional[list] = None
    node_mu: Optional[list] = None

    def matches(self, hour, month, weekday) -> np.ndarray:
        hit = np.ones(hour.shape, dtype=bool)
        if self.hours is not None:
            lo, hi = self.hours
            hit &= (hour >= lo) & (hour < hi)
        if self.months is not None:
            hit &= np.isin(month, self.months)
        if self.weekdays is not None:
            hit &= np.isin(weekday, self.weekdays)
        return hit


@dataclass
class SynthConfig:
    n_nodes: int = 8
    n_steps: int = 2016
    n_features: int = 1
    seed: int = 0
    interval_seconds: int = 300
    start_timestamp: int = 1672617600   # 2023-01-02 00:00 UTC, a Monday
    base_mu: float = 0.0
    base_sigma: float = 1.0
    regimes: list = field(default_factory=list)
    weekday_mu: Optional[list] = None   # additive effect per weekday
    node_mu: Optional[list] = None      # additive effect per node
    node_sigma: Optional[list] = None   # multiplicative sigma per node
    n_communities: int = 0
    community_mu: Optional[list] = None
    phi: float = 0.0                    # AR(1) coefficient of the standardized noise
    projection_seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        d["regimes"] = [r if isinstance(r, Regime) else Regime(**r) for r in d.get("regimes", [])]
        return cls(**d)


def _calendar(timestamps):
    ts = np.asarray(timestamps, dtype=np.int64)
    hour = (ts % SECONDS_PER_DAY) / 3600.0
    weekday = ((ts // SECONDS_PER_DAY) + 3) % 7
    month = ts.astype("datetime64[s]").astype("datetime64[M]").astype(np.int64) % 12 + 1
    return hour, month, weekday


def _communities(cfg: SynthConfig, rng):
    N = cfg.n_nodes
    if cfg.n_communities > 0:
        comm = np.arange(N) % cfg.n_communities
        centers = np.column_stack([
            31.0 + 0.5 * np.arange(cfg.n_communities),
            120.0 + 0.5 * np.arange(cfg.n_communities),
        ])
        coords = centers[comm] + rng.normal(scale=0.01, size=(N, 2))
        adj = (comm[:, None] == comm[None, :]).astype(np.float64)
        np.fill_diagonal(adj, 0.0)
    else:
        comm = np.zeros(N, dtype=np.int64)
        angle = 2 * np.pi * np.arange(N) / N
        coords = np.column_stack([31.0 + 0.1 * np.sin(angle), 120.0 + 0.1 * np.cos(angle)])
        adj = np.zeros((N, N))
        idx = np.arange(N)
        adj[idx, (idx + 1) % N] = 1.0
        adj[(idx + 1) % N, idx] = 1.0
    return comm, coords, adj


def synth_generate(cfg: SynthConfig) -> SpatioTemporalDataset:
    """Environment-conditioned Gaussian AR(1) series.

    x[t, i] = mu(t, i) + sigma(t, i) * z[t, i] where z is a unit-variance AR(1)
    process. mu and sigma come from the regime schedule plus node effects, so
    moving between regimes is a controlled covariate shift.
    """
    if cfg.base_sigma <= 0 or any(r.sigma <= 0 for r in cfg.regimes):
        raise ConfigError("every regime needs sigma > 0")
    if cfg.node_sigma is not None and np.any(np.asarray(cfg.node_sigma) <= 0):
        raise ConfigError("node_sigma entries must be > 0")
    if not -1 < cfg.phi < 1:
        raise ConfigError("phi must lie in (-1, 1)")
    T, N, F = cfg.n_steps, cfg.n_nodes, cfg.n_features
    rng = np.random.default_rng(cfg.seed)
    comm, coords, adj = _communities(cfg, rng)

    ts = cfg.start_timestamp + cfg.interval_seconds * np.arange(T, dtype=np.int64)
    hour, month, weekday = _calendar(ts)
    mu_t = np.full(T, cfg.base_mu, dtype=np.float64)
    sigma_t = np.full(T, cfg.base_sigma, dtype=np.float64)
    for reg in cfg.regimes:
        hit = reg.matches(hour, month, weekday)
        mu_t[hit] = reg.mu
        sigma_t[hit] = reg.sigma
    if cfg.weekday_mu is not None:
        mu_t = mu_t + np.asarray(cfg.weekday_mu, dtype=np.float64)[weekday]

    node_mu = np.zeros(N)
    if cfg.community_mu is not None:
        node_mu = node_mu + np.asarray(cfg.community_mu, dtype=np.float64)[comm]
    if cfg.node_mu is not None:
        node_mu = node_mu + np.asarray(cfg.node_mu, dtype=np.float64)
    node_sigma = np.ones(N) if cfg.node_sigma is None else np.asarray(cfg.node_sigma, dtype=np.float64)
    node_eff = np.broadcast_to(node_mu, (T, N)).copy()
    for reg in cfg.regimes:
        if reg.node_mu is not None:
            if len(reg.node_mu) != N:
                raise ConfigError("regime node_mu needs one entry per node")
            node_eff[reg.matches(hour, month, weekday)] = np.asarray(reg.node_mu, dtype=np.float64)

    eps = rng.standard_normal((T, N, F))
    z = np.empty((T, N, F))
    z[0] = eps[0]
    scale = np.sqrt(1.0 - cfg.phi ** 2)
    for t in range(1, T):
        z[t] = cfg.phi * z[t - 1] + scale * eps[t]
    mu = mu_t[:, None, None] + node_eff[:, :, None]
    sigma = sigma_t[:, None, None] * node_sigma[None, :, None]
    return SpatioTemporalDataset(
        observations=mu + sigma * z,
        adjacency=adj,
        node_coords=coords,
        node_ids=np.arange(N),
        timestamps=ts,
        interval_seconds=cfg.interval_seconds,
        feature_units=["synthetic"] * F,
        projection_seed=cfg.projection_seed,
    )


def synth_regime_labels(cfg: SynthConfig, ds: SpatioTemporalDataset) -> np.ndarray:
    """Index of the last regime matching each step (-1 = base)."""
    hour, month, weekday = _calendar(ds.timestamps)
    lab = np.full(ds.n_steps, -1)
    for k, reg in enumerate(cfg.regimes):
        lab[reg.matches(hour, month, weekday)] = k
    return lab


# ----------------------------------------------------------------- windowing

@dataclass
class WindowSet:
    X: np.ndarray        # [W, kappa, N, F]
    Y: np.ndarray        # [W, horizon, N, F]; horizon may be 0 for input-only sets
    anchors: np.ndarray  # [W] index t of the last input step

    def __len__(self):
        return len(self.anchors)

    @property
    def kappa(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.X[idx], self.Y[idx], self.anchors[idx])


def _valid_anchors(T, kappa, horizon, allowed_steps):
    ok = np.zeros(T, dtype=bool)
    allowed = np.asarray(sorted(allowed_steps), dtype=np.int64) if allowed_steps is not None else np.arange(T)
    if allowed.size and (allowed.min() < 0 or allowed.max() >= T):
        raise ConfigError("allowed_steps must lie in [0, T)")
    ok[allowed] = True
    # run[t] = number of consecutive allowed steps ending at t
    run = np.zeros(T, dtype=np.int64)
    c = 0
    for t in range(T):
        c = c + 1 if ok[t] else 0
        run[t] = c
    span = kappa + horizon
    ends = np.nonzero(run >= span)[0]
    return ends - horizon


def make_windows(ds: SpatioTemporalDataset, kappa: int, horizon: int,
                 allowed_steps=None) -> WindowSet:
    """All (X, Y) = (x[t-kappa+1 : t+1], x[t+1 : t+horizon+1]) whose steps lie
    entirely inside ``allowed_steps`` (every step when None)."""
    if kappa < 1 or horizon < 1:
        raise ConfigError("kappa and horizon must be >= 1")
    return _windows(ds.observations, kappa, horizon, allowed_steps)


def make_input_windows(ds: SpatioTemporalDataset, kappa: int, allowed_steps=None) -> WindowSet:
    """Input-only windows (no target horizon), used by the self-supervised
    objective which needs observations but no labels."""
    if kappa < 1:
        raise ConfigError("kappa must be >= 1")
    return _windows(ds.observations, kappa, 0, allowed_steps)


def _windows(obs, kappa, horizon, allowed_steps):
    T = obs.shape[0]
    anchors = _valid_anchors(T, kappa, horizon, allowed_steps)
    if anchors.size == 0:
        raise EmptyWindowError(f"no window of {kappa}+{horizon} steps fits the allowed steps")
    xi = anchors[:, None] + np.arange(-kappa + 1, 1)[None, :]
    yi = anchors[:, None] + np.arange(1, horizon + 1)[None, :]
    return WindowSet(X=obs[xi], Y=obs[yi], anchors=anchors)


def window_distribution(window_X):
    """Per-node, per-feature mean and population std over the time axis.

    Accepts ``[kappa, N, F]`` or any batch of those (time is axis -3).
    """
    x = np.asarray(window_X, dtype=np.float64)
    mu = x.mean(axis=-3)
    sigma = np.sqrt(((x - np.expand_dims(mu, -3)) ** 2).mean(axis=-3))
    return mu, sigma


# -------------------------------------------------------------- normalization

@dataclass
class NormStats:
    mean: np.ndarray       # [F]
    std: np.ndarray        # [F]
    degenerate: np.ndarray  # [F] bool, std was clamped to 1

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "degenerate": self.degenerate.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]),
                   np.asarray(d["degenerate"], dtype=bool))


def fit_norm_stats(ds: SpatioTemporalDataset, train_steps=None, nodes=None) -> NormStats:
    obs = ds.observations
    if train_steps is not None:
        obs = obs[np.asarray(sorted(train_steps), dtype=np.int64)]
    if nodes is not None:
        obs = obs[:, np.asarray(nodes, dtype=np.int64)]
    flat = obs.reshape(-1, obs.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    degenerate = ~(std > 0)
    if degenerate.any():
        log.warning("features %s have zero variance; std clamped to 1", np.nonzero(degenerate)[0].tolist())
    std = np.where(degenerate, 1.0, std)
    return NormStats(mean, std, degenerate)


def normalize(ds: SpatioTemporalDataset, stats: NormStats) -> SpatioTemporalDataset:
    return replace(ds, observations=(ds.observations - stats.mean) / stats.std)


def denormalize(values, stats: NormStats):
    """Map normalized values (feature axis last) back to original units."""
    return np.asarray(values) * stats.std + stats.mean


# ------------------------------------------------------ environment descriptors

def _projection(seed, rows, width, salt):
    rng = np.random.default_rng([int(seed), salt])
    return rng.standard_normal((rows, width)) / np.sqrt(width)


def spatial_env(ds: SpatioTemporalDataset, width: int = 16) -> np.ndarray:
    """Per-node descriptor [N, 2, width].

    Row 0 holds standardized (lat, long), row 1 the location one-hot; both go
    through fixed projections seeded by the bundle's ``projection_seed`` so
    every column is dense.
    """
    if width < 2:
        raise ConfigError("descriptor width must be >= 2")
    N = ds.n_nodes
    coords = ds.node_coords
    scale = coords.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    z = (coords - coords.mean(axis=0)) / scale
    out = np.zeros((N, 2, width))
    out[:, 0, :] = z @ _projection(ds.projection_seed, 2, width, 3)
    # one-hot(loc) @ P is a row lookup into P
    out[:, 1, :] = _projection(ds.projection_seed, N, width, 1)
    return out


def trend(ds: SpatioTemporalDataset, kappa: int) -> np.ndarray:
    """Causal least-squares slope over the last ``kappa`` steps (inclusive),
    averaged over nodes and features. Steps with fewer than two observations
    get 0."""
    series = ds.observations.mean(axis=(1, 2))
    T = series.shape[0]
    out = np.zeros(T)
    for t in range(1, T):
        lo = max(0, t - kappa + 1)
        y = series[lo:t + 1]
        x = np.arange(y.size, dtype=np.float64)
        xc = x - x.mean()
        out[t] = float(xc @ (y - y.mean()) / (xc @ xc))
    return out


def temporal_env(ds: SpatioTemporalDataset, kappa: int, width: int = 16,
                 trend_range: Optional[tuple] = None) -> np.ndarray:
    """Per-step descriptor [T, 2, width].

    Row 0 is [day-of-week one-hot (7) || step-of-day one-hot] mapped through a
    fixed seeded projection (injective when ``width >= 7 + steps_per_day``).
    Row 1 is the trend scalar, min-max scaled with ``trend_range`` (pass the
    training-split range to avoid leakage), times a fixed seeded direction.
    """
    T = ds.n_steps
    spd = ds.steps_per_day
    raw_w = 7 + spd
    raw = np.zeros((T, raw_w))
    raw[np.arange(T), ds.day_of_week()] = 1.0
    raw[np.arange(T), 7 + ds.step_of_day()] = 1.0
    out = np.zeros((T, 2, width))
    out[:, 0, :] = raw @ _projection(ds.projection_seed, raw_w, width, 2)
    tr = trend(ds, kappa)
    if trend_range is None:
        trend_range = (tr.min(), tr.max())
    lo, hi = trend_range
    scaled = (tr - lo) / (hi - lo) if hi > lo else np.zeros(T)
    out[:, 1, :] = scaled[:, None] * _projection(ds.projection_seed, 1, width, 4)
    return out
