"""Neocortex/hippocampus disentanglement.

A :class:`VariationLedger` accumulates per-weight absolute changes between
training units. The ``tau`` percent of weights with the smallest accumulated
change in each block (spatial, temporal) form the frozen neocortex; the
remainder, plus every head parameter, is the trainable hippocampus.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import torch

from .errors import BlockError, ConfigError, LedgerError

log = logging.getLogger(__name__)

BLOCKS = ("spatial", "temporal")


def _as_numpy_snapshot(params) -> dict:
    if hasattr(params, "snapshot"):
        return params.snapshot()
    return {k: np.asarray(v.detach() if torch.is_tensor(v) else v, dtype=np.float64)
            for k, v in params.items()}


class VariationLedger:
    """Per-tensor ``last_snapshot``, ``delta_abs`` and ``accum`` arrays plus
    the unit counter ``tb``."""

    def __init__(self, registry, snapshot):
        self.registry = [(n, tuple(s), b) for n, s, b in registry]
        snap = _as_numpy_snapshot(snapshot)
        self.last = {n: np.array(snap[n], dtype=np.float64, copy=True) for n, _, _ in self.registry}
        self.delta = {n: np.zeros(s) for n, s, _ in self.registry}
        self.accum = {n: np.zeros(s) for n, s, _ in self.registry}
        self.tb = 0

    @classmethod
    def from_model(cls, model):
        return cls(model.registry(), model.snapshot())

    def update(self, params_now):
        snap = _as_numpy_snapshot(params_now)
        for name, shape, _ in self.registry:
            if name not in snap or tuple(np.shape(snap[name])) != shape:
                raise LedgerError(f"tensor {name!r} drifted from registry shape {shape}")
        for name, _, _ in self.registry:
            now = np.array(snap[name], dtype=np.float64, copy=True)
            d = np.abs(now - self.last[name])
            self.delta[name] = d
            self.accum[name] = self.accum[name] + d
            self.last[name] = now
        self.tb += 1
        return self

    def names(self, block):
        return [n for n, _, b in self.registry if b == block]

    def block_accum(self, block) -> np.ndarray:
        names = self.names(block)
        if not names:
            return np.zeros(0)
        return np.concatenate([self.accum[n].reshape(-1) for n in names])

    def quantiles(self, qs=(0.1, 0.25, 0.5, 0.75, 0.9)) -> dict:
        out = {}
        for block in sorted({b for _, _, b in self.registry}):
            v = self.block_accum(block)
            out[block] = {str(q): float(np.quantile(v, q)) for q in qs} if v.size else {}
        return out

    def copy(self) -> "VariationLedger":
        new = VariationLedger.__new__(VariationLedger)
        new.registry = list(self.registry)
        new.last = {k: v.copy() for k, v in self.last.items()}
        new.delta = {k: v.copy() for k, v in self.delta.items()}
        new.accum = {k: v.copy() for k, v in self.accum.items()}
        new.tb = self.tb
        return new

    def export(self, out_dir) -> dict:
        """One CSV per tensor (flat index, accum) and ``ledger_summary.json``."""
        os.makedirs(out_dir, exist_ok=True)
        files = {}
        for name, _, _ in self.registry:
            path = os.path.join(out_dir, f"ledger_{name}.csv")
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["index", "accum"])
                for i, v in enumerate(self.accum[name].reshape(-1)):
                    w.writerow([i, repr(float(v))])
            files[name] = path
        summary = {"tb": self.tb, "quantiles": self.quantiles()}
        spath = os.path.join(out_dir, "ledger_summary.json")
        with open(spath, "w") as fh:
            json.dump(summary, fh, indent=2)
        files["summary"] = spath
        return files


def update_ledger(ledger: VariationLedger, params_now) -> VariationLedger:
    return ledger.update(params_now)


def _count(tau, size) -> int:
    if not 0 < tau <= 100:
        raise ConfigError(f"tau must lie in (0, 100], got {tau}")
    frac = Fraction(str(tau)) if isinstance(tau, float) else Fraction(tau)
    return int(frac * size // 100)


def select_stable_indices(accum_block, tau) -> np.ndarray:
    """Flat (row-major) indices of the ``floor(tau% * size)`` smallest entries.

    Ties resolve to the earlier row-major index. Returned in selection order.
    """
    v = np.asarray(accum_block, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise BlockError("cannot select from an empty block")
    k = _count(tau, v.size)
    return np.argsort(v, kind="stable")[:k]


@dataclass
class ParameterPartition:
    """Neocortex masks (True = frozen) for every registry tensor."""
    registry: list
    tau: float
    lam: float
    masks: dict
    frozen: dict = field(default_factory=dict)   # full tensors after smoothing
    empty_layers: list = field(default_factory=list)

    def block_size(self, block) -> int:
        return int(sum(np.prod(s) for _, s, b in self.registry if b == block))

    def neocortex_count(self, block=None) -> int:
        return int(sum(self.masks[n].sum() for n, _, b in self.registry if block in (None, b)))

    def hippocampus_count(self, block=None) -> int:
        return int(sum((~self.masks[n]).sum() for n, _, b in self.registry if block in (None, b)))

    def block_mask(self, block) -> np.ndarray:
        return np.concatenate([self.masks[n].reshape(-1) for n, _, b in self.registry if b == block])

    def neocortex_values(self, params) -> np.ndarray:
        snap = _as_numpy_snapshot(params)
        return np.concatenate([snap[n][self.masks[n]] for n, _, _ in self.registry])

    def neocortex_hash(self, params) -> str:
        return hashlib.sha256(self.neocortex_values(params).tobytes()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "tau": self.tau, "lam": self.lam, "empty_layers": self.empty_layers,
            "registry": [[n, list(s), b] for n, s, b in self.registry],
            "neocortex": {n: np.flatnonzero(m).tolist() for n, m in self.masks.items()},
        }

    @classmethod
    def from_dict(cls, d, frozen=None):
        registry = [(n, tuple(s), b) for n, s, b in d["registry"]]
        masks = {}
        for n, s, _ in registry:
            m = np.zeros(int(np.prod(s)), dtype=bool)
            m[np.asarray(d["neocortex"][n], dtype=np.int64)] = True
            masks[n] = m.reshape(s)
        return cls(registry, d["tau"], d["lam"], masks, frozen or {}, list(d.get("empty_layers", [])))


def build_partition(params, ledger: VariationLedger, tau=60, lam: float = 0.0) -> ParameterPartition:
    """Select the neocortex per block and compute its frozen values.

    Frozen value = ``(1 - lam) * w + lam * mean(neocortex weights of the same
    tensor)``; ``lam = 0`` keeps warm-up values exactly.
    """
    if ledger.tb < 1:
        raise LedgerError("ledger has no completed training unit")
    if not 0.0 <= lam <= 1.0:
        raise ConfigError("lam must lie in [0, 1]")
    snap = _as_numpy_snapshot(params)
    masks = {n: np.zeros(s, dtype=bool) for n, s, _ in ledger.registry}
    for block in BLOCKS:
        names = ledger.names(block)
        if not names:
            continue
        flat_mask = np.zeros(ledger.block_accum(block).size, dtype=bool)
        flat_mask[select_stable_indices(ledger.block_accum(block), tau)] = True
        off = 0
        for n in names:
            size = masks[n].size
            masks[n] = flat_mask[off:off + size].reshape(masks[n].shape)
            off += size
    frozen, empty = {}, []
    for n, _, b in ledger.registry:
        w = np.array(snap[n], dtype=np.float64, copy=True)
        m = masks[n]
        if b in BLOCKS and not m.any():
            empty.append(n)
        if lam != 0.0 and m.any():
            w[m] = (1.0 - lam) * w[m] + lam * w[m].mean()
        frozen[n] = w
    if empty:
        log.warning("empty neocortex in %s at tau=%s", empty, tau)
    return ParameterPartition(list(ledger.registry), tau, lam, masks, frozen, empty)


def apply_partition(model, partition: ParameterPartition) -> None:
    """Write the (possibly smoothed) frozen values into the model."""
    with torch.no_grad():
        for n, _, _ in partition.registry:
            p = getattr(model, n)
            m = torch.as_tensor(partition.masks[n])
            p[m] = torch.as_tensor(partition.frozen[n], dtype=p.dtype)[m]


def apply_freeze(gradients: dict, partition: ParameterPartition) -> dict:
    """Zero gradient entries at neocortex positions (pure; returns a new dict)."""
    out = {}
    for name, g in gradients.items():
        m = partition.masks.get(name)
        if m is None or g is None:
            out[name] = g
            continue
        if torch.is_tensor(g):
            out[name] = g.masked_fill(torch.as_tensor(m), 0.0)
        else:
            g = np.array(g, dtype=np.float64, copy=True)
            g[m] = 0.0
            out[name] = g
    return out


def freeze_grads_(model, partition: ParameterPartition) -> None:
    """In-place version of :func:`apply_freeze` on ``p.grad``."""
    grads = {n: getattr(model, n).grad for n, _, _ in partition.registry}
    for n, g in apply_freeze(grads, partition).items():
        getattr(model, n).grad = g


def warmup_stability_check(val_errors, patience: int = 3, eps: float = 1e-8,
                           rel_tol: float = 0.01) -> bool:
    """True when the last ``patience`` relative changes are all below ``rel_tol``."""
    e = [float(x) for x in val_errors]
    if len(e) < patience + 1:
        return False
    for prev, cur in zip(e[-patience - 1:-1], e[-patience:]):
        if abs(cur - prev) / max(prev, eps) >= rel_tol:
            return False
    return True
