"""Progressive training stages: warm-up, prompt pre-training, prompt-based
fine-tuning with a frozen neocortex, and test-time prompt adaptation.

Every stage works in normalized units; :func:`predict` returns normalized
predictions too, callers denormalize before scoring.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch

from .backbone import DTYPE, STBackbone, loss_mae_train
from .data import WindowSet
from .disentangle import (ParameterPartition, VariationLedger, apply_partition, freeze_grads_,
                          warmup_stability_check)
from .errors import AdaptError, ConfigError, DivergenceError, EmptyWindowError, LedgerError, ShapeError
from .prompt import PromptBank, SSLFitConfig, fit_ssl, ssl_batch_loss, ssl_eval, ssl_task

log = logging.getLogger(__name__)

STAGES = ("warmup", "pretrain", "finetune", "adapt")


@dataclass
class StagePlan:
    warmup_epochs: int = 30
    patience: int = 3
    unit_batches: Optional[int] = None    # ledger unit; None = one epoch
    pretrain_epochs: int = 60
    finetune_epochs: int = 10
    adapt_epochs: int = 2
    adapt_max_batches: int = 8
    batch_size: int = 64
    lr_warmup: float = 1e-4
    lr_pretrain: float = 1e-3
    lr_finetune: float = 1e-4
    lr_adapt: float = 1e-3
    ssl_weight: float = 0.0               # auxiliary SSL term during fine-tune
    iterations: int = 1
    seed: int = 0

    def __post_init__(self):
        for k in ("warmup_epochs", "pretrain_epochs", "finetune_epochs", "adapt_epochs"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be >= 0")
        if self.batch_size < 1 or self.iterations < 1:
            raise ConfigError("batch_size and iterations must be >= 1")

    @classmethod
    def from_dict(cls, d):
        return cls(**(d or {}))

    def to_dict(self):
        return asdict(self)


@dataclass
class Env:
    """Descriptor tables for the node set and time axis in use."""
    spatial: torch.Tensor    # [N, 2, E]
    temporal: torch.Tensor   # [T, 2, E]

    def __post_init__(self):
        self.spatial = torch.as_tensor(self.spatial, dtype=DTYPE)
        self.temporal = torch.as_tensor(self.temporal, dtype=DTYPE)


class UpdateTracker:
    """Marks every scalar whose value changed across an optimizer step."""

    def __init__(self, named_params):
        self.params = list(named_params)
        self.prev = {n: p.detach().clone() for n, p in self.params}
        self.changed = {n: torch.zeros_like(p, dtype=torch.bool) for n, p in self.params}

    def __call__(self):
        for n, p in self.params:
            now = p.detach()
            self.changed[n] |= now != self.prev[n]
            self.prev[n] = now.clone()

    def count(self, names=None) -> int:
        return int(sum(int(m.sum()) for n, m in self.changed.items() if names is None or n in names))

    def masks(self):
        return {n: m.numpy().copy() for n, m in self.changed.items()}


def params_hash(tensors) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(np.ascontiguousarray(t.detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def backbone_hash(model: STBackbone) -> str:
    return params_hash([p for _, p in model.named_registry_params()])


def bank_hash(bank: PromptBank) -> str:
    return params_hash(list(bank.parameters()))


def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def prompts_for(bank: PromptBank, env: Env, anchors, kappa):
    """(P_S [N, E_p], P_T [B, kappa, E_p]) for windows ending at ``anchors``."""
    steps = torch.as_tensor(np.asarray(anchors)[:, None] + np.arange(-kappa + 1, 1)[None, :])
    return bank.encode_spatial(env.spatial), bank.encode_temporal(env.temporal[steps])


def model_forward(model: STBackbone, X, anchors=None, bank: Optional[PromptBank] = None,
                  env: Optional[Env] = None, adjs=None):
    """Backbone forward, with prompts when a bank and descriptor tables are given."""
    if bank is None:
        return model(X, adjs=adjs)
    if env is None or anchors is None:
        raise ShapeError("prompted forward needs descriptor tables and anchors")
    if env.spatial.shape[0] != X.shape[2]:
        raise ShapeError(f"{env.spatial.shape[0]} spatial descriptors for {X.shape[2]} nodes")
    prompts = prompts_for(bank, env, anchors, model.config.kappa)
    return model(X, prompts=prompts, align=bank.align, adjs=adjs)


def evaluate_mae(model, windows: WindowSet, bank=None, env=None, adjs=None, batch_size=256) -> float:
    """MAE in the units of ``windows`` (normalized during training)."""
    if len(windows) == 0:
        raise EmptyWindowError("no windows to evaluate")
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(windows), batch_size):
            sl = slice(i, i + batch_size)
            pred = model_forward(model, windows.X[sl], windows.anchors[sl], bank, env, adjs)
            err = (pred - torch.as_tensor(windows.Y[sl], dtype=DTYPE)).abs()
            total += float(err.sum())
            count += err.numel()
    return total / count


@dataclass
class WarmupResult:
    ledger: VariationLedger
    history: list
    snapshots: list = field(default_factory=list)
    stopped_early: bool = False


def run_warmup(model: STBackbone, train: WindowSet, val: Optional[WindowSet], plan: StagePlan,
               tracker: Optional[UpdateTracker] = None, keep_snapshots: bool = True,
               transcript: Optional[list] = None) -> WarmupResult:
    """Plain supervised training until validation MAE stabilizes.

    The ledger is updated once per training unit (an epoch by default, or
    every ``plan.unit_batches`` batches).
    """
    ledger = VariationLedger.from_model(model)
    snaps = [model.snapshot()] if keep_snapshots else []
    history, val_hist = [], []
    params = [p for _, p in model.named_registry_params()]
    opt = torch.optim.Adam(params, lr=plan.lr_warmup)
    rng = np.random.default_rng([plan.seed, 1])
    Y_all = torch.as_tensor(train.Y, dtype=DTYPE)
    batches_since_unit = 0
    stopped = False
    for epoch in range(plan.warmup_epochs):
        losses = []
        for idx in _batches(len(train), plan.batch_size, rng):
            opt.zero_grad()
            loss = loss_mae_train(model(train.X[idx]), Y_all[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite warm-up loss at epoch {epoch}")
            loss.backward()
            opt.step()
            if tracker is not None:
                tracker()
            losses.append(loss.item())
            batches_since_unit += 1
            if plan.unit_batches and batches_since_unit == plan.unit_batches:
                ledger.update(model)
                batches_since_unit = 0
                if keep_snapshots:
                    snaps.append(model.snapshot())
        if not plan.unit_batches:
            ledger.update(model)
            if keep_snapshots:
                snaps.append(model.snapshot())
        val_mae = evaluate_mae(model, val) if val is not None and len(val) else float(np.mean(losses))
        val_hist.append(val_mae)
        rec = {"stage": "warmup", "epoch": epoch, "train_loss": float(np.mean(losses)),
               "val_mae": val_mae, "tb": ledger.tb, "ledger_quantiles": ledger.quantiles(),
               "updated_params": tracker.count() if tracker else None}
        history.append(rec)
        if transcript is not None:
            transcript.append(rec)
        if warmup_stability_check(val_hist, patience=plan.patience):
            stopped = True
            break
    return WarmupResult(ledger, history, snaps, stopped)


def run_pretrain(bank: PromptBank, env: Env, train: WindowSet, plan: StagePlan,
                 tracker: Optional[UpdateTracker] = None, transcript: Optional[list] = None):
    from .prompt import pretrain_prompts
    cfg = SSLFitConfig(epochs=plan.pretrain_epochs, lr=plan.lr_pretrain, batch_size=plan.batch_size,
                       seed=plan.seed)
    hist = pretrain_prompts(bank, env.spatial, env.temporal, train, cfg, on_step=tracker)
    if transcript is not None:
        for e, loss in enumerate(hist["train_loss"]):
            transcript.append({"stage": "pretrain", "epoch": e, "train_loss": loss,
                               "updated_params": tracker.count() if tracker else None})
    return hist


def _check_partition(model, partition):
    if partition is None:
        return
    reg = [(n, tuple(s), b) for n, s, b in model.registry()]
    if [(n, tuple(s), b) for n, s, b in partition.registry] != reg:
        raise LedgerError("partition does not match the model registry")


def run_finetune(model: STBackbone, partition: Optional[ParameterPartition], bank: Optional[PromptBank],
                 train: WindowSet, plan: StagePlan, env: Optional[Env] = None,
                 val: Optional[WindowSet] = None, tracker: Optional[UpdateTracker] = None,
                 bank_tracker: Optional[UpdateTracker] = None, ledger: Optional[VariationLedger] = None,
                 keep_snapshots: bool = False, transcript: Optional[list] = None, epoch_offset: int = 0):
    """Fine-tune the hippocampus (every weight when ``partition`` is None)
    with prompts injected (none when ``bank`` is None).

    Neocortex gradients are zeroed before every optimizer step, and the
    optimizer is fresh, so neocortex values never move. The bank, alignment
    projections included, trains jointly with the hippocampus.
    """
    _check_partition(model, partition)
    if bank is not None and env is None:
        raise ConfigError("prompted fine-tune needs descriptor tables")
    if partition is not None:
        apply_partition(model, partition)
    params = [p for _, p in model.named_registry_params()]
    if bank is not None:
        params += list(bank.parameters())
    opt = torch.optim.Adam(params, lr=plan.lr_finetune)
    rng = np.random.default_rng([plan.seed, 3])
    Y_all = torch.as_tensor(train.Y, dtype=DTYPE)
    ssl = ssl_task(train) if (bank is not None and plan.ssl_weight > 0) else None
    history, snaps = [], []
    for epoch in range(plan.finetune_epochs):
        losses = []
        for idx in _batches(len(train), plan.batch_size, rng):
            opt.zero_grad()
            pred = model_forward(model, train.X[idx], train.anchors[idx], bank, env)
            loss = loss_mae_train(pred, Y_all[idx])
            if ssl is not None:
                # per-entry scale so the weight is comparable to the MAE term
                extra = ssl_batch_loss(bank, env.spatial, env.temporal, ssl, idx) / ssl.mu[idx].size
                loss = loss + plan.ssl_weight * extra
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite fine-tune loss at epoch {epoch}")
            loss.backward()
            if partition is not None:
                freeze_grads_(model, partition)
            opt.step()
            if tracker is not None:
                tracker()
            if bank_tracker is not None:
                bank_tracker()
            losses.append(loss.item())
        if ledger is not None:
            ledger.update(model)
        if keep_snapshots:
            snaps.append(model.snapshot())
        val_mae = evaluate_mae(model, val, bank, env) if val is not None and len(val) else None
        rec = {"stage": "finetune", "epoch": epoch_offset + epoch, "train_loss": float(np.mean(losses)),
               "val_mae": val_mae, "updated_params": tracker.count() if tracker else None}
        history.append(rec)
        if transcript is not None:
            transcript.append(rec)
    return {"history": history, "snapshots": snaps}


def test_time_adapt(bank: PromptBank, env: Env, adapt: WindowSet, plan: StagePlan,
                    tracker: Optional[UpdateTracker] = None, transcript: Optional[list] = None):
    """Refit encoders and STIM on the distribution of the adaptation windows.

    Only ``W_ps``, ``W_pt`` and ``W_P`` move; alignment projections and the
    backbone are untouched.
    """
    if adapt is None or len(adapt) == 0:
        raise AdaptError("empty adaptation slice")
    if env.spatial.shape[0] != adapt.X.shape[2]:
        raise ShapeError("descriptor table and adaptation windows disagree on the node count")
    task = ssl_task(adapt)
    cfg = SSLFitConfig(epochs=plan.adapt_epochs, lr=plan.lr_adapt, batch_size=plan.batch_size,
                       max_batches=plan.adapt_max_batches, seed=plan.seed)
    before = ssl_eval(bank, env.spatial, env.temporal, task)
    params = bank.group("W_ps") + bank.group("W_pt") + bank.group("W_P")
    losses = fit_ssl(bank, env.spatial, env.temporal, task, params, cfg, on_step=tracker) \
        if plan.adapt_epochs > 0 else []
    after = ssl_eval(bank, env.spatial, env.temporal, task)
    rec = {"stage": "adapt", "epochs": plan.adapt_epochs, "ssl_before": before, "ssl_after": after,
           "train_loss": losses, "updated_params": tracker.count() if tracker else None}
    if transcript is not None:
        transcript.append(rec)
    return rec


def predict(model: STBackbone, X, anchors=None, bank: Optional[PromptBank] = None,
            env: Optional[Env] = None, partition: Optional[ParameterPartition] = None,
            adjs=None, batch_size: int = 256) -> np.ndarray:
    """Forward with the current prompts; returns normalized ``[B, l, N, F]``."""
    _check_partition(model, partition)
    X = np.asarray(X)
    N = X.shape[2]
    A = model.adjacencies()[0] if adjs is None else adjs[0]
    if A.shape[0] != N:
        raise ShapeError(f"{N} nodes but adjacency is {tuple(A.shape)}; extend or shrink it first")
    outs = []
    with torch.no_grad():
        for i in range(0, X.shape[0], batch_size):
            sl = slice(i, i + batch_size)
            a = None if anchors is None else np.asarray(anchors)[sl]
            outs.append(model_forward(model, X[sl], a, bank, env, adjs).numpy())
    return np.concatenate(outs, axis=0)
