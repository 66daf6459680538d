"""Spatial/temporal prompt encoders, the spatial-temporal interaction module
(STIM) and the self-supervised distribution-regression objective.

A prompt is the encoder output for one environment descriptor: ``P_S`` per
node, ``P_T`` per time step. STIM reads a (node, step) prompt pair and
regresses the mean and standard deviation of the window that starts there.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import WindowSet, window_distribution
from .errors import ConfigError, DivergenceError, EmptyWindowError, ShapeError

log = logging.getLogger(__name__)
DTYPE = torch.float64

# A leaky slope keeps every hidden unit's gradient nonzero, so an adaptation
# step moves every adaptable scalar (plain ReLU units can die on all N nodes).
_ACTS = {"relu": torch.relu, "leaky_relu": lambda x: F.leaky_relu(x, 0.01), "tanh": torch.tanh}


@dataclass
class PromptConfig:
    env_width: int = 16
    prompt_dim: int = 16
    encoder_hidden: Optional[tuple] = None   # default (2 * prompt_dim,)
    cin_maps: Optional[int] = None           # default prompt_dim
    mlp_hidden: Optional[int] = None         # default prompt_dim
    n_features: int = 1
    align_width: int = 32
    activation: str = "leaky_relu"           # hidden units of encoders and STIM MLP

    def __post_init__(self):
        if self.activation not in _ACTS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.encoder_hidden is None:
            self.encoder_hidden = (2 * self.prompt_dim,)
        self.encoder_hidden = tuple(int(h) for h in self.encoder_hidden)
        if self.cin_maps is None:
            self.cin_maps = self.prompt_dim
        if self.mlp_hidden is None:
            self.mlp_hidden = self.prompt_dim


class PromptBank(nn.Module):
    """All prompt-side weights.

    Groups: ``W_ps`` (spatial encoder), ``W_pt`` (temporal encoder), ``W_P``
    (STIM) and ``align`` (the two alignment projections into the backbone).
    Alignment projections start at zero so that injecting prompts leaves a
    trained backbone's function unchanged.
    """

    def __init__(self, config: PromptConfig, seed: int = 0):
        super().__init__()
        self.config = c = config
        g = torch.Generator().manual_seed(int(seed))

        def randn(*shape, std):
            return nn.Parameter(torch.randn(*shape, generator=g, dtype=DTYPE) * std)

        widths = (2 * c.env_width,) + c.encoder_hidden + (c.prompt_dim,)
        self._enc_layers = len(widths) - 1
        for tag in ("ps", "pt"):
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                setattr(self, f"{tag}_w{i}", randn(a, b, std=np.sqrt(2.0 / a)))
                setattr(self, f"{tag}_b{i}", nn.Parameter(torch.zeros(b, dtype=DTYPE)))
        Ep, H, M, Fe = c.prompt_dim, c.cin_maps, c.mlp_hidden, c.n_features
        self.cin_w = randn(H, 2, 2, std=1.0 / np.sqrt(4 * Ep))
        self.mlp_w = randn(Ep, M, std=np.sqrt(2.0 / Ep))
        self.mlp_b = nn.Parameter(torch.zeros(M, dtype=DTYPE))
        self.head_w = randn(H + M, 2 * Fe, std=1.0 / np.sqrt(H + M))
        self.head_b = nn.Parameter(torch.zeros(2 * Fe, dtype=DTYPE))
        self.ps_al = nn.Parameter(torch.zeros(Ep, c.align_width, dtype=DTYPE))
        self.pt_al = nn.Parameter(torch.zeros(Ep, c.align_width, dtype=DTYPE))

    # ------------------------------------------------------------ param groups
    def group_names(self, group: str):
        if group in ("W_ps", "W_pt"):
            tag = "ps" if group == "W_ps" else "pt"
            return [f"{tag}_{k}{i}" for i in range(self._enc_layers) for k in ("w", "b")]
        if group == "W_P":
            return ["cin_w", "mlp_w", "mlp_b", "head_w", "head_b"]
        if group == "align":
            return ["ps_al", "pt_al"]
        raise KeyError(group)

    def group(self, group: str):
        return [getattr(self, n) for n in self.group_names(group)]

    def group_size(self, *groups) -> int:
        return sum(p.numel() for g in groups for p in self.group(g))

    @property
    def adaptable_names(self):
        return self.group_names("W_ps") + self.group_names("W_pt") + self.group_names("W_P")

    def snapshot(self) -> dict:
        return {n: p.detach().cpu().numpy().copy() for n, p in self.named_parameters()}

    def load_snapshot(self, snap: dict) -> None:
        with torch.no_grad():
            for n, p in self.named_parameters():
                p.copy_(torch.as_tensor(snap[n], dtype=DTYPE))

    @property
    def align(self):
        return (self.ps_al, self.pt_al)

    # ----------------------------------------------------------------- encoders
    def _encode(self, tag, env):
        env = torch.as_tensor(env, dtype=DTYPE)
        width = self.config.env_width
        if env.shape[-2:] != (2, width):
            raise ShapeError(f"descriptor must end in (2, {width}), got {tuple(env.shape)}")
        h = env.reshape(*env.shape[:-2], 2 * width)
        for i in range(self._enc_layers):
            h = h @ getattr(self, f"{tag}_w{i}") + getattr(self, f"{tag}_b{i}")
            if i < self._enc_layers - 1:
                h = _ACTS[self.config.activation](h)
        return h

    def encode_spatial(self, e_s):
        """[..., 2, E] spatial descriptors -> [..., E_p] prompts."""
        return self._encode("ps", e_s)

    def encode_temporal(self, e_t):
        """[..., 2, E] temporal descriptors -> [..., E_p] prompts."""
        return self._encode("pt", e_t)

    # --------------------------------------------------------------------- STIM
    def stim(self, P_S, P_T):
        """Regress ``(mu_hat, sigma_hat)``, each ``[..., F]``, from prompt pairs.

        A one-layer compressed interaction network over the field stack
        ``[P_S; P_T]`` (sum-pooled over the embedding axis) is concatenated
        with an MLP over ``P_S * P_T``; sigma goes through softplus.
        """
        if P_S.shape[-1] != self.config.prompt_dim or P_T.shape[-1] != self.config.prompt_dim:
            raise ShapeError(f"prompt widths {P_S.shape[-1]}, {P_T.shape[-1]} != {self.config.prompt_dim}")
        P_S, P_T = torch.broadcast_tensors(P_S, P_T)
        fields = torch.stack([P_S, P_T], dim=-2)                      # [..., 2, D]
        pair = fields.unsqueeze(-2) * fields.unsqueeze(-3)            # [..., 2, 2, D]
        cin = torch.einsum("hij,...ijd->...hd", self.cin_w, pair).sum(-1)   # [..., H]
        mlp = _ACTS[self.config.activation]((P_S * P_T) @ self.mlp_w + self.mlp_b)
        out = torch.cat([cin, mlp], dim=-1) @ self.head_w + self.head_b
        Fe = self.config.n_features
        return out[..., :Fe], F.softplus(out[..., Fe:])


def encode_spatial(bank: PromptBank, e_s):
    return bank.encode_spatial(e_s)


def encode_temporal(bank: PromptBank, e_t):
    return bank.encode_temporal(e_t)


def stim_forward(bank: PromptBank, P_S, P_T):
    return bank.stim(P_S, P_T)


def align_spatial(P_S, W_al):
    """Project per-node prompts ``[N, E_p]`` to ``[N, d]``; broadcasts over
    batch and time of a ``[B, k, N, d]`` tensor."""
    if P_S.shape[-1] != W_al.shape[0]:
        raise ShapeError(f"spatial prompt width {P_S.shape[-1]} vs alignment {tuple(W_al.shape)}")
    return P_S @ W_al


def align_temporal(P_T, W_al):
    """Project per-step prompts ``[..., k, E_p]`` to ``[..., k, 1, d]`` so they
    broadcast over nodes."""
    if P_T.shape[-1] != W_al.shape[0]:
        raise ShapeError(f"temporal prompt width {P_T.shape[-1]} vs alignment {tuple(W_al.shape)}")
    return (P_T @ W_al).unsqueeze(-2)


def ssl_loss(mu_hat, sigma_hat, mu, sigma):
    """Sum over every entry of squared errors on mean and std."""
    mu = torch.as_tensor(mu, dtype=DTYPE)
    sigma = torch.as_tensor(sigma, dtype=DTYPE)
    if not (mu_hat.shape == mu.shape and sigma_hat.shape == sigma.shape):
        raise ShapeError(f"ssl shapes {tuple(mu_hat.shape)}/{tuple(mu.shape)}")
    return ((mu_hat - mu) ** 2).sum() + ((sigma_hat - sigma) ** 2).sum()


# -------------------------------------------------------------- SSL fitting

@dataclass
class SSLTask:
    """Distribution targets for self-supervised fitting.

    ``start`` indexes the first step of each window (the step whose temporal
    descriptor is paired with the window's statistics).
    """
    start: np.ndarray      # [W]
    mu: np.ndarray         # [W, N, F]
    sigma: np.ndarray      # [W, N, F]

    def __len__(self):
        return len(self.start)

    def subset(self, idx):
        return SSLTask(self.start[idx], self.mu[idx], self.sigma[idx])


def ssl_task(windows: WindowSet) -> SSLTask:
    mu, sigma = window_distribution(windows.X)
    return SSLTask(windows.anchors - windows.kappa + 1, mu, sigma)


def ssl_batch_loss(bank: PromptBank, env_s, env_t, task: SSLTask, idx):
    P_S = bank.encode_spatial(env_s)                                   # [N, E_p]
    P_T = bank.encode_temporal(env_t[task.start[idx]])                 # [B, E_p]
    mu_hat, sigma_hat = bank.stim(P_S.unsqueeze(0), P_T.unsqueeze(1))  # [B, N, F]
    return ssl_loss(mu_hat, sigma_hat, task.mu[idx], task.sigma[idx])


def ssl_eval(bank: PromptBank, env_s, env_t, task: SSLTask) -> float:
    """Mean per-entry SSL loss (so differently sized slices compare)."""
    with torch.no_grad():
        loss = ssl_batch_loss(bank, env_s, env_t, task, np.arange(len(task)))
    return float(loss) / task.mu.size


@dataclass
class SSLFitConfig:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 64
    max_batches: Optional[int] = None
    seed: int = 0
    divergence_factor: float = 1e3


def fit_ssl(bank: PromptBank, env_s, env_t, task: SSLTask, params: Sequence[nn.Parameter],
            cfg: SSLFitConfig, on_step=None):
    """Adam on the per-batch summed SSL loss over ``params``.

    Returns the per-epoch mean of batch losses. ``on_step`` is called after
    every optimizer step (used for update accounting).
    """
    if len(task) == 0:
        raise EmptyWindowError("no windows for self-supervised fitting")
    env_s = torch.as_tensor(env_s, dtype=DTYPE)
    env_t = torch.as_tensor(env_t, dtype=DTYPE)
    params = list(params)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history = []
    first = None
    for _ in range(cfg.epochs):
        order = rng.permutation(len(task))
        batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        if cfg.max_batches is not None:
            batches = batches[:cfg.max_batches]
        losses = []
        for idx in batches:
            opt.zero_grad()
            loss = ssl_batch_loss(bank, env_s, env_t, task, idx)
            val = loss.item()
            if first is None:
                first = max(val, 1e-12)
            if not np.isfinite(val) or val > cfg.divergence_factor * first:
                raise DivergenceError(f"SSL loss diverged: {val:.3g} (initial {first:.3g})")
            loss.backward()
            opt.step()
            if on_step is not None:
                on_step()
            losses.append(val)
        history.append(float(np.mean(losses)))
    return history


def pretrain_prompts(bank: PromptBank, env_s, env_t, windows: WindowSet,
                     cfg: SSLFitConfig = None, holdout_frac: float = 0.2, on_step=None):
    """Self-supervised pre-training of encoders and STIM.

    The chronologically last ``holdout_frac`` of the windows is held out.
    Returns a history dict with per-epoch training losses and held-out losses
    before and after.
    """
    cfg = cfg or SSLFitConfig()
    task = ssl_task(windows)
    n_hold = int(len(task) * holdout_frac)
    fit, hold = task.subset(np.arange(len(task) - n_hold)), task.subset(np.arange(len(task) - n_hold, len(task)))
    env_s_t = torch.as_tensor(env_s, dtype=DTYPE)
    env_t_t = torch.as_tensor(env_t, dtype=DTYPE)
    before = ssl_eval(bank, env_s_t, env_t_t, hold) if n_hold else None
    params = bank.group("W_ps") + bank.group("W_pt") + bank.group("W_P")
    losses = fit_ssl(bank, env_s_t, env_t_t, fit, params, cfg, on_step=on_step)
    after = ssl_eval(bank, env_s_t, env_t_t, hold) if n_hold else None
    return {"train_loss": losses, "holdout_before": before, "holdout_after": after,
            "n_fit": len(fit), "n_holdout": n_hold}


def export_prompts_csv(prompts, path, entity_ids=None):
    P = np.asarray(prompts.detach() if torch.is_tensor(prompts) else prompts)
    ids = range(P.shape[0]) if entity_ids is None else entity_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["entity_id"] + [f"dim{k}" for k in range(P.shape[1])])
        for e, row in zip(ids, P):
            w.writerow([e] + [repr(float(v)) for v in row])
    return path
