"""GraphWaveNet-like spatiotemporal learner with an enumerable parameter
registry.

Layout of one forward pass::

    X [B,k,N,F] -> input head -> (+ spatial prompt) -> K graph layers
      -> (+ temporal prompt) -> L dilated causal convs -> last step
      -> output head -> Y [B,l,N,F]
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, NumericsError, SchemaError, ShapeError

DTYPE = torch.float64

_ACTS = {
    "relu": torch.relu,
    "leaky_relu": lambda x: F.leaky_relu(x, 0.01),
    "linear": lambda x: x,
    None: lambda x: x,
}


@dataclass
class BackboneConfig:
    n_nodes: int
    n_features: int = 1
    kappa: int = 12
    horizon: int = 12
    hidden: int = 32
    n_spatial: int = 2
    kernels: tuple = (12, 6, 3)
    dilations: tuple = (1, 2, 4)
    adaptive: bool = True
    activation: str = "leaky_relu"
    adj_init_scale: float = 3.0

    def __post_init__(self):
        self.kernels = tuple(int(k) for k in self.kernels)
        self.dilations = tuple(int(d) for d in self.dilations)
        if len(self.kernels) != len(self.dilations):
            raise ConfigError("kernels and dilations must have the same length")
        if self.receptive_field < self.kappa:
            raise ConfigError(
                f"temporal receptive field {self.receptive_field} < kappa={self.kappa}")
        if self.activation not in _ACTS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def receptive_field(self) -> int:
        return 1 + sum((k - 1) * d for k, d in zip(self.kernels, self.dilations))


def normalize_adjacency(A: torch.Tensor, mode: str) -> torch.Tensor:
    """Row-softmax for learnable logits, row-sum division for fixed weights."""
    if mode == "softmax":
        return torch.softmax(A, dim=-1)
    if mode == "row":
        s = A.sum(dim=-1, keepdim=True)
        return A / torch.where(s == 0, torch.ones_like(s), s)
    raise ConfigError(f"unknown adjacency normalization {mode!r}")


def _check(x, layer):
    if not torch.isfinite(x).all():
        raise NumericsError(f"non-finite activations in {layer}", layer=layer)


def spatial_forward(X, adjs: Sequence[torch.Tensor], omegas: Sequence[torch.Tensor],
                    activation="relu", norm="softmax", trace=None):
    """Stacked graph convolutions ``X <- act(norm(A_i) X omega_i)``.

    X is [B, k, N, d]; each A_i is [N, N] and omega_i is [d_in, d_out].
    """
    act = _ACTS[activation]
    for i, (A, w) in enumerate(zip(adjs, omegas)):
        if A.shape[-1] != X.shape[-2]:
            raise ShapeError(f"adjacency {tuple(A.shape)} vs {X.shape[-2]} nodes")
        A_hat = normalize_adjacency(A, norm)
        pre = torch.einsum("ij,btjd->btid", A_hat, X) @ w
        if trace is not None:
            trace.setdefault("spatial_pre", []).append(pre)
        X = act(pre)
        _check(X, f"spatial_{i}")
    return X


def _causal_conv(h, w, b, dil):
    """Dilated causal convolution of ``h`` [M, d_in, K] with ``w``
    [d_out, d_in, width]: gather the taps, then one matmul (the CPU dilated
    conv kernel loops per sample)."""
    width, K = w.shape[-1], h.shape[-1]
    h = F.pad(h, ((width - 1) * dil, 0))
    taps = h.unfold(2, (width - 1) * dil + 1, 1)[..., ::dil]   # [M, d_in, K, width]
    out = torch.einsum("mikw,oiw->mok", taps, w)
    return out if b is None else out + b[:, None]


def temporal_forward(X_S, kernels: Sequence[torch.Tensor], biases: Sequence[Optional[torch.Tensor]],
                     dilations: Sequence[int], activation="relu", trace=None):
    """Dilated causal convolutions over the time axis; returns the last step.

    X_S is [B, k, N, d]; kernel i is [d_out, d_in, width]. Taps that fall
    before the first input step read zeros, so they add nothing.
    Output is [B, N, d_last].
    """
    act = _ACTS[activation]
    B, K, N, d = X_S.shape
    h = X_S.permute(0, 2, 3, 1).reshape(B * N, d, K)
    for i, (w, b, dil) in enumerate(zip(kernels, biases, dilations)):
        pre = _causal_conv(h, w, b, dil)
        if trace is not None:
            trace.setdefault("temporal_pre", []).append(pre)
        h = act(pre)
        _check(h, f"temporal_{i}")
    return h[:, :, -1].reshape(B, N, -1)


class STBackbone(nn.Module):
    def __init__(self, config: BackboneConfig, adjacency=None, seed: int = 0):
        super().__init__()
        self.config = c = config
        g = torch.Generator().manual_seed(int(seed))
        d, N, Fe = c.hidden, c.n_nodes, c.n_features

        def randn(*shape, std):
            return nn.Parameter(torch.randn(*shape, generator=g, dtype=DTYPE) * std)

        if adjacency is None:
            adj0 = torch.zeros(N, N, dtype=DTYPE)
        else:
            adj0 = torch.as_tensor(np.asarray(adjacency), dtype=DTYPE).clone()
            if adj0.shape != (N, N):
                raise ShapeError(f"adjacency {tuple(adj0.shape)} vs n_nodes={N}")
        self.in_w = randn(Fe, d, std=1.0 / np.sqrt(Fe))
        self.in_b = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        for i in range(c.n_spatial):
            if c.adaptive:
                logits = c.adj_init_scale * (adj0 + torch.eye(N, dtype=DTYPE))
                setattr(self, f"A_{i}", nn.Parameter(logits))
            else:
                self.register_buffer(f"A_{i}", adj0.clone())
            setattr(self, f"omega_{i}", randn(d, d, std=np.sqrt(2.0 / d)))
        for i, k in enumerate(c.kernels):
            setattr(self, f"w_t{i}", randn(d, d, k, std=np.sqrt(2.0 / (d * k))))
            setattr(self, f"b_t{i}", nn.Parameter(torch.zeros(d, dtype=DTYPE)))
        self.out_w = randn(d, c.horizon * Fe, std=1.0 / np.sqrt(d))
        self.out_b = nn.Parameter(torch.zeros(c.horizon * Fe, dtype=DTYPE))

    # ---------------------------------------------------------------- registry
    def registry(self):
        """[(name, shape, block)] in the fixed flattening order."""
        c = self.config
        out = [("in_w", (c.n_features, c.hidden), "head"), ("in_b", (c.hidden,), "head")]
        for i in range(c.n_spatial):
            if c.adaptive:
                out.append((f"A_{i}", (c.n_nodes, c.n_nodes), "spatial"))
            out.append((f"omega_{i}", (c.hidden, c.hidden), "spatial"))
        for i, k in enumerate(c.kernels):
            out.append((f"w_t{i}", (c.hidden, c.hidden, k), "temporal"))
            out.append((f"b_t{i}", (c.hidden,), "temporal"))
        out.append(("out_w", (c.hidden, c.horizon * c.n_features), "head"))
        out.append(("out_b", (c.horizon * c.n_features,), "head"))
        return out

    def named_registry_params(self):
        return [(name, getattr(self, name)) for name, _, _ in self.registry()]

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s, _ in self.registry())

    def flatten(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for _, p in self.named_registry_params()])

    def unflatten(self, vec) -> None:
        vec = torch.as_tensor(vec, dtype=DTYPE)
        if vec.numel() != self.n_params:
            raise ShapeError(f"flat vector of {vec.numel()} != {self.n_params}")
        off = 0
        with torch.no_grad():
            for _, p in self.named_registry_params():
                n = p.numel()
                p.copy_(vec[off:off + n].reshape(p.shape))
                off += n

    def snapshot(self) -> dict:
        return {name: p.detach().cpu().numpy().copy() for name, p in self.named_registry_params()}

    def load_snapshot(self, snap: dict) -> None:
        with torch.no_grad():
            for name, p in self.named_registry_params():
                p.copy_(torch.as_tensor(snap[name], dtype=DTYPE))

    def adjacencies(self):
        return [getattr(self, f"A_{i}") for i in range(self.config.n_spatial)]

    def arch_hash(self) -> str:
        payload = json.dumps({"config": asdict(self.config), "registry": self.registry()},
                             sort_keys=True, default=list)
        return hashlib.sha256(payload.encode()).hexdigest()

    # ----------------------------------------------------------------- forward
    def forward(self, X, prompts=None, align=None, adjs=None, trace=None):
        """Predict ``[B, l, N, F]`` from ``X`` of shape ``[B, k, N, F]``.

        ``prompts`` is ``(P_S [N,E_p], P_T [B,k,E_p])`` and ``align`` the pair
        of alignment matrices ``(W_ps_al, W_pt_al)``, each ``[E_p, hidden]``.
        ``adjs`` overrides the stored adjacencies, e.g. for a changed node set.
        """
        from .prompt import align_spatial, align_temporal

        c = self.config
        X = torch.as_tensor(X, dtype=DTYPE)
        if X.dim() != 4 or X.shape[-1] != c.n_features or X.shape[1] != c.kappa:
            raise ShapeError(f"X must be [B,{c.kappa},N,{c.n_features}], got {tuple(X.shape)}")
        if prompts is not None and align is None:
            raise ShapeError("prompts given without alignment projections")
        adjs = self.adjacencies() if adjs is None else list(adjs)
        norm = "softmax" if c.adaptive else "row"

        h = X @ self.in_w + self.in_b
        if prompts is not None:
            h = h + align_spatial(prompts[0], align[0])
        X_S = spatial_forward(h, adjs, [getattr(self, f"omega_{i}") for i in range(c.n_spatial)],
                              c.activation, norm, trace)
        if prompts is not None:
            X_S = X_S + align_temporal(prompts[1], align[1])
        X_ST = temporal_forward(
            X_S,
            [getattr(self, f"w_t{i}") for i in range(len(c.kernels))],
            [getattr(self, f"b_t{i}") for i in range(len(c.kernels))],
            c.dilations, c.activation, trace)
        out = X_ST @ self.out_w + self.out_b
        B, N = out.shape[:2]
        out = out.reshape(B, N, c.horizon, c.n_features).permute(0, 2, 1, 3)
        _check(out, "head")
        return out


def loss_mae_train(Y_hat, Y):
    Y = torch.as_tensor(Y, dtype=DTYPE)
    if Y_hat.shape != Y.shape:
        raise ShapeError(f"prediction {tuple(Y_hat.shape)} vs target {tuple(Y.shape)}")
    return (Y_hat - Y).abs().mean()


# -------------------------------------------------------------- checkpoints

def save_checkpoint(model: STBackbone, path, stage: str = "", epoch: int = 0, seed: int = 0,
                    extra: Optional[dict] = None):
    """npz archive of the registry tensors plus a JSON header entry."""
    header = {"arch_hash": model.arch_hash(), "stage": stage, "epoch": int(epoch),
              "seed": int(seed), "config": asdict(model.config)}
    if extra:
        header.update(extra)
    arrays = model.snapshot()
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())
    return header


def read_checkpoint(path):
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        arrays = {k: z[k] for k in z.files if k != "__header__"}
    return header, arrays


def load_checkpoint(model: STBackbone, path) -> dict:
    header, arrays = read_checkpoint(path)
    if header["arch_hash"] != model.arch_hash():
        raise SchemaError("checkpoint architecture hash does not match the model")
    model.load_snapshot(arrays)
    return header
