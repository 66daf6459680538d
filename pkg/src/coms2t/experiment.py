"""Experiment orchestration: data preparation, the progressive pipeline per
seed, ablation variants, metrics, update accounting and plots.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np
import torch

from .backbone import BackboneConfig, STBackbone, save_checkpoint
from .data import (NormStats, SpatioTemporalDataset, SynthConfig, WindowSet, denormalize, fit_norm_stats,
                   load_dataset, make_input_windows, make_windows, normalize, spatial_env, synth_generate,
                   temporal_env, trend)
from .disentangle import BLOCKS, ParameterPartition, VariationLedger, build_partition
from .errors import ConfigError, ReportError, ShapeError
from .prompt import PromptBank, PromptConfig, export_prompts_csv
from .scenarios import (SCENARIOS, SplitManifest, node_copy_adjacency, node_involvement, node_removal,
                        shrink_adjacency, split_chronological, split_interval, split_month)
from .training import (Env, StagePlan, UpdateTracker, backbone_hash, evaluate_mae, predict, run_finetune,
                       run_pretrain, run_warmup, test_time_adapt)

log = logging.getLogger(__name__)

VARIANTS = ("full", "non_hip", "non_ssl", "non_prompt", "non_ttf")


@dataclass
class ExperimentConfig:
    synth: Optional[dict] = None
    data_path: Optional[str] = None
    scenario: str = "temp_interval"
    split: dict = field(default_factory=dict)
    base_split: str = "temp_chrono"          # step split under node scenarios
    node_fraction: float = 0.25
    node_seed: int = 0
    tau: float = 60.0
    lam: float = 0.0
    prompt_dim: int = 16
    env_width: int = 16
    kappa: int = 12
    horizon: int = 12
    hidden: int = 32
    kernels: tuple = (12, 6, 3)
    dilations: tuple = (1, 2, 4)
    adaptive: bool = True
    plan: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    variant: str = "full"
    variants: list = field(default_factory=lambda: list(VARIANTS))
    adapt_events: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown variants {bad}")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if (self.synth is None) == (self.data_path is None):
            raise ConfigError("give exactly one of 'synth' or 'data_path'")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.adapt_events < 0:
            raise ConfigError("adapt_events must be >= 0")
        self.kernels = tuple(self.kernels)
        self.dilations = tuple(self.dilations)
        self.seeds = [int(s) for s in self.seeds]
        self.stage_plan(0)   # validates the plan

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernels"], d["dilations"] = list(self.kernels), list(self.dilations)
        return d

    def stage_plan(self, seed) -> StagePlan:
        try:
            return StagePlan.from_dict({**self.plan, "seed": int(seed)})
        except TypeError as exc:
            raise ConfigError(f"bad stage plan: {exc}") from exc

    def backbone_config(self, n_nodes, n_features=1) -> BackboneConfig:
        return BackboneConfig(n_nodes=n_nodes, n_features=n_features, kappa=self.kappa,
                              horizon=self.horizon, hidden=self.hidden, kernels=self.kernels,
                              dilations=self.dilations, adaptive=self.adaptive)

    def prompt_config(self, n_features=1) -> PromptConfig:
        return PromptConfig(env_width=self.env_width, prompt_dim=self.prompt_dim,
                            n_features=n_features, align_width=self.hidden)


# ------------------------------------------------------------------- metrics

def mae(Y_hat, Y) -> float:
    """Mean absolute error over every step, node and feature."""
    Y_hat, Y = np.asarray(Y_hat, dtype=np.float64), np.asarray(Y, dtype=np.float64)
    if Y_hat.shape != Y.shape:
        raise ShapeError(f"prediction {Y_hat.shape} vs target {Y.shape}")
    return float(np.mean(np.abs(Y_hat - Y)))


# -------------------------------------------------------------- preparation

@dataclass
class Prepared:
    ds: SpatioTemporalDataset
    manifest: SplitManifest
    stats: NormStats
    train: WindowSet
    val: Optional[WindowSet]
    test: WindowSet
    adapt: Optional[WindowSet]
    env_train: Env
    env_test: Env
    adj_train: np.ndarray
    adj_test: np.ndarray
    train_nodes: np.ndarray       # dataset positions, model node order during training
    test_order: np.ndarray        # dataset positions, node order at test time
    new_positions: np.ndarray     # positions within test_order of test-only nodes
    keep_positions: np.ndarray    # positions within train_nodes retained at test time


def load_data(cfg: ExperimentConfig) -> SpatioTemporalDataset:
    if cfg.data_path is not None:
        return load_dataset(cfg.data_path)
    try:
        return synth_generate(SynthConfig.from_dict(cfg.synth))
    except TypeError as exc:
        raise ConfigError(f"bad synth config: {exc}") from exc


def build_manifest(cfg: ExperimentConfig, ds) -> SplitManifest:
    split = dict(cfg.split)
    try:
        if cfg.scenario == "temp_interval":
            return split_interval(ds, **split)
        if cfg.scenario == "temp_month":
            return split_month(ds, **split)
        if cfg.scenario == "temp_chrono":
            return split_chronological(ds, **split)
        base = {"temp_chrono": split_chronological, "temp_interval": split_interval,
                "temp_month": split_month}[cfg.base_split](ds, **split)
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"bad split options: {exc}") from exc
    if cfg.scenario == "node_involve":
        return node_involvement(ds, cfg.node_fraction, cfg.node_seed, base)
    return node_removal(ds, cfg.node_fraction, cfg.node_seed, base)


def _windows_or_none(fn, *args):
    from .errors import EmptyWindowError
    try:
        return fn(*args)
    except EmptyWindowError:
        return None


def prepare(cfg: ExperimentConfig, ds: Optional[SpatioTemporalDataset] = None) -> Prepared:
    ds = load_data(cfg) if ds is None else ds
    ds.validate()
    man = build_manifest(cfg, ds)
    train_nodes = np.asarray(man.train_nodes, dtype=np.int64)
    test_only = np.asarray(man.test_only_nodes, dtype=np.int64)
    if cfg.scenario == "node_involve":
        test_order = np.concatenate([train_nodes, test_only])
    else:
        test_order = np.asarray(man.test_nodes, dtype=np.int64)
    stats = fit_norm_stats(ds, man.train, train_nodes)
    norm = normalize(ds, stats)
    ds_tr, ds_te = norm.subset_nodes(train_nodes), norm.subset_nodes(test_order)
    k, l = cfg.kappa, cfg.horizon
    train = make_windows(ds_tr, k, l, man.train)
    val = _windows_or_none(make_windows, ds_tr, k, l, man.val)
    test = make_windows(ds_te, k, l, man.test)
    adapt = _windows_or_none(make_input_windows, ds_te, k, man.adapt)

    tr = trend(norm, k)[man.steps("train")]
    e_t = torch.as_tensor(temporal_env(norm, k, cfg.env_width, (tr.min(), tr.max())))
    e_s = spatial_env(ds, cfg.env_width)
    pos = {int(n): i for i, n in enumerate(train_nodes)}
    return Prepared(
        ds=ds, manifest=man, stats=stats, train=train, val=val, test=test, adapt=adapt,
        env_train=Env(e_s[train_nodes], e_t), env_test=Env(e_s[test_order], e_t),
        adj_train=ds.adjacency[np.ix_(train_nodes, train_nodes)],
        adj_test=ds.adjacency[np.ix_(test_order, test_order)],
        train_nodes=train_nodes, test_order=test_order,
        new_positions=np.arange(train_nodes.size, test_order.size) if cfg.scenario == "node_involve"
        else np.zeros(0, dtype=np.int64),
        keep_positions=np.asarray([pos[int(n)] for n in test_order if int(n) in pos], dtype=np.int64),
    )


def test_adjacencies(model: STBackbone, prep: Prepared):
    """Adjacencies for the test node set: node copy for new nodes, row and
    column deletion for removed ones, the dataset graph for fixed-A models."""
    if not model.config.adaptive:
        return [torch.as_tensor(prep.adj_test, dtype=torch.float64)] * model.config.n_spatial
    if prep.new_positions.size:
        coords = prep.ds.node_coords
        new = prep.test_order[prep.new_positions]
        return [node_copy_adjacency(A.detach(), coords[prep.train_nodes], coords[new],
                                    prep.ds.node_ids[prep.train_nodes])[0] for A in model.adjacencies()]
    if prep.keep_positions.size != prep.train_nodes.size:
        return [shrink_adjacency(A.detach(), prep.keep_positions) for A in model.adjacencies()]
    return None


# --------------------------------------------------------------- accounting

def closed_form_updates(L, gamma, P, E_P) -> float:
    """L + L*gamma + P*E_P (gamma as a fraction)."""
    return L + L * gamma + P * E_P


def caustg_updates(K, L, P, gamma) -> float:
    """Comparator count K*L + L*P*gamma, reported for context."""
    return K * L + L * P * gamma


def count_updated_params(transcript) -> dict:
    """Accounting record from a stage transcript.

    The instrument counts, per stage, the distinct scalars whose value
    changed across optimizer steps; each adaptation event is its own stage.
    Head parameters sit in the fine-tune (gamma) bucket; prompt pre-training
    and the alignment projections are reported as prompt plumbing.
    """
    recs = list(transcript)
    if not recs:
        raise ReportError("empty transcript")
    part = [r for r in recs if r.get("stage") == "partition"]
    bank = [r for r in recs if r.get("stage") == "bank"]
    if not part or not bank:
        raise ReportError("transcript lacks partition or bank records")
    part, bank = part[-1], bank[-1]

    def last(stage):
        rs = [r for r in recs if r.get("stage") == stage and r.get("updated_params") is not None]
        return rs[-1]["updated_params"] if rs else 0

    adapt = [r["updated_params"] for r in recs if r.get("stage") == "adapt" and r.get("updated_params") is not None]
    L = part["L"]
    hip = part["hippocampus"]
    E_P = bank["E_P"]
    P = len(adapt)
    instrument = last("warmup") + last("finetune") + sum(adapt)
    closed = L + hip + P * E_P
    gamma = hip / L
    return {
        "L": L, "gamma": gamma, "E_P": E_P, "P": P,
        "warmup": last("warmup"), "finetune": last("finetune"), "adapt": adapt,
        "instrument_total": instrument, "closed_form": closed, "match": instrument == closed,
        "closed_form_float": closed_form_updates(L, gamma, P, E_P),
        "caustg_context": caustg_updates(4, L, P, gamma),
        "prompt_plumbing": {"pretrain": last("pretrain"), "finetune_bank": last("finetune_bank"),
                            "align_size": bank["align"]},
        "bucketing": "head parameters counted with the hippocampus; alignment and pre-training reported separately",
    }


# ------------------------------------------------------------------ runner

def new_model(cfg, prep, seed, snap=None):
    m = STBackbone(cfg.backbone_config(prep.train_nodes.size, prep.ds.n_features),
                   adjacency=prep.adj_train, seed=seed)
    if snap is not None:
        m.load_snapshot(snap)
    return m


def new_bank(cfg, prep, seed, snap=None):
    b = PromptBank(cfg.prompt_config(prep.ds.n_features), seed=seed)
    if snap is not None:
        b.load_snapshot(snap)
    return b


def _score(model, bank, prep, adjs) -> dict:
    env = prep.env_test if bank is not None else None
    Yn = predict(model, prep.test.X, prep.test.anchors, bank, env, adjs=adjs)
    Y_hat = denormalize(Yn, prep.stats)
    Y = denormalize(prep.test.Y, prep.stats)
    out = {"test_mae": mae(Y_hat, Y), "finite": bool(np.isfinite(Y_hat).all())}
    if prep.new_positions.size:
        seen = np.setdiff1d(np.arange(Y.shape[2]), prep.new_positions)
        out["seen_mae"] = mae(Y_hat[:, :, seen], Y[:, :, seen])
        out["new_mae"] = mae(Y_hat[:, :, prep.new_positions], Y[:, :, prep.new_positions])
    return out


def _adapt_events(bank, prep, plan, P, transcript, seed):
    if P == 0:
        return
    if prep.adapt is None or len(prep.adapt) == 0:
        from .errors import AdaptError
        raise AdaptError("scenario has no adaptation windows")
    chunks = np.array_split(np.arange(len(prep.adapt)), P)
    for c in chunks:
        tracker = UpdateTracker(bank.named_parameters())
        rec = test_time_adapt(bank, prep.env_test, prep.adapt.subset(c), plan, tracker=tracker)
        transcript.append({**rec, "seed": seed})


def _curves(cfg, warm, ft_snaps, partition, warm_hist, ft_hist):
    """Per-epoch mean of neocortex and hippocampus weights plus val MAE."""
    rows = []
    snaps = warm.snapshots[1:] + ft_snaps
    hist = warm_hist + ft_hist
    for snap, rec in zip(snaps, hist):
        neo = np.concatenate([snap[n][partition.masks[n]] for n, _, b in partition.registry if b in BLOCKS])
        hip = np.concatenate([snap[n][~partition.masks[n]] for n, _, _ in partition.registry])
        rows.append({"stage": "curve", "epoch": rec["epoch"], "phase": rec["stage"],
                     "neocortex_mean": float(neo.mean()) if neo.size else 0.0,
                     "hippocampus_mean": float(hip.mean()), "val_mae": rec["val_mae"]})
    return rows


def run_seed(cfg: ExperimentConfig, prep: Prepared, seed: int, variants=None,
             out_dir: Optional[str] = None) -> dict:
    """All requested variants for one seed, sharing warm-up and pre-training."""
    variants = list(variants or [cfg.variant])
    plan = cfg.stage_plan(seed)
    torch.manual_seed(seed)
    transcript = [{"stage": "config", "seed": seed, "variants": variants}]
    model = new_model(cfg, prep, seed)
    L = model.n_params
    wt = UpdateTracker(model.named_registry_params())
    warm = run_warmup(model, prep.train, prep.val, plan, tracker=wt, keep_snapshots="full" in variants,
                      transcript=transcript)
    warm_snap = model.snapshot()
    ledger = warm.ledger
    partition = build_partition(model, ledger, cfg.tau, cfg.lam)
    transcript.append({"stage": "partition", "L": L, "tau": cfg.tau, "lam": cfg.lam,
                       "neocortex": partition.neocortex_count(),
                       "hippocampus": partition.hippocampus_count(),
                       "blocks": {b: {"size": partition.block_size(b), "neocortex": partition.neocortex_count(b)}
                                  for b in BLOCKS + ("head",)},
                       "empty_layers": partition.empty_layers, "tb": ledger.tb})
    ft_start = len(warm.history)
    out = {"seed": seed, "warmup_epochs": ft_start, "variants": {}}

    bank_snap = None
    prompt_exports = {}
    if {"full", "non_hip", "non_ttf"} & set(variants):
        bank = new_bank(cfg, prep, seed)
        transcript.append({"stage": "bank", "E_P": bank.group_size("W_ps", "W_pt", "W_P"),
                           "align": bank.group_size("align")})
        pt = UpdateTracker(bank.named_parameters())
        pre = run_pretrain(bank, prep.env_train, prep.train, plan, tracker=pt, transcript=transcript)
        out["pretrain"] = {k: v for k, v in pre.items() if k != "train_loss"}
        bank_snap = bank.snapshot()
        with torch.no_grad():
            prompt_exports["pretrain"] = bank.encode_spatial(prep.env_test.spatial).numpy()

    def finetune(use_partition, bank, tag, keep=False, ft_plan=plan):
        m = new_model(cfg, prep, seed, warm_snap)
        env = prep.env_train if bank is not None else None
        tr = UpdateTracker(m.named_registry_params())
        btr = UpdateTracker(bank.named_parameters()) if bank is not None else None
        neo_before = partition.neocortex_hash(m)
        res = run_finetune(m, partition if use_partition else None, bank, prep.train, ft_plan, env, prep.val,
                           tracker=tr, bank_tracker=btr, keep_snapshots=keep, epoch_offset=ft_start)
        local = [{**r, "variant": tag} for r in res["history"]]
        if btr is not None:
            local.append({"stage": "finetune_bank", "variant": tag, "updated_params": btr.count()})
        frozen_ok = partition.neocortex_hash(m) == neo_before if use_partition else None
        return m, res, local, frozen_ok

    def adjs_for(m):
        return test_adjacencies(m, prep)

    if "full" in variants or "non_ttf" in variants:
        bank = new_bank(cfg, prep, seed, bank_snap)
        m, res, local, frozen_ok = finetune(True, bank, "full", keep="full" in variants)
        transcript += local
        adjs = adjs_for(m)
        val = evaluate_mae(m, prep.val, bank, prep.env_train) if prep.val is not None else None
        if "non_ttf" in variants:
            out["variants"]["non_ttf"] = {**_score(m, bank, prep, adjs), "val_mae_norm": val}
        with torch.no_grad():
            prompt_exports["finetune"] = bank.encode_spatial(prep.env_test.spatial).numpy()
        if "full" in variants:
            h_before = backbone_hash(m)
            P = cfg.adapt_events
            _adapt_events(bank, prep, plan, P, transcript, seed)
            with torch.no_grad():
                prompt_exports["adapt"] = bank.encode_spatial(prep.env_test.spatial).numpy()
            out["variants"]["full"] = {**_score(m, bank, prep, adjs), "val_mae_norm": val,
                                       "neocortex_frozen": frozen_ok,
                                       "backbone_unchanged_by_adapt": backbone_hash(m) == h_before}
            transcript += _curves(cfg, warm, res["snapshots"], partition, warm.history, res["history"])
            transcript.append({"stage": "knee", "finetune_start": ft_start})
            out["accounting"] = count_updated_params(
                [r for r in transcript if r.get("variant") in (None, "full")])
            if out_dir is not None:
                os.makedirs(out_dir, exist_ok=True)
                save_checkpoint(m, os.path.join(out_dir, f"model_seed{seed}.npz"), "finetune",
                                len(res["history"]), seed)
                np.savez(os.path.join(out_dir, f"bank_seed{seed}.npz"), **bank.snapshot())
                with open(os.path.join(out_dir, f"partition_seed{seed}.json"), "w") as fh:
                    json.dump(partition.to_dict(), fh)
    if "non_hip" in variants:
        bank = new_bank(cfg, prep, seed, bank_snap)
        m, res, local, _ = finetune(False, bank, "non_hip")
        transcript += local
        _adapt_events(bank, prep, plan, cfg.adapt_events, [], seed)
        out["variants"]["non_hip"] = _score(m, bank, prep, adjs_for(m))
    if "non_ssl" in variants:
        bank = new_bank(cfg, prep, seed + 10_000)
        # no self-supervision anywhere: random bank, no auxiliary SSL term, no adaptation
        m, res, local, _ = finetune(True, bank, "non_ssl", ft_plan=replace(plan, ssl_weight=0.0))
        transcript += local
        out["variants"]["non_ssl"] = _score(m, bank, prep, adjs_for(m))
    if "non_prompt" in variants:
        m, res, local, _ = finetune(True, None, "non_prompt")
        transcript += local
        out["variants"]["non_prompt"] = _score(m, None, prep, adjs_for(m))

    for v, score in out["variants"].items():
        transcript.append({"stage": "score", "variant": v, **score})
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, f"transcript_seed{seed}.jsonl")
        write_jsonl(path, transcript)
        out["transcript"] = os.path.basename(path)
        for stage, P_S in prompt_exports.items():
            p = os.path.join(out_dir, f"prompts_spatial_{stage}_seed{seed}.csv")
            export_prompts_csv(P_S, p, prep.ds.node_ids[prep.test_order])
            out.setdefault("prompt_exports", {})[stage] = os.path.basename(p)
        ledger.export(os.path.join(out_dir, f"ledger_seed{seed}"))
    out["_transcript"] = transcript
    return out


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, default=_json_default) + "\n")


def read_jsonl(path):
    if not os.path.exists(path):
        raise ReportError(f"missing transcript {path}")
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _summarize(per_seed, variants) -> dict:
    out = {}
    for v in variants:
        vals = [s["variants"][v]["test_mae"] for s in per_seed if v in s["variants"]]
        if vals:
            out[v] = {"test_mae": vals, "mean": float(np.mean(vals)), "std": float(np.std(vals))}
            for key in ("seen_mae", "new_mae"):
                extra = [s["variants"][v][key] for s in per_seed if key in s["variants"].get(v, {})]
                if extra:
                    out[v][key] = {"values": extra, "mean": float(np.mean(extra))}
    return out


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None, variants=None,
                   prep: Optional[Prepared] = None) -> dict:
    """Every seed of ``cfg`` for ``variants`` (default: the config's variant);
    mean and std of test MAE per variant in original units."""
    variants = list(variants or [cfg.variant])
    prep = prep or prepare(cfg)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        prep.manifest.save(os.path.join(out_dir, "split_manifest.json"))
    per_seed = []
    for seed in cfg.seeds:
        r = run_seed(cfg, prep, seed, variants, out_dir)
        r.pop("_transcript")
        per_seed.append(r)
    report = {"config": cfg.to_dict(), "seeds": cfg.seeds, "variants": variants,
              "summary": _summarize(per_seed, variants), "per_seed": per_seed,
              "split_sizes": {k: len(getattr(prep.manifest, k)) for k in ("train", "val", "test", "adapt")},
              "windows": {"train": len(prep.train), "test": len(prep.test),
                          "val": len(prep.val) if prep.val is not None else 0,
                          "adapt": len(prep.adapt) if prep.adapt is not None else 0}}
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def run_ablation(cfg: ExperimentConfig, out_dir: Optional[str] = None, prep=None) -> dict:
    """Every variant in ``cfg.variants`` per seed, sharing warm-up and
    pre-training so differences come from the ablated component only."""
    rep = run_experiment(cfg, out_dir, variants=cfg.variants, prep=prep)
    s = rep["summary"]
    if "full" in s:
        others = [v for v in s if v != "full"]
        rep["full_beats"] = {v: s["full"]["mean"] < s[v]["mean"] for v in others}
        rep["full_wins_per_seed"] = {
            v: int(sum(f < o for f, o in zip(s["full"]["test_mae"], s[v]["test_mae"]))) for v in others}
    if out_dir is not None:
        write_report(rep, out_dir)
    return rep


def write_report(report, out_dir) -> str:
    path = os.path.join(out_dir, "report.json")
    with open(path, "w") as fh:
        json.dump(report, fh, indent=1, default=_json_default)
    return path


def load_report(out_dir) -> dict:
    path = os.path.join(out_dir, "report.json")
    if not os.path.exists(path):
        raise ReportError(f"no report.json in {out_dir}")
    with open(path) as fh:
        return json.load(fh)


def recompute_from_transcripts(out_dir) -> dict:
    """Rebuild per-variant test MAE summaries and the accounting record from
    the transcript files alone, and compare them with ``report.json``."""
    rep = load_report(out_dir)
    per_seed, accounting, mismatches = [], {}, []
    for s in rep["per_seed"]:
        if "transcript" not in s:
            raise ReportError(f"seed {s.get('seed')} has no transcript")
        recs = read_jsonl(os.path.join(out_dir, s["transcript"]))
        scores = {r["variant"]: {k: v for k, v in r.items() if k not in ("stage", "variant")}
                  for r in recs if r.get("stage") == "score"}
        per_seed.append({"seed": s["seed"], "variants": scores})
        for v, sc in scores.items():
            if abs(sc["test_mae"] - s["variants"][v]["test_mae"]) > 1e-12:
                mismatches.append(f"seed {s['seed']} {v} test_mae")
        if any(r.get("stage") == "adapt" for r in recs) and "accounting" in s:
            acc = count_updated_params([r for r in recs if r.get("variant") in (None, "full")])
            accounting[str(s["seed"])] = acc
            for k in ("instrument_total", "closed_form", "match"):
                if acc[k] != s["accounting"][k]:
                    mismatches.append(f"seed {s['seed']} accounting {k}")
    summary = _summarize(per_seed, rep["variants"])
    for v, row in summary.items():
        if abs(row["mean"] - rep["summary"][v]["mean"]) > 1e-12:
            mismatches.append(f"summary {v} mean")
    return {"summary": summary, "accounting": accounting, "mismatches": mismatches,
            "consistent": not mismatches}


# -------------------------------------------------------------------- plots

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def emit_plots(out_dir, plot_dir: Optional[str] = None) -> dict:
    """Learning curves with the fine-tune knee, spatial prompt heatmaps per
    stage and ledger quantile trajectories, each as PNG plus the CSV the
    figure was drawn from."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rep = load_report(out_dir)
    plot_dir = plot_dir or os.path.join(out_dir, "plots")
    os.makedirs(plot_dir, exist_ok=True)
    seeds = [s for s in rep["per_seed"] if "transcript" in s]
    if not seeds:
        raise ReportError("report has no transcripts to plot")
    s0 = seeds[0]
    recs = read_jsonl(os.path.join(out_dir, s0["transcript"]))
    paths = {}

    curve = [r for r in recs if r.get("stage") == "curve"]
    knee = [r["finetune_start"] for r in recs if r.get("stage") == "knee"]
    if curve:
        rows = [[r["epoch"], r["phase"], r["neocortex_mean"], r["hippocampus_mean"], r["val_mae"]] for r in curve]
        csv_p = _write_csv(os.path.join(plot_dir, "learning_curves.csv"),
                           ["epoch", "phase", "neocortex_mean", "hippocampus_mean", "val_mae"], rows)
        fig, ax = plt.subplots(1, 2, figsize=(9, 3.2))
        ep = [r[0] for r in rows]
        ax[0].plot(ep, [r[2] for r in rows], marker=".", label="neocortex")
        ax[0].plot(ep, [r[3] for r in rows], marker=".", label="hippocampus")
        ax[0].set_xlabel("epoch"), ax[0].set_ylabel("mean weight"), ax[0].legend()
        ax[1].plot(ep, [np.nan if r[4] is None else r[4] for r in rows], marker=".")
        ax[1].set_xlabel("epoch"), ax[1].set_ylabel("val MAE (normalized)")
        for a in ax:
            for k in knee:
                a.axvline(k, color="k", ls="--", lw=0.8)
        fig.tight_layout()
        png = os.path.join(plot_dir, "learning_curves.png")
        fig.savefig(png, dpi=80)
        plt.close(fig)
        paths["learning_curves"] = {"png": png, "csv": csv_p, "knee_epoch": knee[0] if knee else None}

    heat = {}
    for stage, fname in s0.get("prompt_exports", {}).items():
        src = os.path.join(out_dir, fname)
        if not os.path.exists(src):
            raise ReportError(f"missing prompt export {src}")
        with open(src) as fh:
            rows = list(csv.reader(fh))[1:]
        M = np.asarray([[float(v) for v in r[1:]] for r in rows])
        csv_p = _write_csv(os.path.join(plot_dir, f"prompt_heatmap_{stage}.csv"),
                           ["entity_id"] + [f"dim{k}" for k in range(M.shape[1])],
                           [[r[0]] + list(m) for r, m in zip(rows, M)])
        fig, ax = plt.subplots(figsize=(4, 3))
        im = ax.imshow(M, aspect="auto", cmap="viridis")
        ax.set_xlabel("prompt dim"), ax.set_ylabel("node"), ax.set_title(stage)
        fig.colorbar(im)
        fig.tight_layout()
        png = os.path.join(plot_dir, f"prompt_heatmap_{stage}.png")
        fig.savefig(png, dpi=80)
        plt.close(fig)
        heat[stage] = {"png": png, "csv": csv_p, "shape": list(M.shape)}
    paths["prompt_heatmaps"] = heat

    warm = [r for r in recs if r.get("stage") == "warmup" and r.get("ledger_quantiles")]
    if warm:
        header, rows = ["epoch"], []
        keys = [(b, q) for b in sorted(warm[0]["ledger_quantiles"]) for q in sorted(warm[0]["ledger_quantiles"][b])]
        header += [f"{b}_q{q}" for b, q in keys]
        for r in warm:
            rows.append([r["epoch"]] + [r["ledger_quantiles"][b][q] for b, q in keys])
        csv_p = _write_csv(os.path.join(plot_dir, "ledger_quantiles.csv"), header, rows)
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        blocks = sorted({b for b, _ in keys})
        qs = sorted({q for _, q in keys})
        styles = ["-", "--", "-.", ":", (0, (1, 3))]
        for j, (b, q) in enumerate(keys):
            ax.plot([r[0] for r in rows], [r[j + 1] for r in rows], color=f"C{blocks.index(b)}",
                    linestyle=styles[qs.index(q) % len(styles)], label=f"{b} q{q}")
        ax.set_xlabel("epoch"), ax.set_ylabel("accumulated variation"), ax.set_yscale("symlog", linthresh=1e-6)
        ax.legend(fontsize=5, ncol=len(blocks))
        fig.tight_layout()
        png = os.path.join(plot_dir, "ledger_quantiles.png")
        fig.savefig(png, dpi=80)
        plt.close(fig)
        paths["ledger_quantiles"] = {"png": png, "csv": csv_p}
    if not paths.get("learning_curves") and not heat and not paths.get("ledger_quantiles"):
        raise ReportError("transcripts hold nothing to plot")
    return paths
