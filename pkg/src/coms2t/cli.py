"""Command line entry point: ``coms2t <subcommand> --config cfg.json --out-dir DIR``.

Exit codes: 0 success, 2 configuration/data error (including missing run
artifacts), 3 numerics error, 1 any other library error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
import torch

from .errors import ComS2TError, ConfigError, LoadError, NumericsError, ReportError, SchemaError

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_NUMERICS = 0, 1, 2, 3

log = logging.getLogger("coms2t")


def _read_json(path):
    if path is None:
        raise ConfigError("--config is required for this subcommand")
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _experiment_config(args):
    from .experiment import ExperimentConfig
    d = _read_json(args.config)
    if args.seed is not None:
        d = {**d, "seeds": [args.seed]}
    return ExperimentConfig.from_dict(d)


def _index(out_dir, command, payload):
    """Merge ``payload`` into ``report.json`` under ``out_dir``."""
    from .experiment import write_report
    path = os.path.join(out_dir, "report.json")
    report = {}
    if os.path.exists(path):
        with open(path) as fh:
            report = json.load(fh)
    report.setdefault("commands", []).append(command)
    report.update(payload)
    write_report(report, out_dir)
    return path


def cmd_synth(args):
    from .data import SynthConfig, save_dataset, synth_generate
    d = _read_json(args.config)
    d = d.get("synth", d)
    if args.seed is not None:
        d = {**d, "seed": args.seed}
    try:
        cfg = SynthConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(f"bad synth config: {exc}") from exc
    ds = synth_generate(cfg)
    bundle = save_dataset(ds, os.path.join(args.out_dir, "dataset"))
    return _index(args.out_dir, "synth", {"dataset": os.path.relpath(bundle, args.out_dir),
                                          "n_steps": ds.n_steps, "n_nodes": ds.n_nodes})


def cmd_train(args):
    from .experiment import run_experiment
    cfg = _experiment_config(args)
    return _index(args.out_dir, "train", run_experiment(cfg, args.out_dir))


def cmd_adapt(args):
    """Reload each seed's fine-tuned model and bank, adapt on the
    adaptation slice and score the test set."""
    from .backbone import load_checkpoint
    from .disentangle import ParameterPartition
    from .experiment import _score, new_bank, new_model, prepare, test_adjacencies
    from .training import UpdateTracker, test_time_adapt
    cfg = _experiment_config(args)
    prep = prepare(cfg)
    out = {}
    for seed in cfg.seeds:
        mpath = os.path.join(args.out_dir, f"model_seed{seed}.npz")
        bpath = os.path.join(args.out_dir, f"bank_seed{seed}.npz")
        if not (os.path.exists(mpath) and os.path.exists(bpath)):
            raise LoadError(f"run 'train' first: missing {mpath} or {bpath}")
        model = new_model(cfg, prep, seed)
        load_checkpoint(model, mpath)
        with np.load(bpath) as z:
            bank = new_bank(cfg, prep, seed, {k: z[k] for k in z.files})
        plan = cfg.stage_plan(seed)
        adjs = test_adjacencies(model, prep)
        before = _score(model, bank, prep, adjs)
        rec = test_time_adapt(bank, prep.env_test, prep.adapt, plan, tracker=UpdateTracker(bank.named_parameters()))
        after = _score(model, bank, prep, adjs)
        np.savez(os.path.join(args.out_dir, f"bank_adapted_seed{seed}.npz"), **bank.snapshot())
        out[str(seed)] = {"before": before, "after": after, "adapt": rec}
    return _index(args.out_dir, "adapt", {"adapt": out})


def cmd_ablate(args):
    from .experiment import run_ablation
    cfg = _experiment_config(args)
    return _index(args.out_dir, "ablate", run_ablation(cfg, args.out_dir))


def cmd_theory(args):
    from .theory import theory_report
    opts = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        opts["seed"] = args.seed
    try:
        rep = theory_report(**opts)
    except TypeError as exc:
        raise ConfigError(f"bad theory options: {exc}") from exc
    path = os.path.join(args.out_dir, "theory_report.json")
    with open(path, "w") as fh:
        json.dump(rep, fh, indent=1)
    _index(args.out_dir, "theory-check", {"theory": {"report": "theory_report.json", "pass": rep["pass"]}})
    return path


def cmd_report(args):
    from .experiment import recompute_from_transcripts
    rec = recompute_from_transcripts(args.out_dir)
    return _index(args.out_dir, "report", {"recomputed": rec})


def cmd_plot(args):
    from .experiment import emit_plots
    paths = emit_plots(args.out_dir)
    return _index(args.out_dir, "plot", {"plots": paths})


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "adapt": cmd_adapt, "ablate": cmd_ablate,
            "theory-check": cmd_theory, "report": cmd_report, "plot": cmd_plot}


def build_parser():
    p = argparse.ArgumentParser(prog="coms2t", description="Complementary spatiotemporal learning toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--seed", type=int, default=None, help="override the config seeds with one seed")
        s.add_argument("--out-dir", default="coms2t_out", help="artifact directory (report.json index)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    os.makedirs(args.out_dir, exist_ok=True)
    try:
        path = COMMANDS[args.command](args)
    except (ConfigError, SchemaError, LoadError, ReportError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericsError as exc:
        print(f"numerics error: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except ComS2TError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
