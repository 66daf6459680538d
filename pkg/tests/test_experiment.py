import json
import os

import numpy as np
import pytest
import torch

from coms2t import experiment as ex
from coms2t.errors import ConfigError, ReportError, ShapeError
from coms2t.prompt import PromptBank

torch.set_num_threads(1)


def tiny(**kw):
    d = dict(synth=dict(n_nodes=4, n_steps=700, seed=0, interval_seconds=3600, phi=0.6, node_mu=[0, 1, 2, 3]),
             scenario="temp_chrono", kappa=4, horizon=2, hidden=4, kernels=[2, 2], dilations=[1, 2],
             prompt_dim=4, env_width=8, seeds=[0],
             plan=dict(warmup_epochs=3, pretrain_epochs=2, finetune_epochs=2, adapt_epochs=1, batch_size=64,
                       lr_warmup=1e-2, lr_finetune=1e-2, lr_adapt=1e-2))
    d.update(kw)
    return ex.ExperimentConfig.from_dict(d)


def test_mae_examples():
    Y = np.random.default_rng(0).normal(size=(3, 2, 4, 1))
    assert ex.mae(Y, Y) == 0.0
    assert ex.mae([1.0, 2.0], [1.0, 4.0]) == 1.0
    Z = Y + np.random.default_rng(1).normal(size=Y.shape)
    assert ex.mae(Z + 3.5, Y + 3.5) == pytest.approx(ex.mae(Z, Y), abs=1e-12)
    with pytest.raises(ShapeError):
        ex.mae(np.zeros(3), np.zeros(4))


def test_closed_forms():
    assert ex.closed_form_updates(1000, 0.4, 3, 50) == 1550
    assert ex.caustg_updates(4, 1000, 3, 0.4) == 5200


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        tiny(variant="non_everything")
    with pytest.raises(ConfigError):
        tiny(variants=["full", "bogus"])
    with pytest.raises(ConfigError):
        ex.ExperimentConfig.from_dict({"synth": {}, "colour": "red"})
    with pytest.raises(ConfigError):
        ex.ExperimentConfig(synth={}, data_path="x")
    with pytest.raises(ConfigError):
        tiny(plan={"warmup_epochs": -2})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(tiny().to_dict()))
    assert ex.ExperimentConfig.load(path) == tiny()


def test_accounting_identity_and_zero_events():
    cfg = tiny()
    prep = ex.prepare(cfg)
    for P in (0, 2):
        r = ex.run_seed(ex.ExperimentConfig.from_dict({**cfg.to_dict(), "adapt_events": P}), prep, 0, ["full"])
        acc = r["accounting"]
        assert acc["P"] == P and acc["match"], acc
        if P == 0:
            assert acc["instrument_total"] == acc["L"] + acc["finetune"]


def test_count_needs_records():
    with pytest.raises(ReportError):
        ex.count_updated_params([])
    with pytest.raises(ReportError):
        ex.count_updated_params([{"stage": "warmup", "updated_params": 3}])


def test_zero_adaptation_full_equals_non_ttf():
    cfg = tiny(plan={**tiny().plan, "adapt_epochs": 0}, variants=["full", "non_ttf"])
    rep = ex.run_ablation(cfg)
    v = rep["per_seed"][0]["variants"]
    assert v["full"]["test_mae"] == v["non_ttf"]["test_mae"]


def test_full_run_checks_and_report(tmp_path):
    cfg = tiny(variants=["full", "non_prompt"])
    rep = ex.run_ablation(cfg, str(tmp_path))
    full = rep["per_seed"][0]["variants"]["full"]
    assert full["neocortex_frozen"] and full["backbone_unchanged_by_adapt"]
    assert os.path.exists(tmp_path / "report.json") and os.path.exists(tmp_path / "split_manifest.json")
    again = ex.recompute_from_transcripts(str(tmp_path))
    assert again["consistent"], again
    paths = ex.emit_plots(str(tmp_path))
    lc = paths["learning_curves"]
    assert os.path.exists(lc["png"])
    rows = open(lc["csv"]).read().splitlines()[1:]
    seed = rep["per_seed"][0]
    assert len(rows) == seed["warmup_epochs"] + cfg.plan["finetune_epochs"]
    assert lc["knee_epoch"] == seed["warmup_epochs"]
    for stage, h in paths["prompt_heatmaps"].items():
        assert h["shape"] == [4, cfg.prompt_dim] and os.path.exists(h["png"])
    assert set(paths["prompt_heatmaps"]) == {"pretrain", "finetune", "adapt"}
    assert os.path.exists(paths["ledger_quantiles"]["png"])


def test_plots_need_transcripts(tmp_path):
    with pytest.raises(ReportError):
        ex.emit_plots(str(tmp_path))


def test_non_prompt_never_reads_the_bank(monkeypatch):
    calls = []
    for name in ("encode_spatial", "encode_temporal", "stim"):
        orig = getattr(PromptBank, name)
        monkeypatch.setattr(PromptBank, name, lambda self, *a, _o=orig, _n=name: calls.append(_n) or _o(self, *a))
    ex.run_seed(tiny(), ex.prepare(tiny()), 0, ["non_prompt"])
    assert calls == []
    ex.run_seed(tiny(), ex.prepare(tiny()), 0, ["non_ssl"])
    assert calls


def test_seeded_rerun_is_identical():
    cfg = tiny(variants=["full", "non_hip"])
    a, b = ex.run_ablation(cfg), ex.run_ablation(cfg)
    assert a["summary"] == b["summary"]
