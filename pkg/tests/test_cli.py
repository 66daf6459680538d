import json
import subprocess
import sys

import pytest

from coms2t.cli import EXIT_CONFIG, EXIT_NUMERICS, EXIT_OK, main


def tiny(**plan):
    p = dict(warmup_epochs=3, pretrain_epochs=2, finetune_epochs=2, adapt_epochs=1, batch_size=64,
             lr_warmup=1e-2, lr_finetune=1e-2, lr_adapt=1e-2)
    p.update(plan)
    return dict(synth=dict(n_nodes=4, n_steps=700, seed=0, interval_seconds=3600, phi=0.6),
                scenario="temp_chrono", kappa=4, horizon=2, hidden=4, kernels=[2, 2], dilations=[1, 2],
                prompt_dim=4, env_width=8, seeds=[0, 1], variants=["full", "non_ttf"], plan=p)


def write(tmp_path, d, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(d))
    return str(path)


def report(out):
    return json.loads((out / "report.json").read_text())


def test_synth_writes_bundle_and_index(tmp_path):
    out = tmp_path / "o"
    cfg = write(tmp_path, {"n_nodes": 3, "n_steps": 50, "interval_seconds": 3600})
    assert main(["synth", "--config", cfg, "--seed", "4", "--out-dir", str(out)]) == EXIT_OK
    rep = report(out)
    assert rep["commands"] == ["synth"] and rep["n_nodes"] == 3 and rep["n_steps"] == 50
    assert (out / rep["dataset"]).exists()


def test_bad_config_exit_2(tmp_path):
    out = str(tmp_path / "o")
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out-dir", out]) == EXIT_CONFIG
    assert main(["train", "--config", write(tmp_path, {**tiny(), "colour": "red"}), "--out-dir", out]) == EXIT_CONFIG
    assert main(["synth", "--config", write(tmp_path, {"n_nodes": 3, "wobble": 1}), "--out-dir", out]) == EXIT_CONFIG
    assert main(["train", "--out-dir", out]) == EXIT_CONFIG
    assert main(["bogus"]) == EXIT_CONFIG
    assert main(["adapt", "--config", write(tmp_path, tiny()), "--out-dir", out]) == EXIT_CONFIG


def test_divergence_exit_3(tmp_path):
    cfg = write(tmp_path, tiny(lr_warmup=1e200))
    assert main(["train", "--config", cfg, "--seed", "0", "--out-dir", str(tmp_path / "o")]) == EXIT_NUMERICS


def test_train_adapt_report_plot(tmp_path):
    out = tmp_path / "o"
    cfg = write(tmp_path, tiny())
    args = ["--config", cfg, "--out-dir", str(out)]
    assert main(["train", *args, "--seed", "1"]) == EXIT_OK
    rep = report(out)
    assert [s["seed"] for s in rep["per_seed"]] == [1]
    assert main(["adapt", *args, "--seed", "1"]) == EXIT_OK
    assert main(["report", *args]) == EXIT_OK
    assert main(["plot", *args]) == EXIT_OK
    rep = report(out)
    assert rep["commands"] == ["train", "adapt", "report", "plot"]
    assert rep["recomputed"]["consistent"]
    assert set(rep["adapt"]["1"]) == {"before", "after", "adapt"}
    assert (out / rep["plots"]["learning_curves"]["png"]).exists()


def test_ablate_matches_library(tmp_path):
    from coms2t.experiment import ExperimentConfig, run_ablation
    out = tmp_path / "o"
    assert main(["ablate", "--config", write(tmp_path, tiny()), "--out-dir", str(out)]) == EXIT_OK
    lib = run_ablation(ExperimentConfig.from_dict(tiny()))
    rep = report(out)
    for v, s in lib["summary"].items():
        assert rep["summary"][v]["mean"] == pytest.approx(s["mean"], abs=1e-9)


def test_theory_check(tmp_path):
    out = tmp_path / "o"
    cfg = write(tmp_path, {"n_random": 50, "mc_samples": 5000})
    assert main(["theory-check", "--config", cfg, "--out-dir", str(out)]) == EXIT_OK
    assert report(out)["theory"]["pass"]
    assert main(["theory-check", "--config", write(tmp_path, {"nonsense": 1}, "t.json"),
                 "--out-dir", str(out)]) == EXIT_CONFIG


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "coms2t.cli", "report", "--out-dir", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == EXIT_CONFIG and "no report.json" in r.stderr
