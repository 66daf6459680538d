"""Run the five ablation variants on a small synthetic shift, then re-derive
the report from transcripts and draw the plots.

    python demos/quickstart.py [out_dir]
"""
import json
import os
import sys

import torch

from coms2t.experiment import ExperimentConfig, emit_plots, recompute_from_transcripts, run_ablation

torch.set_num_threads(1)

here = os.path.dirname(os.path.abspath(__file__))
out = sys.argv[1] if len(sys.argv) > 1 else "quickstart_out"
cfg = ExperimentConfig.load(os.path.join(here, "tiny_ablation.json"))

rep = run_ablation(cfg, out)
for variant, s in rep["summary"].items():
    print(f"{variant:>10}  test MAE {s['mean']:.4f} +- {s['std']:.4f}")

acc = rep["per_seed"][0]["accounting"]
print(f"updated scalars: instrument {acc['instrument_total']}  closed form {acc['closed_form']}")

check = recompute_from_transcripts(out)
print("transcripts consistent:", check["consistent"])
print(json.dumps(emit_plots(out)))
