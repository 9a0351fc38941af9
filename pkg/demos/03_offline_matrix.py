"""A small offline method comparison through the harness.

Collects a sparse-reward buffer with the noisy-oracle collector, trains the
labeled-only baseline and FixMatch on it, and scores each EMA model by MSE
against ground-truth rewards on held-out scenes.  Sizes are cut down so this
finishes in a few minutes; the acceptance suite uses the full preset.
At this length the EMA teacher is rarely confident enough to pass the
0.95 threshold, so FixMatch has little to add yet; the gap opens over the
longer preset (8000 steps), where it ends about 24% below the baseline.

Run:  python3 demos/03_offline_matrix.py [output_dir]
"""
import sys

from sslconvsac.harness import ExperimentConfig, run_matrix

out = sys.argv[1] if len(sys.argv) > 1 else "runs/demo_matrix"
cfg = ExperimentConfig.from_dict({
    "train_points": 200, "eval_scenes": 60, "epochs": 20, "eval_every": 5, "seeds": [0],
    "matrix": [{"method": "none"}, {"method": "fixmatch"}], "output_dir": out})
for s in run_matrix(cfg):
    print(f"{s.label:32s} final eval MSE {s.final_mse[0]:.4f}  ({s.wall_clock:.0f}s)")
print("curves and summary.json under", out)
print("plot with: python3 -m sslconvsac plot", f"{out}/*/curve.csv", "--out", f"{out}/curves.svg")
