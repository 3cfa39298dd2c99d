"""
Desk-scale method comparison
============================

Runs Aug_none and Aug_A,GD,GI on the synthetic phantoms for one seed with a
1 x 1 run matrix (one labelled subset, one restart), then prints test Dice
and the best validation Dice of each method.  About four minutes on one CPU.
"""
import sys
import time

import numpy as np

from taskaug.data import make_split, make_synthetic_dataset, preprocess_volume
from taskaug.experiment import format_table, run_matrix, summarize
from taskaug.training import desk_config

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = desk_config(seed=seed)
records = [preprocess_volume(r, cfg.target_spacing, cfg.image_size)
           for r in make_synthetic_dataset(60, seed)]
split = make_split(records, seed)

start = time.perf_counter()
runs = run_matrix(["aug_none", "aug_a_gd_gi"], records, split, cfg, n_labelled=1,
                  n_subsets=1, n_restarts=1)
print(f"finished in {time.perf_counter() - start:.0f}s")
for run in runs:
    dice = {s: round(float(np.mean(v)), 3) for s, v in run.dice.items()}
    print(f"{run.method_id:>12}: best val Dice {run.best_val_dice:.4f}, test {dice}")
print(format_table(summarize(runs)))
