"""
Training metric surrogates
==========================

Sample random lines, simulate them into a dataset, and fit one small MLP per
metric.  The settings here are small enough to run in a couple of minutes;
the acceptance suite uses 10,667 lines at 50k cycles x 3 replications.
"""

import time

from lineident import SimConfig, TrainConfig, train_bundle
from lineident import surrogate
from lineident.dataset import build_dataset, generate_lines, split

lines = generate_lines(3, 1_500, seed=1)
t0 = time.time()
rows = build_dataset(lines, SimConfig(warmup=2_000, horizon=20_000, replications=2, base_seed=2))
print(f"simulated {len(rows)} lines in {time.time() - t0:.0f}s")

train_rows, test_rows = split(rows, 0.75, seed=0)
t0 = time.time()
bundle, reports = train_bundle(train_rows, cfg=TrainConfig(max_iter=300))
print(f"trained {len(bundle.models)} networks in {time.time() - t0:.0f}s")

# PR, WIP and B0 errors are relative (%); probability errors are absolute.
errs = surrogate.evaluate(bundle, test_rows)
for mid, v in errs.items():
    unit = "%" if mid.split("_")[0] in ("PR", "WIP", "B0") else ""
    print(f"{mid:7s} {v:.4f}{unit}")

surrogate.save(bundle, "bundle_demo.json")
