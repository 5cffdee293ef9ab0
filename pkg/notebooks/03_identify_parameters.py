"""
Identifying machine parameters from line metrics
================================================

Given observed metrics and the buffer capacities, search for machine
parameters whose surrogate-predicted metrics match.  Efficiencies come out
nearly unique; downtimes and CVs trade off along a line.
"""

from pathlib import Path

import numpy as np

from lineident import ObservedMetrics, PsoConfig, SimConfig, identify, identify_exponential, identify_with_averages
from lineident import surrogate
from lineident.analysis import exp_feasibility, fit_overall_relationship
from lineident.model import make_line
from lineident.simulator import simulate_metrics

# Prefer the bundle built by the acceptance suite; fall back to the demo one.
for path in (Path("build/acceptance/bundle_m3.json"), Path("bundle_demo.json")):
    if path.exists():
        bundle = surrogate.load(path, M=3)
        print("using", path)
        break
else:
    raise SystemExit("run 02_train_surrogates.py (or the acceptance suite) first")

truth = make_line([0.88, 0.8, 0.9], [9, 6, 14], [0.5, 0.7, 0.3], [0.6, 0.4, 0.8], [20, 25])
obs = ObservedMetrics.from_metrics(simulate_metrics(truth, SimConfig(base_seed=5)), truth.N)

cfg = PsoConfig(D=20, D_n=5, stall_patience=50, adapt_every_iteration=True)
res = identify(obs, bundle, cfg, seed=0)
print(f"{res.n_valid}/{len(res.f_nn)} starts valid (f_obj < 1e-4)")

e_true = np.array([m.e for m in truth.machines])
V = res.valid_x()
if len(V):
    print("efficiency estimates (mean of valid):", np.round(V[:, :3].mean(axis=0), 4), "truth:", e_true)
    print("downtime estimates spread widely:", np.round(V[:, 3:6].min(axis=0), 1), "to", np.round(V[:, 3:6].max(axis=0), 1))

# Overall downtime vs overall CV across valid solutions: a falling line.
if len(V) >= 3:
    rel = fit_overall_relationship(V)
    o = rel.overall
    print(f"CV_bar = {o.b0:.3f} + {o.b1:.4f} * T_bar   (p = {o.p_value:.2g}, n = {o.n})")
    print("exponential fit possible:", exp_feasibility(o))

    # Pin the averages to a point on that line and search again.
    t_bar = float(np.median(rel.points[:, 0]))
    cv_bar = float(np.clip(o.predict(t_bar), 0.1, 1.0))
    avg = identify_with_averages(obs, bundle, PsoConfig(D=5, D_n=2, stall_patience=50, adapt_every_iteration=True), t_bar=t_bar, cv_bar=cv_bar)
    print(f"with T_bar={t_bar:.2f}, CV_bar={cv_bar:.3f}: {avg.n_valid}/5 accepted")

# Exponential model: every CV frozen at 1.
exp = identify_exponential(obs, bundle, cfg, seed=1)
print(f"exponential fit: best f_obj = {exp.f_nn.min():.2e} ({exp.n_valid} valid)")
