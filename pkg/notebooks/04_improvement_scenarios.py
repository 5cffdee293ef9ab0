"""
Do estimated parameters predict the effect of improvements?
===========================================================

Different valid estimates of the same line disagree on downtimes and CVs.
Simulate each one under buffer doubling and downtime halving and compare
with the true line under the same change.
"""

from pathlib import Path

from lineident import ObservedMetrics, PsoConfig, SimConfig, identify
from lineident import surrogate
from lineident.analysis import Scenario, evaluate_sensitivity
from lineident.model import make_line
from lineident.simulator import simulate_metrics

path = Path("build/acceptance/bundle_m3.json")
if not path.exists():
    path = Path("bundle_demo.json")
bundle = surrogate.load(path, M=3)

truth = make_line([0.85, 0.9, 0.82], [7, 12, 10], [0.8, 0.4, 0.6], [0.5, 0.9, 0.3], [18, 22])
obs = ObservedMetrics.from_metrics(simulate_metrics(truth, SimConfig(base_seed=9)), truth.N)
res = identify(obs, bundle, PsoConfig(D=10, D_n=3, stall_patience=50, adapt_every_iteration=True), seed=4)
estimates = res.valid_x()[:3]
print(f"{len(estimates)} valid estimates")

scenarios = [Scenario("double-all-N"), Scenario("half-all-Tdown"), Scenario("double-one-N", 1)]
cells = evaluate_sensitivity(truth, estimates, scenarios, SimConfig(horizon=50_000, replications=3, base_seed=3))
for c in cells:
    print(f"estimate {c.estimate}  {c.scenario:16s} f_obj={c.f_obj:.2e}  PR err={c.errors['PR']:.3f}%")
