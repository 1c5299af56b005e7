"""
Context-gated branch selection on simulated scenes
==================================================

Trains a learned gate on simulated branch losses, then compares gated
top-k fusion with single branches and with fusing every branch. A reduced
suite (3 seeds, 200 scenes) keeps this to well under a minute.
"""

from dataclasses import replace

from selective_fusion.cli import config_dir
from selective_fusion.engine import branch_selection_stats, load_suite, run_experiment
from selective_fusion.scenario import DEFAULT_BRANCHES

suite = load_suite(config_dir() / "default_suite.json")
suite = replace(suite, seeds=suite.seeds[:3], n_scenes=200, n_train_scenes=1000)
result = run_experiment(suite, keep_traces=True)

print(f"{'configuration':>16s}  mean mAP")
for row in sorted(result.comparison(), key=lambda r: -r["mean_map"]):
    print(f"{row['config']:>16s}  {100 * row['mean_map']:6.2f}")

names = {bid: name for bid, name, _ in DEFAULT_BRANCHES}
for label, contexts in (("clear", ["city", "motorway", "junction", "rural"]), ("adverse", ["snow", "fog", "night"])):
    stats = branch_selection_stats([t for t in result.traces if t.gate == "optimal"], contexts)
    rates = stats[("optimal", 1)]
    top = sorted(rates, key=lambda b: -rates[b])[:3]
    print(f"{label}: best branch most often " + ", ".join(f"{names[b]} {100 * rates[b]:.0f}%" for b in top))

for seed, kind in sorted(result.gate_history):
    hist = result.gate_history[(seed, kind)]
    print(f"seed {seed} {kind} gate: train MAE {hist[0]:.3f} -> {hist[-1]:.3f}")
