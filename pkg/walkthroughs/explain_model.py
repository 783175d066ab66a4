"""
What the forest looks at
========================

Permutation importance, minimal depth and partial dependence for a forest
trained on a few synthetic days.
"""

import numpy as np

from c2detect import train_forest
from c2detect.explain import importance_report, partial_dependence
from c2detect.forest import TrainConfig
from c2detect.labels import build_training_set
from c2detect.synth import benchmark_profiles, generate_month

bot, normal = benchmark_profiles(60, 300)
train = build_training_set(generate_month(bot, normal, n_days=3, seed=4), unknown_per_day=300)
model = train_forest(train, TrainConfig(n_trees=100, mtry=10, seed=1))

###############################################################################
# Shallow splits and large accuracy drops mark the useful features.

rep = importance_report(model, train, np.random.default_rng(0), repeats=2)
order = np.argsort(rep.mean_min_depth, kind="stable")
print(f"{'feature':26s} {'min depth':>9s} {'roots':>5s} {'vimp':>7s}")
for i in order[:8]:
    print(f"{rep.feature_names[i]:26s} {rep.mean_min_depth[i]:9.2f} "
          f"{rep.times_a_root[i]:5d} {rep.vimp[i]:7.4f}")

###############################################################################
# Partial dependence of the malicious score on packets per flow.

curve = partial_dependence(model, train, "packets_per_flow", grid_size=12)
for x, p in zip(curve.grid, curve.avg_prediction):
    print(f"{x:8.2f}  {p:.3f}  " + "#" * int(round(p * 60)))
