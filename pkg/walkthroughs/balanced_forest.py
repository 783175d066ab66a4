"""
Balanced random forest on a synthetic month
===========================================

Train on ten labelled days, report the out-of-bag estimate, then score a
held-out day. The same data with a plain bootstrap shows what per-tree
down-sampling buys for the rare class.
"""

import numpy as np

from c2detect import train_forest
from c2detect.aggregate import DAY_MS
from c2detect.forest import ConfusionMatrix, TrainConfig
from c2detect.labels import build_training_set
from c2detect.synth import DEFAULT_DAY_START, benchmark_profiles, generate_month

bot, normal = benchmark_profiles()
days = generate_month(bot, normal, n_days=10, seed=7)
train = build_training_set(days, unknown_per_day=550, seed=7)
held = generate_month(bot, normal, n_days=1, seed=99, day_start=DEFAULT_DAY_START + 40 * DAY_MS)[0]
print(f"training rows: {len(train)}, malicious share {train.n_malicious / len(train):.3f}")


def held_out(model):
    pred, _ = model.predict_scores(held.X)
    return ConfusionMatrix.from_predictions(held.y == 1, pred == 1)


###############################################################################
# Each tree sees as many unknown rows as malicious ones.

model = train_forest(train, TrainConfig(n_trees=100, mtry=10, seed=3))
cm = held_out(model)
print(f"OOB error {model.oob_stats.error:.3f}   held-out error {cm.error:.3f}")
print(f"held-out TPR {cm.tpr:.3f}  FPR {cm.fpr:.3f}")

###############################################################################
# Push the malicious share down to 5% and compare with an ordinary bootstrap.

rng = np.random.default_rng(0)
mal, unk = np.flatnonzero(train.y == 1), np.flatnonzero(train.y == 0)
keep = np.sort(np.concatenate([rng.choice(mal, len(unk) * 5 // 95, replace=False), unk]))
X, y = train.X[keep], train.y[keep]
for balance in (True, False):
    m = train_forest((X, y), TrainConfig(n_trees=60, mtry=10, seed=3, balance=balance))
    print(f"balance={balance!s:5s}  recall {held_out(m).tpr:.3f}")
