# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: light
#       format_version: '1.5'
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# # Inside the locate and forget phases
#
# The synthetic generator records which cluster every item belongs to and
# which cluster each drifted user moved to, so we can check what the two
# diagnostic phases actually pick up.

# +
import warnings
from collections import Counter

import numpy as np
import torch

from driftrec import (DriftScenario, Encoder, FilterConfig, FilterModel, ModelConfig, RecModel, cycle_splits,
                      finetune_filter, forget, generate_drift, locate, pretrain, pretrain_filter,
                      pretrain_instances)

torch.set_num_threads(1)
warnings.simplefilter("ignore", RuntimeWarning)
# -

sc = DriftScenario(n_users=800, n_items=300, seed=1)
log, truth = generate_drift(sc)
splits = cycle_splits(log, sc.timestamps)
model = RecModel(ModelConfig(n_items=log.n_items, seed=1))
pretrain(model, pretrain_instances(splits[0], Encoder(log.n_items)), epochs=15, lr=3e-3, seed=1)
model.set_trainable(base=False, adapter_layers=None)

# ## Which layers react to drift?
#
# For every active user we run the old and the new sequence through the model
# and record the layer whose final hidden state rotates the most. Counting
# votes over users gives a histogram; the top 30% of layers form the update set.

for c, split in enumerate(splits, start=1):
    rep = locate(model, split, t=30)
    bars = "  ".join(f"L{l + 1}:{n:>3}" for l, n in enumerate(rep.counts))
    print(f"cycle {c}: {bars}   -> update layers {rep.selected}")

# The per-user cosine profile shows how similarity decays with depth.

rep = locate(model, splits[0], t=30)
profile = np.array(list(rep.per_pair_scores.values()))
print("mean cosine per layer:", np.round(profile.mean(0), 3))
print("std  cosine per layer:", np.round(profile.std(0), 3))

# ## What gets forgotten?
#
# The filter model scores every old item against the user's current sequence
# and drops the lowest two. Compare the share of abandoned-cluster items among
# the dropped and the kept ones.

fm = FilterModel(FilterConfig(log.n_items, d_f=16, seed=1))
pretrain_filter(fm, splits[0], epochs=3, lr=3e-3, seed=1)
finetune_filter(fm, splits[0], epochs=1, lr=3e-3, seed=1)
res = forget(fm, splits[0], K=2)

item_cluster = np.array([truth["item_cluster"][i] for i in log.item_ids])
stats = Counter()
for rec in res.records:
    u = truth["users"][log.user_ids[rec["user_id"]]]
    if u["drift_cycle"] is None:
        continue
    old = u["cluster_before"]
    stats["dropped_old"] += int(sum(item_cluster[i] == old for i in rec["dropped"]))
    stats["dropped"] += len(rec["dropped"])
    stats["kept_old"] += int(sum(item_cluster[i] == old for i in rec["kept"]))
    stats["kept"] += len(rec["kept"])

print(f"dropped items from the abandoned cluster: {stats['dropped_old'] / stats['dropped']:.2f}")
print(f"kept items from the abandoned cluster:    {stats['kept_old'] / stats['kept']:.2f}")

# Almost every pre-cutoff item comes from the abandoned cluster, so both
# shares are high. The dropped share is lower: the filter goes after the odd
# off-cluster items first, since a sequence dominated by the old cluster still
# pulls the user representation towards it. Forgetting here trims noise more
# than it erases the old preference.
