"""Quickstart: generate a small planted-synergy dataset, train, evaluate.

    python demos/quickstart.py

Takes well under a minute on one core.
"""
import torch

from swgcn import SyntheticConfig, TrainConfig, evaluate, fit, generate_synthetic, preprocess, temporal_split

torch.set_num_threads(1)

# A synthetic shop: two auxiliary behaviors (think "view" and "cart") and a
# target behavior ("buy"). Purchases are mostly drawn from items the user
# already touched through an auxiliary behavior.
syn = SyntheticConfig(num_users=300, num_items=200, interactions_per_behavior=[1800, 900, 1200], seed=0)
records, affinity = generate_synthetic(syn)

# Deduplicate and reindex, then hold out each user's last purchase for test
# and the one before it for validation.
dataset = preprocess(records, syn.behavior_names)
split = temporal_split(dataset)
print(f"{dataset.num_users} users, {dataset.num_items} items, counts {dataset.counts()}")

# Desk-scale settings; the defaults (d=32, batch 2048, lr 1e-3, patience 50)
# are sized for the large public logs.
config = TrainConfig(d=16, batch_size=256, learning_rate=5e-3, p_message=0.0, max_epochs=30, patience=8)
result = fit(split, config, verbose=True)
print(f"best validation HR@10 {result.best_val_hr:.4f} at epoch {result.best_epoch}")

report = evaluate(result.model, split, config, which="test", k_list=(10, 20, 50))
print(report.to_text())
