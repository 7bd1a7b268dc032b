"""Multi-seed ablation and self-loop sweep on planted-synergy synthetic data.

    python demos/ablation.py            # 5 seeds, a couple of minutes
    python demos/ablation.py --seeds 2  # quicker look

Prints median test HR@10 per setting. This is the same experiment the
acceptance suite gates on.
"""
import argparse

import torch

from swgcn.experiments import ABLATION, SELF_LOOP, sweep

torch.set_num_threads(1)

parser = argparse.ArgumentParser()
parser.add_argument("--seeds", type=int, default=5)
args = parser.parse_args()

# base trains with the joint objective; no_sat drops the alignment term;
# no_tpw also fixes every edge weight to 1.
settings = {**ABLATION, **{k: v for k, v in SELF_LOOP.items() if k != "lambda_s=1.0"}}
result = sweep(settings, seeds=range(args.seeds), verbose=True)
print()
print(result.table())
print(f"({result.seconds:.0f}s; base runs use lambda_s=1.0)")
