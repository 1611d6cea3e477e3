"""
How many learnable context vectors?
===================================

Sweeps the prompt length with everything else fixed and adds the manual
prompt row. The detector is the same size in every row; only the prompt bank
grows.
"""

import os

from leapd.config import RunConfig
from leapd.datasets import make_domain_split
from leapd.evaluation import ablate_prompt_length, render_ablation

out_dir = os.path.join(os.environ.get("LEAPD_OUT", "demo_out"), "ablation")
train_set, heldout_set = make_domain_split([("low", "front", "day"), ("high", "bird", "day")],
                                           [("medium", "side", "night")], 30, seed=1, heldout_per_domain=20)

rows = ablate_prompt_length([4, 8, 16, 32], RunConfig(epochs=4), train_set, heldout_set, out_dir)
print(render_ablation(rows))
