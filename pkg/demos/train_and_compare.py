"""
One-step training in three prompt modes
=======================================

Trains the detector alone, with hand-written domain prompts, and with
learnable prompts on the same synthetic split, then tabulates held-out mAP
against the detector-only row. Pass ``--full`` for the 2x100 / 50 split and
12 epochs (a few minutes on one core); the default is a quicker cut.
"""

import os
import sys

from leapd.config import RunConfig
from leapd.datasets import make_domain_split
from leapd.evaluation import compare_runs, evaluate
from leapd.training import load_checkpoint, read_metrics, train

full = "--full" in sys.argv
out_dir = os.path.join(os.environ.get("LEAPD_OUT", "demo_out"), "three_modes")

per_domain, heldout, epochs = (100, 50, 12) if full else (40, 20, 6)
train_set, heldout_set = make_domain_split([("low", "front", "day"), ("high", "bird", "day")],
                                           [("medium", "side", "night")], per_domain, seed=0,
                                           heldout_per_domain=heldout)
print(len(train_set), "training scenes over", train_set.n_sc, "shooting conditions;",
      len(heldout_set), "held-out scenes")

reports = []
for mode in ("detector_only", "manual", "learnable"):
    cfg = RunConfig(prompt_mode=mode, epochs=epochs)
    ckpt = train(cfg, train_set, os.path.join(out_dir, mode))
    rows = read_metrics(os.path.join(out_dir, mode, "metrics.jsonl"))
    epochs_log = [r for r in rows if r["kind"] == "epoch"]
    print(f"{mode:>14}: L_total {epochs_log[0]['mean_L_total']:.3f} -> {epochs_log[-1]['mean_L_total']:.3f}, "
          f"L_lp {epochs_log[0]['mean_L_lp']:.3f} -> {epochs_log[-1]['mean_L_lp']:.3f}")
    reports.append((mode, evaluate(load_checkpoint(ckpt).detector, heldout_set)))

table = compare_runs(reports, baseline="detector_only")
print(table.render())
table.write(out_dir)
