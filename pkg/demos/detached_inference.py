"""
Dropping the vision-language branch
===================================

Encoders, squeeze network and prompts only shape training. After stripping
them from a checkpoint the detector gives the same detections, bit for bit.
"""

import os

from leapd.cli import render_overlays
from leapd.config import RunConfig
from leapd.datasets import make_domain_split
from leapd.detector import detect
from leapd.training import load_checkpoint, strip_domain_modules, train

out_dir = os.path.join(os.environ.get("LEAPD_OUT", "demo_out"), "detached")
train_set, heldout_set = make_domain_split([("low", "front", "day"), ("high", "bird", "day")],
                                           [("medium", "side", "night")], 30, seed=2, heldout_per_domain=10)
full = train(RunConfig(epochs=3), train_set, out_dir)
slim = strip_domain_modules(full, os.path.join(out_dir, "inference.leapd"))
print(f"checkpoint {os.path.getsize(full)} bytes -> {os.path.getsize(slim)} bytes")

a, b = load_checkpoint(full), load_checkpoint(slim)
print("domain modules after stripping:", b.has_domain_modules)
same = all(detect(a.detector, heldout_set[i].image) == detect(b.detector, heldout_set[i].image)
           for i in range(len(heldout_set)))
print("identical detections on", len(heldout_set), "held-out images:", same)

paths, skipped = render_overlays(b, heldout_set, os.path.join(out_dir, "overlays"))
print("overlays:", len(paths), "written,", skipped, "skipped")
