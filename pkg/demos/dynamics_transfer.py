"""
Dynamics transfer
=================

A trained field describes how appearance changes, not only what it looks like.
Dropping a new picture into the appearance channels at the start time, after
matching its per-channel statistics to the state there, lets the same dynamics
act on it.  The first decoded frame reproduces the input exactly.

Run ``python demos/dynamics_transfer.py [iterations] [out_dir]``.
"""

import sys
from pathlib import Path

import numpy as np

from appode.data import growing_disks, periodic_noise, write_png
from appode.ops import make_rng
from appode.synthesis import Model, transfer
from appode.train import TrainConfig, Trainer

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 400
out = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_out/transfer")

cfg = TrainConfig.rgb(iterations=iterations, lr=2e-3, seed=0)
tr = Trainer(cfg, growing_disks(size=24, n_frames=20), cfg.field_config(desk=True))
tr.run()
model = Model(tr.params, tr.field_cfg, cfg)

# A brushed-gold plate: warm base colour with smooth periodic grain.
rng = make_rng(3)
grain = periodic_noise(48, rng, smooth=3.0)
plate = np.stack([0.83 + 0.05 * grain, 0.66 + 0.05 * grain, 0.25 + 0.03 * grain]).clip(0, 1)

frames = transfer(model, plate, seed=0, n_frames=8)
print("frame 0 max deviation from the plate:", float(np.abs(frames[0] - plate).max()))
print("mean colour per frame:", np.round(frames.mean(axis=(2, 3), dtype=np.float64), 3).tolist())
out.mkdir(parents=True, exist_ok=True)
write_png(out / "strip.png", np.concatenate(list(frames), axis=2))
print(f"wrote {out}")
