"""
Growing disks: training a dynamic texture on a laptop
=====================================================

A procedural exemplar of disks swelling on a jittered lattice is small enough
to train on one CPU core in under a minute.  We fit the desk-sized field,
sample a longer and larger video from fresh noise, and score it.

Run ``python demos/growing_disks.py [iterations] [out_dir]``.
"""

import sys
from pathlib import Path

import numpy as np

from appode import tensor as T
from appode.data import growing_disks, write_png
from appode.losses import FeatureBank
from appode.metrics import evaluate_video, seam_ratio
from appode.synthesis import Model, generate
from appode.train import TrainConfig, Trainer

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 800
out = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_out/disks")

# %%
# The exemplar: 20 frames at 24 px spread over five time units.
ex = growing_disks(size=24, n_frames=20)
print(f"exemplar: {len(ex)} frames of {ex.size}, t in [{ex.t_start}, {ex.t_end}]")

# %%
# Desk preset: two UNet levels, 12 state channels.  The learning rate is raised
# so that a few hundred iterations are enough to see the pattern form.
cfg = TrainConfig.rgb(iterations=iterations, lr=2e-3, seed=0)
tr = Trainer(cfg, ex, cfg.field_config(desk=True))


def progress(trainer, rec):
    if rec["iteration"] % 100 == 0:
        print(f"  it {rec['iteration']:4d}  loss {rec.get('loss', float('nan')):.4f}  nfe {rec.get('nfe', 0)}")


untrained = Model({k: T.parameter(p.data.copy()) for k, p in tr.params.items()}, tr.field_cfg, cfg)
tr.run(callback=progress)
model = Model(tr.params, tr.field_cfg, cfg)

# %%
# Sampling: the field is fully convolutional with circular padding, so a
# texture twice the training size tiles just as well.
frames, _ = generate(model, seed=1, out_size=48, n_frames=10, out_dir=out / "frames")
print("seam ratio per frame:", np.round([seam_ratio(f) for f in frames], 3))

strip = np.concatenate(list(frames), axis=2)
write_png(out / "strip.png", strip)

# %%
# Realism against the exemplar, before and after training, at the training size.
bank = FeatureBank.random(0)
for name, m in (("untrained", untrained), ("trained", model)):
    video, _ = generate(m, seed=0, out_size=24, n_frames=len(ex))
    rep = evaluate_video(video, ex.frames, bank)
    print(f"{name:>9}: gram {rep.gram_mean:.4g}  swd {rep.swd_mean:.4g}  non-straightness {rep.non_straightness:.3f}")
print(f"wrote {out}")
