"""Train a small mask generator and watch guidance stretch the ventricle-size response.

Runs in roughly ten minutes on one core. The corpus is smaller and training
shorter than the desk configuration, so the curves are noisier.
"""

import numpy as np

from ventrigen import diffusion as df
from ventrigen import mask_generator as mg
from ventrigen import phantoms as ph

vols = ph.generate_corpus(ph.sample_corpus("balanced", 800, seed=0), seed=0)
bounds = ph.assign_conditions(vols)
print(f"{len(vols)} phantoms, ventricle ratio {bounds.ratio_min:.3f} .. {bounds.ratio_max:.3f}")

ae, ae_log = mg.train_mask_autoencoder(vols, epochs=4, seed=1)
print(f"mask autoencoder: final loss {ae_log.epoch_losses[-1]:.4f}")

sched = df.build_linear_schedule(200, 5e-4, 0.1)
den, dm_log = mg.train_mask_diffusion(ae, vols, sched, epochs=12, seed=2)
print(f"mask diffusion: loss {dm_log.initial_loss:.1f} -> {dm_log.epoch_losses[-1]:.1f}")

cs = [0.1, 0.3, 0.5, 0.7, 0.9]
for G in (1.0, 4.0):
    means = [mg.sample_mask(den, ae, sched, c, G, seeds=range(16))[1].mean() for c in cs]
    slope = np.polyfit(cs, means, 1)[0]
    print(f"G={G}: " + "  ".join(f"c={c:.1f}:{m:.3f}" for c, m in zip(cs, means)) + f"  slope {slope:.3f}")
