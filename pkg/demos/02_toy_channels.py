"""Two noisy views of the same peaks; only the first is aligned with the
target. Which channel gives the lower predictive uncertainty?

Run: python3 demos/02_toy_channels.py
"""
import numpy as np
from scipy.stats import spearmanr

from activechannel import active, dkl, synthetic
from activechannel.active import ChannelDataset, LoopConfig

toy = synthetic.generate_toy(200, rng=1)
print("curves", toy.channel1.shape, "target range", np.round([toy.targets.min(), toy.targets.max()], 3))
print("mean |shift| of channel 2", round(float(np.abs(toy.shifts).mean()), 4))

ds = ChannelDataset.from_targets(toy.channels, toy.targets, correct_channel=0)
cfg = LoopConfig(backend="mle", seed=0, hidden=(16, 8), train_steps=300, lr=0.01)

# static benchmark: random splits, count how often channel 1 has the lowest V_m
for row in active.static_channel_benchmark(ds, cfg, [0.1, 0.2], trials=5):
    vm = np.array(row["vm"])
    print(f"fraction {row['fraction']:.2f}: accuracy {row['accuracy']:.2f} ",
          "median V_m per channel", " ".join(f"{v:.2e}" for v in np.median(vm, axis=0)))

# embedding of the correct channel, compared with the generating latents
X = active.normalize_channels(toy.channels, cfg.input_norm)[0]
model = active.DklPredictor(cfg).fit(0, X, toy.targets, 0)
z = dkl.embed(model, X).z
for name, v in (("mu", toy.latents.mu), ("sigma", toy.latents.sigma), ("A", toy.latents.amplitude)):
    rho = max(abs(spearmanr(v, z[:, j])[0]) for j in range(z.shape[1]))
    print(f"max |spearman| of latent dims with {name}: {rho:.3f}")
