"""Patches from a 4-channel image predicting a hysteresis-loop area.

The synthetic image ties the loop's coercive voltage to one channel; the
loop should end up rewarding that channel.

Run: python3 demos/04_structure_property.py
"""
import numpy as np

from activechannel import cli, imaging

image, spectra, extra = imaging.generate_synthetic_image(24, 24, 4, rng=5)
print("channels", image.names, "shape", image.shape, "informative", extra["informative"])

# loop area for one pixel, and the area map's correlation with each channel
V = spectra.voltage
R = spectra.signals["polarization"]
print("loop area at (0, 0):", round(imaging.loop_area(V, R[0, 0]), 4))
areas = np.array([[imaging.loop_area(V, R[i, j]) for j in range(24)] for i in range(24)])
for name, chan in zip(image.names, image.channels):
    print(f"corr(area, {name}) = {np.corrcoef(areas.ravel(), chan.ravel())[0, 1]:+.2f}")

stack = imaging.extract_patches(image, 3)
print("patches per channel", stack.features[0].shape)

config, exp = cli.load_config("fig7")
config = cli._override(config, backend="ensemble", seed=5, train_steps=200)
trace = imaging.run_structure_property(image, spectra, exp["scalarizer"], 3, config)
print("final R_a", dict(zip(image.names, np.round(trace.rewards.average, 3))))
