"""Exact GP regression, then the same GP on a learned embedding.

Run: python3 demos/01_gp_and_deep_kernel.py
"""
import numpy as np

from activechannel import dkl, gp
from activechannel.gp import GpHyperparams

rng = np.random.default_rng(0)

# plain GP on a 1-D function
X = np.sort(rng.uniform(-3, 3, 12))[:, None]
y = np.sin(X[:, 0]) + 0.1 * rng.normal(size=12)
Xs = np.linspace(-4, 4, 9)[:, None]
h = GpHyperparams(alpha=1.0, lengthscale=1.0, noise=0.01)
pred = gp.posterior_predictive(X, y, Xs, h)
print("x      mean    sd")
for x, m, v in zip(Xs[:, 0], pred.mean, pred.variance):
    print(f"{x:5.1f} {m:7.3f} {np.sqrt(v):6.3f}")  # sd grows away from the data

# log marginal likelihood and its gradient in log-hyperparameter space
lml, _, g = gp.log_marginal_likelihood(X, y, h)
print("log marginal likelihood", round(lml, 3), "grad (log a, log l, log s)", np.round(g, 3))

# deep kernel: a small MLP maps 8-D inputs to 2-D before the kernel
X8 = rng.normal(size=(60, 8))
y8 = np.tanh(X8[:, 0] - X8[:, 1])
model = dkl.fit_mle(X8[:40], y8[:40], dkl.Architecture((16, 8), 2), dkl.TrainConfig(steps=300, lr=0.01), rng=0)
p = dkl.predict(model, X8[40:])
print("held-out RMSE", round(float(np.sqrt(np.mean((p.mean - y8[40:]) ** 2))), 3),
      "mean predictive variance", round(dkl.mean_uncertainty(p), 4))
