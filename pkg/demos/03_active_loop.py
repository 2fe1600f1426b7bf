"""The warm-up and epsilon-greedy exploration loop on toy data.

Uses the ensemble backend for speed; swap in the fig5-hmc preset for the
fully Bayesian version (about a minute per seed).

Run: python3 demos/03_active_loop.py
"""
import numpy as np

from activechannel import cli, synthetic
from activechannel.active import ChannelDataset, run_active_learning

toy = synthetic.generate_toy(1000, rng=0)
ds = ChannelDataset.from_targets(toy.channels, toy.targets, correct_channel=0, names=["channel1", "channel2"])
config, _ = cli.load_config("fig5-ensemble")
config = cli._override(config, seed=3, train_steps=200)

trace = run_active_learning(ds, config)
for rec in trace.records:
    vm = ["-" if v is None else f"{v:.4f}" for v in rec["vm"]]
    eps = "" if rec["epsilon"] is None else f"eps={rec['epsilon']:.2f}"
    print(f"{rec['step']:>2} {rec['phase']:<7} pick={rec['chosen_channel']} V_m={vm} "
          f"reward={rec['reward_deltas']} {eps}")

print("final R_a", np.round(trace.rewards.average, 3), "counts", trace.rewards.counts)
