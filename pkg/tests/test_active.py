import json

import numpy as np
import pytest

from activechannel import active
from activechannel.active import (ChannelDataset, ChannelRewards, ExperimentTrace, LoopConfig,
                                  acquisition_max_variance, anneal_epsilon, epsilon_greedy_select,
                                  run_active_learning, static_channel_benchmark)
from activechannel.errors import ExperimentComplete, InvalidConfigError, NumericError
from activechannel.gp import PosteriorPredictive

from helpers import ScriptedPredictor


def make_dataset(n_rows=40, n_channels=2, seed=0):
    r = np.random.default_rng(seed)
    chans = [r.normal(size=(n_rows, 3)) for _ in range(n_channels)]
    return ChannelDataset.from_targets(chans, r.normal(size=n_rows), correct_channel=0)


def config(**kw):
    base = dict(backend="mle", seed=1, init_count=4, warmup_steps=3, explore_steps=0)
    base.update(kw)
    return LoopConfig(**base)


class TestAcquisition:
    def test_argmax(self):
        assert acquisition_max_variance(np.array([0.1, 0.9, 0.3])) == 1

    def test_ties_to_lowest_index(self):
        assert acquisition_max_variance(np.full(4, 0.2)) == 0

    def test_single_point(self):
        assert acquisition_max_variance(PosteriorPredictive([0.0], [0.5])) == 0

    def test_empty_signals_completion(self):
        with pytest.raises(ExperimentComplete):
            acquisition_max_variance(np.array([]))


class TestEpsilon:
    def test_endpoints(self):
        assert anneal_epsilon(0, 20, 0.4, 0.1) == 0.4
        assert anneal_epsilon(19, 20, 0.4, 0.1) == pytest.approx(0.1, abs=1e-15)

    def test_midpoint_of_odd_schedule(self):
        assert anneal_epsilon(10, 21, 0.4, 0.1) == pytest.approx(0.25)

    def test_single_step(self):
        assert anneal_epsilon(0, 1, 0.4, 0.1) == 0.4

    @pytest.mark.parametrize("step,total", [(0, 0), (-1, 5), (5, 5)])
    def test_invalid(self, step, total):
        with pytest.raises(InvalidConfigError):
            anneal_epsilon(step, total, 0.4, 0.1)

    def test_greedy_picks_best(self, rng):
        assert epsilon_greedy_select(np.array([0.5, -0.1]), 0.0, rng) == 0
        assert epsilon_greedy_select(np.array([-0.5, 0.1]), 0.0, rng) == 1

    def test_greedy_tie_to_lowest(self, rng):
        assert epsilon_greedy_select(np.array([0.3, 0.3, 0.1]), 0.0, rng) == 0

    def test_uniform_when_eps_one(self):
        # binomial bound: each of 3 channels within 3 sigma of 1/3
        r = np.random.default_rng(0)
        picks = np.array([epsilon_greedy_select(np.array([1.0, 0.0, 0.0]), 1.0, r) for _ in range(10000)])
        counts = np.bincount(picks, minlength=3)
        sigma = np.sqrt(10000 * (1 / 3) * (2 / 3))
        assert np.all(np.abs(counts - 10000 / 3) < 3 * sigma)

    def test_invalid_eps(self, rng):
        with pytest.raises(InvalidConfigError):
            epsilon_greedy_select(np.zeros(2), 1.5, rng)


class TestRewards:
    def test_average_zero_when_unsampled(self):
        r = ChannelRewards(np.array([2.0, 0.0]), np.array([4, 0]))
        np.testing.assert_array_equal(r.average, [0.5, 0.0])

    def test_average_recomputed(self):
        r = ChannelRewards.zeros(2)
        r.cumulative[1] = -1
        r.counts[1] = 8
        assert r.average[1] == -0.125


class TestWarmup:
    def test_reward_pattern(self):
        pred = ScriptedPredictor({0: 0.2, 1: 0.5})
        trace = run_active_learning(make_dataset(), config(), pred)
        assert [r["reward_deltas"] for r in trace.records] == [[1, 0]] * 3
        assert trace.rewards.cumulative.tolist() == [3, 0]
        assert trace.rewards.counts.tolist() == [3, 3]
        assert all(r["phase"] == "warmup" and r["chosen_channel"] == 0 for r in trace.records)
        assert all(r["channels_evaluated"] == [0, 1] for r in trace.records)

    def test_lower_channel_wins_wherever_it_is(self):
        trace = run_active_learning(make_dataset(), config(), ScriptedPredictor({0: 0.9, 1: 0.5}))
        assert trace.rewards.cumulative.tolist() == [0, 3]

    def test_tie_rewards_channel_zero(self):
        trace = run_active_learning(make_dataset(), config(), ScriptedPredictor({0: 0.4, 1: 0.4}))
        assert trace.rewards.cumulative.tolist() == [3, 0]

    def test_count_winner_only_switch(self):
        cfg = config(warmup_counts_all=False)
        trace = run_active_learning(make_dataset(), cfg, ScriptedPredictor({0: 0.2, 1: 0.5}))
        assert trace.rewards.counts.tolist() == [3, 0]

    def test_measured_set_grows_by_one(self):
        ds = make_dataset()
        pred = ScriptedPredictor({0: 0.2, 1: 0.5})
        run_active_learning(ds, config(), pred)
        sizes = [n for c, n, _, _ in pred.calls if c == 0]
        stars = [m for c, _, m, _ in pred.calls if c == 0]
        assert sizes == [4, 5, 6]
        assert stars == [36, 35, 34]

    def test_acquisition_follows_winner_spike(self):
        ds = make_dataset()
        trace = run_active_learning(ds, config(), ScriptedPredictor({0: 0.2, 1: 0.5}, spike=2))
        initial = set(trace.initial_measured)
        expected = []
        for _ in range(3):
            pool = [i for i in range(ds.n_rows) if i not in initial and i not in expected]
            expected.append(pool[2])
        assert [r["point"] for r in trace.records] == expected

    def test_vm_recorded_for_every_channel(self):
        trace = run_active_learning(make_dataset(), config(), ScriptedPredictor({0: 0.2, 1: 0.5}))
        vm = trace.records[0]["vm"]
        assert vm[0] == pytest.approx(0.2, abs=1e-9) and vm[1] == pytest.approx(0.5, abs=1e-9)


class TestExplore:
    def test_decrease_rewarded_increase_penalised(self):
        # channel 0 wins the single warm-up at 0.8, then gets 0.5 (down) and 0.6 (up)
        pred = ScriptedPredictor({0: [0.8, 0.5, 0.6], 1: [0.9]})
        cfg = config(warmup_steps=1, explore_steps=2, eps_start=0.0, eps_end=0.0)
        trace = run_active_learning(make_dataset(), cfg, pred)
        deltas = [r["reward_deltas"] for r in trace.records]
        assert deltas == [[1, 0], [1, 0], [-1, 0]]
        assert trace.rewards.cumulative.tolist() == [1, 0]
        assert trace.rewards.counts.tolist() == [3, 1]
        np.testing.assert_allclose(trace.rewards.average, [1 / 3, 0.0])

    def test_unvisited_channel_keeps_warmup_average(self):
        pred = ScriptedPredictor({0: [0.1] + [0.1 - 0.01 * k for k in range(1, 6)], 1: [0.2]})
        cfg = config(warmup_steps=1, explore_steps=5, eps_start=0.0, eps_end=0.0)
        trace = run_active_learning(make_dataset(), cfg, pred)
        assert trace.rewards.average.tolist() == [1.0, 0.0]
        assert all(r["vm"][1] is None for r in trace.records[1:])

    def test_epsilon_recorded_and_monotone(self):
        cfg = config(warmup_steps=2, explore_steps=6)
        trace = run_active_learning(make_dataset(), cfg, ScriptedPredictor({0: 0.2, 1: 0.5}))
        eps = [r["epsilon"] for r in trace.records if r["phase"] == "explore"]
        assert eps[0] == 0.4 and eps[-1] == pytest.approx(0.1)
        assert all(a >= b for a, b in zip(eps, eps[1:]))
        assert all(r["epsilon"] is None for r in trace.records if r["phase"] == "warmup")

    def test_loser_average_arithmetic(self):
        # loser: five warm-up zeros then three visits summing to -1 gives -1/8
        r = ChannelRewards(np.array([0.0, -1.0]), np.array([0, 8]))
        assert r.average[1] == -0.125


class TestLedger:
    @pytest.mark.parametrize("seed", range(5))
    def test_conservation_and_uniqueness(self, seed):
        r = np.random.default_rng(seed)
        table = {c: list(r.uniform(0.1, 1.0, 40)) for c in range(3)}
        cfg = config(seed=seed, warmup_steps=4, explore_steps=10, eps_start=0.8, eps_end=0.2)
        trace = run_active_learning(make_dataset(60, 3, seed), cfg, ScriptedPredictor(table))
        deltas = np.array([rec["reward_deltas"] for rec in trace.records])
        np.testing.assert_array_equal(deltas.sum(0), trace.rewards.cumulative)
        visits = np.zeros(3, int)
        for rec in trace.records:
            for c in rec["channels_evaluated"]:
                visits[c] += 1
        np.testing.assert_array_equal(visits, trace.rewards.counts)
        np.testing.assert_array_equal(trace.rewards.average, trace.rewards.cumulative / trace.rewards.counts)
        points = [rec["point"] for rec in trace.records]
        assert len(set(points)) == len(points)
        assert not set(points) & set(trace.initial_measured)
        assert [rec["step"] for rec in trace.records] == list(range(14))
        for rec in trace.records:
            d = rec["reward_deltas"]
            if rec["phase"] == "warmup":
                assert sorted(d) == [0, 0, 1]
            else:
                assert d[rec["chosen_channel"]] in (-1, 1)
                assert sum(abs(x) for x in d) == 1


class TestRun:
    def test_explore_zero_gives_warmup_only(self):
        trace = run_active_learning(make_dataset(), config(warmup_steps=5), ScriptedPredictor({0: 0.2, 1: 0.5}))
        assert len(trace.records) == 5 and trace.status == "complete"

    def test_exhaustion_truncates(self):
        ds = make_dataset(n_rows=7)
        trace = run_active_learning(ds, config(warmup_steps=10), ScriptedPredictor({0: 0.2, 1: 0.5}))
        assert trace.status == "exhausted"
        assert len(trace.records) == 3

    def test_numeric_failure_carries_partial_trace(self):
        class Failing(ScriptedPredictor):
            def __call__(self, channel, X, y, X_star, seed):
                if len(self.calls) == 4:
                    raise NumericError("boom")
                return super().__call__(channel, X, y, X_star, seed)

        with pytest.raises(NumericError) as info:
            run_active_learning(make_dataset(), config(), Failing({0: 0.2, 1: 0.5}))
        exc = info.value
        assert exc.context["step"] == 2 and exc.context["channel"] == 0
        assert exc.trace.status == "failed" and len(exc.trace.records) == 2

    def test_input_dataset_not_mutated(self):
        ds = make_dataset()
        run_active_learning(ds, config(), ScriptedPredictor({0: 0.2, 1: 0.5}))
        assert ds.measured == []

    def test_same_seed_same_bytes(self):
        cfg = config(warmup_steps=2, explore_steps=5)
        a = run_active_learning(make_dataset(), cfg, ScriptedPredictor({0: 0.2, 1: 0.5}))
        b = run_active_learning(make_dataset(), cfg, ScriptedPredictor({0: 0.2, 1: 0.5}))
        assert a.to_json() == b.to_json() and a.to_csv() == b.to_csv()

    def test_model_seeds_distinct_per_step_and_channel(self):
        pred = ScriptedPredictor({0: 0.2, 1: 0.5})
        run_active_learning(make_dataset(), config(), pred)
        seeds = [s for *_, s in pred.calls]
        assert len(set(seeds)) == len(seeds)

    def test_initial_split(self):
        assert len(active.initial_indices(100, config(init_count=None, init_fraction=0.02))) == 2
        with pytest.raises(InvalidConfigError):
            active.initial_indices(40, config(init_count=None, init_fraction=0.02))

    def test_workers_do_not_change_trace(self):
        cfg = config(warmup_steps=2, explore_steps=2, hidden=(4,), train_steps=20)
        a = run_active_learning(make_dataset(), cfg)
        b = run_active_learning(make_dataset(), config(warmup_steps=2, explore_steps=2, hidden=(4,),
                                                       train_steps=20, workers=2))
        assert a.to_json().replace('"workers": 1', "") == b.to_json().replace('"workers": 2', "")


class TestTraceFormat:
    def test_json_round_trip(self):
        trace = run_active_learning(make_dataset(), config(explore_steps=2), ScriptedPredictor({0: 0.2, 1: 0.5}))
        d = json.loads(trace.to_json())
        assert set(d) == {"status", "channel_names", "initial_measured", "config", "records", "final_rewards"}
        again = ExperimentTrace.from_dict(d)
        assert again.to_json() == trace.to_json()

    def test_csv_one_row_per_step(self):
        trace = run_active_learning(make_dataset(), config(explore_steps=2), ScriptedPredictor({0: 0.2, 1: 0.5}))
        lines = trace.to_csv().splitlines()
        assert lines[0] == "step,phase,channel,V_m,reward,point,epsilon"
        assert len(lines) == 1 + 5


class TestConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(InvalidConfigError, match="bogus"):
            LoopConfig.from_dict({"bogus": 1})

    @pytest.mark.parametrize("kw", [dict(backend="gd"), dict(init_fraction=1.5), dict(eps_start=2.0),
                                    dict(input_norm="zscore"), dict(warmup_steps=-1),
                                    dict(init_fraction=None, init_count=None), dict(hmc_max_tree_depth=0)])
    def test_invalid_values(self, kw):
        with pytest.raises(InvalidConfigError):
            LoopConfig(**kw)

    def test_dict_round_trip(self):
        c = LoopConfig(hidden=(8, 4), seed=3)
        assert LoopConfig.from_dict(c.to_dict()) == c


class TestDataset:
    def test_row_counts_must_agree(self):
        with pytest.raises(InvalidConfigError):
            ChannelDataset([np.zeros((3, 2)), np.zeros((4, 2))], lambda i: 0.0)

    def test_remeasure_rejected(self):
        ds = make_dataset()
        ds.measure(3)
        with pytest.raises(InvalidConfigError):
            ds.measure(3)
        assert 3 not in ds.unmeasured


class TestBenchmark:
    def test_accuracy_counts(self):
        ds = make_dataset(30)
        rows = static_channel_benchmark(ds, config(), [0.2, 0.5], 4, ScriptedPredictor({0: [0.1] * 8, 1: [0.3] * 8}))
        assert [r["accuracy"] for r in rows] == [1.0, 1.0]
        assert rows[0]["trials"] == 4 and rows[0]["correct"] == 4

    def test_single_trial_is_zero_or_one(self):
        ds = make_dataset(30)
        rows = static_channel_benchmark(ds, config(), [0.2], 1, ScriptedPredictor({0: [0.5], 1: [0.3]}))
        assert rows[0]["accuracy"] == 0.0

    def test_tie_is_not_a_hit(self):
        ds = make_dataset(30)
        rows = static_channel_benchmark(ds, config(), [0.2], 2, ScriptedPredictor({0: 0.3, 1: 0.3}))
        assert rows[0]["accuracy"] == 0.0

    def test_too_few_points_rejected_before_fitting(self):
        pred = ScriptedPredictor({0: 0.1, 1: 0.2})
        with pytest.raises(InvalidConfigError):
            static_channel_benchmark(make_dataset(30), config(), [0.5, 0.01], 2, pred)
        assert pred.calls == []

    def test_needs_label(self):
        ds = make_dataset()
        ds.correct_channel = None
        with pytest.raises(InvalidConfigError):
            static_channel_benchmark(ds, config(), [0.2], 1, ScriptedPredictor({0: 0.1, 1: 0.2}))

    def test_duplicate_channels_are_a_coin_flip(self):
        # identical channels differ only through the fit seed, so either is
        # equally likely to come out lower: accuracy ~ Binomial(200, 1/2) / 200
        r = np.random.default_rng(0)
        X = r.normal(size=(60, 3))
        ds = ChannelDataset.from_targets([X, X.copy()], np.sin(X[:, 0]) + X[:, 1], correct_channel=0)
        cfg = config(hidden=(4,), train_steps=30, lr=1e-2)
        acc = static_channel_benchmark(ds, cfg, [0.2], 200)[0]["accuracy"]
        assert abs(acc - 0.5) < 3 * np.sqrt(0.25 / 200)


class TestDklPredictor:
    def test_vm_in_original_units(self):
        r = np.random.default_rng(1)
        X = r.normal(size=(30, 3))
        y = np.sin(X[:, 0])
        cfg = config(hidden=(4,), train_steps=30)
        a = active.DklPredictor(cfg)(0, X[:10], y[:10], X[10:], 5)
        b = active.DklPredictor(cfg)(0, X[:10], 10 * y[:10], X[10:], 5)
        np.testing.assert_allclose(b.variance, 100 * a.variance, rtol=1e-9)

    @pytest.mark.parametrize("backend", ["mle", "ensemble", "hmc"])
    def test_backends_run(self, backend):
        r = np.random.default_rng(2)
        X = r.normal(size=(20, 3))
        cfg = config(backend=backend, hidden=(4,), train_steps=10, ensemble_size=2, hmc_warmup=10,
                     hmc_samples=10, hmc_max_tree_depth=3, hmc_warm_start_steps=5)
        pred = active.DklPredictor(cfg)(0, X[:8], X[:8, 0], X[8:], 0)
        assert pred.variance.shape == (12,) and np.all(pred.variance >= 0)

    def test_warm_start_reuses_previous_fit(self):
        r = np.random.default_rng(3)
        X = r.normal(size=(20, 3))
        cfg = config(hidden=(4,), train_steps=5, warm_start=True)
        p = active.DklPredictor(cfg)
        p.fit(0, X[:8], X[:8, 0], 0)
        first = p._last[0].copy()
        p.fit(0, X[:9], X[:9, 0], 1)
        assert np.abs(p._last[0] - first).max() < 0.05
