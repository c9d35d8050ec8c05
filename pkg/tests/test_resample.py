import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from siftdiff import rng as rngmod
from siftdiff.gmm import analytic_eps_model, oracle_h_eps_model, paper_toy_spec
from siftdiff.resample import (
    ReplayBuffer,
    WeightedPath,
    acceptance_probability,
    adaptive_log_c,
    effective_sample_size,
    log_weight,
    rejection_mask,
    rejection_step,
)
from siftdiff.sde import build_schedule, sample_guided


class TestLogWeight:
    def test_reduces_to_reward_when_unguided(self):
        spec = paper_toy_spec()
        sched = build_schedule(50, 0.1, 15.0)
        base = analytic_eps_model(spec.prior, sched)
        batch = sample_guided(base, None, 100, sched, rngmod.stream(30, "lw"))
        batch.reward = np.asarray(spec.reward(batch.x0))
        assert np.array_equal(log_weight(batch), batch.reward)

    def test_constant_reward_unguided(self):
        spec = paper_toy_spec()
        sched = build_schedule(50, 0.1, 15.0)
        base = analytic_eps_model(spec.prior, sched)
        batch = sample_guided(base, None, 32, sched, rngmod.stream(31, "c"))
        batch.reward = np.full(len(batch), 2.5)
        assert np.allclose(log_weight(batch), 2.5)

    def test_missing_reward_raises(self):
        spec = paper_toy_spec()
        sched = build_schedule(20, 0.1, 8.0)
        base = analytic_eps_model(spec.prior, sched)
        batch = sample_guided(base, None, 4, sched, rngmod.stream(32, "m"))
        with pytest.raises(ValueError):
            log_weight(batch)

    def test_oracle_guidance_shrinks_weight_variance(self):
        # perfect guidance makes path weights near-constant
        spec = paper_toy_spec()
        sched = build_schedule(200)
        base = analytic_eps_model(spec.prior, sched)
        h_star = oracle_h_eps_model(spec, sched)
        guided = sample_guided(base, h_star, 1000, sched, rngmod.stream(33, "g"))
        unguided = sample_guided(base, None, 1000, sched, rngmod.stream(33, "u"))
        lw_guided = np.asarray(spec.reward(guided.x0)) + guided.log_rnd
        lw_unguided = np.asarray(spec.reward(unguided.x0))
        assert lw_guided.var() < lw_unguided.var()


class TestAdaptiveThreshold:
    def test_equal_weights(self):
        assert adaptive_log_c(np.full(10, 1.5), 0.3) == 1.5

    def test_full_acceptance_uses_min(self):
        lw = np.array([3.0, -1.0, 2.0])
        assert adaptive_log_c(lw, 1.0) == -1.0

    def test_hand_quantile(self):
        lw = np.arange(10.0)
        assert adaptive_log_c(lw, 0.3) == 7.0

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            adaptive_log_c(np.array([]), 0.5)

    @given(
        st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=200),
        st.floats(min_value=0.01, max_value=1.0),
    )
    @settings(max_examples=100, deadline=None)
    def test_expected_acceptance_at_least_target(self, weights, rate):
        lw = np.array(weights)
        log_c = adaptive_log_c(lw, rate)
        surely = np.mean(lw >= log_c)
        assert surely >= min(rate, 1.0) - 1e-12


class TestRejection:
    def test_all_above_threshold_kept(self):
        lw = np.array([1.0, 2.0, 3.0])
        mask = rejection_mask(lw, 1.0, rngmod.stream(34, "all"))
        assert mask.all()

    def test_binomial_half_rate(self):
        lw = np.full(10000, np.log(0.5))
        mask = rejection_mask(lw, 0.0, rngmod.stream(35, "half"))
        sigma = np.sqrt(0.25 / 10000)
        assert abs(mask.mean() - 0.5) < 3 * sigma

    def test_two_point_degenerate(self):
        paths = [WeightedPath(np.zeros(2), 0.0), WeightedPath(np.ones(2), -1e308)]
        kept = rejection_step(paths, 0.0, rngmod.stream(36, "two"))
        assert len(kept) == 1
        assert kept[0].log_weight == 0.0

    def test_accepted_set_matches_alpha_reweighting(self):
        # accepted-set averages of bounded test functions equal the
        # alpha-weighted averages over all paths, up to coin-flip noise
        spec = paper_toy_spec()
        sched = build_schedule(100)
        base = analytic_eps_model(spec.prior, sched)

        def h_model(x, t):
            return 0.25 * np.tanh(x)

        batch = sample_guided(base, h_model, 10000, sched, rngmod.stream(37, "th2"))
        lw = np.asarray(spec.reward(batch.x0)) + batch.log_rnd
        log_c = adaptive_log_c(lw, 0.7)
        alpha = acceptance_probability(lw, log_c)
        mask = rejection_mask(lw, log_c, rngmod.stream(37, "coin"))
        tests = {
            "sin_x": np.sin(batch.x0[:, 0]),
            "cos_y": np.cos(batch.x0[:, 1]),
            "ball": (np.linalg.norm(batch.x0 - np.array([1.25, 0.0]), axis=1) < 0.5).astype(float),
        }
        for name, phi in tests.items():
            weighted = (alpha * phi).sum() / alpha.sum()
            accepted = phi[mask].mean()
            var_coin = (alpha * (1 - alpha) * (phi - weighted) ** 2).sum() / alpha.sum() ** 2
            se = np.sqrt(var_coin) + 1e-12
            assert abs(accepted - weighted) < 4 * se, name


class TestBuffer:
    def test_fifo_eviction(self):
        buf = ReplayBuffer(3, dim=1)
        buf.push(np.array([[1.0], [2.0], [3.0], [4.0]]))
        assert sorted(buf.contents().ravel()) == [2.0, 3.0, 4.0]

    def test_eviction_order_across_pushes(self):
        buf = ReplayBuffer(3, dim=1)
        buf.push(np.array([[1.0], [2.0]]))
        buf.push(np.array([[3.0], [4.0]]))
        assert list(buf.contents().ravel()) == [2.0, 3.0, 4.0]

    def test_empty_push_noop(self):
        buf = ReplayBuffer(3, dim=2)
        buf.push(np.empty((0, 2)))
        assert len(buf) == 0

    def test_empty_sample_raises(self):
        buf = ReplayBuffer(3, dim=2)
        with pytest.raises(ValueError):
            buf.sample(1, rngmod.stream(38, "e"))

    def test_uniform_sampling_frequencies(self):
        buf = ReplayBuffer(10, dim=1)
        buf.push(np.arange(10.0)[:, None])
        draws = buf.sample(100000, rngmod.stream(39, "freq")).ravel()
        counts = np.array([(draws == v).sum() for v in range(10)])
        p = 0.1
        sigma = np.sqrt(p * (1 - p) * 100000)
        assert np.all(np.abs(counts - 10000) < 3 * sigma)

    def test_oversized_push_keeps_newest(self):
        buf = ReplayBuffer(3, dim=1)
        buf.push(np.arange(8.0)[:, None])
        assert sorted(buf.contents().ravel()) == [5.0, 6.0, 7.0]

    @given(st.lists(st.integers(min_value=1, max_value=7), min_size=1, max_size=12))
    @settings(max_examples=50, deadline=None)
    def test_capacity_never_exceeded_and_order_kept(self, batch_sizes):
        buf = ReplayBuffer(5, dim=1)
        pushed = []
        val = 0.0
        for k in batch_sizes:
            rows = np.arange(val, val + k)[:, None]
            val += k
            pushed.extend(rows.ravel().tolist())
            buf.push(rows)
            assert len(buf) <= 5
            assert list(buf.contents().ravel()) == pushed[-min(len(pushed), 5) :]


def test_effective_sample_size():
    assert effective_sample_size(np.zeros(10)) == pytest.approx(10.0)
    lopsided = np.array([0.0, -1e3, -1e3])
    assert effective_sample_size(lopsided) == pytest.approx(1.0)
