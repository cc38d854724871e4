"""Tests for rollout collection, GAE, and the PPO update."""

import numpy as np
import pytest

from catrl import nnet, ppo
from catrl.env import EnvConfig, GaussianNoise
from catrl.nnet import NetConfig, Policy
from catrl.ppo import PpoConfig


def make_policy(seed=0, hidden=8, randomize=True, full_random=False):
    config = NetConfig(hidden=hidden)
    policy = Policy.create(config, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    if full_random:
        # every parameter nonzero, keeping pre-activations off ReLU kinks
        # (needed by finite-difference comparisons)
        policy.params = {k: rng.normal(0, 0.3, v.shape)
                         for k, v in policy.params.items()}
    elif randomize:
        for name in ("pol1.W", "pol1.b", "val1.W", "val1.b"):
            policy.params[name] = rng.normal(0, 0.2, policy.params[name].shape)
    return policy


def brute_force_gae(rewards, values, gamma, lam):
    """Direct evaluation of the discounted-sum definition for one episode."""
    n = len(rewards)
    adv = np.zeros(n)
    for t in range(n):
        acc = 0.0
        for k in range(t, n):
            next_v = values[k + 1] if k + 1 < n else 0.0
            delta = rewards[k] + gamma * next_v - values[k]
            acc += (gamma * lam) ** (k - t) * delta
        adv[t] = acc
    return adv


class TestCollectRollouts:
    def test_buffer_counts(self):
        policy = make_policy()
        buf = ppo.collect_rollouts(policy, EnvConfig(horizon=10), 64,
                                   np.random.default_rng(0))
        assert buf.num_episodes == 64
        assert buf.num_env_steps == 640
        # each episode additionally carries its terminal estimation decision
        assert len(buf) == 64 * 11
        assert all(b - a == 11 for a, b in buf.episode_slices)

    def test_stored_log_probs_recomputable(self):
        policy = make_policy(1)
        buf = ppo.collect_rollouts(policy, EnvConfig(horizon=4), 8,
                                   np.random.default_rng(2))
        means, _, _ = nnet.forward_batch(policy.params, buf.feats, buf.mask)
        recomputed = nnet.gaussian_log_prob(means, policy.params["log_std"], buf.actions)
        assert buf.log_probs == pytest.approx(recomputed, abs=1e-10)

    def test_deterministic_given_seed(self):
        policy = make_policy(3)
        cfg = EnvConfig(horizon=5)
        b1 = ppo.collect_rollouts(policy, cfg, 8, np.random.default_rng(4))
        b2 = ppo.collect_rollouts(policy, cfg, 8, np.random.default_rng(4))
        assert np.array_equal(b1.actions, b2.actions)
        assert np.array_equal(b1.rewards, b2.rewards)
        assert np.array_equal(b1.feats, b2.feats)

    def test_done_only_on_last_row(self):
        policy = make_policy(5)
        buf = ppo.collect_rollouts(policy, EnvConfig(horizon=3), 4,
                                   np.random.default_rng(6))
        for a, b in buf.episode_slices:
            assert not buf.dones[a:b - 1].any()
            assert buf.dones[b - 1]

    def test_rewards_match_estimates(self):
        """Every row's reward is the negative squared error of its estimate.

        A near-degenerate prior pins the hidden ability, making the expected
        rewards computable from the stored actions alone.
        """
        from catrl.irt import PriorConfig

        policy = make_policy(7)
        env_config = EnvConfig(horizon=3,
                               prior=PriorConfig(ability_mean=1.7, ability_std=1e-12))
        buf = ppo.collect_rollouts(policy, env_config, 4, np.random.default_rng(8))
        expected = -((1.7 - buf.actions[:, 1]) ** 2)
        assert buf.rewards == pytest.approx(expected, abs=1e-9)


class TestGae:
    def test_single_step_episode(self):
        adv, ret = ppo.gae_from_arrays(np.array([-4.0]), np.array([0.0]),
                                       np.array([True]), 0.99, 0.95)
        assert adv[0] == -4.0
        assert ret[0] == -4.0

    def test_lambda_zero_collapses_to_td_error(self):
        rng = np.random.default_rng(9)
        rewards = rng.normal(size=10)
        values = rng.normal(size=10)
        dones = np.zeros(10, dtype=bool)
        dones[-1] = True
        adv, _ = ppo.gae_from_arrays(rewards, values, dones, 0.9, 0.0)
        for t in range(10):
            next_v = values[t + 1] if t < 9 else 0.0
            assert adv[t] == pytest.approx(rewards[t] + 0.9 * next_v - values[t], abs=1e-12)

    def test_matches_brute_force_on_random_episodes(self):
        """Recursive GAE equals the discounted-sum definition, 100 episodes."""
        rng = np.random.default_rng(10)
        for _ in range(100):
            rewards = rng.normal(size=10)
            values = rng.normal(size=10)
            dones = np.zeros(10, dtype=bool)
            dones[-1] = True
            gamma = rng.uniform(0.8, 1.0)
            lam = rng.uniform(0.0, 1.0)
            adv, ret = ppo.gae_from_arrays(rewards, values, dones, gamma, lam)
            expected = brute_force_gae(rewards, values, gamma, lam)
            assert adv == pytest.approx(expected, abs=1e-10)
            assert ret == pytest.approx(expected + values, abs=1e-10)

    def test_multi_episode_independence(self):
        """Concatenated episodes produce the same advantages as separate ones."""
        rng = np.random.default_rng(11)
        r1, v1 = rng.normal(size=4), rng.normal(size=4)
        r2, v2 = rng.normal(size=6), rng.normal(size=6)
        d1 = np.array([False, False, False, True])
        d2 = np.array([False] * 5 + [True])
        a1, _ = ppo.gae_from_arrays(r1, v1, d1, 0.99, 0.95)
        a2, _ = ppo.gae_from_arrays(r2, v2, d2, 0.99, 0.95)
        a_all, _ = ppo.gae_from_arrays(np.concatenate([r1, r2]),
                                       np.concatenate([v1, v2]),
                                       np.concatenate([d1, d2]), 0.99, 0.95)
        assert a_all == pytest.approx(np.concatenate([a1, a2]), abs=1e-12)

    def test_compute_gae_on_buffer(self):
        policy = make_policy(12)
        buf = ppo.collect_rollouts(policy, EnvConfig(horizon=4), 6,
                                   np.random.default_rng(13))
        adv, ret = ppo.compute_gae(buf, 0.99, 0.95)
        a, b = buf.episode_slices[2]
        expected = brute_force_gae(buf.rewards[a:b], buf.values[a:b], 0.99, 0.95)
        assert adv[a:b] == pytest.approx(expected, abs=1e-10)


class TestPpoLoss:
    def test_ratio_one_at_collection_params(self):
        policy = make_policy(14)
        buf = ppo.collect_rollouts(policy, EnvConfig(horizon=3), 8,
                                   np.random.default_rng(15))
        means, _, _ = nnet.forward_batch(policy.params, buf.feats, buf.mask)
        new_lp = nnet.gaussian_log_prob(means, policy.params["log_std"], buf.actions)
        ratio = np.exp(new_lp - buf.log_probs)
        assert ratio == pytest.approx(np.ones_like(ratio), abs=1e-8)

    def test_clip_inactive_inside_band(self):
        """With ratio = 1 the clipped and raw surrogates agree exactly."""
        policy = make_policy(16)
        buf = ppo.collect_rollouts(policy, EnvConfig(horizon=3), 4,
                                   np.random.default_rng(17))
        adv = np.linspace(-1, 1, len(buf))
        ratio = np.ones(len(buf))
        clipped = np.clip(ratio, 0.8, 1.2)
        assert np.abs(ratio * adv - clipped * adv).max() < 1e-12

    def test_gradient_matches_finite_differences(self):
        """Surrogate + value + entropy + bound gradients vs central differences."""
        policy = make_policy(18, hidden=5, full_random=True)
        buf = ppo.collect_rollouts(policy, EnvConfig(horizon=3), 4,
                                   np.random.default_rng(19))
        rng = np.random.default_rng(20)
        advantages = rng.normal(size=len(buf))
        returns = rng.normal(size=len(buf))
        old_lp = buf.log_probs - rng.uniform(-0.05, 0.05, size=len(buf))
        config = PpoConfig(total_updates=1, design_bound_coef=0.5)
        # shift one design mean outside the clip interval via raw actions
        def loss_fn(params):
            losses, _ = ppo.ppo_loss_and_grads(
                params, buf.feats, buf.mask, buf.actions, old_lp,
                advantages, returns, config, design_clip=(-0.1, 0.1))
            return losses["total"]

        _, grads = ppo.ppo_loss_and_grads(
            policy.params, buf.feats, buf.mask, buf.actions, old_lp,
            advantages, returns, config, design_clip=(-0.1, 0.1))

        h = 1e-6
        worst = 0.0
        for name in nnet.param_names(policy.config):
            arr = policy.params[name]
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + h
                lp = loss_fn(policy.params)
                arr[idx] = orig - h
                lm = loss_fn(policy.params)
                arr[idx] = orig
                num = (lp - lm) / (2 * h)
                ana = grads[name][idx]
                worst = max(worst, abs(num - ana) / max(abs(num) + abs(ana), 1e-6))
        assert worst < 1e-4

    def test_vanilla_policy_gradient_equivalence(self):
        """One epoch, full batch, huge clip band, no value/entropy terms:
        the surrogate gradient equals the plain policy gradient of
        mean(log_prob * advantage) evaluated at the collection parameters."""
        policy = make_policy(21, hidden=4, full_random=True)
        buf = ppo.collect_rollouts(policy, EnvConfig(horizon=2), 3,
                                   np.random.default_rng(22))
        advantages = np.random.default_rng(23).normal(size=len(buf))
        config = PpoConfig(total_updates=1, clip_epsilon=1e9, entropy_coef=0.0,
                           value_coef=0.0, design_bound_coef=0.0)
        _, grads = ppo.ppo_loss_and_grads(
            policy.params, buf.feats, buf.mask, buf.actions, buf.log_probs,
            advantages, np.zeros(len(buf)), config)

        # brute-force d/dparams of -mean(log_prob * A) via finite differences
        def pg_loss(params):
            means, _, _ = nnet.forward_batch(params, buf.feats, buf.mask)
            lp = nnet.gaussian_log_prob(means, params["log_std"], buf.actions)
            return float(-(lp * advantages).mean())

        h = 1e-6
        for name in nnet.param_names(policy.config):
            arr = policy.params[name]
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + h
                lp_v = pg_loss(policy.params)
                arr[idx] = orig - h
                lm_v = pg_loss(policy.params)
                arr[idx] = orig
                num = (lp_v - lm_v) / (2 * h)
                ana = grads[name][idx]
                assert abs(num - ana) / max(abs(num) + abs(ana), 1e-6) < 1e-4


class TestPpoUpdate:
    def test_zero_learning_rate_keeps_params(self):
        policy = make_policy(24)
        before = {k: v.copy() for k, v in policy.params.items()}
        config = PpoConfig(total_updates=1, learning_rate=1e-300)
        buf = ppo.collect_rollouts(policy, EnvConfig(horizon=3), 8,
                                   np.random.default_rng(25))
        optimizer = nnet.AdamOptimizer(policy.params, config.learning_rate)
        ppo.ppo_update(policy, buf, config, np.random.default_rng(26), optimizer)
        for name, arr in before.items():
            assert np.allclose(policy.params[name], arr, atol=1e-290)

    def test_advantage_normalization(self):
        rng = np.random.default_rng(27)
        adv = rng.normal(3.0, 5.0, size=500)
        norm = (adv - adv.mean()) / (adv.std() + 1e-8)
        assert abs(norm.mean()) < 1e-6
        assert abs(norm.std() - 1.0) < 1e-6

    def test_update_improves_or_runs(self):
        policy = make_policy(28)
        config = PpoConfig(total_updates=1, rollout_episodes=8)
        buf = ppo.collect_rollouts(policy, EnvConfig(horizon=3), 8,
                                   np.random.default_rng(29))
        optimizer = nnet.AdamOptimizer(policy.params, config.learning_rate)
        stats = ppo.ppo_update(policy, buf, config, np.random.default_rng(30), optimizer)
        assert np.isfinite(stats.policy_loss)
        assert np.isfinite(stats.value_loss)
        assert stats.final_mse >= 0.0

    def test_nonfinite_rollback(self):
        """A poisoned buffer (overflowing importance ratios) aborts the update
        and leaves parameters untouched."""
        policy = make_policy(31)
        config = PpoConfig(total_updates=1)
        buf = ppo.collect_rollouts(policy, EnvConfig(horizon=2), 4,
                                   np.random.default_rng(32))
        buf.log_probs[:] = -2000.0  # ratio = exp(new - old) overflows
        before = {k: v.copy() for k, v in policy.params.items()}
        optimizer = nnet.AdamOptimizer(policy.params, config.learning_rate)
        stats = ppo.ppo_update(policy, buf, config, np.random.default_rng(33), optimizer)
        assert np.isfinite(stats.mean_return)
        for name, arr in before.items():
            assert np.array_equal(policy.params[name], arr)


class TestTrain:
    def test_smoke_run_finite_stats(self, tmp_path):
        env_config = EnvConfig(horizon=4, corruption=GaussianNoise(0.25))
        config = PpoConfig(total_updates=5, rollout_episodes=8, epochs_per_update=2,
                           minibatch_size=32)
        policy, stats = ppo.train(env_config, config, seed=0,
                                  net_config=NetConfig(hidden=8), out_dir=tmp_path)
        assert len(stats) == 5
        for s in stats:
            assert np.isfinite(s.mean_return)
            assert np.isfinite(s.final_mse)
        assert (tmp_path / "checkpoint_final.npz").is_file()
        assert (tmp_path / "train_stats.csv").is_file()
        loaded = ppo.read_stats_csv(tmp_path / "train_stats.csv")
        assert [s.update for s in loaded] == [0, 1, 2, 3, 4]

    def test_bit_reproducible(self, tmp_path):
        env_config = EnvConfig(horizon=3)
        config = PpoConfig(total_updates=3, rollout_episodes=6, epochs_per_update=2,
                           minibatch_size=16)
        p1, _ = ppo.train(env_config, config, seed=7, net_config=NetConfig(hidden=8))
        p2, _ = ppo.train(env_config, config, seed=7, net_config=NetConfig(hidden=8))
        for name in nnet.param_names(p1.config):
            assert np.array_equal(p1.params[name], p2.params[name])

    def test_trained_beats_untrained(self):
        """Paired evaluation on one seed: training reduces final-step MSE."""
        env_config = EnvConfig(horizon=6)
        config = PpoConfig(total_updates=30, rollout_episodes=32,
                           epochs_per_update=4, minibatch_size=64)
        trained, _ = ppo.train(env_config, config, seed=11, net_config=NetConfig(hidden=16))
        untrained = Policy.create(NetConfig(hidden=16), np.random.default_rng(99))

        def eval_mse(policy):
            buf = ppo.collect_rollouts(policy, env_config, 128,
                                       np.random.default_rng(1234))
            return buf.final_sq_errors.mean()

        assert eval_mse(trained) < eval_mse(untrained)

    def test_periodic_checkpoints(self, tmp_path):
        env_config = EnvConfig(horizon=2)
        config = PpoConfig(total_updates=4, rollout_episodes=4, epochs_per_update=1,
                           minibatch_size=16, checkpoint_interval=2)
        ppo.train(env_config, config, seed=3, net_config=NetConfig(hidden=4),
                  out_dir=tmp_path)
        assert (tmp_path / "checkpoint_000002.npz").is_file()
        assert (tmp_path / "checkpoint_000004.npz").is_file()
        assert (tmp_path / "checkpoint_final.npz").is_file()


class TestConfigValidation:
    def test_bad_gamma(self):
        with pytest.raises(ValueError):
            PpoConfig(gamma=1.5)

    def test_bad_counts(self):
        with pytest.raises(ValueError):
            PpoConfig(total_updates=0)

    def test_bad_clip(self):
        with pytest.raises(ValueError):
            PpoConfig(clip_epsilon=0.0)
