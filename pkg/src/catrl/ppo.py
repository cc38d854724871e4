"""On-policy trainer: clipped-surrogate PPO with generalized advantage estimation.

Episodes are collected in lockstep batches. Each episode contributes one
decision per trial plus a final estimation decision taken on the fully
revealed terminal observation; that last decision is what teaches the
network to estimate ability from a complete history (essential for the
outcome-concealing baseline, whose in-episode observations are masked).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import env as env_mod
from . import nnet
from .env import Action, EnvConfig
from .nnet import NetConfig, Params, Policy

STATS_FIELDS = ("update", "mean_return", "policy_loss", "value_loss",
                "entropy", "final_mse", "wall_clock_s")


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    learning_rate: float = 3e-4
    epochs_per_update: int = 10
    minibatch_size: int = 64
    rollout_episodes: int = 64
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    total_updates: int = 2000
    advantage_normalization: bool = True
    max_grad_norm: float = 0.5
    reward_scale: float = 0.05  # trainer-internal; buffer rewards stay unscaled
    design_bound_coef: float = 1.0  # penalty on design means outside the clip interval
    anneal_lr: bool = True  # linear learning-rate decay over total_updates
    checkpoint_interval: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self) -> None:
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if self.clip_epsilon <= 0 or self.learning_rate <= 0 or self.max_grad_norm <= 0:
            raise ValueError("clip_epsilon, learning_rate, max_grad_norm must be > 0")
        if min(self.epochs_per_update, self.minibatch_size,
               self.rollout_episodes, self.total_updates) < 1:
            raise ValueError("counts must be >= 1")
        if self.entropy_coef < 0 or self.value_coef < 0:
            raise ValueError("entropy_coef and value_coef must be >= 0")
        if self.reward_scale <= 0:
            raise ValueError("reward_scale must be > 0")
        if self.design_bound_coef < 0:
            raise ValueError("design_bound_coef must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainStats:
    update: int
    mean_return: float
    policy_loss: float
    value_loss: float
    entropy: float
    final_mse: float
    wall_clock_s: float

    def as_row(self) -> tuple:
        return tuple(getattr(self, f) for f in STATS_FIELDS)


@dataclass
class RolloutBuffer:
    """Flattened rollout storage; each episode group spans horizon+1 rows.

    The first ``horizon`` rows of a group are administered trials; the last
    row is the terminal estimation decision (no trial attached).
    """

    feats: np.ndarray        # (N, T, F) padded observation features
    mask: np.ndarray         # (N, T)
    actions: np.ndarray      # (N, 2)
    log_probs: np.ndarray    # (N,)
    rewards: np.ndarray      # (N,)
    values: np.ndarray       # (N,)
    dones: np.ndarray        # (N,) True on each episode's last row
    episode_slices: list[tuple[int, int]]
    final_sq_errors: np.ndarray  # per episode, from the terminal mean estimate
    horizon: int
    design_clip: tuple[float, float] = (-6.0, 6.0)

    def __len__(self) -> int:
        return self.actions.shape[0]

    @property
    def num_episodes(self) -> int:
        return len(self.episode_slices)

    @property
    def num_env_steps(self) -> int:
        """Administered trials only (excludes terminal estimation rows)."""
        return self.num_episodes * self.horizon

    def episode_returns(self) -> np.ndarray:
        return np.array([self.rewards[a:b].sum() for a, b in self.episode_slices])


def collect_rollouts(
    policy: Policy,
    env_config: EnvConfig,
    n_episodes: int,
    rng: np.random.Generator,
) -> RolloutBuffer:
    """Run complete episodes in lockstep and record every decision.

    Action sampling is batched across episodes per time index; each episode
    owns a spawned rng stream for its environment noise, so the result is
    bit-reproducible for a given (policy, config, rng state).
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    horizon = env_config.horizon
    ep_rngs = rng.spawn(n_episodes)
    states = []
    observations = []
    for i, ep_rng in enumerate(ep_rngs):
        try:
            state, obs = env_mod.reset(env_config, ep_rng)
        except Exception as exc:  # pragma: no cover - config errors surface early
            raise RuntimeError(f"episode {i} failed to reset") from exc
        states.append(state)
        observations.append(obs)

    rows_feats: list[np.ndarray] = []
    rows_mask: list[np.ndarray] = []
    actions_l, logp_l, rewards_l, values_l, dones_l = [], [], [], [], []
    final_sq = np.zeros(n_episodes)

    for t in range(horizon + 1):
        feats, mask = nnet.pad_observations(observations)
        means, values, _ = nnet.forward_batch(policy.params, feats, mask)
        sampled = nnet.sample_gaussian(means, policy.params["log_std"], rng)
        log_probs = nnet.gaussian_log_prob(means, policy.params["log_std"], sampled)

        rows_feats.append(feats)
        rows_mask.append(mask)
        actions_l.append(sampled)
        logp_l.append(log_probs)
        values_l.append(values)

        if t < horizon:
            step_rewards = np.zeros(n_episodes)
            next_obs = []
            for i in range(n_episodes):
                action = Action(design=float(sampled[i, 0]), estimate=float(sampled[i, 1]))
                try:
                    states[i], obs, reward, _ = env_mod.step(states[i], action, env_config, ep_rngs[i])
                except Exception as exc:
                    raise RuntimeError(f"episode {i} failed at trial {t + 1}") from exc
                next_obs.append(obs)
                step_rewards[i] = reward
            observations = next_obs
            rewards_l.append(step_rewards)
            dones_l.append(np.zeros(n_episodes, dtype=bool))
        else:
            # Terminal estimation decision: reward the sampled estimate, no trial.
            thetas = np.array([s.true_ability for s in states])
            rewards_l.append(np.array([
                env_mod.squared_error_reward(thetas[i], float(sampled[i, 1]))
                for i in range(n_episodes)
            ]))
            dones_l.append(np.ones(n_episodes, dtype=bool))
            final_sq = (thetas - means[:, 1]) ** 2

    # Interleave time-major collections into episode-major flat arrays.
    steps = horizon + 1
    max_len = max(f.shape[1] for f in rows_feats)
    n_rows = n_episodes * steps
    feats = np.zeros((n_rows, max_len, nnet.FEATURE_DIM))
    mask = np.zeros((n_rows, max_len))
    actions = np.zeros((n_rows, nnet.ACTION_DIM))
    log_probs = np.zeros(n_rows)
    rewards = np.zeros(n_rows)
    values = np.zeros(n_rows)
    dones = np.zeros(n_rows, dtype=bool)
    slices = []
    for i in range(n_episodes):
        start = i * steps
        slices.append((start, start + steps))
        for t in range(steps):
            r = start + t
            tl = rows_feats[t].shape[1]
            feats[r, :tl] = rows_feats[t][i]
            mask[r, :tl] = rows_mask[t][i]
            actions[r] = actions_l[t][i]
            log_probs[r] = logp_l[t][i]
            rewards[r] = rewards_l[t][i]
            values[r] = values_l[t][i]
            dones[r] = dones_l[t][i]

    return RolloutBuffer(
        feats=feats, mask=mask, actions=actions, log_probs=log_probs,
        rewards=rewards, values=values, dones=dones,
        episode_slices=slices, final_sq_errors=final_sq, horizon=horizon,
        design_clip=env_config.design_clip,
    )


def gae_from_arrays(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    gae_lambda: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Recursive GAE over flat arrays; episodes end where dones is True.

    The value after a terminal row bootstraps to zero. Returns
    (advantages, returns) with returns = advantages + values.
    """
    n = len(rewards)
    advantages = np.zeros(n)
    last_adv = 0.0
    for t in reversed(range(n)):
        if dones[t]:
            next_value = 0.0
            last_adv = 0.0
        else:
            next_value = values[t + 1]
        delta = rewards[t] + gamma * next_value - values[t]
        last_adv = delta + gamma * gae_lambda * last_adv
        advantages[t] = last_adv
    return advantages, advantages + values


def compute_gae(buffer: RolloutBuffer, gamma: float, gae_lambda: float):
    return gae_from_arrays(buffer.rewards, buffer.values, buffer.dones, gamma, gae_lambda)


def ppo_loss_and_grads(
    params: Params,
    feats: np.ndarray,
    mask: np.ndarray,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    config: PpoConfig,
    design_clip: tuple[float, float] = (-6.0, 6.0),
) -> tuple[dict, Params]:
    """Clipped-surrogate loss and its exact parameter gradients for one minibatch.

    Overflow is tolerated here (errstate suppressed): a non-finite total loss
    is the caller's abort signal, not an error condition.
    """
    n = len(actions)
    means, values, cache = nnet.forward_batch(params, feats, mask)
    log_std = params["log_std"]
    std = np.exp(log_std)
    new_log_probs = nnet.gaussian_log_prob(means, log_std, actions)
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp(new_log_probs - old_log_probs)
        clipped = np.clip(ratio, 1.0 - config.clip_epsilon, 1.0 + config.clip_epsilon)
        surr_raw = ratio * advantages
        surr_clip = clipped * advantages
        policy_loss = -np.minimum(surr_raw, surr_clip).mean()
        value_err = values - returns
        value_loss = float((value_err ** 2).mean())
        entropy = nnet.gaussian_entropy(log_std)

        # Designs outside the clip interval administer identical items, so the
        # surrogate is flat there; a quadratic penalty on the infeasible excess
        # keeps the design mean from drifting away over that plateau.
        lo, hi = design_clip
        design_means = means[:, 0]
        excess = np.maximum(design_means - hi, 0.0) - np.maximum(lo - design_means, 0.0)
        bound_loss = float((excess ** 2).mean())
        total = (policy_loss + config.value_coef * value_loss
                 - config.entropy_coef * entropy + config.design_bound_coef * bound_loss)

        # Gradient of the min(·,·) surrogate flows only where the raw branch wins.
        raw_active = (surr_raw <= surr_clip).astype(float)
        d_logp = -(raw_active * ratio * advantages) / n  # dLoss/d new_log_probs
        z = (actions - means) / std
        grad_means = d_logp[:, None] * (z / std)
        grad_means[:, 0] += config.design_bound_coef * 2.0 * excess / n
        grad_log_std = (d_logp[:, None] * (z ** 2 - 1.0)).sum(axis=0)
        grad_log_std -= config.entropy_coef * np.ones_like(log_std)
        grad_values = config.value_coef * 2.0 * value_err / n

        grads = nnet.backward_batch(params, cache, grad_means, grad_values)
        grads["log_std"] = grad_log_std
    losses = {
        "total": float(total),
        "policy_loss": float(policy_loss),
        "value_loss": value_loss,
        "entropy": float(entropy),
        "bound_loss": bound_loss,
    }
    return losses, grads


def ppo_update(
    policy: Policy,
    buffer: RolloutBuffer,
    config: PpoConfig,
    rng: np.random.Generator,
    optimizer: nnet.AdamOptimizer,
) -> TrainStats:
    """Run the clipped-surrogate optimization epochs over one rollout.

    Rewards are scaled down inside the trainer before GAE so the squared
    tail-episode returns cannot dominate the value loss; the value head
    therefore predicts scaled returns. Reported episode returns and the
    final-step MSE stay in true reward units.
    """
    t0 = time.perf_counter()
    advantages, returns = gae_from_arrays(
        buffer.rewards * config.reward_scale, buffer.values, buffer.dones,
        config.gamma, config.gae_lambda,
    )
    if config.advantage_normalization:
        advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)

    n = len(buffer)
    snapshot = {k: v.copy() for k, v in policy.params.items()}
    adam_snapshot = (optimizer.t, {k: v.copy() for k, v in optimizer.m.items()},
                     {k: v.copy() for k, v in optimizer.v.items()})
    loss_sums = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0}
    batches = 0
    aborted = False
    for _ in range(config.epochs_per_update):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            losses, grads = ppo_loss_and_grads(
                policy.params, buffer.feats[idx], buffer.mask[idx],
                buffer.actions[idx], buffer.log_probs[idx],
                advantages[idx], returns[idx], config,
                design_clip=buffer.design_clip,
            )
            if not np.isfinite(losses["total"]):
                aborted = True
                break
            nnet.clip_grad_norm(grads, config.max_grad_norm)
            optimizer.step(policy.params, grads)
            for key in loss_sums:
                loss_sums[key] += losses[key]
            batches += 1
        if aborted:
            break
    if aborted:
        # Roll back: a poisoned update is worse than a skipped one.
        policy.params = snapshot
        optimizer.t, optimizer.m, optimizer.v = adam_snapshot

    denom = max(batches, 1)
    return TrainStats(
        update=-1,
        mean_return=float(buffer.episode_returns().mean()),
        policy_loss=loss_sums["policy_loss"] / denom,
        value_loss=loss_sums["value_loss"] / denom,
        entropy=loss_sums["entropy"] / denom,
        final_mse=float(buffer.final_sq_errors.mean()),
        wall_clock_s=time.perf_counter() - t0,
    )


def write_stats_csv(stats: Sequence[TrainStats], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STATS_FIELDS)
        for s in stats:
            writer.writerow(s.as_row())


def read_stats_csv(path: str | Path) -> list[TrainStats]:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out.append(TrainStats(
                update=int(rec["update"]),
                mean_return=float(rec["mean_return"]),
                policy_loss=float(rec["policy_loss"]),
                value_loss=float(rec["value_loss"]),
                entropy=float(rec["entropy"]),
                final_mse=float(rec["final_mse"]),
                wall_clock_s=float(rec["wall_clock_s"]),
            ))
    return out


def train(
    env_config: EnvConfig,
    ppo_config: PpoConfig,
    seed: int,
    net_config: NetConfig | None = None,
    out_dir: str | Path | None = None,
    progress: Callable[[TrainStats], None] | None = None,
    initial_policy: Policy | None = None,
) -> tuple[Policy, list[TrainStats]]:
    """Full training run, reproducible from (configs, seed).

    Writes per-update stats and periodic/final checkpoints under ``out_dir``
    when given. Returns the trained policy and the stats series.
    ``initial_policy`` warm-starts from an existing parameter set (fresh
    optimizer state).
    """
    root = np.random.SeedSequence(seed)
    init_ss, rollout_ss, shuffle_ss = root.spawn(3)
    if initial_policy is not None:
        policy = initial_policy.copy()
        net_config = policy.config
    else:
        net_config = net_config or NetConfig()
        policy = Policy.create(net_config, np.random.default_rng(init_ss))
    optimizer = nnet.AdamOptimizer(policy.params, ppo_config.learning_rate)
    rollout_rngs = [np.random.default_rng(s) for s in rollout_ss.spawn(ppo_config.total_updates)]
    shuffle_rng = np.random.default_rng(shuffle_ss)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "train_config.json").write_text(json.dumps({
            "seed": seed,
            "net": net_config.to_dict(),
            "ppo": ppo_config.to_dict(),
            "env": env_config_to_dict(env_config),
        }, indent=1))

    stats: list[TrainStats] = []
    start = time.perf_counter()
    for update in range(ppo_config.total_updates):
        if ppo_config.anneal_lr:
            # Linear decay damps late-training policy oscillation.
            optimizer.learning_rate = ppo_config.learning_rate * (
                1.0 - update / ppo_config.total_updates)
        try:
            buffer = collect_rollouts(policy, env_config, ppo_config.rollout_episodes,
                                      rollout_rngs[update])
            stat = ppo_update(policy, buffer, ppo_config, shuffle_rng, optimizer)
        except Exception as exc:
            raise RuntimeError(f"training failed at update {update}") from exc
        stat.update = update
        stat.wall_clock_s = time.perf_counter() - start
        stats.append(stat)
        if progress is not None:
            progress(stat)
        if (out_path is not None and ppo_config.checkpoint_interval > 0
                and (update + 1) % ppo_config.checkpoint_interval == 0):
            policy.save(out_path / f"checkpoint_{update + 1:06d}.npz")
    if out_path is not None:
        policy.save(out_path / "checkpoint_final.npz")
        write_stats_csv(stats, out_path / "train_stats.csv")
    return policy, stats


def env_config_to_dict(config: EnvConfig) -> dict:
    if isinstance(config.corruption, env_mod.GaussianNoise):
        corruption = {"mode": "gaussian_noise", "std": config.corruption.std}
    else:
        corruption = {"mode": "nearest_item", "bank": list(config.corruption.bank)}
    return {
        "horizon": config.horizon,
        "prior": config.prior.to_dict(),
        "corruption": corruption,
        "conceal_outcomes": config.conceal_outcomes,
        "design_clip": list(config.design_clip),
    }


def env_config_from_dict(d: dict) -> EnvConfig:
    from .irt import PriorConfig

    corruption_spec = d.get("corruption", {"mode": "gaussian_noise", "std": 0.25})
    if corruption_spec["mode"] == "gaussian_noise":
        corruption = env_mod.GaussianNoise(std=corruption_spec.get("std", 0.25))
    elif corruption_spec["mode"] == "nearest_item":
        corruption = env_mod.NearestItem(bank=tuple(corruption_spec["bank"]))
    else:
        raise ValueError(f"unknown corruption mode {corruption_spec['mode']!r}")
    return EnvConfig(
        horizon=d.get("horizon", 10),
        prior=PriorConfig.from_dict(d["prior"]) if "prior" in d else PriorConfig(),
        corruption=corruption,
        conceal_outcomes=d.get("conceal_outcomes", False),
        design_clip=tuple(d.get("design_clip", (-6.0, 6.0))),
    )
