"""Evaluation protocol, baselines, and figure-data exporters.

One benchmark run fixes a set of evaluation datasets, calibrates an item
bank per dataset by MLE, then plays batches of adaptive-test episodes
against the nearest-bank-item environment and records the final-step
squared estimation error. Three policy kinds are supported:

* ``adaptive``       - a trained checkpoint acting on revealed outcomes;
* ``non_adaptive``   - a checkpoint trained (and evaluated) with outcomes
                       concealed until the terminal observation;
* ``random``         - designs drawn uniformly from the design interval,
                       with ability estimates produced by a trained
                       adaptive checkpoint's estimator head.

All evaluation uses deterministic mean actions; the final estimate is the
policy's mean estimate on the fully revealed terminal observation.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import env as env_mod
from .calibration import CalibrationConfig, ItemBank, calibrate_bank, true_bank
from .env import Action, EnvConfig, NearestItem, TraceRow
from .irt import Dataset, PriorConfig, generate_dataset
from .nnet import Policy
from .ppo import TrainStats

POLICY_KINDS = ("adaptive", "non_adaptive", "random")

PANEL_FILES = {
    "a": "panel_a_true_vs_inferred_adaptive.csv",
    "b": "panel_b_true_vs_inferred_random.csv",
    "c": "panel_c_true_vs_inferred_non_adaptive.csv",
    "d": "panel_d_single_episode_designs.csv",
    "e": "panel_e_design_gap_by_step.csv",
    "f": "panel_f_learning_curves.csv",
}


@dataclass(frozen=True)
class BenchmarkConfig:
    policy_kind: str
    checkpoints: dict[int, str] = field(default_factory=dict)  # seed -> policy path
    estimator_checkpoints: dict[int, str] = field(default_factory=dict)  # random baseline
    num_datasets: int = 50
    episodes_per_dataset: int = 1000
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    num_students: int = 200
    num_items: int = 50
    horizon: int = 10
    prior: PriorConfig = field(default_factory=PriorConfig)
    design_clip: tuple[float, float] = (-6.0, 6.0)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    use_true_bank: bool = False
    dataset_seed_base: int = 20_250_101
    episode_seed_base: int = 31_415_926

    def __post_init__(self) -> None:
        if self.policy_kind not in POLICY_KINDS:
            raise ValueError(f"policy_kind must be one of {POLICY_KINDS}")
        if min(self.num_datasets, self.episodes_per_dataset, len(self.seeds)) < 1:
            raise ValueError("counts must be >= 1")

    def policy_path(self, seed: int) -> str:
        try:
            return self.checkpoints[seed]
        except KeyError:
            raise FileNotFoundError(
                f"no checkpoint configured for seed {seed} "
                f"(have: {sorted(self.checkpoints)})") from None

    def estimator_path(self, seed: int) -> str:
        try:
            return self.estimator_checkpoints[seed]
        except KeyError:
            raise FileNotFoundError(
                f"no estimator checkpoint configured for seed {seed} "
                f"(have: {sorted(self.estimator_checkpoints)})") from None


def desk_scale_config(policy_kind: str, **overrides) -> BenchmarkConfig:
    """Small preset: 10 datasets x 200 episodes x 3 seeds."""
    defaults = dict(num_datasets=10, episodes_per_dataset=200, seeds=(0, 1, 2))
    defaults.update(overrides)
    return BenchmarkConfig(policy_kind=policy_kind, **defaults)


@dataclass
class BenchmarkResult:
    """Per-episode records plus the aggregates derived from them."""

    policy_kind: str
    seeds: tuple[int, ...]
    true_abilities: np.ndarray      # (S, D, E)
    final_estimates: np.ndarray     # (S, D, E)
    designs: np.ndarray             # (S, D, E, H) requested designs
    corrupted_designs: np.ndarray   # (S, D, E, H) administered difficulties
    provenance: dict = field(default_factory=dict)

    @property
    def squared_errors(self) -> np.ndarray:
        return (self.true_abilities - self.final_estimates) ** 2

    @property
    def per_cell_mse(self) -> np.ndarray:
        """(seed, dataset) MSE table."""
        return self.squared_errors.mean(axis=2)

    @property
    def per_seed_mse(self) -> np.ndarray:
        return self.squared_errors.reshape(len(self.seeds), -1).mean(axis=1)

    @property
    def mse_mean(self) -> float:
        return float(self.squared_errors.mean())

    @property
    def mse_stderr(self) -> float:
        """Standard error across training seeds only."""
        per_seed = self.per_seed_mse
        if len(per_seed) < 2:
            return 0.0
        return float(per_seed.std(ddof=1) / np.sqrt(len(per_seed)))

    def summary(self) -> dict:
        return {
            "policy_kind": self.policy_kind,
            "mse_mean": self.mse_mean,
            "mse_stderr": self.mse_stderr,
            "per_seed_mse": self.per_seed_mse.tolist(),
            "episodes": int(self.true_abilities.size),
            "provenance": self.provenance,
        }

    def write_records_csv(self, path: str | Path) -> None:
        """Self-describing per-episode table; aggregates recompute from it."""
        S, D, E = self.true_abilities.shape
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("seed", "dataset", "episode", "true_ability",
                             "final_estimate", "squared_error"))
            for s in range(S):
                for d in range(D):
                    for e in range(E):
                        writer.writerow((
                            self.seeds[s], d, e,
                            self.true_abilities[s, d, e],
                            self.final_estimates[s, d, e],
                            self.squared_errors[s, d, e],
                        ))


def _file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def evaluation_dataset(config: BenchmarkConfig, dataset_index: int) -> Dataset:
    """Evaluation datasets are shared across seeds and policy kinds."""
    ss = np.random.SeedSequence([config.dataset_seed_base, dataset_index])
    return generate_dataset(config.prior, config.num_students, config.num_items,
                            np.random.default_rng(ss), seed=dataset_index)


def random_designs(
    design_clip: tuple[float, float], n: int, rng: np.random.Generator
) -> np.ndarray:
    """I.i.d. uniform design requests over the clip interval."""
    lo, hi = design_clip
    return rng.uniform(lo, hi, size=n)


def run_episode_batch(
    policy: Policy,
    env_config: EnvConfig,
    n_episodes: int,
    rng: np.random.Generator,
    estimator: Policy | None = None,
    design_rng: np.random.Generator | None = None,
) -> dict:
    """Play a lockstep batch of episodes with deterministic mean actions.

    When ``design_rng`` is given, designs are drawn uniformly from the
    design interval instead of from the policy (the random baseline); the
    estimate fed to the environment still comes from ``estimator``
    (defaulting to ``policy``).

    Returns a dict of arrays: true abilities, final estimates (terminal
    observation, mean action), requested and corrupted designs, and the
    per-step estimates.
    """
    estimator = estimator or policy
    horizon = env_config.horizon
    ep_rngs = rng.spawn(n_episodes)
    states, observations = [], []
    for ep_rng in ep_rngs:
        state, obs = env_mod.reset(env_config, ep_rng)
        states.append(state)
        observations.append(obs)

    designs = np.zeros((n_episodes, horizon))
    corrupted = np.zeros((n_episodes, horizon))
    outcomes = np.zeros((n_episodes, horizon), dtype=int)
    revealed = np.zeros((n_episodes, horizon), dtype=int)
    step_estimates = np.zeros((n_episodes, horizon + 1))

    for t in range(horizon):
        if design_rng is not None:
            step_designs = random_designs(env_config.design_clip, n_episodes, design_rng)
            estimates = estimator.mean_actions(observations)[:, 1]
        else:
            means = policy.mean_actions(observations)
            step_designs = means[:, 0]
            estimates = means[:, 1]
        step_estimates[:, t] = estimates
        next_obs = []
        for i in range(n_episodes):
            action = Action(design=float(step_designs[i]), estimate=float(estimates[i]))
            states[i], obs, _, _ = env_mod.step(states[i], action, env_config, ep_rngs[i])
            next_obs.append(obs)
            designs[i, t] = step_designs[i]
            rec = states[i].history[-1]
            corrupted[i, t] = rec.corrupted_design
            outcomes[i, t] = states[i].true_outcomes[-1]
            revealed[i, t] = rec.outcome_revealed
        observations = next_obs

    final_estimates = estimator.mean_actions(observations)[:, 1]
    step_estimates[:, horizon] = final_estimates
    return {
        "true_abilities": np.array([s.true_ability for s in states]),
        "final_estimates": np.asarray(final_estimates),
        "designs": designs,
        "corrupted_designs": corrupted,
        "outcomes": outcomes,
        "revealed": revealed,
        "step_estimates": step_estimates,
    }


def _bank_for(config: BenchmarkConfig, dataset: Dataset, cache: dict) -> ItemBank:
    key = dataset.content_hash()
    if key not in cache:
        if config.use_true_bank:
            cache[key] = true_bank(dataset)
        else:
            cache[key] = calibrate_bank(dataset, config.calibration)
    return cache[key]


def run_benchmark(config: BenchmarkConfig) -> BenchmarkResult:
    """Full protocol: per (seed, dataset), calibrate a bank and play episodes.

    Deterministic given the config: datasets, banks, and every episode rng
    are derived from fixed seed sequences.
    """
    S, D, E, H = len(config.seeds), config.num_datasets, config.episodes_per_dataset, config.horizon
    true_abilities = np.zeros((S, D, E))
    final_estimates = np.zeros((S, D, E))
    designs = np.zeros((S, D, E, H))
    corrupted = np.zeros((S, D, E, H))

    bank_cache: dict = {}
    provenance: dict = {"checkpoints": {}, "datasets": {}}
    for s_idx, seed in enumerate(config.seeds):
        if config.policy_kind == "random":
            estimator = Policy.load(config.estimator_path(seed))
            policy = estimator
            provenance["checkpoints"][str(seed)] = _file_hash(config.estimator_path(seed))
        else:
            policy = Policy.load(config.policy_path(seed))
            estimator = policy
            provenance["checkpoints"][str(seed)] = _file_hash(config.policy_path(seed))
        for d_idx in range(D):
            dataset = evaluation_dataset(config, d_idx)
            provenance["datasets"][str(d_idx)] = dataset.content_hash()
            bank = _bank_for(config, dataset, bank_cache)
            env_config = EnvConfig(
                horizon=H,
                prior=config.prior,
                corruption=NearestItem(bank=tuple(bank.difficulties)),
                conceal_outcomes=(config.policy_kind == "non_adaptive"),
                design_clip=config.design_clip,
            )
            ep_rng = np.random.default_rng(
                np.random.SeedSequence([config.episode_seed_base, seed, d_idx]))
            design_rng = None
            if config.policy_kind == "random":
                design_rng = np.random.default_rng(
                    np.random.SeedSequence([config.episode_seed_base + 1, seed, d_idx]))
            batch = run_episode_batch(policy, env_config, E, ep_rng,
                                      estimator=estimator, design_rng=design_rng)
            true_abilities[s_idx, d_idx] = batch["true_abilities"]
            final_estimates[s_idx, d_idx] = batch["final_estimates"]
            designs[s_idx, d_idx] = batch["designs"]
            corrupted[s_idx, d_idx] = batch["corrupted_designs"]

    return BenchmarkResult(
        policy_kind=config.policy_kind,
        seeds=tuple(config.seeds),
        true_abilities=true_abilities,
        final_estimates=final_estimates,
        designs=designs,
        corrupted_designs=corrupted,
        provenance=provenance,
    )


def paired_design_traces(
    policy: Policy,
    env_config: EnvConfig,
    n_pairs: int,
    rng: np.random.Generator,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Forced-outcome pairing probe for outcome (in)dependence of designs.

    Each pair replays one episode twice with identical noise streams but
    complementary forced outcomes (all correct vs all incorrect) and
    returns the two requested-design traces.
    """
    pairs = []
    for _ in range(n_pairs):
        pair_seed = int(rng.integers(2 ** 63))
        traces = []
        for forced in (1, 0):
            ep_rng = np.random.default_rng(pair_seed)  # identical stream both runs
            state, obs = env_mod.reset(env_config, ep_rng)
            trace = np.zeros(env_config.horizon)
            for t in range(env_config.horizon):
                action = policy.mean_action(obs)
                trace[t] = action.design
                state, obs, _, _ = env_mod.step(state, action, env_config, ep_rng,
                                                forced_outcome=forced)
            traces.append(trace)
        pairs.append((traces[0], traces[1]))
    return pairs


def episode_trace_rows(batch: dict, episode_index: int) -> list[TraceRow]:
    """Spec'd per-step trace rows for one episode of a benchmark batch."""
    theta = float(batch["true_abilities"][episode_index])
    horizon = batch["designs"].shape[1]
    rows = []
    for t in range(horizon):
        estimate = float(batch["step_estimates"][episode_index, t])
        rows.append(TraceRow(
            t=t + 1,
            design=float(batch["designs"][episode_index, t]),
            corrupted_design=float(batch["corrupted_designs"][episode_index, t]),
            outcome=int(batch["outcomes"][episode_index, t]),
            revealed=int(batch["revealed"][episode_index, t]),
            estimate=estimate,
            reward=env_mod.squared_error_reward(theta, estimate),
            ability=theta,
        ))
    return rows


def _write_panel(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def export_figures(
    out_dir: str | Path,
    results: dict[str, BenchmarkResult] | None = None,
    example_batch: dict | None = None,
    stats_by_seed: Sequence[Sequence[TrainStats]] | None = None,
) -> dict[str, Path]:
    """Write one plain-data CSV per figure panel.

    Missing inputs yield header-only files, so downstream renderers always
    find every panel. Panel (e) reports both the requested and administered
    design gaps by trial index.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = results or {}
    paths = {k: out / name for k, name in PANEL_FILES.items()}

    scatter_header = ("true_ability", "inferred_ability")
    for panel, kind in (("a", "adaptive"), ("b", "random"), ("c", "non_adaptive")):
        rows = []
        if kind in results:
            r = results[kind]
            rows = zip(r.true_abilities.ravel(), r.final_estimates.ravel())
        _write_panel(paths[panel], scatter_header, rows)

    rows = []
    if example_batch is not None:
        rows = [(r.t, r.design, r.corrupted_design, r.ability)
                for r in episode_trace_rows(example_batch, 0)]
    _write_panel(paths["d"], ("t", "design", "corrupted_design", "ability"), rows)

    rows = []
    if "adaptive" in results:
        r = results["adaptive"]
        theta = r.true_abilities[..., None]
        gap_requested = np.abs(r.designs - theta).reshape(-1, r.designs.shape[-1])
        gap_administered = np.abs(r.corrupted_designs - theta).reshape(-1, r.designs.shape[-1])
        rows = [(t + 1, gap_requested[:, t].mean(), gap_administered[:, t].mean())
                for t in range(gap_requested.shape[1])]
    _write_panel(paths["e"], ("t", "mean_abs_design_gap", "mean_abs_administered_gap"), rows)

    rows = []
    if stats_by_seed:
        n_updates = min(len(series) for series in stats_by_seed)
        curves = np.array([[s.final_mse for s in series[:n_updates]]
                           for series in stats_by_seed])
        rows = [(u, curves[:, u].mean(), curves[:, u].std(ddof=0))
                for u in range(n_updates)]
    _write_panel(paths["f"], ("update", "mse_mean", "mse_std"), rows)
    return paths
