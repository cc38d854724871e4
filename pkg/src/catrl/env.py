"""Single-student adaptive-testing episode simulator.

One episode hides a student ability drawn from the prior and runs a fixed
number of trials. Each step takes an action carrying a requested item
difficulty (the design) and an ability estimate, corrupts the design (noise
during training, nearest bank item during deployment), samples the binary
outcome, and pays the negative squared estimation error as reward.

With ``conceal_outcomes`` enabled, outcomes are hidden from observations for
the whole episode and revealed all at once in the terminal observation; this
is the training mode for the non-adaptive baseline.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .irt import PriorConfig, sample_response

OUTCOME_SENTINEL = 0

TRACE_FIELDS = ("t", "design", "corrupted_design", "outcome", "revealed",
                "estimate", "reward", "ability")


@dataclass(frozen=True)
class GaussianNoise:
    """Training-time corruption: additive Gaussian noise on the design."""

    std: float = 0.25

    def __post_init__(self) -> None:
        if not (np.isfinite(self.std) and self.std >= 0):
            raise ValueError("noise std must be finite and >= 0")


@dataclass(frozen=True)
class NearestItem:
    """Deployment-time corruption: snap the design to the closest bank item."""

    bank: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "bank", tuple(float(b) for b in self.bank))
        if len(self.bank) == 0:
            raise ValueError("item bank must be non-empty")
        if not all(np.isfinite(b) for b in self.bank):
            raise ValueError("item bank entries must be finite")


Corruption = Union[GaussianNoise, NearestItem]


@dataclass(frozen=True)
class EnvConfig:
    horizon: int = 10
    prior: PriorConfig = field(default_factory=PriorConfig)
    corruption: Corruption = field(default_factory=GaussianNoise)
    conceal_outcomes: bool = False
    design_clip: tuple[float, float] = (-6.0, 6.0)

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        lo, hi = self.design_clip
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise ValueError("design_clip must be a non-degenerate finite interval")


@dataclass(frozen=True)
class Action:
    """One decision: requested item difficulty plus current ability estimate."""

    design: float
    estimate: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.design) and np.isfinite(self.estimate)):
            raise ValueError("action components must be finite")


@dataclass(frozen=True)
class TrialRecord:
    """One administered trial as it appears in observations."""

    corrupted_design: float
    outcome: int
    outcome_revealed: int

    def features(self) -> tuple[float, float, float]:
        return (self.corrupted_design, float(self.outcome), float(self.outcome_revealed))


Observation = tuple[TrialRecord, ...]


@dataclass(frozen=True)
class EpisodeState:
    true_ability: float
    step: int
    history: tuple[TrialRecord, ...]
    true_outcomes: tuple[int, ...] = ()


def corrupt_design(
    d: float,
    corruption: Corruption,
    rng: np.random.Generator,
    design_clip: tuple[float, float] | None = None,
) -> float:
    """Map a requested design to the administered one.

    Gaussian mode adds noise then clips; nearest-item mode returns the bank
    difficulty with the smallest absolute gap, ties broken toward the smaller
    difficulty. Nearest-item mode consumes no randomness.
    """
    if not np.isfinite(d):
        raise ValueError("design must be finite")
    if isinstance(corruption, GaussianNoise):
        out = d + (rng.normal(0.0, corruption.std) if corruption.std > 0 else 0.0)
        if design_clip is not None:
            out = float(np.clip(out, design_clip[0], design_clip[1]))
        return float(out)
    if isinstance(corruption, NearestItem):
        return min(corruption.bank, key=lambda b: (abs(b - d), b))
    raise TypeError(f"unknown corruption mode: {corruption!r}")


def squared_error_reward(true_ability: float, estimate: float) -> float:
    """Reward for one estimate: never positive, zero only when exact."""
    return -((true_ability - estimate) ** 2)


def observe(state: EpisodeState, config: EnvConfig) -> Observation:
    """Observation for the current state, applying the concealment protocol.

    Pre-terminal observations under concealment carry masked records; the
    terminal observation always exposes every true outcome exactly once.
    """
    if state.step >= config.horizon:
        return tuple(
            replace(rec, outcome=y, outcome_revealed=1)
            for rec, y in zip(state.history, state.true_outcomes)
        )
    return state.history


def reset(config: EnvConfig, rng: np.random.Generator) -> tuple[EpisodeState, Observation]:
    theta = float(rng.normal(config.prior.ability_mean, config.prior.ability_std))
    state = EpisodeState(true_ability=theta, step=0, history=(), true_outcomes=())
    return state, observe(state, config)


def step(
    state: EpisodeState,
    action: Action,
    config: EnvConfig,
    rng: np.random.Generator,
    forced_outcome: int | None = None,
) -> tuple[EpisodeState, Observation, float, bool]:
    """Administer one trial and score the action's ability estimate.

    ``forced_outcome`` substitutes the Bernoulli draw (used by the
    outcome-independence pairing diagnostics); it leaves the corruption noise
    stream untouched.
    """
    if state.step >= config.horizon:
        raise RuntimeError(f"episode already complete after {state.step} steps")
    corrupted = corrupt_design(action.design, config.corruption, rng, config.design_clip)
    if forced_outcome is None:
        y = sample_response(state.true_ability, corrupted, rng)
    else:
        if forced_outcome not in (0, 1):
            raise ValueError("forced_outcome must be 0 or 1")
        y = int(forced_outcome)
    masked = config.conceal_outcomes and (state.step + 1) < config.horizon
    record = TrialRecord(
        corrupted_design=corrupted,
        outcome=OUTCOME_SENTINEL if masked else y,
        outcome_revealed=0 if masked else 1,
    )
    next_state = EpisodeState(
        true_ability=state.true_ability,
        step=state.step + 1,
        history=state.history + (record,),
        true_outcomes=state.true_outcomes + (y,),
    )
    reward = squared_error_reward(state.true_ability, action.estimate)
    done = next_state.step >= config.horizon
    return next_state, observe(next_state, config), reward, done


@dataclass
class TraceRow:
    """One line of an episode trace export."""

    t: int
    design: float
    corrupted_design: float
    outcome: int
    revealed: int
    estimate: float
    reward: float
    ability: float

    def as_tuple(self) -> tuple:
        return (self.t, self.design, self.corrupted_design, self.outcome,
                self.revealed, self.estimate, self.reward, self.ability)


def write_trace_csv(rows: Sequence[TraceRow], path: str | Path) -> None:
    """Write per-step trace records as delimiter-separated text."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_FIELDS)
        for row in rows:
            writer.writerow(row.as_tuple())


def read_trace_csv(path: str | Path) -> list[TraceRow]:
    rows: list[TraceRow] = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(TraceRow(
                t=int(rec["t"]),
                design=float(rec["design"]),
                corrupted_design=float(rec["corrupted_design"]),
                outcome=int(rec["outcome"]),
                revealed=int(rec["revealed"]),
                estimate=float(rec["estimate"]),
                reward=float(rec["reward"]),
                ability=float(rec["ability"]),
            ))
    return rows
