"""Rasch (1PL) response model, priors, and synthetic data generation.

Abilities and item difficulties are plain floats on the logit scale.
Everything downstream (simulation, calibration, benchmarking) builds on the
three primitives here: the logistic success probability, Bernoulli response
sampling, and the p(1-p) item information diagnostic.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATASET_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class PriorConfig:
    """Gaussian priors for student ability and item difficulty."""

    ability_mean: float = 0.0
    ability_std: float = 2.0
    difficulty_mean: float = 0.0
    difficulty_std: float = 2.0

    def __post_init__(self) -> None:
        if not (self.ability_std > 0 and self.difficulty_std > 0):
            raise ValueError("prior standard deviations must be strictly positive")
        for v in (self.ability_mean, self.ability_std, self.difficulty_mean, self.difficulty_std):
            if not np.isfinite(v):
                raise ValueError("prior parameters must be finite")

    def to_dict(self) -> dict:
        return {
            "ability_mean": self.ability_mean,
            "ability_std": self.ability_std,
            "difficulty_mean": self.difficulty_mean,
            "difficulty_std": self.difficulty_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        return cls(**d)


def _check_finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise ValueError(f"{name} must be finite, got {value!r}")


def success_probability(theta, b):
    """P(correct | ability theta, difficulty b) = sigmoid(theta - b).

    Evaluated in branch form so large |theta - b| cannot overflow.
    Accepts scalars or numpy arrays (broadcast).
    """
    _check_finite("theta", theta)
    _check_finite("b", b)
    x = np.asarray(theta, dtype=float) - np.asarray(b, dtype=float)
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def sample_response(theta: float, b: float, rng: np.random.Generator) -> int:
    """Draw a single Bernoulli outcome for one (student, item) trial."""
    p = success_probability(theta, b)
    return int(rng.random() < p)


def item_information(theta, b):
    """Fisher information p(1-p) of a Rasch trial; peaks at b = theta."""
    p = success_probability(theta, b)
    return p * (1.0 - p)


@dataclass
class Dataset:
    """Synthetic student/item population with its binary response matrix."""

    abilities: np.ndarray
    difficulties: np.ndarray
    outcomes: np.ndarray  # shape (num_students, num_items), entries in {0, 1}
    prior: PriorConfig
    seed: int | None = None
    schema_version: int = field(default=DATASET_SCHEMA_VERSION)

    @property
    def num_students(self) -> int:
        return self.outcomes.shape[0]

    @property
    def num_items(self) -> int:
        return self.outcomes.shape[1]

    def validate(self) -> None:
        if self.outcomes.ndim != 2:
            raise ValueError("outcomes must be 2-D")
        if self.abilities.shape != (self.outcomes.shape[0],):
            raise ValueError("abilities length must match outcome rows")
        if self.difficulties.shape != (self.outcomes.shape[1],):
            raise ValueError("difficulties length must match outcome columns")
        values = np.unique(self.outcomes)
        if not np.all(np.isin(values, (0, 1))):
            raise ValueError("outcomes must contain only 0/1 entries")

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "prior": self.prior.to_dict(),
            "abilities": self.abilities.tolist(),
            "difficulties": self.difficulties.tolist(),
            "outcomes": self.outcomes.astype(int).tolist(),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "Dataset":
        ds = cls(
            abilities=np.asarray(d["abilities"], dtype=float),
            difficulties=np.asarray(d["difficulties"], dtype=float),
            outcomes=np.asarray(d["outcomes"], dtype=np.int8),
            prior=PriorConfig.from_dict(d["prior"]),
            seed=d.get("seed"),
            schema_version=d.get("schema_version", DATASET_SCHEMA_VERSION),
        )
        ds.validate()
        return ds

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def content_hash(self) -> str:
        """Stable identifier used for provenance references."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def generate_dataset(
    prior: PriorConfig,
    num_students: int,
    num_items: int,
    rng: np.random.Generator,
    seed: int | None = None,
) -> Dataset:
    """Sample a full synthetic population and its response matrix.

    Abilities and difficulties are drawn i.i.d. from ``prior``; each matrix
    cell is an independent Bernoulli draw from the Rasch model. The draw
    order (abilities, difficulties, then one uniform per cell) is fixed so a
    given rng state always yields a bit-identical dataset.
    """
    if num_students < 1 or num_items < 1:
        raise ValueError("num_students and num_items must be >= 1")
    abilities = rng.normal(prior.ability_mean, prior.ability_std, size=num_students)
    difficulties = rng.normal(prior.difficulty_mean, prior.difficulty_std, size=num_items)
    probs = success_probability(abilities[:, None], difficulties[None, :])
    outcomes = (rng.random(size=(num_students, num_items)) < probs).astype(np.int8)
    ds = Dataset(abilities=abilities, difficulties=difficulties, outcomes=outcomes,
                 prior=prior, seed=seed)
    ds.validate()
    return ds
