"""Joint maximum-likelihood calibration of abilities and item difficulties.

Fits the Rasch likelihood of a full response matrix by gradient descent with
adaptive-moment steps, anchoring the shift-invariant gauge with a small L2
penalty on abilities only. The resulting difficulty estimates form the item
bank that deployment-time design requests are snapped to.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .irt import Dataset

ITEM_BANK_SCHEMA_VERSION = 1
PARAM_CLIP = 8.0  # keeps perfect rows/columns from diverging


@dataclass(frozen=True)
class CalibrationConfig:
    learning_rate: float = 0.05
    epochs: int = 500
    batch: int | None = None  # matrix cells per step; None = full batch
    l2_anchor: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch is not None and self.batch < 1:
            raise ValueError("batch must be >= 1 when set")
        if self.l2_anchor < 0:
            raise ValueError("l2_anchor must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def content_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def negative_log_likelihood(
    thetas: np.ndarray,
    difficulties: np.ndarray,
    outcomes: np.ndarray,
    l2_anchor: float = 0.0,
) -> float:
    """Anchored Bernoulli NLL of the full matrix under the Rasch model.

    Uses log(1 + exp(-|x|)) forms so extreme logits stay finite.
    """
    x = thetas[:, None] - difficulties[None, :]
    # log p = -log(1+e^-x), log(1-p) = -x - log(1+e^-x)
    softplus_negx = np.logaddexp(0.0, -x)
    ll = outcomes * (-softplus_negx) + (1 - outcomes) * (-x - softplus_negx)
    return float(-ll.sum() + l2_anchor * (thetas ** 2).sum())


def nll_gradients(
    thetas: np.ndarray,
    difficulties: np.ndarray,
    outcomes: np.ndarray,
    l2_anchor: float = 0.0,
    cell_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of the anchored NLL wrt abilities and difficulties.

    ``cell_mask`` restricts the likelihood term to a subset of matrix cells
    (mini-batch mode); the anchor term is always applied in full.
    """
    x = thetas[:, None] - difficulties[None, :]
    p = 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500)))
    resid = p - outcomes
    if cell_mask is not None:
        resid = resid * cell_mask
    grad_theta = resid.sum(axis=1) + 2.0 * l2_anchor * thetas
    grad_b = -resid.sum(axis=0)
    return grad_theta, grad_b


def fit_mle(
    outcomes: np.ndarray,
    config: CalibrationConfig | None = None,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Jointly estimate abilities and difficulties from a response matrix.

    Returns (theta_hat, b_hat, final anchored NLL). Parameters are clipped
    to +/-8 during optimization, which is where estimates for all-correct or
    all-incorrect slices saturate.
    """
    config = config or CalibrationConfig()
    outcomes = np.asarray(outcomes, dtype=float)
    if outcomes.ndim != 2:
        raise ValueError("response matrix must be 2-D")
    n, m = outcomes.shape
    if np.all(outcomes == outcomes.flat[0]):
        warnings.warn("response matrix is constant; estimates will saturate at the clip bound",
                      stacklevel=2)
    rng = np.random.default_rng(config.seed)
    thetas = np.zeros(n)
    difficulties = np.zeros(m)

    # Adaptive-moment state for the two parameter blocks.
    m_t = [np.zeros(n), np.zeros(m)]
    v_t = [np.zeros(n), np.zeros(m)]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    for epoch in range(config.epochs):
        if config.batch is None or config.batch >= n * m:
            cell_mask = None
        else:
            flat = rng.choice(n * m, size=config.batch, replace=False)
            cell_mask = np.zeros(n * m)
            cell_mask[flat] = 1.0
            cell_mask = cell_mask.reshape(n, m)
        grad_theta, grad_b = nll_gradients(thetas, difficulties, outcomes,
                                           config.l2_anchor, cell_mask)
        step += 1
        # Linear decay to zero removes the terminal oscillation of
        # constant-rate adaptive steps.
        decayed = config.learning_rate * (1.0 - epoch / config.epochs)
        lr_t = decayed * np.sqrt(1 - beta2 ** step) / (1 - beta1 ** step)
        for i, (param, grad) in enumerate(((thetas, grad_theta), (difficulties, grad_b))):
            m_t[i] = beta1 * m_t[i] + (1 - beta1) * grad
            v_t[i] = beta2 * v_t[i] + (1 - beta2) * grad * grad
            param -= lr_t * m_t[i] / (np.sqrt(v_t[i]) + eps)
            np.clip(param, -PARAM_CLIP, PARAM_CLIP, out=param)
        if config.l2_anchor > 0:
            # The likelihood is shift-invariant, so the gauge can be closed
            # exactly: the anchored optimum has mean(theta) = 0.
            shift = thetas.mean()
            thetas -= shift
            difficulties -= shift
            np.clip(thetas, -PARAM_CLIP, PARAM_CLIP, out=thetas)
            np.clip(difficulties, -PARAM_CLIP, PARAM_CLIP, out=difficulties)
    final_nll = negative_log_likelihood(thetas, difficulties, outcomes, config.l2_anchor)
    return thetas, difficulties, final_nll


@dataclass
class ItemBank:
    """Ordered difficulties available at deployment, with provenance."""

    difficulties: np.ndarray
    source: str  # "true" or "estimated"
    provenance: dict

    def __post_init__(self) -> None:
        self.difficulties = np.asarray(self.difficulties, dtype=float)
        if self.difficulties.size == 0:
            raise ValueError("item bank must be non-empty")
        if not np.all(np.isfinite(self.difficulties)):
            raise ValueError("item bank difficulties must be finite")
        if self.source not in ("true", "estimated"):
            raise ValueError("source must be 'true' or 'estimated'")

    def to_dict(self) -> dict:
        return {
            "schema_version": ITEM_BANK_SCHEMA_VERSION,
            "source": self.source,
            "provenance": self.provenance,
            "difficulties": self.difficulties.tolist(),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ItemBank":
        d = json.loads(Path(path).read_text())
        if d.get("schema_version") != ITEM_BANK_SCHEMA_VERSION:
            raise ValueError(f"unsupported item bank schema {d.get('schema_version')}")
        return cls(difficulties=np.asarray(d["difficulties"], dtype=float),
                   source=d["source"], provenance=d["provenance"])


def calibrate_bank(dataset: Dataset, config: CalibrationConfig | None = None) -> ItemBank:
    """Fit the MLE item bank for a dataset, recording provenance."""
    config = config or CalibrationConfig()
    _, b_hat, nll = fit_mle(dataset.outcomes, config)
    return ItemBank(
        difficulties=b_hat,
        source="estimated",
        provenance={
            "dataset": dataset.content_hash(),
            "calibration": config.content_hash(),
            "final_nll": nll,
        },
    )


def true_bank(dataset: Dataset) -> ItemBank:
    return ItemBank(difficulties=dataset.difficulties.copy(), source="true",
                    provenance={"dataset": dataset.content_hash()})


def nearest_item(requested: float, bank: ItemBank) -> tuple[int, float]:
    """Bank index and difficulty closest to the request; ties pick the smaller.

    The returned index refers to the bank's stored order and is stable under
    repeated calls.
    """
    if not np.isfinite(requested):
        raise ValueError("requested design must be finite")
    diffs = bank.difficulties
    idx = min(range(len(diffs)), key=lambda k: (abs(diffs[k] - requested), diffs[k], k))
    return idx, float(diffs[idx])
