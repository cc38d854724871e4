"""Dense policy/value network over variable-length trial histories.

The encoder applies four shared ReLU layers to each trial record, mean-pools
across trials (an empty history pools to zeros), passes the pooled vector
through an output layer, and feeds two separate two-layer heads: one emitting
the action mean (design, estimate), one emitting the scalar value. Action
noise is a diagonal Gaussian with state-independent log standard deviations.

Forward and backward passes are written directly in numpy; gradients are
exact and are checked against central finite differences in the test suite.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import Action, Observation

CHECKPOINT_SCHEMA_VERSION = 1

NUM_ENCODER_LAYERS = 4
FEATURE_DIM = 3  # (corrupted design, outcome, revealed flag)
ACTION_DIM = 2  # (design, estimate)

Params = dict[str, np.ndarray]


class NumericalError(RuntimeError):
    """Raised when a forward pass produces non-finite activations."""


@dataclass(frozen=True)
class NetConfig:
    hidden: int = 64

    def to_dict(self) -> dict:
        return {"hidden": self.hidden}

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


def _layer_shapes(config: NetConfig) -> list[tuple[str, int, int]]:
    h = config.hidden
    shapes = []
    fan_in = FEATURE_DIM
    for i in range(NUM_ENCODER_LAYERS):
        shapes.append((f"enc{i}", fan_in, h))
        fan_in = h
    shapes.append(("post", h, h))
    shapes.append(("pol0", h, h))
    shapes.append(("pol1", h, ACTION_DIM))
    shapes.append(("val0", h, h))
    shapes.append(("val1", h, 1))
    return shapes


def param_names(config: NetConfig) -> list[str]:
    names = []
    for name, _, _ in _layer_shapes(config):
        names.extend([f"{name}.W", f"{name}.b"])
    names.append("log_std")
    return names


def init_params(config: NetConfig, rng: np.random.Generator) -> Params:
    """He-uniform weights for ReLU layers; final head layers start at zero.

    Zero-initialized heads make the initial mean action (0, 0) and value 0,
    so an untrained policy requests the prior-mean design and guesses the
    prior mean ability.
    """
    params: Params = {}
    for name, fan_in, fan_out in _layer_shapes(config):
        if name in ("pol1", "val1"):
            params[f"{name}.W"] = np.zeros((fan_in, fan_out))
        else:
            limit = np.sqrt(6.0 / fan_in)
            params[f"{name}.W"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params[f"{name}.b"] = np.zeros(fan_out)
    params["log_std"] = np.zeros(ACTION_DIM)
    return params


def zeros_like_params(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def pad_observations(observations: Sequence[Observation]) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length histories into (B, T, F) features and a (B, T) mask."""
    batch = len(observations)
    max_len = max((len(obs) for obs in observations), default=0)
    max_len = max(max_len, 1)
    feats = np.zeros((batch, max_len, FEATURE_DIM))
    mask = np.zeros((batch, max_len))
    for i, obs in enumerate(observations):
        for t, rec in enumerate(obs):
            feats[i, t, :] = rec.features()
            mask[i, t] = 1.0
    return feats, mask


def forward_batch(params: Params, feats: np.ndarray, mask: np.ndarray):
    """Evaluate the network on a padded batch.

    Returns (means (B, 2), values (B,), cache); the cache holds every
    intermediate needed by ``backward_batch``.
    """
    batch, max_len, _ = feats.shape
    flat = feats.reshape(batch * max_len, FEATURE_DIM)
    enc_inputs = []
    h = flat
    for i in range(NUM_ENCODER_LAYERS):
        enc_inputs.append(h)
        z = h @ params[f"enc{i}.W"] + params[f"enc{i}.b"]
        h = np.maximum(z, 0.0)
    emb = h.reshape(batch, max_len, -1)
    counts = np.maximum(mask.sum(axis=1), 1.0)
    pooled = (emb * mask[:, :, None]).sum(axis=1) / counts[:, None]

    z_post = pooled @ params["post.W"] + params["post.b"]
    h_post = np.maximum(z_post, 0.0)

    z_pol = h_post @ params["pol0.W"] + params["pol0.b"]
    h_pol = np.maximum(z_pol, 0.0)
    means = h_pol @ params["pol1.W"] + params["pol1.b"]

    z_val = h_post @ params["val0.W"] + params["val0.b"]
    h_val = np.maximum(z_val, 0.0)
    values = (h_val @ params["val1.W"] + params["val1.b"])[:, 0]

    cache = {
        "feats_shape": feats.shape,
        "mask": mask,
        "counts": counts,
        "enc_inputs": enc_inputs,
        "enc_out": h,
        "pooled": pooled,
        "h_post": h_post,
        "h_pol": h_pol,
        "h_val": h_val,
    }
    if not (np.all(np.isfinite(means)) and np.all(np.isfinite(values))):
        raise NumericalError(_diagnose_nonfinite(cache, means, values))
    return means, values, cache


def _diagnose_nonfinite(cache, means, values) -> str:
    for i, inp in enumerate(cache["enc_inputs"]):
        if not np.all(np.isfinite(inp)):
            return f"non-finite activations entering encoder layer {i}"
    for name in ("enc_out", "pooled", "h_post", "h_pol", "h_val"):
        if not np.all(np.isfinite(cache[name])):
            return f"non-finite activations at stage '{name}'"
    if not np.all(np.isfinite(means)):
        return "non-finite action means at the policy head output"
    return "non-finite value at the value head output"


def backward_batch(
    params: Params,
    cache: dict,
    grad_means: np.ndarray,
    grad_values: np.ndarray,
) -> Params:
    """Exact reverse-mode gradients for every weight and bias.

    ``grad_means`` is dLoss/dmeans (B, 2) and ``grad_values`` dLoss/dvalue
    (B,). The returned dict covers all parameters; ``log_std`` gets zeros
    here because its gradient enters through the loss, not the network.
    """
    grads = zeros_like_params(params)
    h_pol, h_val, h_post = cache["h_pol"], cache["h_val"], cache["h_post"]

    grads["pol1.W"] = h_pol.T @ grad_means
    grads["pol1.b"] = grad_means.sum(axis=0)
    d_hpol = grad_means @ params["pol1.W"].T
    d_zpol = d_hpol * (h_pol > 0)
    grads["pol0.W"] = h_post.T @ d_zpol
    grads["pol0.b"] = d_zpol.sum(axis=0)

    gv = grad_values[:, None]
    grads["val1.W"] = h_val.T @ gv
    grads["val1.b"] = gv.sum(axis=0)
    d_hval = gv @ params["val1.W"].T
    d_zval = d_hval * (h_val > 0)
    grads["val0.W"] = h_post.T @ d_zval
    grads["val0.b"] = d_zval.sum(axis=0)

    d_hpost = d_zpol @ params["pol0.W"].T + d_zval @ params["val0.W"].T
    d_zpost = d_hpost * (h_post > 0)
    grads["post.W"] = cache["pooled"].T @ d_zpost
    grads["post.b"] = d_zpost.sum(axis=0)
    d_pooled = d_zpost @ params["post.W"].T

    # Mean pooling spreads each pooled gradient uniformly over real trials.
    batch, max_len, _ = cache["feats_shape"]
    mask, counts = cache["mask"], cache["counts"]
    d_emb = d_pooled[:, None, :] * (mask / counts[:, None])[:, :, None]
    d_h = d_emb.reshape(batch * max_len, -1)

    for i in reversed(range(NUM_ENCODER_LAYERS)):
        # Layer i's output is layer i+1's cached input.
        h_out = cache["enc_inputs"][i + 1] if i + 1 < NUM_ENCODER_LAYERS else cache["enc_out"]
        d_z = d_h * (h_out > 0)
        grads[f"enc{i}.W"] = cache["enc_inputs"][i].T @ d_z
        grads[f"enc{i}.b"] = d_z.sum(axis=0)
        d_h = d_z @ params[f"enc{i}.W"].T
    return grads


def encode_observation(params: Params, observation: Observation) -> np.ndarray:
    """Pooled-and-projected latent for a single history (diagnostic surface)."""
    feats, mask = pad_observations([observation])
    _, _, cache = forward_batch(params, feats, mask)
    return cache["h_post"][0].copy()


@dataclass(frozen=True)
class ActionDistribution:
    """Diagonal Gaussian over (design, estimate)."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        if not np.all(self.std > 0):
            raise ValueError("distribution std must be strictly positive")


LOG_TWO_PI = float(np.log(2.0 * np.pi))


def gaussian_log_prob(mean: np.ndarray, log_std: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Diagonal-Gaussian log density, summed over action dimensions."""
    std = np.exp(log_std)
    z = (actions - mean) / std
    return -0.5 * (z ** 2 + LOG_TWO_PI).sum(axis=-1) - log_std.sum()


def gaussian_entropy(log_std: np.ndarray) -> float:
    """Entropy of the diagonal Gaussian (independent of the mean)."""
    return float(log_std.sum() + 0.5 * log_std.size * (1.0 + LOG_TWO_PI))


def sample_gaussian(mean: np.ndarray, log_std: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return mean + np.exp(log_std) * rng.standard_normal(mean.shape)


class Policy:
    """Parameter set plus convenience evaluation methods."""

    def __init__(self, config: NetConfig, params: Params):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: NetConfig, rng: np.random.Generator) -> "Policy":
        return cls(config, init_params(config, rng))

    def distribution(self, observations: Sequence[Observation]) -> tuple[ActionDistribution, np.ndarray]:
        feats, mask = pad_observations(observations)
        means, values, _ = forward_batch(self.params, feats, mask)
        std = np.exp(self.params["log_std"])
        return ActionDistribution(mean=means, std=np.broadcast_to(std, means.shape)), values

    def act(
        self, observations: Sequence[Observation], rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Sample actions for a batch of histories.

        Returns (actions (B, 2), log_probs (B,), values (B,)).
        """
        dist, values = self.distribution(observations)
        actions = sample_gaussian(dist.mean, self.params["log_std"], rng)
        log_probs = gaussian_log_prob(dist.mean, self.params["log_std"], actions)
        return actions, log_probs, values

    def mean_actions(self, observations: Sequence[Observation]) -> np.ndarray:
        """Deterministic (exploration-free) actions, one row per history."""
        dist, _ = self.distribution(observations)
        return dist.mean

    def mean_action(self, observation: Observation) -> Action:
        mean = self.mean_actions([observation])[0]
        return Action(design=float(mean[0]), estimate=float(mean[1]))

    def copy(self) -> "Policy":
        return Policy(self.config, {k: v.copy() for k, v in self.params.items()})

    def save(self, path: str | Path) -> None:
        save_checkpoint(self.config, self.params, path)

    @classmethod
    def load(cls, path: str | Path) -> "Policy":
        config, params = load_checkpoint(path)
        return cls(config, params)


class AdamOptimizer:
    """Adaptive-moment gradient descent with bias correction.

    Operates on name -> array parameter dicts; the moment estimates live in
    this object, so one optimizer instance must stay paired with one
    parameter set for the whole run.
    """

    def __init__(self, params: Params, learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = zeros_like_params(params)
        self.v = zeros_like_params(params)

    def step(self, params: Params, grads: Params) -> None:
        self.t += 1
        lr_t = self.learning_rate * np.sqrt(1.0 - self.beta2 ** self.t) / (1.0 - self.beta1 ** self.t)
        for name, g in grads.items():
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            params[name] -= lr_t * self.m[name] / (np.sqrt(self.v[name]) + self.eps)


def clip_grad_norm(grads: Params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def save_checkpoint(config: NetConfig, params: Params, path: str | Path) -> None:
    """Versioned container with a config echo and the raw parameter arrays."""
    meta = json.dumps({
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "net": config.to_dict(),
        "param_names": sorted(params.keys()),
    })
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(meta.encode(), dtype=np.uint8), **params)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[NetConfig, Params]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta["schema_version"] != CHECKPOINT_SCHEMA_VERSION:
            raise ValueError(f"unsupported checkpoint schema {meta['schema_version']}")
        config = NetConfig.from_dict(meta["net"])
        params = {k: data[k].copy() for k in meta["param_names"]}
    expected = set(param_names(config))
    if set(params) != expected:
        raise ValueError("checkpoint parameter set does not match its config")
    return config, params
