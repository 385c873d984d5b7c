"""Linear softmax policy with a value head, trained by a clipped surrogate.

Gradients for the policy, entropy bonus and value loss are computed in closed
form so they can be cross-checked against finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .simkernel import Action, Observation

NUM_ACTIONS = 3
ADV_EPS = 1e-8


class TrainingDivergedError(RuntimeError):
    """Non-finite gradient encountered during a policy update."""


def feature_dim(num_rays: int, num_classes: int) -> int:
    # depths + per-class detection indicator + fraction-new + last action + bias
    return num_rays + num_classes + 5


def featurize(
    obs: Observation,
    detections,
    fraction_new: float,
    last_action: Action | None,
    num_classes: int,
) -> np.ndarray:
    """Frame features for the policy; every entry lands in [0, 1]."""
    depths = np.clip(obs.depths(), 0.0, 1.0)
    indicators = np.zeros(num_classes)
    for det in detections:
        indicators[det.predicted_class] = 1.0
    tail = np.zeros(5)
    tail[0] = min(max(fraction_new, 0.0), 1.0)
    if last_action is not None:
        tail[1 + int(last_action)] = 1.0
    tail[4] = 1.0  # bias
    return np.concatenate([depths, indicators, tail])


@dataclass(frozen=True)
class PolicyParams:
    action_weights: np.ndarray  # (NUM_ACTIONS, D)
    value_weights: np.ndarray  # (D,)
    updates: int = 0

    @classmethod
    def zeros(cls, dim: int) -> "PolicyParams":
        return cls(np.zeros((NUM_ACTIONS, dim)), np.zeros(dim), 0)


def action_probabilities(params: PolicyParams, features: np.ndarray) -> np.ndarray:
    logits = params.action_weights @ features
    logits = logits - logits.max()
    e = np.exp(logits)
    return e / e.sum()


def act(
    params: PolicyParams, features: np.ndarray, rng: np.random.Generator
) -> tuple[Action, float, float]:
    """Sample an action; returns (action, log_prob, value estimate)."""
    probs = action_probabilities(params, features)
    u = rng.random()
    action = int(min(np.searchsorted(np.cumsum(probs), u, side="right"), NUM_ACTIONS - 1))
    value = float(params.value_weights @ features)
    return Action(action), float(np.log(probs[action])), value


@dataclass(frozen=True)
class TrainConfig:
    horizon: int = 100
    minibatches: int = 36
    epochs: int = 1
    entropy_coeff: float = 0.001
    value_coeff: float = 0.5
    learning_rate: float = 1e-5
    clip_ratio: float = 0.2
    discount: float = 0.99
    episode_len: int = 500
    parallel_envs: int | None = None  # defaults to one env per training scene
    total_env_steps: int = 60_000

    def validate(self) -> None:
        positives = (
            self.horizon,
            self.minibatches,
            self.epochs,
            self.entropy_coeff,
            self.value_coeff,
            self.learning_rate,
            self.discount,
            self.episode_len,
            self.total_env_steps,
        )
        if any(v <= 0 for v in positives):
            raise ValueError("all train config values must be positive")
        if not 0 < self.clip_ratio < 1:
            raise ValueError("clip ratio must be in (0, 1)")


@dataclass
class RolloutSegment:
    """One env's slice of experience for a single update."""

    features: np.ndarray  # (T, D)
    actions: np.ndarray  # (T,)
    log_probs: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    values: np.ndarray  # (T,)
    bootstrap_value: float


def segment_returns(segment: RolloutSegment, discount: float) -> np.ndarray:
    """Discounted returns bootstrapped from the value at segment end."""
    returns = np.empty_like(segment.rewards)
    acc = segment.bootstrap_value
    for t in range(len(segment.rewards) - 1, -1, -1):
        acc = segment.rewards[t] + discount * acc
        returns[t] = acc
    return returns


@dataclass
class UpdateBatch:
    features: np.ndarray
    actions: np.ndarray
    log_probs_old: np.ndarray
    returns: np.ndarray
    advantages: np.ndarray  # normalized


def assemble_batch(segments: list[RolloutSegment], cfg: TrainConfig) -> UpdateBatch:
    features = np.concatenate([s.features for s in segments])
    actions = np.concatenate([s.actions for s in segments])
    log_probs = np.concatenate([s.log_probs for s in segments])
    returns = np.concatenate([segment_returns(s, cfg.discount) for s in segments])
    values = np.concatenate([s.values for s in segments])
    raw_adv = returns - values
    advantages = (raw_adv - raw_adv.mean()) / (raw_adv.std() + ADV_EPS)
    return UpdateBatch(features, actions, log_probs, returns, advantages)


@dataclass
class ReturnStats:
    """Running scale of discounted returns; the value head learns in z-units.

    Reward magnitudes differ by orders of magnitude across reward kinds, and a
    fixed-step value head cannot track hundred-scale targets. Standardizing
    the targets leaves the policy update invariant (advantages are normalized
    per batch anyway) while keeping the baseline learnable everywhere.
    """

    mean: float = 0.0
    sq_mean: float = 1.0
    initialized: bool = False
    alpha: float = 0.1

    @property
    def sigma(self) -> float:
        return float(np.sqrt(max(self.sq_mean - self.mean**2, 1e-8)))

    def update(self, returns: np.ndarray) -> None:
        m, s = float(returns.mean()), float(np.mean(returns**2))
        if not self.initialized:
            self.mean, self.sq_mean, self.initialized = m, s, True
        else:
            self.mean = (1 - self.alpha) * self.mean + self.alpha * m
            self.sq_mean = (1 - self.alpha) * self.sq_mean + self.alpha * s

    def normalize(self, returns: np.ndarray) -> np.ndarray:
        return (returns - self.mean) / self.sigma

    def denormalize(self, value: float) -> float:
        return value * self.sigma + self.mean


def assemble_batch_standardized(
    segments: list[RolloutSegment], cfg: TrainConfig, stats: ReturnStats
) -> UpdateBatch:
    """Like assemble_batch, but value targets and baselines live in z-units.

    Segment bootstrap values come from the value head (z-units) and are mapped
    back to reward units before discounting.
    """
    raw_returns = []
    for s in segments:
        boot = stats.denormalize(s.bootstrap_value) if stats.initialized else s.bootstrap_value
        raw = np.empty_like(s.rewards)
        acc = boot
        for t in range(len(s.rewards) - 1, -1, -1):
            acc = s.rewards[t] + cfg.discount * acc
            raw[t] = acc
        raw_returns.append(raw)
    returns_raw = np.concatenate(raw_returns)
    stats.update(returns_raw)
    returns = stats.normalize(returns_raw)
    features = np.concatenate([s.features for s in segments])
    actions = np.concatenate([s.actions for s in segments])
    log_probs = np.concatenate([s.log_probs for s in segments])
    values = np.concatenate([s.values for s in segments])
    raw_adv = returns - values
    advantages = (raw_adv - raw_adv.mean()) / (raw_adv.std() + ADV_EPS)
    return UpdateBatch(features, actions, log_probs, returns, advantages)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def surrogate_objective(
    action_weights: np.ndarray,
    value_weights: np.ndarray,
    batch: UpdateBatch,
    cfg: TrainConfig,
) -> float:
    """Clipped surrogate + entropy bonus - value loss; ascend this."""
    probs = _softmax_rows(batch.features @ action_weights.T)
    n = len(batch.actions)
    log_p = np.log(probs[np.arange(n), batch.actions])
    ratio = np.exp(log_p - batch.log_probs_old)
    clipped = np.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio)
    surr = np.minimum(ratio * batch.advantages, clipped * batch.advantages)
    entropy = -(probs * np.log(probs + 1e-300)).sum(axis=1)
    value_err = batch.features @ value_weights - batch.returns
    return float(
        surr.mean() + cfg.entropy_coeff * entropy.mean() - cfg.value_coeff * (value_err**2).mean()
    )


def _objective_grads(
    action_weights: np.ndarray,
    value_weights: np.ndarray,
    batch: UpdateBatch,
    cfg: TrainConfig,
) -> tuple[np.ndarray, np.ndarray]:
    n = len(batch.actions)
    probs = _softmax_rows(batch.features @ action_weights.T)
    log_p = np.log(probs[np.arange(n), batch.actions])
    ratio = np.exp(log_p - batch.log_probs_old)
    unclipped = ratio * batch.advantages
    clipped = np.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio) * batch.advantages
    # Gradient flows only where the unclipped branch is active; inside the clip
    # window both branches coincide.
    coef = np.where(unclipped <= clipped, ratio * batch.advantages, 0.0)
    onehot = np.zeros((n, NUM_ACTIONS))
    onehot[np.arange(n), batch.actions] = 1.0
    dlogp = onehot - probs  # (N, A): d log p_a / d logits
    entropy = -(probs * np.log(probs + 1e-300)).sum(axis=1, keepdims=True)
    dentropy = -probs * (np.log(probs + 1e-300) + entropy)  # (N, A)
    dlogits = coef[:, None] * dlogp + cfg.entropy_coeff * dentropy
    grad_w = dlogits.T @ batch.features / n
    value_err = batch.features @ value_weights - batch.returns
    grad_v = -cfg.value_coeff * 2.0 * (batch.features * value_err[:, None]).mean(axis=0)
    return grad_w, grad_v


def policy_update(
    params: PolicyParams,
    segments: list[RolloutSegment],
    cfg: TrainConfig,
    return_stats: ReturnStats | None = None,
) -> PolicyParams:
    """One gradient-ascent pass over the batch, split into minibatches."""
    cfg.validate()
    if return_stats is None:
        batch = assemble_batch(segments, cfg)
    else:
        batch = assemble_batch_standardized(segments, cfg, return_stats)
    w = params.action_weights.copy()
    v = params.value_weights.copy()
    n = len(batch.actions)
    bounds = np.linspace(0, n, min(cfg.minibatches, n) + 1).astype(int)
    for _ in range(cfg.epochs):
        for lo, hi in zip(bounds, bounds[1:]):
            if hi == lo:
                continue
            mb = UpdateBatch(
                batch.features[lo:hi],
                batch.actions[lo:hi],
                batch.log_probs_old[lo:hi],
                batch.returns[lo:hi],
                batch.advantages[lo:hi],
            )
            grad_w, grad_v = _objective_grads(w, v, mb, cfg)
            if not (np.isfinite(grad_w).all() and np.isfinite(grad_v).all()):
                raise TrainingDivergedError(
                    f"non-finite gradient at update {params.updates}, minibatch [{lo}:{hi}]"
                )
            w += cfg.learning_rate * grad_w
            v += cfg.learning_rate * grad_v
    return PolicyParams(w, v, params.updates + 1)


@dataclass
class ForwardModel:
    """Online linear predictor of the next depth frame from (depths, action)."""

    weights: np.ndarray  # (R, R + NUM_ACTIONS)
    learning_rate: float = 0.5

    @classmethod
    def zeros(cls, num_rays: int, learning_rate: float = 0.5) -> "ForwardModel":
        return cls(np.zeros((num_rays, num_rays + NUM_ACTIONS)), learning_rate)


def _fm_input(depths: np.ndarray, action: Action) -> np.ndarray:
    onehot = np.zeros(NUM_ACTIONS)
    onehot[int(action)] = 1.0
    return np.concatenate([depths, onehot])


def fm_reward(fm: ForwardModel, depths: np.ndarray, action: Action, depths_next: np.ndarray) -> float:
    """Mean squared error of the model's prediction for this transition."""
    pred = fm.weights @ _fm_input(depths, action)
    return float(np.mean((depths_next - pred) ** 2))


def fm_update(
    fm: ForwardModel, depths: np.ndarray, action: Action, depths_next: np.ndarray
) -> ForwardModel:
    """One gradient step on the same transition; call after fm_reward."""
    x = _fm_input(depths, action)
    err = depths_next - fm.weights @ x
    grad = np.outer(err, x) * (2.0 / len(depths_next))
    return ForwardModel(fm.weights + fm.learning_rate * grad, fm.learning_rate)


def policy_to_json(params: PolicyParams, extra: dict | None = None) -> str:
    doc = {
        "action_weights": params.action_weights.tolist(),
        "value_weights": params.value_weights.tolist(),
        "updates": params.updates,
    }
    if extra:
        doc["config"] = extra
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def policy_from_json(text: str) -> PolicyParams:
    doc = json.loads(text)
    return PolicyParams(
        np.array(doc["action_weights"], dtype=float),
        np.array(doc["value_weights"], dtype=float),
        doc["updates"],
    )
