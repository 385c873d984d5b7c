"""Rollout environments, the policy training loop and greedy lookahead policies.

Each environment owns one scene, its own RNG and its own per-episode state, so
rollouts reduce deterministically in env order no matter how work is scheduled.
The unsupervised phase only ever sees a BlindDetector: predicted classes and
confidences, never ground-truth labels.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import semmap
from .detector import BlindDetector, DetectorModel
from .explore import (
    Action,
    ForwardModel,
    PolicyParams,
    ReturnStats,
    RolloutSegment,
    TrainConfig,
    act,
    featurize,
    feature_dim,
    fm_reward,
    fm_update,
    policy_update,
    segment_returns,
)
from .semmap import (
    REWARD_COVERAGE,
    REWARD_NONE,
    REWARD_OBJECT_COUNT,
    REWARD_PREDICTION_ERROR,
    REWARD_SEMANTIC_CURIOSITY,
    RewardConfig,
    SemanticMap,
)
from .simkernel import HEADING_STEP_DEG, Observation, Pose, SensorParams, _draw_free_pose, render, step
from .worldgen import FREE, Scene

# Reward kinds whose feature stream tracks semantic-map growth. The coverage
# kind must never touch the semantic tensor, so its novelty feature comes from
# the explored mask instead.
_SEMANTIC_FRACTION_KINDS = (REWARD_SEMANTIC_CURIOSITY, REWARD_OBJECT_COUNT, REWARD_PREDICTION_ERROR)


class RolloutEnv:
    """One scene's rollout state for a fixed reward kind."""

    def __init__(
        self,
        scene: Scene,
        reward_kind: str,
        model: DetectorModel,
        sensor: SensorParams,
        reward_cfg: RewardConfig,
        seed: int | np.random.SeedSequence,
        episode_len: int,
        fm_learning_rate: float = 0.5,
    ):
        if reward_kind not in semmap.REWARD_KINDS:
            raise ValueError(f"unknown reward kind {reward_kind!r}")
        self.scene = scene
        self.kind = reward_kind
        self.sensor = sensor
        self.reward_cfg = reward_cfg
        self.episode_len = episode_len
        self.rng = np.random.default_rng(seed)
        self.detector = BlindDetector(model, scene)
        self.num_classes = scene.num_classes
        # Forward model persists across episodes, like a jointly-trained
        # curiosity module; maps reset with each episode.
        self.fm = ForwardModel.zeros(sensor.num_rays, fm_learning_rate)
        self.pose: Pose | None = None
        self.obs: Observation | None = None
        self.smap: SemanticMap | None = None
        self.features: np.ndarray | None = None
        self.episode_steps = 0
        # Render/detect memo: both are pure in (scene, pose), and greedy
        # lookahead revisits the same few candidate poses over and over.
        self._render_cache: dict = {}
        self._detect_cache: dict = {}
        self._cache_cap = 20000
        self.reset()

    def _render(self, pose: Pose) -> Observation:
        key = (pose.x, pose.y, pose.heading)
        obs = self._render_cache.get(key)
        if obs is None:
            obs = render(self.scene, pose, self.sensor)
            if len(self._render_cache) >= self._cache_cap:
                self._render_cache.pop(next(iter(self._render_cache)))
            self._render_cache[key] = obs
        return obs

    # -- episode management -------------------------------------------------

    def reset(self, start_pose: Pose | None = None) -> None:
        self.pose = start_pose if start_pose is not None else _draw_free_pose(self.scene, self.rng)
        self.smap = SemanticMap.for_scene(self.scene)
        self.episode_steps = 0
        self.obs = self._render(self.pose)
        self._ingest_frame(self.obs, last_action=None)

    def _detect(self, obs: Observation, pose: Pose):
        if self.kind == REWARD_NONE:
            return []
        key = (pose.x, pose.y, pose.heading)
        dets = self._detect_cache.get(key)
        if dets is None:
            dets = self.detector.detect(obs, pose)
            if len(self._detect_cache) >= self._cache_cap:
                self._detect_cache.pop(next(iter(self._detect_cache)))
            self._detect_cache[key] = dets
        return dets

    def _ingest_frame(self, obs: Observation, last_action: Action | None):
        """Fold a frame into the map and refresh the policy features."""
        detections = self._detect(obs, self.pose)
        if self.kind in _SEMANTIC_FRACTION_KINDS:
            proj = semmap.ego_project(obs, detections, self.pose)
            geo = semmap.to_geocentric(proj, self.pose, (self.scene.width, self.scene.height))
            _, delta_sem, delta_explored = semmap.update(self.smap, geo, set(obs.visible_cells))
            det_cells = sum(len(d.cells) for d in detections)
            if det_cells:
                fraction_new = delta_sem / det_cells
            else:
                # The labeled-cell fraction is undefined without detections;
                # fall back to plain view novelty so the channel still tells
                # the policy whether it is looking at anything new.
                fraction_new = delta_explored / len(obs.visible_cells) if obs.visible_cells else 0.0
        else:
            # coverage and none: explored mask only, semantic tensor untouched
            _, delta_sem, delta_explored = semmap.update(self.smap, [], set(obs.visible_cells))
            fraction_new = delta_explored / len(obs.visible_cells) if obs.visible_cells else 0.0
        self.features = featurize(obs, detections, fraction_new, last_action, self.num_classes)
        return detections, delta_sem, delta_explored

    # -- stepping -----------------------------------------------------------

    def apply_action(self, action: Action) -> tuple[float, dict]:
        """Advance one step; returns (reward for this transition, diagnostics)."""
        prev_depths = self.obs.depths()
        new_pose = step(self.scene, self.pose, action, self.sensor)
        new_obs = self._render(new_pose)
        self.pose = new_pose
        detections, delta_sem, delta_explored = self._ingest_frame(new_obs, last_action=action)
        if self.kind == REWARD_SEMANTIC_CURIOSITY:
            reward = semmap.semantic_curiosity_reward(delta_sem, self.reward_cfg)
        elif self.kind == REWARD_COVERAGE:
            reward = semmap.coverage_reward(delta_explored)
        elif self.kind == REWARD_OBJECT_COUNT:
            reward = semmap.object_count_reward(detections)
        elif self.kind == REWARD_PREDICTION_ERROR:
            reward = fm_reward(self.fm, prev_depths, action, new_obs.depths())
            self.fm = fm_update(self.fm, prev_depths, action, new_obs.depths())
        else:
            reward = 0.0
        self.obs = new_obs
        self.episode_steps += 1
        diag = {
            "pose": self.pose,
            "obs": new_obs,
            "detections": detections,
            "delta_sem": delta_sem,
            "delta_explored": delta_explored,
        }
        if self.episode_steps >= self.episode_len:
            self.reset()
        return reward, diag

    # -- greedy lookahead ---------------------------------------------------

    def simulate_action(self, action: Action) -> tuple[float, Pose, Observation]:
        """Reward this action would earn right now; no state is touched."""
        return self._simulate_from(self.pose, self.smap, action)

    def novelty_lookahead(self, pose: Pose, explored: np.ndarray, action: Action, depth: int) -> float:
        """Discounted newly-explored-cell lookahead; no state is touched."""
        new_pose = step(self.scene, pose, action, self.sensor)
        new_obs = self._render(new_pose)
        fresh = [c for c in new_obs.visible_cells if not explored[c[0], c[1]]]
        value = float(len(fresh))
        if depth <= 1:
            return value
        next_explored = explored.copy()
        for x, y in fresh:
            next_explored[x, y] = True
        best = max(
            self.novelty_lookahead(new_pose, next_explored, a, depth - 1) for a in _ACTION_ORDER
        )
        return value + LOOKAHEAD_DISCOUNT * best

    def frontier_action(self, pose: Pose) -> Action | None:
        """First action of the shortest free-cell path to an unexplored cell.

        Returns None when every reachable free cell is already explored.
        """
        grid = self.scene.grid
        start = (int(np.floor(pose.x)), int(np.floor(pose.y)))
        explored = self.smap.explored
        parents: dict[tuple[int, int], tuple[int, int]] = {start: start}
        queue = deque([start])
        goal = None
        while queue:
            cx, cy = queue.popleft()
            if not explored[cx, cy]:
                goal = (cx, cy)
                break
            for nx, ny in ((cx + 1, cy), (cx - 1, cy), (cx, cy + 1), (cx, cy - 1)):
                if (nx, ny) not in parents and grid[nx, ny] == FREE:
                    parents[(nx, ny)] = (cx, cy)
                    queue.append((nx, ny))
        if goal is None:
            return None
        node = goal
        while parents[node] != start and node != start:
            node = parents[node]
        if node == start:
            return None
        desired = math.degrees(math.atan2(node[1] + 0.5 - pose.y, node[0] + 0.5 - pose.x))
        diff = (desired - pose.heading * HEADING_STEP_DEG) % 360.0
        if diff <= 15.0 or diff >= 345.0:
            if step(self.scene, pose, Action.FORWARD, self.sensor) != pose:
                return Action.FORWARD
            return Action.TURN_LEFT
        return Action.TURN_RIGHT if diff < 180.0 else Action.TURN_LEFT

    def _simulate_from(self, pose: Pose, smap: SemanticMap, action: Action):
        new_pose = step(self.scene, pose, action, self.sensor)
        new_obs = self._render(new_pose)
        if self.kind == REWARD_SEMANTIC_CURIOSITY:
            detections = self._detect(new_obs, new_pose)
            proj = semmap.ego_project(new_obs, detections, new_pose)
            geo = semmap.to_geocentric(proj, new_pose, (self.scene.width, self.scene.height))
            delta_sem, _ = semmap.peek_update(smap, geo, set(new_obs.visible_cells))
            reward = semmap.semantic_curiosity_reward(delta_sem, self.reward_cfg)
        elif self.kind == REWARD_COVERAGE:
            _, delta_explored = semmap.peek_update(smap, [], set(new_obs.visible_cells))
            reward = semmap.coverage_reward(delta_explored)
        elif self.kind == REWARD_OBJECT_COUNT:
            detections = self._detect(new_obs, new_pose)
            reward = semmap.object_count_reward(detections)
        elif self.kind == REWARD_PREDICTION_ERROR:
            obs = self._render(pose)
            reward = fm_reward(self.fm, obs.depths(), action, new_obs.depths())
        else:
            reward = 0.0
        return reward, new_pose, new_obs

    def lookahead_value(self, pose: Pose, smap: SemanticMap, action: Action, depth: int) -> float:
        reward, new_pose, new_obs = self._simulate_from(pose, smap, action)
        if depth <= 1:
            return reward
        next_map = smap.copy()
        if self.kind == REWARD_SEMANTIC_CURIOSITY:
            detections = self._detect(new_obs, new_pose)
            proj = semmap.ego_project(new_obs, detections, new_pose)
            geo = semmap.to_geocentric(proj, new_pose, (self.scene.width, self.scene.height))
            semmap.update(next_map, geo, set(new_obs.visible_cells))
        else:
            semmap.update(next_map, [], set(new_obs.visible_cells))
        best = max(
            self.lookahead_value(new_pose, next_map, a, depth - 1) for a in _ACTION_ORDER
        )
        # Discounting breaks plateau ties: harvesting a reward sooner must beat
        # turning away and collecting it later, or the agent cycles in place.
        return reward + LOOKAHEAD_DISCOUNT * best


_ACTION_ORDER = (Action.FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT)
LOOKAHEAD_DISCOUNT = 0.9


def _sweep_escape(env: RolloutEnv) -> Action:
    # Nothing pays anywhere: stride until a wall blocks, then rotate. Grinding
    # a blocked Forward forever would freeze the agent in place.
    if step(env.scene, env.pose, Action.FORWARD, env.sensor) == env.pose:
        return Action.TURN_LEFT
    return Action.FORWARD


def greedy_action(env: RolloutEnv, depth: int = 1, explore_ties: bool = False) -> Action:
    """Lookahead-optimal action; ties break Forward > TurnLeft > TurnRight.

    With ``explore_ties`` the all-zero tie falls back to the action revealing
    the most unexplored cells (the roster uses this so greedy variants keep
    moving between reward pockets); the primary reward always dominates.
    """
    best_action, best_value = None, -np.inf
    for action in _ACTION_ORDER:
        if depth <= 1:
            value, _, _ = env.simulate_action(action)
        else:
            value = env.lookahead_value(env.pose, env.smap, action, depth)
        if value > best_value:
            best_action, best_value = action, value
    if best_value > 0.0:
        return best_action
    if explore_ties:
        frontier = env.frontier_action(env.pose)
        if frontier is not None:
            return frontier
    return _sweep_escape(env)


# -- policies ----------------------------------------------------------------


class RandomPolicy:
    uses_features = False

    def select(self, env: RolloutEnv) -> tuple[Action, float, float]:
        action = Action(int(env.rng.integers(len(_ACTION_ORDER))))
        return action, float(np.log(1.0 / 3.0)), 0.0


class LearnedPolicy:
    uses_features = True

    def __init__(self, params: PolicyParams):
        self.params = params

    def select(self, env: RolloutEnv) -> tuple[Action, float, float]:
        return act(self.params, env.features, env.rng)


class GreedyPolicy:
    uses_features = False

    def __init__(self, depth: int = 1, explore_ties: bool = False):
        self.depth = depth
        self.explore_ties = explore_ties

    def select(self, env: RolloutEnv) -> tuple[Action, float, float]:
        return greedy_action(env, self.depth, self.explore_ties), 0.0, 0.0


def run_trajectory(env: RolloutEnv, policy, n_steps: int, recorder=None) -> float:
    """Roll one trajectory in-place; returns the cumulative env reward."""
    total = 0.0
    for t in range(n_steps):
        action, _, _ = policy.select(env)
        reward, diag = env.apply_action(action)
        total += reward
        if recorder is not None:
            recorder(t, action, reward, diag)
    return total


# -- training -----------------------------------------------------------------


def _collect_segment(env: RolloutEnv, params: PolicyParams, horizon: int) -> RolloutSegment:
    dim = len(env.features)
    features = np.empty((horizon, dim))
    actions = np.empty(horizon, dtype=np.int64)
    log_probs = np.empty(horizon)
    rewards = np.empty(horizon)
    values = np.empty(horizon)
    for t in range(horizon):
        features[t] = env.features
        action, log_prob, value = act(params, env.features, env.rng)
        reward, _ = env.apply_action(action)
        actions[t] = int(action)
        log_probs[t] = log_prob
        rewards[t] = reward
        values[t] = value
    bootstrap = float(params.value_weights @ env.features)
    return RolloutSegment(features, actions, log_probs, rewards, values, bootstrap)


def train_policy(
    scenes: list[Scene],
    reward_kind: str,
    cfg: TrainConfig,
    model: DetectorModel,
    sensor: SensorParams,
    reward_cfg: RewardConfig,
    seed: int = 0,
    fm_learning_rate: float = 0.5,
) -> tuple[PolicyParams, list[dict]]:
    """Train one exploration policy on its intrinsic reward.

    One env per scene, detector frozen at version 0 throughout, maps reset per
    episode. Returns the trained parameters and the training-curve rows.
    """
    if reward_kind not in semmap.TRAINABLE_REWARD_KINDS:
        raise ValueError(f"cannot train on reward kind {reward_kind!r}")
    cfg.validate()
    if model.version != 0:
        raise ValueError("policy training expects the frozen pretrained detector")
    n_envs = cfg.parallel_envs or len(scenes)
    envs = [
        RolloutEnv(
            scenes[i % len(scenes)],
            reward_kind,
            model,
            sensor,
            reward_cfg,
            seed=np.random.SeedSequence((seed, i)),
            episode_len=cfg.episode_len,
            fm_learning_rate=fm_learning_rate,
        )
        for i in range(n_envs)
    ]
    params = PolicyParams.zeros(feature_dim(sensor.num_rays, scenes[0].num_classes))
    n_updates = cfg.total_env_steps // (cfg.horizon * n_envs)
    stats = ReturnStats()
    curve = []
    for update_idx in range(n_updates):
        segments = [_collect_segment(env, params, cfg.horizon) for env in envs]
        rewards = np.concatenate([s.rewards for s in segments])
        feats = np.concatenate([s.features for s in segments])
        logits = feats @ params.action_weights.T
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        entropy = float(-(probs * np.log(probs + 1e-300)).sum(axis=1).mean())
        value_loss = float(
            np.mean(
                [
                    np.mean((s.values - segment_returns(s, cfg.discount)) ** 2)
                    for s in segments
                ]
            )
        )
        params = policy_update(params, segments, cfg, return_stats=stats)
        curve.append(
            {
                "update": update_idx,
                "env_steps": (update_idx + 1) * cfg.horizon * n_envs,
                "mean_reward": float(rewards.mean()),
                "entropy": entropy,
                "value_loss": value_loss,
            }
        )
    return params, curve
