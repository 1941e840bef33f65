"""REINFORCE fine-tuning of the diffusion sampler against the scene-graph reward.

One rollout batch feeds exactly one update (strictly on-policy, no importance
weights). Advantages are the reward minus a per-bucket moving-average
baseline, divided by the batch reward standard deviation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .diffusion import Denoiser, NoiseSchedule, Trajectory, sample_trajectories, trajectory_log_probs
from .nn import Adam, clip_by_global_norm
from .reward import SymbolLexicon, reward
from .world import decode_scene, extract_vsg, parse_lsg

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6

RewardFn = Callable[[Sequence[str], np.ndarray], float]


def scene_graph_reward_fn(lex: SymbolLexicon) -> RewardFn:
    """Decode x0, read its scene graph, score against the sentence graph."""

    def fn(context: Sequence[str], x0: np.ndarray) -> float:
        return reward(parse_lsg(context), extract_vsg(decode_scene(x0)), lex)

    return fn


def bucket_of(context: Sequence[str]) -> int:
    """Baseline bucket: sentence-graph triple count, capped at 3."""
    return min(len(parse_lsg(context)), 3)


@dataclass
class Rollout:
    context: list[str]
    trajectory: Trajectory
    reward: float
    bucket: int
    decodable: bool


@dataclass
class RolloutBatch:
    rollouts: list[Rollout]

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.rollouts])

    @property
    def mean(self) -> float:
        """Monte-Carlo estimate of the expected reward."""
        r = self.rewards
        if np.all(r == r[0]):
            return float(r[0])  # summing then dividing can be an ulp off
        return math.fsum(r) / len(r)

    @property
    def raw_std(self) -> float:
        r = self.rewards
        return float(r.std(ddof=1)) if len(r) > 1 else float("nan")

    @property
    def std(self) -> float:
        # a single rollout has no spread estimate; it is left unscaled
        if len(self.rollouts) < 2:
            return 1.0
        return max(self.raw_std, STD_FLOOR)

    @property
    def decodable_fraction(self) -> float:
        return float(np.mean([r.decodable for r in self.rollouts]))

    def __len__(self) -> int:
        return len(self.rollouts)


@dataclass
class BaselineState:
    decay: float = 0.9
    values: dict[int, float] = field(default_factory=dict)

    def value(self, bucket: int, fallback: float) -> float:
        return self.values.get(bucket, fallback)

    def update(self, batch: RolloutBatch) -> None:
        for b in sorted({r.bucket for r in batch.rollouts}):
            m = float(np.mean([r.reward for r in batch.rollouts if r.bucket == b]))
            self.values[b] = m if b not in self.values else self.decay * self.values[b] + (1 - self.decay) * m


def collect_rollouts(contexts: Sequence[Sequence[str]], denoiser: Denoiser, sched: NoiseSchedule,
                     reward_fn: RewardFn, rng: np.random.Generator, n_per_context: int = 1,
                     noise_scale: float = 1.0) -> RolloutBatch:
    if not contexts:
        raise ValueError("collect_rollouts needs at least one context")
    if n_per_context < 1:
        raise ValueError("n_per_context must be >= 1")
    flat = [list(c) for c in contexts for _ in range(n_per_context)]
    trajs = sample_trajectories(flat, denoiser, sched, rng, noise_scale)
    out = []
    for c, tr in zip(flat, trajs):
        r = float(reward_fn(c, tr.x0))
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"reward {r} outside [0, 1]")
        out.append(Rollout(c, tr, r, bucket_of(c), len(decode_scene(tr.x0)) > 0))
    return RolloutBatch(out)


def advantages(batch: RolloutBatch, baseline: BaselineState) -> np.ndarray:
    """(r - baseline(bucket)) / batch std; all zero for a constant-reward batch."""
    r = batch.rewards
    if len(r) > 1 and np.all(r == r[0]):
        return np.zeros_like(r)
    fallback = {
        b: float(np.mean([x.reward for x in batch.rollouts if x.bucket == b]))
        for b in {x.bucket for x in batch.rollouts}
    }
    base = np.array([baseline.value(x.bucket, fallback[x.bucket]) for x in batch.rollouts])
    return (r - base) / batch.std


def policy_objective(log_probs: Tensor, adv: np.ndarray) -> Tensor:
    """Score-function surrogate: mean_i adv_i * log p(trajectory_i); its gradient is the estimator."""
    return ad.mean(ad.mul(log_probs, Tensor(adv)))


def reinforce_gradient(batch: RolloutBatch, denoiser: Denoiser, sched: NoiseSchedule,
                       baseline: BaselineState, adv: np.ndarray | None = None) -> list[np.ndarray]:
    """Batch-mean ascent gradient of the expected reward w.r.t. denoiser parameters."""
    if len(batch) == 0:
        raise ValueError("empty rollout batch")
    if adv is None:
        adv = advantages(batch, baseline)
    params = denoiser.parameters()
    if not np.any(adv):
        for r in batch.rollouts:
            if r.trajectory.schedule != sched.fingerprint():
                raise ValueError("trajectory was sampled under a different noise schedule")
        return [np.zeros(p.shape) for p in params]
    with Tape() as tape:
        lp = trajectory_log_probs([r.trajectory for r in batch.rollouts], denoiser, sched)
        obj = policy_objective(lp, adv)
    return tape.gradient(obj, params)


def ddpo_step(batch: RolloutBatch, denoiser: Denoiser, sched: NoiseSchedule, optimizer: Adam,
              baseline: BaselineState, clip_norm: float = 1.0) -> dict:
    """One clipped ascent step; returns diagnostics."""
    adv = advantages(batch, baseline)
    grads = reinforce_gradient(batch, denoiser, sched, baseline, adv)
    clipped, norm = clip_by_global_norm(grads, clip_norm)
    skipped = False
    if not np.isfinite(norm):
        log.warning("non-finite policy gradient; step skipped")
        skipped = True
    elif np.any(adv):
        optimizer.step([-g for g in clipped])
    baseline.update(batch)
    return {
        "mean_reward": batch.mean,
        "std_reward": batch.raw_std if len(batch) > 1 else 0.0,
        "grad_norm": norm,
        "decodable_fraction": batch.decodable_fraction,
        "skipped": skipped,
        "applied_grads": clipped,
    }
