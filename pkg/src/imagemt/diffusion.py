"""Context-conditioned DDPM over 27-dimensional scene vectors.

The denoiser regresses the forward-process posterior mean directly
(mean prediction, not noise prediction). The ancestral sampler records the
Gaussian log-density of every transition it takes so that trajectories can
be reused as policy-gradient rollouts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module, glorot, linear
from .world import SCENE_DIM, SOURCE_WORDS


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray  # beta[t-1] is beta_t
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def ab(self, t) -> np.ndarray:
        """alpha_bar_t with the alpha_bar_0 = 1 convention; t may be an array."""
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_bar[np.maximum(t, 1) - 1])

    def b(self, t) -> np.ndarray:
        return self.beta[np.asarray(t) - 1]

    def a(self, t) -> np.ndarray:
        return self.alpha[np.asarray(t) - 1]

    def fingerprint(self) -> str:
        return hashlib.sha256(self.beta.tobytes()).hexdigest()[:16]


def build_schedule(T: int = 50, beta_start: float = 1e-4, beta_end: float = 0.1) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"need T >= 2, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    return NoiseSchedule(T, beta, alpha, np.cumprod(alpha))


def forward_sample(x0, t, sched: NoiseSchedule, rng: np.random.Generator, eps=None):
    """Draw x_t ~ q(x_t | x0); returns (x_t, eps). ``t`` may be per-row."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ValueError(f"t must lie in [1, {sched.T}]")
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    ab = sched.ab(t)[..., None] if t.ndim else sched.ab(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, eps


def posterior_coefficients(t, sched: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    ab_t, ab_prev = sched.ab(t), sched.ab(np.asarray(t) - 1)
    c0 = np.sqrt(ab_prev) * sched.b(t) / (1.0 - ab_t)
    c1 = np.sqrt(sched.a(t)) * (1.0 - ab_prev) / (1.0 - ab_t)
    return c0, c1


def posterior_mean(x0, x_t, t, sched: NoiseSchedule) -> np.ndarray:
    c0, c1 = posterior_coefficients(t, sched)
    if np.ndim(t):
        c0, c1 = c0[..., None], c1[..., None]
    return c0 * np.asarray(x0) + c1 * np.asarray(x_t)


def timestep_embedding(t, dim: int = 16) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# ---------------------------------------------------------------------------
# conditioning

SOURCE_INDEX = {w: i for i, w in enumerate(SOURCE_WORDS)}


@dataclass
class Context:
    """Padded source-token ids with per-position averaging weights."""

    ids: np.ndarray  # (B, L) int
    weights: np.ndarray  # (B, L), rows sum to 1

    @classmethod
    def from_tokens(cls, sentences: Sequence[Sequence[str]]) -> "Context":
        width = max(len(s) for s in sentences)
        ids = np.zeros((len(sentences), width), dtype=np.int64)
        w = np.zeros((len(sentences), width))
        for i, s in enumerate(sentences):
            ids[i, : len(s)] = [SOURCE_INDEX[tok] for tok in s]
            w[i, : len(s)] = 1.0 / len(s)
        return cls(ids, w)

    def take(self, rows) -> "Context":
        return Context(self.ids[rows], self.weights[rows])

    def __len__(self) -> int:
        return len(self.ids)


class Denoiser(Module):
    """3-layer tanh MLP: (x_t, mean token embedding, timestep embedding) -> mu.

    With ``skip`` the network output is added to x_t, so the layers learn the
    correction mu - x_t; the regression target is the posterior mean either way.
    """

    def __init__(self, rng: np.random.Generator, hidden: int = 128, ctx_dim: int = 32,
                 time_dim: int = 16, skip: bool = False):
        super().__init__()
        self.config = {"hidden": hidden, "ctx_dim": ctx_dim, "time_dim": time_dim, "skip": skip}
        self.time_dim = time_dim
        self.skip = skip
        d_in = SCENE_DIM + ctx_dim + time_dim
        self.tok = self.param("tok", rng.normal(0.0, 0.3, (len(SOURCE_WORDS), ctx_dim)))
        self.w1 = self.param("w1", glorot(rng, d_in, hidden))
        self.b1 = self.param("b1", np.zeros(hidden))
        self.w2 = self.param("w2", glorot(rng, hidden, hidden))
        self.b2 = self.param("b2", np.zeros(hidden))
        self.w3 = self.param("w3", glorot(rng, hidden, SCENE_DIM) * 0.1)
        self.b3 = self.param("b3", np.zeros(SCENE_DIM))

    def context_embedding(self, ctx: Context) -> Tensor:
        emb = ad.gather_rows(self.tok, ctx.ids)  # (B, L, C)
        return ad.sum_(ad.mul(emb, Tensor(ctx.weights[..., None])), axis=1)

    def __call__(self, x_t, ctx: Context, t) -> Tensor:
        x_t = np.asarray(x_t, dtype=np.float64)
        temb = timestep_embedding(np.broadcast_to(t, (len(x_t),)), self.time_dim)
        h = ad.concat([Tensor(x_t), self.context_embedding(ctx), Tensor(temb)], axis=1)
        h = ad.tanh(linear(h, self.w1, self.b1))
        h = ad.tanh(linear(h, self.w2, self.b2))
        out = linear(h, self.w3, self.b3)
        return ad.add(out, Tensor(x_t)) if self.skip else out


def ddpm_loss(x0, ctx: Context, denoiser: Denoiser, sched: NoiseSchedule,
              rng: np.random.Generator | None = None, t=None, eps=None) -> Tensor:
    """Batch mean of ||posterior mean - predicted mean||^2 with t ~ U{1..T}."""
    x0 = np.asarray(x0, dtype=np.float64)
    if len(x0) == 0:
        raise ValueError("ddpm_loss needs a non-empty batch")
    if t is None:
        t = rng.integers(1, sched.T + 1, size=len(x0))
    t = np.broadcast_to(np.asarray(t), (len(x0),))
    x_t, _ = forward_sample(x0, t, sched, rng, eps=eps)
    target = posterior_mean(x0, x_t, t, sched)
    diff = ad.sub(denoiser(x_t, ctx, t), Tensor(target))
    return ad.mean(ad.sum_(ad.mul(diff, diff), axis=1))


# ---------------------------------------------------------------------------
# sampling


@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, D); states[t] is x_t
    log_probs: np.ndarray  # (T,); log_probs[t-1] = log p(x_{t-1} | x_t, c)
    means: np.ndarray  # (T, D); means[t-1] = mu_theta(x_t, c, t) at sampling time
    sigmas: np.ndarray  # (T,)
    context: list[str]
    schedule: str  # NoiseSchedule.fingerprint()

    @property
    def x0(self) -> np.ndarray:
        return self.states[0]

    @property
    def T(self) -> int:
        return len(self.log_probs)

    def to_json(self, decimals: int = 4) -> str:
        return json.dumps({
            "context": " ".join(self.context),
            "states": np.round(self.states, decimals).tolist(),
            "log_probs": np.round(self.log_probs, decimals).tolist(),
        })


def step_sigmas(sched: NoiseSchedule, noise_scale: float) -> np.ndarray:
    """sigma_t for t = 1..T: sqrt(beta_t) * noise_scale."""
    return np.sqrt(sched.beta) * noise_scale


def sample_trajectories(contexts: Sequence[Sequence[str]], denoiser: Denoiser, sched: NoiseSchedule,
                        rng: np.random.Generator, noise_scale: float = 1.0,
                        x_T: np.ndarray | None = None) -> list[Trajectory]:
    """Ancestral sampling for a batch of contexts, one trajectory each.

    Every reverse step but the last draws x_{t-1} ~ N(mu, sigma_t^2 I); the last
    step returns its mean. With ``noise_scale == 0`` every transition is a
    point mass and its recorded log-density is 0.
    """
    if not 0.0 <= noise_scale <= 1.0:
        raise ValueError("noise_scale must lie in [0, 1]")
    B, T = len(contexts), sched.T
    ctx = Context.from_tokens(contexts)
    sig = step_sigmas(sched, noise_scale)
    states = np.zeros((T + 1, B, SCENE_DIM))
    means = np.zeros((T, B, SCENE_DIM))
    logp = np.zeros((T, B))
    states[T] = rng.standard_normal((B, SCENE_DIM)) if x_T is None else np.asarray(x_T).reshape(B, SCENE_DIM)
    for t in range(T, 0, -1):
        mu = denoiser(states[t], ctx, t).data
        means[t - 1] = mu
        if t > 1 and noise_scale > 0:
            states[t - 1] = mu + sig[t - 1] * rng.standard_normal(mu.shape)
        else:
            states[t - 1] = mu
        if noise_scale > 0:
            d = states[t - 1] - mu
            logp[t - 1] = (-0.5 * (d * d).sum(axis=1) / sig[t - 1] ** 2
                           - 0.5 * SCENE_DIM * np.log(2 * np.pi * sig[t - 1] ** 2))
    fp = sched.fingerprint()
    return [
        Trajectory(states[:, i].copy(), logp[:, i].copy(), means[:, i].copy(), sig.copy(), list(contexts[i]), fp)
        for i in range(B)
    ]


def sample_trajectory(c: Sequence[str], denoiser: Denoiser, sched: NoiseSchedule,
                      rng: np.random.Generator, noise_scale: float = 1.0, x_T=None) -> Trajectory:
    return sample_trajectories([c], denoiser, sched, rng, noise_scale, x_T)[0]


def _check_schedule(traj: Trajectory, sched: NoiseSchedule) -> None:
    if traj.schedule != sched.fingerprint():
        raise ValueError("trajectory was sampled under a different noise schedule")


def transition_log_prob(traj: Trajectory, denoiser: Denoiser, sched: NoiseSchedule, t: int) -> Tensor:
    """log p_theta(x_{t-1} | x_t, c) under the current parameters (recorded)."""
    _check_schedule(traj, sched)
    if not 1 <= t <= traj.T:
        raise ValueError(f"step {t} outside trajectory of length {traj.T}")
    sigma = traj.sigmas[t - 1]
    if sigma <= 0:
        raise ValueError(f"sigma_{t} is zero; the transition has no density")
    mu = denoiser(traj.states[t][None], Context.from_tokens([traj.context]), t)
    return ad.sum_(ad.gaussian_log_prob(traj.states[t - 1][None], mu, sigma))


def trajectory_log_probs(trajs: Sequence[Trajectory], denoiser: Denoiser, sched: NoiseSchedule) -> Tensor:
    """Per-trajectory sum over t = 1..T of recomputed transition log-densities, shape (N,)."""
    for tr in trajs:
        _check_schedule(tr, sched)
        if np.any(tr.sigmas <= 0):
            raise ValueError("trajectory has deterministic transitions; no log-density")
    N, T = len(trajs), sched.T
    ts = np.tile(np.arange(1, T + 1), N)
    x_t = np.concatenate([tr.states[1:] for tr in trajs])  # rows (traj i, t=1..T)
    x_prev = np.concatenate([tr.states[:-1] for tr in trajs])
    sig = np.concatenate([tr.sigmas for tr in trajs])
    ctx = Context.from_tokens([tr.context for tr in trajs]).take(np.repeat(np.arange(N), T))
    mu = denoiser(x_t, ctx, ts)
    lp = ad.gaussian_log_prob(x_prev, mu, sig)
    return ad.sum_(ad.reshape(lp, (N, T)), axis=1)


def dump_trajectories(path: str | Path, trajs: Sequence[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tr in trajs:
            fh.write(tr.to_json() + "\n")
