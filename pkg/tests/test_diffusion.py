import json

import numpy as np
import pytest

from imagemt import autodiff as ad
from imagemt.autodiff import Tape, Tensor, grad_check
from imagemt.diffusion import (
    Context,
    Denoiser,
    build_schedule,
    ddpm_loss,
    dump_trajectories,
    forward_sample,
    posterior_coefficients,
    posterior_mean,
    sample_trajectories,
    sample_trajectory,
    timestep_embedding,
    trajectory_log_probs,
    transition_log_prob,
)
from imagemt.world import SCENE_DIM

SCHED = build_schedule(50, 1e-4, 0.1)
SOURCES = [["a", "red", "circle"], ["a", "blue", "square", "left-of", "a", "green", "triangle"], ["a", "square"]]


def small_denoiser(seed=0, hidden=16):
    return Denoiser(np.random.default_rng(seed), hidden=hidden, ctx_dim=8, time_dim=16)


# --- schedule -------------------------------------------------------------


def test_schedule_values():
    assert SCHED.alpha_bar[0] == 1 - 1e-4
    assert SCHED.ab(1) == 0.9999
    assert SCHED.ab(0) == 1.0
    assert SCHED.alpha_bar[-1] < SCHED.alpha_bar[0]
    assert np.all(np.diff(SCHED.alpha_bar) < 0)
    assert abs(SCHED.ab(2) - (1 - SCHED.beta[0]) * (1 - SCHED.beta[1])) < 1e-15
    assert np.all((SCHED.beta > 0) & (SCHED.beta < 1))
    assert SCHED.ab(50) < 0.08


def test_alpha_bar_is_exact_running_product():
    for t in range(1, 51):
        assert SCHED.ab(t) == np.prod(1 - SCHED.beta[:t])


def test_schedule_range_checks():
    for args in [(1, 1e-4, 0.1), (50, 0.0, 0.1), (50, 0.2, 0.1), (50, 1e-4, 1.0)]:
        with pytest.raises(ValueError):
            build_schedule(*args)


# --- forward process ------------------------------------------------------


def test_forward_sample_noiseless_limit():
    x0 = np.random.default_rng(0).normal(size=SCENE_DIM)
    xt, eps = forward_sample(x0, 10, SCHED, None, eps=np.zeros(SCENE_DIM))
    np.testing.assert_allclose(xt, np.sqrt(SCHED.ab(10)) * x0, rtol=1e-15)


@pytest.mark.parametrize("t", [1, 20, 50])
def test_forward_marginal_within_four_sigma(t):
    rng = np.random.default_rng(t)
    x0 = np.linspace(-1, 1, SCENE_DIM)
    n = 10_000
    xt, _ = forward_sample(np.tile(x0, (n, 1)), np.full(n, t), SCHED, rng)
    var = 1 - SCHED.ab(t)
    mean_se = np.sqrt(var / n)
    assert np.all(np.abs(xt.mean(0) - np.sqrt(SCHED.ab(t)) * x0) < 4 * mean_se)
    var_se = var * np.sqrt(2 / (n - 1))
    assert np.all(np.abs(xt.var(0, ddof=1) - var) < 4 * var_se)


# --- posterior ------------------------------------------------------------


def test_posterior_coefficients_match_closed_form():
    for t in range(1, 51):
        c0, c1 = posterior_coefficients(t, SCHED)
        ab, ab_prev, b = SCHED.ab(t), SCHED.ab(t - 1), SCHED.b(t)
        assert abs(c0 - np.sqrt(ab_prev) * b / (1 - ab)) < 1e-15
        assert abs(c1 - np.sqrt(1 - b) * (1 - ab_prev) / (1 - ab)) < 1e-15


def test_posterior_mean_at_equal_inputs_scales_by_coefficient_sum():
    v = np.random.default_rng(1).normal(size=SCENE_DIM)
    for t in (2, 10, 50):
        c0, c1 = posterior_coefficients(t, SCHED)
        np.testing.assert_allclose(posterior_mean(v, v, t, SCHED), (c0 + c1) * v, rtol=1e-12)


def test_posterior_mean_at_t1_is_x0():
    rng = np.random.default_rng(2)
    x0, xt = rng.normal(size=SCENE_DIM), rng.normal(size=SCENE_DIM)
    assert posterior_coefficients(1, SCHED)[1] == 0.0
    np.testing.assert_allclose(posterior_mean(x0, xt, 1, SCHED), x0, rtol=1e-12, atol=1e-15)


def test_posterior_mean_is_linear():
    rng = np.random.default_rng(3)
    x0, xt = rng.normal(size=SCENE_DIM), rng.normal(size=SCENE_DIM)
    np.testing.assert_allclose(posterior_mean(2 * x0, 2 * xt, 17, SCHED), 2 * posterior_mean(x0, xt, 17, SCHED),
                               rtol=1e-14)


# --- denoiser and loss ----------------------------------------------------


def test_timestep_embedding_shape_and_distinctness():
    e = timestep_embedding(np.arange(1, 51), 16)
    assert e.shape == (50, 16)
    assert len({tuple(np.round(r, 12)) for r in e}) == 50


def test_denoiser_output_shape():
    den = Denoiser(np.random.default_rng(0))
    out = den(np.zeros((4, SCENE_DIM)), Context.from_tokens(SOURCES + [["a", "circle"]]), 7)
    assert out.shape == (4, SCENE_DIM)
    assert den.w1.shape == (SCENE_DIM + 32 + 16, 128)


class Oracle(Denoiser):
    """Returns the exact posterior mean for known (x0, eps)."""

    def __init__(self, x0):
        super().__init__(np.random.default_rng(0), hidden=4, ctx_dim=2, time_dim=16)
        self.x0 = x0

    def __call__(self, x_t, ctx, t):
        return Tensor(posterior_mean(self.x0, x_t, t, SCHED))


def test_ddpm_loss_zero_for_perfect_prediction():
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=(3, SCENE_DIM))
    loss = ddpm_loss(x0, Context.from_tokens(SOURCES), Oracle(x0), SCHED, rng)
    assert loss.item() == 0.0


def test_ddpm_loss_non_negative_and_rejects_empty():
    rng = np.random.default_rng(5)
    den = small_denoiser()
    for _ in range(10):
        assert ddpm_loss(rng.normal(size=(3, SCENE_DIM)), Context.from_tokens(SOURCES), den, SCHED, rng).item() >= 0
    with pytest.raises(ValueError):
        ddpm_loss(np.zeros((0, SCENE_DIM)), Context.from_tokens(SOURCES), den, SCHED, rng)


def test_ddpm_loss_draws_t_from_one_to_T():
    rng = np.random.default_rng(6)
    seen = set(rng.integers(1, SCHED.T + 1, size=5000).tolist())
    assert seen == set(range(1, 51))


def _grad_params(den):
    return [den.w1, den.b1, den.w2, den.w3, den.b3, den.tok]


@pytest.mark.parametrize("seed", range(20))
def test_ddpm_loss_grad_check(seed):
    rng = np.random.default_rng(seed)
    den = small_denoiser(seed)
    x0 = rng.normal(size=(3, SCENE_DIM))
    t = rng.integers(1, 51, size=3)
    eps = rng.normal(size=(3, SCENE_DIM))
    ctx = Context.from_tokens(SOURCES)
    err = grad_check(lambda: ddpm_loss(x0, ctx, den, SCHED, t=t, eps=eps), _grad_params(den),
                     coords=60, rng=rng)
    assert err < 1e-4


# --- sampling -------------------------------------------------------------


def test_noise_free_sampling_is_deterministic_given_x_T():
    den = small_denoiser()
    xT = np.random.default_rng(7).normal(size=(1, SCENE_DIM))
    a = sample_trajectory(SOURCES[0], den, SCHED, np.random.default_rng(1), 0.0, xT)
    b = sample_trajectory(SOURCES[0], den, SCHED, np.random.default_rng(2), 0.0, xT)
    np.testing.assert_array_equal(a.states, b.states)
    assert np.all(a.log_probs == 0)


def test_trajectory_shape_and_finiteness():
    den = Denoiser(np.random.default_rng(8))
    trajs = sample_trajectories(SOURCES, den, SCHED, np.random.default_rng(9))
    for tr in trajs:
        assert tr.states.shape == (51, SCENE_DIM) and tr.log_probs.shape == (50,)
        assert np.all(np.isfinite(tr.states)) and np.all(np.isfinite(tr.log_probs))
        np.testing.assert_array_equal(tr.x0, tr.means[0])  # last step takes the mean


def test_recorded_log_densities_match_closed_form():
    den = small_denoiser()
    trajs = sample_trajectories(SOURCES * 4, den, SCHED, np.random.default_rng(10))
    d = SCENE_DIM
    for tr in trajs:
        for t in range(1, 51):
            x, mu, s = tr.states[t - 1], tr.means[t - 1], tr.sigmas[t - 1]
            want = -0.5 * np.sum((x - mu) ** 2) / s**2 - 0.5 * d * np.log(2 * np.pi * s**2)
            assert abs(tr.log_probs[t - 1] - want) < 1e-10


def test_sigmas_follow_beta_and_noise_scale():
    den = small_denoiser()
    tr = sample_trajectory(SOURCES[0], den, SCHED, np.random.default_rng(0), 0.5)
    np.testing.assert_allclose(tr.sigmas, np.sqrt(SCHED.beta) * 0.5, rtol=1e-15)
    with pytest.raises(ValueError):
        sample_trajectory(SOURCES[0], den, SCHED, np.random.default_rng(0), 1.5)


def test_transition_log_prob_recomputes_stored_value():
    den = small_denoiser()
    tr = sample_trajectory(SOURCES[1], den, SCHED, np.random.default_rng(11))
    for t in (1, 2, 25, 50):
        assert abs(transition_log_prob(tr, den, SCHED, t).item() - tr.log_probs[t - 1]) < 1e-10


def test_transition_log_prob_at_mode():
    den = small_denoiser()
    tr = sample_trajectory(SOURCES[0], den, SCHED, np.random.default_rng(12))
    s = tr.sigmas[0]
    # the final step lands on its mean
    assert abs(transition_log_prob(tr, den, SCHED, 1).item() + 0.5 * 27 * np.log(2 * np.pi * s * s)) < 1e-10


def test_transition_log_prob_rejections():
    den = small_denoiser()
    tr = sample_trajectory(SOURCES[0], den, SCHED, np.random.default_rng(13))
    with pytest.raises(ValueError):
        transition_log_prob(tr, den, build_schedule(50, 1e-4, 0.2), 3)
    with pytest.raises(ValueError):
        transition_log_prob(tr, den, SCHED, 51)
    flat = sample_trajectory(SOURCES[0], den, SCHED, np.random.default_rng(13), 0.0)
    with pytest.raises(ValueError):
        transition_log_prob(flat, den, SCHED, 3)


@pytest.mark.parametrize("seed", range(20))
def test_transition_log_prob_grad_check(seed):
    rng = np.random.default_rng(100 + seed)
    den = small_denoiser(seed)
    tr = sample_trajectory(SOURCES[seed % 3], den, SCHED, rng)
    t = int(rng.integers(2, 51))
    err = grad_check(lambda: transition_log_prob(tr, den, SCHED, t), _grad_params(den), coords=60, rng=rng)
    assert err < 1e-4


def test_batched_log_probs_equal_per_step_sums():
    den = small_denoiser()
    trajs = sample_trajectories(SOURCES, den, SCHED, np.random.default_rng(14))
    batched = trajectory_log_probs(trajs, den, SCHED).data
    for tr, b in zip(trajs, batched):
        per = sum(transition_log_prob(tr, den, SCHED, t).item() for t in range(1, 51))
        assert abs(b - per) < 1e-9
        assert abs(b - tr.log_probs.sum()) < 1e-9


def test_dump_trajectories(tmp_path):
    den = small_denoiser()
    trajs = sample_trajectories(SOURCES[:2], den, SCHED, np.random.default_rng(15))
    dump_trajectories(tmp_path / "t.jsonl", trajs)
    rows = [json.loads(line) for line in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert len(rows) == 2 and len(rows[0]["states"]) == 51
    assert rows[0]["states"][3][0] == round(trajs[0].states[3][0], 4)
