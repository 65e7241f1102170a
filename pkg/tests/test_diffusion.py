import numpy as np
import pytest

from inpaintpref import diffusion, nn, toyworld
from inpaintpref.diffusion import make_schedule
from inpaintpref.errors import InvalidArgument, SamplerAbort


def constant_net(in_dim, value):
    """Linear net that ignores its input and outputs ``value``."""
    value = np.asarray(value, dtype=float)
    return nn.MlpParams([np.zeros((in_dim, value.size))], [value.copy()])


def test_default_schedule_shape_and_invariants():
    s = make_schedule()
    assert s.T == 50
    assert s.betas[0] == 1e-4
    assert np.all(np.diff(s.betas) > 0) and np.all((s.betas > 0) & (s.betas < 1))
    ab = s.alpha_bar
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0) and np.all((ab[1:] > 0) & (ab[1:] < 1))


def test_alpha_bar_matches_product_loop():
    s = make_schedule(T=7, beta_start=0.01, beta_end=0.3)
    for t in range(8):
        prod = 1.0
        for b in s.betas[:t]:
            prod *= 1.0 - b
        assert s.alpha_bar[t] == pytest.approx(prod, rel=1e-14)


@pytest.mark.parametrize("bad", [dict(T=0), dict(beta_start=0.0), dict(beta_start=0.3, beta_end=0.2),
                                 dict(beta_end=1.0)])
def test_schedule_rejects_bad_params(bad):
    with pytest.raises(InvalidArgument):
        make_schedule(**bad)


def test_forward_diffuse_conventions():
    s = make_schedule()
    rng = np.random.default_rng(0)
    x0, eps = rng.normal(size=12), rng.normal(size=12)
    assert np.array_equal(diffusion.forward_diffuse(x0, 0, eps, s), x0)
    xt = diffusion.forward_diffuse(x0, 1, eps, s)
    np.testing.assert_allclose(xt, np.sqrt(0.9999) * x0 + np.sqrt(1e-4) * eps, rtol=1e-13)
    # Nearly destroyed signal at a vanishing alpha_bar.
    s_hard = diffusion.NoiseSchedule(np.full(200, 0.5))
    np.testing.assert_allclose(diffusion.forward_diffuse(x0, 200, eps, s_hard), eps, atol=1e-12)


def test_forward_diffuse_rejects_out_of_range():
    s = make_schedule(T=10)
    for t in (-1, 11, 2.5):
        with pytest.raises(InvalidArgument):
            diffusion.forward_diffuse(np.zeros(3), t, np.zeros(3), s)


def test_forward_diffuse_batch_timesteps():
    s = make_schedule(T=10)
    rng = np.random.default_rng(1)
    x0, eps = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    t = np.array([1, 5, 10])
    batch = diffusion.forward_diffuse(x0, t, eps, s)
    for i in range(3):
        np.testing.assert_array_equal(batch[i], diffusion.forward_diffuse(x0[i], t[i], eps[i], s))


def test_forward_diffuse_marginals():
    s = make_schedule()
    t, n = 20, 10_000
    x0 = np.array([0.7, -0.3, 0.0])
    eps = np.random.default_rng(2).standard_normal((n, 3))
    xt = diffusion.forward_diffuse(x0, np.full(n, t), eps, s)
    ab = s.alpha_bar[t]
    sd = np.sqrt(1 - ab)
    se_mean = sd / np.sqrt(n)
    se_std = sd / np.sqrt(2 * (n - 1))
    assert np.all(np.abs(xt.mean(axis=0) - np.sqrt(ab) * x0) < 3 * se_mean)
    assert np.all(np.abs(xt.std(axis=0, ddof=1) - sd) < 3 * se_std)


def test_time_features_layout():
    f = diffusion.time_features(0.25)
    np.testing.assert_allclose(f, [0.25, 1.0, 0.0, 0.0], atol=1e-15)


def test_input_layout(tiny_tasks):
    task = tiny_tasks[1]
    static = diffusion.static_condition(task, 2)
    x_t = np.arange(48.0)
    inp = diffusion.cond_input(x_t, static, 0.5)
    assert inp.size == diffusion.denoiser_input_dim(4, 4, 2)
    np.testing.assert_array_equal(inp[:48], x_t)
    np.testing.assert_array_equal(inp[48:96], toyworld.to_model_space(toyworld.masked_view(task)))
    np.testing.assert_array_equal(inp[96:112], task.mask.ravel())
    np.testing.assert_array_equal(inp[112:114], [0.0, 1.0])
    np.testing.assert_allclose(inp[114:], diffusion.time_features(0.5))


def test_loss_zero_when_prediction_is_eps(tiny_tasks, tiny_schedule):
    task = tiny_tasks[0]
    eps = np.random.default_rng(0).normal(size=48)
    p = constant_net(diffusion.denoiser_input_dim(4, 4, 2), eps)
    x0 = toyworld.to_model_space(task.source)
    loss, grads = diffusion.ddpm_loss(p, task, x0, 3, eps, tiny_schedule)
    assert loss == 0.0
    assert all(not np.any(g) for g in grads.arrays())


def test_loss_of_zero_predictor_is_mean_eps_squared(tiny_tasks, tiny_schedule):
    task = tiny_tasks[0]
    p = constant_net(diffusion.denoiser_input_dim(4, 4, 2), np.zeros(48))
    x0 = toyworld.to_model_space(task.source)
    rng = np.random.default_rng(7)
    losses = []
    for _ in range(1000):
        eps = rng.standard_normal(48)
        loss, _ = diffusion.ddpm_loss(p, task, x0, 2, eps, tiny_schedule)
        assert loss == pytest.approx(np.mean(eps ** 2), rel=1e-14)
        losses.append(loss)
    assert abs(np.mean(losses) - 1.0) < 0.1


@pytest.mark.parametrize("trial", range(20))
def test_ddpm_loss_gradient(trial, tiny_tasks, tiny_schedule, tiny_ckpt_factory):
    rng = np.random.default_rng(trial)
    ck = tiny_ckpt_factory("DDPM", hidden=(5,), seed=trial)
    task = tiny_tasks[trial % len(tiny_tasks)]
    x0 = toyworld.to_model_space(task.source)
    eps = rng.standard_normal(48)
    t = int(rng.integers(1, tiny_schedule.T + 1))
    _, grads = diffusion.ddpm_loss(ck.params, task, x0, t, eps, tiny_schedule)
    f = lambda q: diffusion.ddpm_loss(q, task, x0, t, eps, tiny_schedule)[0]
    assert nn.check_gradients(f, grads, ck.params, max_entries=40, seed=trial) < 1e-4


def test_training_rejects_t_zero(tiny_tasks, tiny_schedule, tiny_ckpt_factory):
    ck = tiny_ckpt_factory()
    with pytest.raises(InvalidArgument):
        diffusion.ddpm_loss(ck.params, tiny_tasks[0], np.zeros(48), 0, np.zeros(48), tiny_schedule)


def test_sampler_deterministic_and_blended(tiny_tasks, tiny_schedule, tiny_ckpt_factory):
    ck = tiny_ckpt_factory(seed=9)
    task = tiny_tasks[2]
    a = diffusion.ddpm_sample(ck.params, task, tiny_schedule, seed=4)
    b = diffusion.ddpm_sample(ck.params, task, tiny_schedule, seed=4)
    assert np.array_equal(a, b)
    keep = task.mask == 0
    assert np.array_equal(a[keep], task.source[keep])
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert not np.array_equal(a, diffusion.ddpm_sample(ck.params, task, tiny_schedule, seed=5))


def test_batch_sampler_matches_single(tiny_tasks, tiny_schedule, tiny_ckpt_factory):
    ck = tiny_ckpt_factory(seed=2)
    batch = diffusion.ddpm_sample_batch(ck.params, tiny_tasks[:3], [10, 11, 12], tiny_schedule)
    for task, seed, img in zip(tiny_tasks[:3], [10, 11, 12], batch):
        np.testing.assert_allclose(img, diffusion.ddpm_sample(ck.params, task, tiny_schedule, seed),
                                   atol=1e-7)


def test_single_step_sampler_oracle(tiny_tasks, tiny_ckpt_factory):
    sched = make_schedule(T=1, beta_start=0.3, beta_end=0.3)
    ck = tiny_ckpt_factory(seed=6, T=1)
    task = tiny_tasks[3]
    out = diffusion.ddpm_sample(ck.params, task, sched, seed=21)

    x1 = np.random.default_rng(21).standard_normal(48)
    static = diffusion.static_condition(task, 2)
    eps_hat = nn.mlp_forward(ck.params, np.concatenate([x1, static, diffusion.time_features(1.0)]))
    ab = 0.7
    x0_hat = np.clip((x1 - np.sqrt(1 - ab) * eps_hat) / np.sqrt(ab), -1, 1)
    # With T = 1 the posterior mean is exactly x0_hat and no noise is added.
    expected = np.where(task.mask[..., None] > 0.5,
                        np.clip((x0_hat.reshape(4, 4, 3) + 1) / 2, 0, 1), task.source)
    np.testing.assert_allclose(out, expected, atol=1e-7)


def test_sampler_aborts_on_non_finite_state(tiny_tasks, tiny_schedule):
    p = constant_net(diffusion.denoiser_input_dim(4, 4, 2), np.full(48, np.inf))
    with pytest.raises(SamplerAbort) as info:
        diffusion.ddpm_sample_batch(p, tiny_tasks[:2], [1, 2], tiny_schedule, clamp_x0=False,
                                    candidate_ids=[7, 8])
    assert info.value.step == tiny_schedule.T
    assert info.value.task_id == tiny_tasks[0].task_id and info.value.candidate_idx == 7
