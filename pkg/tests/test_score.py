import numpy as np
import pytest
import torch

from vectordream.model import ContractError, StyleConfig, pack_params
from vectordream.raster import RenderOptions, render, render_tensor, render_vjp
from vectordream.scenes import init_scene
from vectordream.score import (
    DeskEstimator,
    GuidanceConfig,
    IdentityCodec,
    InjectedNoiseEstimator,
    NoiseSchedule,
    OracleEstimator,
    cfg_combine,
    crop_resize,
    ddim_run,
    ddim_sample,
    delta_oracle,
    estimator_fit_step,
    gmm_oracle,
    noise_coeffs,
    perturb,
    sds_grad,
    vpsd_grad,
    weight_at,
    with_gray_uncond,
)

SCHED = NoiseSchedule()
ICON = StyleConfig.for_style("iconography")
OPTS = RenderOptions()
CODEC = IdentityCodec()


def test_variance_preserving_on_grid():
    for t in np.linspace(0.005, 0.995, 100):
        a, s = noise_coeffs(SCHED, float(t))
        assert a * a + s * s == pytest.approx(1.0, abs=1e-6)


def test_alpha_values():
    assert noise_coeffs(SCHED, 0.05)[0] > 0.9
    # cumulative product of the scaled-linear betas at step 49.95
    betas = np.linspace(0.00085**0.5, 0.012**0.5, 1000) ** 2
    abar = np.cumprod(1 - betas)
    assert abar[49] ** 0.5 > noise_coeffs(SCHED, 0.05)[0] > abar[50] ** 0.5
    alphas = [noise_coeffs(SCHED, float(t))[0] for t in np.linspace(0.01, 0.99, 50)]
    assert all(a > b for a, b in zip(alphas, alphas[1:]))


@pytest.mark.parametrize("t", [0.0, 1.0, -0.2])
def test_noise_coeffs_domain(t):
    with pytest.raises(ContractError):
        noise_coeffs(SCHED, t)


def test_perturb_examples():
    rng = np.random.default_rng(0)
    x, e, x2, e2 = (rng.standard_normal((4, 4, 3)) for _ in range(4))
    a, s = noise_coeffs(SCHED, 0.3)
    assert np.allclose(perturb(x, np.zeros_like(x), 0.3, SCHED), a * x)
    assert np.allclose(perturb(np.zeros_like(x), e, 0.3, SCHED), s * e)
    both = perturb(x + x2, e + e2, 0.3, SCHED)
    assert np.allclose(both, perturb(x, e, 0.3, SCHED) + perturb(x2, e2, 0.3, SCHED))
    with pytest.raises(ContractError):
        perturb(x, e[:2], 0.3, SCHED)


def test_cfg_combine():
    c, u = np.full((2, 2), 1.0), np.zeros((2, 2))
    assert np.array_equal(cfg_combine(c, u, 1.0), c)
    assert np.array_equal(cfg_combine(c, u, 0.0), u)
    assert np.allclose(cfg_combine(c, u, 7.5), 7.5)
    with pytest.raises(ContractError):
        cfg_combine(c, np.zeros(3), 2.0)
    with pytest.raises(ContractError):
        GuidanceConfig(scale=-1.0)


def test_identity_codec_round_trip():
    img = render(init_scene("iconography", 3, 16, 16, np.random.default_rng(0))).data
    assert np.array_equal(CODEC.decode(CODEC.encode(img)), img)


def test_delta_oracle_inverts_perturb():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        x, eps = rng.random((3, 3, 3)), rng.standard_normal((3, 3, 3))
        t = float(rng.uniform(0.01, 0.99))
        got = delta_oracle(x).predict(perturb(x, eps, t, SCHED), t)
        worst = max(worst, float(np.max(np.abs(got - eps))))
    assert worst < 1e-9
    target = rng.random((3, 3, 3))
    a, _ = noise_coeffs(SCHED, 0.4)
    assert np.allclose(delta_oracle(target).predict(a * target, 0.4), 0.0)


def test_gmm_single_mean_limit():
    rng = np.random.default_rng(2)
    mu = rng.random((4, 4, 3))
    g, d = gmm_oracle([mu], [1.0], 1e-4), delta_oracle(mu)
    for t in (0.1, 0.5, 0.9):
        z = rng.standard_normal(mu.shape)
        assert np.max(np.abs(g.predict(z, t) - d.predict(z, t))) < 1e-3


def test_gmm_midpoint_and_responsibilities():
    m1, m2 = np.zeros((8, 8, 3)), np.ones((8, 8, 3))
    g = gmm_oracle([m1, m2], [0.5, 0.5], 0.05)
    a, _ = noise_coeffs(SCHED, 0.5)
    z = a * (m1 + m2) / 2
    assert np.allclose(g.posterior_mean(z, 0.5), 0.5)
    gamma = g.responsibilities(a * m1 + 0.01, 0.5)
    assert gamma[0] > 0.99
    # log-ratio of the two Gaussian terms, evaluated directly
    var = noise_coeffs(SCHED, 0.5)[1] ** 2 + a * a * 0.05**2
    zc = a * m1 + 0.01
    logr = (np.sum((zc - a * m2) ** 2) - np.sum((zc - a * m1) ** 2)) / (2 * var)
    assert gamma[0] == pytest.approx(1 / (1 + np.exp(-logr)), rel=1e-12)


def test_gmm_responsibilities_sum_and_permute():
    rng = np.random.default_rng(3)
    means = [rng.random((3, 3, 3)) for _ in range(4)]
    w = [0.1, 0.2, 0.3, 0.4]
    g = gmm_oracle(means, w, 0.2)
    perm = [2, 0, 3, 1]
    gp = gmm_oracle([means[i] for i in perm], [w[i] for i in perm], 0.2)
    for _ in range(20):
        t = float(rng.uniform(0.05, 0.95))
        z = rng.standard_normal((3, 3, 3))
        gamma = g.responsibilities(z, t)
        assert gamma.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.allclose(gp.responsibilities(z, t), gamma[perm], atol=1e-12)
        assert np.allclose(gp.predict(z, t), g.predict(z, t), atol=1e-12)


@pytest.mark.parametrize("weights,spread", [([0.5, 0.6], 0.1), ([1.0], 0.1), ([-0.5, 1.5], 0.1), ([0.5, 0.5], 0.0)])
def test_gmm_degenerate_inputs(weights, spread):
    with pytest.raises(ContractError):
        gmm_oracle([np.zeros(3), np.ones(3)], weights, spread)


def test_gray_uncond_routes_empty_condition():
    target = np.zeros((2, 2, 3))
    o = with_gray_uncond(delta_oracle(target), target.shape)
    a, _ = noise_coeffs(SCHED, 0.5)
    assert np.allclose(o.predict(a * target, 0.5, "prompt"), 0.0)
    assert np.allclose(o.predict(a * np.full((2, 2, 3), 0.5), 0.5, ""), 0.0)


def scene_and_target(seed=0, n=2, size=24):
    rng = np.random.default_rng(seed)
    scene = init_scene("iconography", n, size, size, rng, radius_frac=(0.15, 0.3))
    return scene, rng


def test_sds_zero_when_oracle_returns_eps():
    scene, rng = scene_and_target()
    eps = rng.standard_normal((24, 24, 3))
    g = sds_grad(scene, ICON, CODEC, InjectedNoiseEstimator(eps), GuidanceConfig(1.0), 0.5, eps, 1.0, OPTS)
    assert not np.any(g.values)


def test_sds_fixed_point_at_target():
    scene, rng = scene_and_target()
    target = render(scene).data[..., :3]
    eps = rng.standard_normal(target.shape)
    for t in (0.05, 0.4, 0.95):
        g = sds_grad(scene, ICON, CODEC, delta_oracle(target), GuidanceConfig(1.0), t, eps, 1.0, OPTS)
        assert not np.any(g.values)


def test_vpsd_zero_when_estimator_matches_oracle():
    scene, rng = scene_and_target(1)
    oracle = with_gray_uncond(delta_oracle(rng.random((24, 24, 3))), (24, 24, 3))
    guid = GuidanceConfig(7.5)
    eps = rng.standard_normal((24, 24, 3))
    g = vpsd_grad(scene, ICON, CODEC, oracle, OracleEstimator(oracle, guid), guid, 0.6, eps, 1.0, OPTS, condition="p")
    assert not np.any(g.values)


def test_vpsd_with_injected_noise_is_sds_bitwise():
    scene, _ = scene_and_target(2, n=4)
    oracle = with_gray_uncond(delta_oracle(np.full((24, 24, 3), 0.2)), (24, 24, 3))
    guid = GuidanceConfig(7.5)
    a_rng, b_rng = np.random.default_rng(9), np.random.default_rng(9)
    for _ in range(3):
        t = float(a_rng.uniform(0.05, 0.95))
        eps = a_rng.standard_normal((24, 24, 3))
        assert t == float(b_rng.uniform(0.05, 0.95))
        assert np.array_equal(eps, b_rng.standard_normal((24, 24, 3)))
        s = sds_grad(scene, ICON, CODEC, oracle, guid, t, eps, 1.0, OPTS, condition="p")
        v = vpsd_grad(scene, ICON, CODEC, oracle, InjectedNoiseEstimator(eps), guid, t, eps, 1.0, OPTS, condition="p")
        assert np.array_equal(s.values, v.values)


def test_vpsd_zero_estimator_pulls_back_oracle_prediction():
    scene, rng = scene_and_target(3, n=3)
    oracle = delta_oracle(rng.random((24, 24, 3)))
    eps = rng.standard_normal((24, 24, 3))
    v = vpsd_grad(scene, ICON, CODEC, oracle, InjectedNoiseEstimator(np.zeros_like(eps)), GuidanceConfig(1.0), 0.3, eps, 1.0, OPTS)
    z_t = perturb(render(scene).data[..., :3], eps, 0.3, SCHED)
    adjoint = np.zeros((24, 24, 4))
    adjoint[..., :3] = oracle.predict(z_t, 0.3)
    expect = render_vjp(scene, OPTS, adjoint, ICON)
    assert np.allclose(v.values, expect.values, rtol=1e-10, atol=1e-10)


def test_sds_matches_surrogate_finite_differences():
    scene, rng = scene_and_target(4, n=2, size=32)
    target = rng.random((32, 32, 3))
    oracle = delta_oracle(target)
    t, w = 0.5, 0.7
    eps = rng.standard_normal((32, 32, 3))
    g = sds_grad(scene, ICON, CODEC, oracle, GuidanceConfig(1.0), t, eps, w, OPTS)
    z = render(scene).data[..., :3]
    resid = w * (oracle.predict(perturb(z, eps, t, SCHED), t) - eps)

    vec = pack_params(scene, ICON)

    def surrogate(values):
        with torch.no_grad():
            img = render_tensor(scene, OPTS, ICON, torch.from_numpy(values))
        return float(np.sum(img[..., :3].numpy() * resid))

    h = 1e-3
    numeric = np.empty(len(vec))
    for i in range(len(vec)):
        up, dn = vec.values.copy(), vec.values.copy()
        up[i] += h
        dn[i] -= h
        numeric[i] = (surrogate(up) - surrogate(dn)) / (2 * h)
    err = np.linalg.norm(g.values - numeric) / np.linalg.norm(numeric)
    assert err < 2e-2


def test_weighting():
    assert weight_at(SCHED, 0.3) == 1.0
    assert weight_at(SCHED, 0.3, "sigma2") == pytest.approx(noise_coeffs(SCHED, 0.3)[1] ** 2)
    with pytest.raises(ContractError):
        weight_at(SCHED, 0.3, "cubic")


def test_crop_resize_shape_and_range():
    img = torch.rand(20, 24, 4, dtype=torch.float64)
    out = crop_resize(img, np.random.default_rng(0))
    assert out.shape == img.shape
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


def test_estimator_exact_has_zero_loss():
    rng = np.random.default_rng(5)
    x = rng.random((4, 4, 3))
    est = DeskEstimator(x.shape)
    est.set_state("c", x, 1.0)
    loss = estimator_fit_step(est, [x, x], "c", SCHED, rng, 1.0)
    assert loss < 1e-20
    bias, gain = est.state("c")
    assert np.allclose(bias, x, atol=1e-12) and gain == pytest.approx(1.0, abs=1e-12)


def test_estimator_fit_on_fixed_pair():
    rng = np.random.default_rng(6)
    shape = (4, 4, 3)
    x, eps = rng.random(shape), rng.standard_normal(shape)
    z = perturb(x, eps, 0.5, SCHED)[None]
    est = DeskEstimator(shape, init_bias=0.0, init_gain=0.0)
    losses = [est.fit_step(z, [0.5], "c", eps[None], 0.05) for _ in range(200)]
    assert all(v >= 0 for v in losses)
    assert losses[-1] <= 0.1 * losses[0]
    assert all(b <= a + 1e-12 for a, b in zip(losses[:100], losses[1:101]))


def test_estimator_fit_non_increasing_on_fixed_batch():
    rng = np.random.default_rng(7)
    shape = (3, 3, 3)
    ts = rng.uniform(0.05, 0.95, 5)
    eps = rng.standard_normal((5,) + shape)
    z = np.stack([perturb(rng.random(shape), e, t, SCHED) for e, t in zip(eps, ts)])
    est = DeskEstimator(shape)
    losses = [est.fit_step(z, ts, "c", eps, 1.0) for _ in range(100)]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_estimator_conditions_are_independent():
    est = DeskEstimator((2, 2, 3))
    est.set_state("a", np.zeros((2, 2, 3)), 2.0)
    assert est.state("b")[1] == 1.0
    with pytest.raises(ContractError):
        estimator_fit_step(est, [], "a", SCHED, np.random.default_rng(0), 1.0)


def test_ddim_single_step_inverts_delta():
    target = np.random.default_rng(8).random((4, 4, 3))
    out = ddim_sample(delta_oracle(target), SCHED, 1, target.shape, "", np.random.default_rng(0))
    assert np.allclose(out, target, atol=1e-10)


def test_ddim_twenty_steps_reach_delta_target():
    target = np.random.default_rng(9).random((6, 6, 3))
    out = ddim_sample(delta_oracle(target), SCHED, 20, target.shape, "", np.random.default_rng(1))
    assert np.max(np.abs(out - target)) < 0.05


def test_ddim_runs_on_tensors():
    target = torch.full((2, 2, 3), 0.25, dtype=torch.float64)
    oracle = delta_oracle(target.numpy())
    z = torch.zeros((2, 2, 3), dtype=torch.float64)
    out = ddim_run(lambda z_t, t: torch.from_numpy(oracle.predict(z_t.numpy(), t)), SCHED, z, 5)
    assert isinstance(out, torch.Tensor)
    assert torch.allclose(out, target)


@pytest.mark.slow
def test_delta_descent_decreases_over_windows():
    from vectordream.vpsd import RunConfig, vpsd_run

    target = render(init_scene("iconography", 16, 64, 64, np.random.default_rng(123))).data[..., :3]
    errors = []

    def record(it, particles):
        errors.append(float(np.sum((render(particles.particles[0].scene).data[..., :3] - target) ** 2)))

    cfg = RunConfig(k=1, total_iters=200, cfg_scale=1.0, mode="sds", seed=0)
    vpsd_run(cfg, delta_oracle(target), callback=record)
    windows = [np.mean(errors[i:i + 50]) for i in range(0, 200, 50)]
    assert all(a > b for a, b in zip(windows, windows[1:]))


def test_rounding_floor_only_removes_cancellation_noise():
    from vectordream.score import _difference

    z = np.array([1.0, 2.0, -3.0])
    pred = np.array([0.5, 0.5 + 1e-15, 0.5 + 1e-9])
    out = _difference(pred, np.full(3, 0.5), z, 0.5)
    assert out[0] == 0.0 and out[1] == 0.0
    assert out[2] == pytest.approx(1e-9, rel=1e-6)
