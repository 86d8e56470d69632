import numpy as np
import pytest

from flowdistill.distill import (
    AdamState,
    DistillConfig,
    adam_step,
    fsd_euler_step_2d,
    guided_residual,
    run_distill_2d,
    sds_residual_2d,
)
from flowdistill.errors import ConfigurationError, OrderingError
from flowdistill.oracle import GuidanceSpec, MixtureOracle, epsilon_pred
from flowdistill.prng import RandomStream
from flowdistill.sampler import ddim_step, ddim_trajectory
from flowdistill.schedule import NoiseSchedule, TimestepPlan, alpha_sigma

SCHED = NoiseSchedule()
NOG = GuidanceSpec()


# ---------------------------------------------------------------- adam

def test_adam_zero_gradient():
    state, delta = adam_step(AdamState.zeros(3), np.zeros(3), 0.01)
    assert np.array_equal(delta, np.zeros(3))
    assert state.step == 1


def test_adam_hand_value():
    # fresh state, g=2: m_hat=2, v_hat=4, delta = -eta*2/(2+1e-8)
    _, delta = adam_step(AdamState.zeros(()), 2.0, 0.01)
    assert np.isclose(delta, -0.01 * 2.0 / (2.0 + 1e-8), rtol=0, atol=1e-15)


def test_adam_first_step_scale_invariance():
    _, d1 = adam_step(AdamState.zeros(()), 3.7, 0.01)
    _, d2 = adam_step(AdamState.zeros(()), 3700.0, 0.01)
    assert abs(d1 - d2) <= 1e-6


def test_adam_state_invariants():
    state = AdamState.zeros(4)
    rng = RandomStream(1, 1)
    for i in range(10):
        state, _ = adam_step(state, rng.normal(4), 0.01)
        assert state.step == i + 1
        assert np.all(state.v >= 0)


# ------------------------------------------------------------ residuals

def test_residual_cfg_matches_guided_combination():
    rng = RandomStream(2, 1)
    orc = MixtureOracle([0.4, 0.3, 0.3], rng.normal((3, 2)), [0.3, 0.3, 0.3],
                        {"y": [0, 1]})
    g = GuidanceSpec(mode="cfg", scale=7.5, condition="y")
    theta = rng.normal(2)
    eps = rng.normal(2)
    t = 0.5
    resid = sds_residual_2d(theta, eps, t, orc, g, SCHED)
    a, s = alpha_sigma(SCHED, t)
    x_t = a * theta + s * eps
    e_y = epsilon_pred(orc, x_t, t, SCHED, "y")
    e_u = epsilon_pred(orc, x_t, t, SCHED, "∅")
    ref = 7.5 * (e_y - e_u) + (e_u - eps)
    assert np.max(np.abs(resid - ref)) <= 1e-12


def test_residual_nfsd_is_noise_free():
    rng = RandomStream(3, 1)
    orc = MixtureOracle([0.4, 0.3, 0.3], rng.normal((3, 2)), [0.3, 0.4, 0.5],
                        {"y": [0], "y_neg": [2]})
    g = GuidanceSpec(mode="nfsd-style", scale=4.0, condition="y",
                     negative_condition="y_neg")
    theta, eps = rng.normal(2), rng.normal(2)
    t = 0.6
    resid = sds_residual_2d(theta, eps, t, orc, g, SCHED)
    a, s = alpha_sigma(SCHED, t)
    x_t = a * theta + s * eps
    e_y = epsilon_pred(orc, x_t, t, SCHED, "y")
    e_u = epsilon_pred(orc, x_t, t, SCHED, "∅")
    e_n = epsilon_pred(orc, x_t, t, SCHED, "y_neg")
    assert np.max(np.abs(resid - (4.0 * (e_y - e_u) + (e_u - e_n)))) <= 1e-12
    # and it ignores the added noise
    resid2 = sds_residual_2d(theta, rng.normal(2), t, orc, g, SCHED)
    assert not np.allclose(resid, resid2)  # x_t moved with the noise
    same_x = guided_residual(orc, x_t, t, SCHED, g, eps)
    assert np.array_equal(resid, same_x)


def test_residual_point_mass_formula():
    mu = np.array([1.0, -0.5])
    orc = MixtureOracle([1.0], [mu], [0.0])
    theta = np.array([0.2, 0.9])
    eps = np.array([0.3, -0.3])
    t = 0.4
    a, s = alpha_sigma(SCHED, t)
    resid = sds_residual_2d(theta, eps, t, orc, NOG, SCHED)
    assert np.allclose(resid, a * (theta - mu) / s, atol=1e-12)


def test_residual_symmetric_zero():
    orc = MixtureOracle([0.5, 0.5], [[1.5], [-1.5]], [0.2, 0.2])
    resid = sds_residual_2d(np.zeros(1), np.zeros(1), 0.5, orc, NOG, SCHED)
    assert np.allclose(resid, 0.0, atol=1e-14)


def test_residual_fixed_point_zero():
    # prediction equals the added noise exactly when theta sits at the mass
    mu = np.array([0.7, 0.7])
    orc = MixtureOracle([1.0], [mu], [0.0])
    resid = sds_residual_2d(mu, np.array([0.4, -1.1]), 0.5, orc, NOG, SCHED)
    assert np.max(np.abs(resid)) <= 1e-12


# ------------------------------------------------------------ euler step

def test_euler_step_fixed_point():
    mu = np.array([1.0])
    orc = MixtureOracle([1.0], [mu], [0.0])
    # with theta at mu, eps_hat(x_s) == eps_init, so the step is a no-op
    out = fsd_euler_step_2d(mu, np.array([0.8]), 0.7, 0.4, orc, NOG, SCHED)
    assert np.allclose(out, mu, atol=1e-12)


def test_euler_step_reconstruction_equals_ddim():
    rng = RandomStream(5, 1)
    orc = MixtureOracle([0.5, 0.3, 0.2], rng.normal((3, 2)), [0.3, 0.2, 0.4],
                        {"y": [0, 1]})
    g = GuidanceSpec(mode="cfg", scale=2.5, condition="y")
    for _ in range(20):
        xc = rng.normal(2)
        eps = rng.normal(2)
        s_t = rng.uniform(low=0.3, high=0.95)
        t_t = s_t - rng.uniform(low=0.01, high=0.25)
        a_s, s_s = alpha_sigma(SCHED, s_t)
        a_t, s_tt = alpha_sigma(SCHED, t_t)
        xc_t = fsd_euler_step_2d(xc, eps, s_t, t_t, orc, g, SCHED)
        recon = a_t * xc_t + s_tt * eps
        ref = ddim_step(a_s * xc + s_s * eps, s_t, t_t, orc, g, SCHED)
        assert np.max(np.abs(recon - ref)) / np.max(np.abs(ref)) <= 1e-9


def test_euler_step_point_mass_symbolic():
    mu = np.array([2.0])
    orc = MixtureOracle([1.0], [mu], [0.0])
    xc = np.array([0.5])
    eps = np.array([-0.4])
    s_t, t_t = 0.8, 0.6
    a_s, s_s = alpha_sigma(SCHED, s_t)
    a_t, s_tt = alpha_sigma(SCHED, t_t)
    dlam = s_tt / a_t - s_s / a_s
    ref = xc + dlam * (a_s * xc + s_s * eps - a_s * mu) / s_s - dlam * eps
    out = fsd_euler_step_2d(xc, eps, s_t, t_t, orc, NOG, SCHED)
    assert np.allclose(out, ref, atol=1e-12)


def test_euler_step_ordering():
    orc = MixtureOracle([1.0], [[0.0]], [0.3])
    with pytest.raises(OrderingError):
        fsd_euler_step_2d(np.zeros(1), np.zeros(1), 0.5, 0.5, orc, NOG, SCHED)


# ------------------------------------------------------------- run loops

def test_config_validation():
    uni = TimestepPlan(kind="uniform-random", tau_end=10)
    with pytest.raises(ConfigurationError):
        DistillConfig(method="fsd", plan=uni)
    with pytest.raises(ConfigurationError):
        DistillConfig(method="fsd-euler", plan=uni)
    DistillConfig(method="sds", plan=uni)  # fine
    with pytest.raises(ConfigurationError):
        DistillConfig(method="nope")


def test_default_learning_rates():
    assert DistillConfig(method="fsd").eta == 3e-3
    assert DistillConfig(method="sds",
                         plan=TimestepPlan(kind="uniform-random")).eta == 2e-2
    assert DistillConfig(method="fsd", learning_rate=0.1).eta == 0.1


def test_sds_rejects_fixed_noise():
    orc = MixtureOracle([1.0], [[0.0]], [0.3])
    conf = DistillConfig(method="sds", plan=TimestepPlan(kind="uniform-random"))
    with pytest.raises(ConfigurationError):
        run_distill_2d(np.zeros(1), conf, np.zeros(1), orc, SCHED,
                       RandomStream(0, 1))


def test_zero_residual_leaves_theta_unchanged():
    mu = np.array([0.7, -0.2])
    orc = MixtureOracle([1.0], [mu], [0.0])
    # one step with an exactly-zero residual is an exact no-op
    conf1 = DistillConfig(method="fsd", plan=TimestepPlan(tau_end=1))
    theta, _ = run_distill_2d(mu, conf1, np.array([0.5, 0.5]), orc, SCHED,
                              RandomStream(0, 1), record_params=False)
    assert np.array_equal(theta, mu)
    # over many steps, rounding dust in x_t re-enters through Adam's
    # normalized updates; the fixed point stays attracting and theta
    # remains pinned to working precision of the loop
    conf = DistillConfig(method="fsd", plan=TimestepPlan(tau_end=50))
    theta, _ = run_distill_2d(mu, conf, np.array([0.5, 0.5]), orc, SCHED,
                              RandomStream(0, 1), record_params=False)
    assert np.max(np.abs(theta - mu)) <= 1e-3


def test_fsd_point_mass_convergence():
    # fixed point of the residual; learning rate and budget from the run
    # defaults (eta=3e-3, 500 iterations)
    mu = np.array([0.8, -0.6])
    orc = MixtureOracle([1.0], [mu], [0.0])
    conf = DistillConfig(method="fsd", plan=TimestepPlan(tau_end=500))
    eps = RandomStream(1, 1).normal(2)
    a0, s0 = alpha_sigma(SCHED, conf.plan.t_start)
    theta, _ = run_distill_2d((1 - s0) / a0 * eps, conf, eps, orc, SCHED,
                              RandomStream(1, 2), record_params=False)
    assert np.max(np.abs(theta - mu)) <= 1e-3


def test_fsd_adam_tracks_sampler_endpoint():
    # same fixed noise, same grid: the Adam-driven run lands within 2% of
    # the sampler's generated sample (optimizer-vs-Euler gap only)
    orc = MixtureOracle([0.4, 0.35, 0.25],
                        [[2.0, 0.0], [-1.5, 1.5], [0.0, -2.0]],
                        [0.03, 0.03, 0.03])
    plan = TimestepPlan(kind="linear-anneal", tau_end=500)
    conf = DistillConfig(method="fsd", plan=plan, learning_rate=5e-3)
    a0, s0 = alpha_sigma(SCHED, plan.t_start)
    for seed in range(4):
        eps = RandomStream(seed, 1).normal(2)
        traj = ddim_trajectory(eps, 500, orc, NOG, SCHED)
        theta, _ = run_distill_2d((1 - s0) / a0 * eps, conf, eps, orc, SCHED,
                                  RandomStream(seed, 2), record_params=False)
        rel = (np.linalg.norm(theta - traj.final_sample)
               / np.linalg.norm(traj.final_sample))
        assert rel <= 0.02


def test_run_deterministic():
    orc = MixtureOracle([0.5, 0.5], [[2.0], [-2.0]], [0.1, 0.1])
    plan = TimestepPlan(kind="uniform-random", tau_end=100)
    conf = DistillConfig(method="sds", plan=plan)
    outs = []
    for _ in range(2):
        theta, dlog = run_distill_2d(np.zeros(1), conf, None, orc, SCHED,
                                     RandomStream(9, 2))
        outs.append((theta.copy(), dlog.ts.copy()))
    assert np.array_equal(outs[0][0], outs[1][0])
    assert np.array_equal(outs[0][1], outs[1][1])


def test_dominant_mode_preference():
    # asymmetric weights: SDS picks the dominant mode at least as often
    # as the fixed-noise runs do
    orc = MixtureOracle([0.8, 0.2], [[2.0], [-2.0]], [0.1, 0.1])
    n = 12
    sds_dominant = 0
    fsd_dominant = 0
    for seed in range(n):
        uni = TimestepPlan(kind="uniform-random", tau_end=200)
        conf_s = DistillConfig(method="sds", plan=uni, learning_rate=2e-2)
        th_s, _ = run_distill_2d(np.zeros(1), conf_s, None, orc, SCHED,
                                 RandomStream(seed, 2), record_params=False)
        sds_dominant += int(abs(th_s[0] - 2.0) < abs(th_s[0] + 2.0))

        lin = TimestepPlan(kind="linear-anneal", tau_end=200)
        conf_f = DistillConfig(method="fsd", plan=lin, learning_rate=1e-2)
        eps = RandomStream(seed, 1).normal(1)
        a0, s0 = alpha_sigma(SCHED, lin.t_start)
        th_f, _ = run_distill_2d((1 - s0) / a0 * eps, conf_f, eps, orc, SCHED,
                                 RandomStream(seed, 2), record_params=False)
        fsd_dominant += int(abs(th_f[0] - 2.0) < abs(th_f[0] + 2.0))
    assert sds_dominant >= fsd_dominant


def test_log_columns():
    orc = MixtureOracle([1.0], [[0.5]], [0.2])
    conf = DistillConfig(method="fsd", plan=TimestepPlan(tau_end=20))
    _, dlog = run_distill_2d(np.zeros(1), conf, np.ones(1), orc, SCHED,
                             RandomStream(2, 2))
    assert len(dlog.taus) == len(dlog.ts) == len(dlog.loss_proxy) == 20
    assert dlog.thetas.shape == (20, 1)
    assert np.all(np.isfinite(dlog.loss_proxy))
