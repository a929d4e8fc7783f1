import numpy as np
import pytest

from safeadapt import dynlearn as dl
from safeadapt import networks as nets
from safeadapt.envs import ConfigMode, make_env


def make_linear_dataset(rng, n_rows=3000, noise=0.0):
    """x' = A x + B a with a 2-D configuration that plays no role."""
    a_mat = np.array([[0.9, 0.1], [-0.05, 0.95]])
    b_mat = np.array([[0.0], [0.2]])
    x = rng.normal(size=(n_rows, 2))
    a = rng.uniform(-1.0, 1.0, size=(n_rows, 1))
    e = rng.normal(size=(n_rows, 2))
    x_next = x @ a_mat.T + a @ b_mat.T
    if noise:
        x_next = x_next + rng.uniform(-noise, noise, size=x_next.shape)
    return dl.TransitionDataset("linear", x, e, a, x_next), a_mat, b_mat


def linear_model(latent_dim=2):
    enc = nets.NetworkParams(nets.MlpSpec(2, (), latent_dim), np.zeros((2 + 1) * latent_dim))
    f_spec = nets.MlpSpec(2 + latent_dim, (), 2)
    g_spec = nets.MlpSpec(2 + latent_dim, (), 2)
    return dl.DynModel(
        "linear", 2, 1, 2, latent_dim,
        enc,
        nets.NetworkParams(f_spec, np.zeros(f_spec.param_count())),
        nets.NetworkParams(g_spec, np.zeros(g_spec.param_count())),
    )


def exact_linear_model(a_mat, b_mat):
    """Closed-form parameters reproducing the linear system exactly."""
    model = linear_model()
    # f head: delta = (A - I) x with identity normalization
    w = np.zeros((4, 2))
    w[:2, :] = (a_mat - np.eye(2)).T
    model.f_head.theta[: w.size] = w.ravel()
    # g head: constant output B
    model.g_head.theta[-2:] = b_mat.ravel()
    return model


def test_collect_random_rejects_zero():
    env = make_env("pendulum")
    with pytest.raises(ValueError):
        dl.collect_random(env, 0, np.random.default_rng(0))


def test_collect_random_determinism_and_count():
    env = make_env("pendulum")
    d1 = dl.collect_random(env, 1500, np.random.default_rng(3))
    d2 = dl.collect_random(env, 1500, np.random.default_rng(3))
    assert len(d1) == 1500
    for field in ("x", "e", "a", "x_next"):
        assert np.array_equal(getattr(d1, field), getattr(d2, field))


def test_collect_random_action_mean_near_box_center():
    env = make_env("pendulum")
    data = dl.collect_random(env, 20000, np.random.default_rng(4))
    # uniform on [-2, 2]: std = 4/sqrt(12); mean of N draws within 3 sigma
    sigma = (4.0 / np.sqrt(12.0)) / np.sqrt(len(data))
    assert abs(float(data.a.mean())) < 3.0 * sigma


def test_collect_fixed_mode_constant_config():
    env = make_env("pendulum")
    data = dl.collect_random(
        env, 500, np.random.default_rng(5), config_mode=ConfigMode("fixed", angle=np.pi / 4)
    )
    assert np.allclose(data.e, data.e[0])


def test_predict_affine_in_action():
    env = make_env("pendulum")
    rng = np.random.default_rng(6)
    model = dl.make_dyn_model(env, rng)
    x = rng.normal(size=(8, 2)) * 0.3
    z = rng.normal(size=(8, 4)) * 0.5
    a1 = rng.uniform(-2, 2, size=(8, 1))
    a2 = rng.uniform(-2, 2, size=(8, 1))
    lhs = (
        model.predict_next(x, z, a1 + a2)
        - model.predict_next(x, z, a1)
        - model.predict_next(x, z, a2)
        + model.predict_next(x, z, np.zeros_like(a1))
    )
    assert np.max(np.abs(lhs)) < 1e-12


def test_predict_matches_manual_composition():
    env = make_env("pendulum")
    rng = np.random.default_rng(7)
    model = dl.make_dyn_model(env, rng)
    model.x_mean = np.array([0.1, -0.2])
    model.x_std = np.array([0.5, 1.5])
    x = np.array([0.2, 0.4])
    e = np.array([1.0, -0.5])
    z = model.encode(e)
    assert np.allclose(z, np.tanh(nets.forward_mlp(model.encoder, (e - model.e_mean) / model.e_std)))
    inp = np.concatenate([(x - model.x_mean) / model.x_std, z])
    f, g = model.predict(x, z)
    assert np.allclose(f, x + nets.forward_mlp(model.f_head, inp))
    assert np.allclose(g.ravel(), nets.forward_mlp(model.g_head, inp))


def test_train_dyn_linear_system_reaches_regression_floor():
    rng = np.random.default_rng(8)
    data, _, _ = make_linear_dataset(rng)
    model = linear_model()
    cfg = dl.DynTrainConfig(epochs=220, batch_size=256, learning_rate=2e-2,
                            latent_gain_penalty=0.0, weight_decay=0.0)
    model, report = dl.train_dyn(data, model, cfg, rng)
    assert report.final_holdout_mse < 1e-6


def test_train_dyn_empty_dataset():
    empty = dl.TransitionDataset("x", np.zeros((0, 2)), np.zeros((0, 2)),
                                 np.zeros((0, 1)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        dl.train_dyn(empty, linear_model(), dl.DynTrainConfig(), np.random.default_rng(0))


def test_eval_dyn_perfect_model_zero_residuals():
    rng = np.random.default_rng(9)
    data, a_mat, b_mat = make_linear_dataset(rng, n_rows=500)
    model = exact_linear_model(a_mat, b_mat)
    ev = dl.eval_dyn(model, data)
    assert ev.mse < 1e-28
    assert ev.residual_l1_max < 1e-13


def test_eval_dyn_wrong_system_larger_residuals():
    rng = np.random.default_rng(10)
    data, a_mat, b_mat = make_linear_dataset(rng, n_rows=500)
    right = exact_linear_model(a_mat, b_mat)
    wrong = exact_linear_model(a_mat + 0.1, b_mat)
    assert dl.eval_dyn(wrong, data).mse > dl.eval_dyn(right, data).mse


def test_eval_dyn_single_transition_quantiles():
    rng = np.random.default_rng(11)
    data, a_mat, b_mat = make_linear_dataset(rng, n_rows=1, noise=0.01)
    model = exact_linear_model(a_mat, b_mat)
    ev = dl.eval_dyn(model, data)
    assert ev.residual_l1_max == pytest.approx(ev.residual_l1_q99)


def test_blind_model_worse_than_aware_on_wind_task():
    env = make_env("pendulum")
    rng = np.random.default_rng(12)
    data = dl.collect_random(env, 12000, rng)
    cfg = dl.DynTrainConfig(epochs=15, batch_size=256)
    aware = dl.make_dyn_model(env, np.random.default_rng(1), head_hidden=(32, 32))
    aware, rep_aware = dl.train_dyn(data, aware, cfg, np.random.default_rng(2))
    blind = dl.make_dyn_model(env, np.random.default_rng(1), head_hidden=(32, 32), blind=True)
    blind, rep_blind = dl.train_dyn(data, blind, cfg, np.random.default_rng(2))
    assert rep_aware.final_holdout_mse < rep_blind.final_holdout_mse


def test_dataset_roundtrip_bit_exact(tmp_path):
    env = make_env("planar")
    data = dl.collect_random(env, 300, np.random.default_rng(13), seed_label=13)
    path = tmp_path / "d.trans"
    data.save(path)
    back = dl.TransitionDataset.load(path)
    assert back.env_id == "planar" and back.seed == 13
    for field in ("x", "e", "a", "x_next"):
        assert np.array_equal(getattr(data, field), getattr(back, field))


def test_model_roundtrip_bit_exact(tmp_path):
    env = make_env("car")
    rng = np.random.default_rng(14)
    model = dl.make_dyn_model(env, rng, blind=False)
    model.x_mean = rng.normal(size=4)
    model.x_std = np.abs(rng.normal(size=4)) + 0.5
    path = tmp_path / "m.ckpt"
    model.save(path)
    back = dl.DynModel.load(path)
    x = env.explore_state_batch(rng, 10)
    e = env.sample_config_batch(ConfigMode("per_step"), rng, 10)
    z1, z2 = model.encode(e), back.encode(e)
    assert np.array_equal(z1, z2)
    f1, g1 = model.predict(x, z1)
    f2, g2 = back.predict(x, z2)
    assert np.array_equal(f1, f2) and np.array_equal(g1, g2)


def test_latent_decoder_recovers_configuration():
    env = make_env("pendulum")
    rng = np.random.default_rng(15)
    data = dl.collect_random(env, 20000, rng)
    model = dl.make_dyn_model(env, rng)
    cfg = dl.DynTrainConfig(epochs=12)
    model, _ = dl.train_dyn(data, model, cfg, rng)
    decoder = dl.fit_latent_decoder(model, data.e[:4000])
    e_true = env.sample_config_batch(ConfigMode("per_step"), rng, 200)
    e_hat = decoder(model.encode(e_true))
    corr = np.corrcoef(e_hat[:, 0], e_true[:, 0])[0, 1]
    assert corr > 0.95
