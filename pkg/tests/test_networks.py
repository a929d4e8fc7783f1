import numpy as np
import pytest

from safeadapt import networks as nets
from safeadapt.serialize import load_checkpoint, save_checkpoint


def naive_mlp(params, x):
    """Independent layer-by-layer evaluation with explicit loops."""
    spec = params.spec
    layers = nets.mlp_matrices(params)
    h = list(x)
    for li, (w, b) in enumerate(layers):
        out = []
        for j in range(w.shape[1]):
            s = b[j]
            for i in range(w.shape[0]):
                s += h[i] * w[i, j]
            out.append(s)
        if li < len(layers) - 1:
            if spec.activation == "tanh":
                out = [np.tanh(v) for v in out]
            else:
                out = [max(v, 0.0) for v in out]
        h = out
    return np.array(h)


def naive_conv1d(params, window):
    """Direct nested-loop correlation + head, independent of the library path."""
    spec = params.spec
    convs, head = nets.conv_matrices(params)
    h = np.asarray(window, dtype=np.float64)
    for (w, b), (_, kernel, stride) in zip(convs, spec.conv_layers):
        c_out = w.shape[0]
        t_out = (h.shape[1] - kernel) // stride + 1
        out = np.zeros((c_out, t_out))
        for o in range(c_out):
            for t in range(t_out):
                s = b[o]
                for c in range(h.shape[0]):
                    for kk in range(kernel):
                        s += w[o, c, kk] * h[c, t * stride + kk]
                out[o, t] = s
        h = np.tanh(out) if spec.activation == "tanh" else np.maximum(out, 0.0)
    flat = h.reshape(-1)
    for li, (w, b) in enumerate(head):
        flat = flat @ w + b
        if li < len(head) - 1:
            flat = np.tanh(flat) if spec.activation == "tanh" else np.maximum(flat, 0.0)
    return flat


def test_identity_affine_map():
    spec = nets.MlpSpec(2, (), 2)
    theta = np.concatenate([np.eye(2).ravel(), np.zeros(2)])
    params = nets.NetworkParams(spec, theta)
    out = nets.forward_mlp(params, np.array([1.0, 2.0]))
    assert np.array_equal(out, np.array([1.0, 2.0]))


def test_wrong_input_length_raises():
    rng = np.random.default_rng(0)
    params = nets.init_params(nets.MlpSpec(3, (4,), 1), rng)
    with pytest.raises(ValueError):
        nets.forward_mlp(params, np.zeros(4))


def test_mlp_matches_naive_oracle():
    rng = np.random.default_rng(7)
    spec = nets.MlpSpec(2, (5, 4), 3, "tanh")
    params = nets.init_params(spec, rng)
    x = np.array([0.5, -0.3])
    assert np.allclose(nets.forward_mlp(params, x), naive_mlp(params, x), atol=1e-12)


def test_conv_zero_weights_gives_head_bias():
    spec = nets.Conv1dSpec(2, 10, ((3, 3, 1),), (4,), 2)
    theta = np.zeros(spec.param_count())
    params = nets.NetworkParams(spec, theta)
    # set the final bias only
    params.theta[-2:] = [1.5, -2.0]
    out = nets.forward_conv1d(params, np.random.default_rng(0).normal(size=(2, 10)))
    assert np.allclose(out, [1.5, -2.0])


def test_conv_wrong_window_raises():
    rng = np.random.default_rng(1)
    params = nets.init_params(nets.Conv1dSpec(2, 10, ((3, 3, 1),), (4,), 2), rng)
    with pytest.raises(ValueError):
        nets.forward_conv1d(params, np.zeros((2, 9)))


def test_conv_matches_naive_oracle():
    rng = np.random.default_rng(8)
    spec = nets.Conv1dSpec(3, 12, ((4, 5, 1), (3, 3, 2)), (6,), 2, "relu")
    params = nets.init_params(spec, rng)
    window = rng.normal(size=(3, 12))
    assert np.allclose(nets.forward_conv1d(params, window), naive_conv1d(params, window), atol=1e-12)


def test_receptive_field_exceeding_window_rejected():
    with pytest.raises(ValueError):
        nets.Conv1dSpec(2, 6, ((4, 5, 1), (4, 5, 1)), (4,), 2)


def test_param_count_and_theta_validation():
    spec = nets.MlpSpec(3, (4,), 2)
    assert spec.param_count() == (3 + 1) * 4 + (4 + 1) * 2
    with pytest.raises(ValueError):
        nets.NetworkParams(spec, np.zeros(spec.param_count() + 1))
    with pytest.raises(ValueError):
        nets.NetworkParams(spec, np.full(spec.param_count(), np.nan))


def test_seed_determinism():
    specs = [nets.MlpSpec(3, (8, 8), 2), nets.Conv1dSpec(2, 10, ((3, 3, 1),), (4,), 2)]
    for spec in specs:
        p1 = nets.init_params(spec, np.random.default_rng(42))
        p2 = nets.init_params(spec, np.random.default_rng(42))
        assert np.array_equal(p1.theta, p2.theta)
    params = nets.init_params(specs[0], np.random.default_rng(5))
    x = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(nets.forward_mlp(params, x), nets.forward_mlp(params, x))


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(9)
    for spec in (
        nets.MlpSpec(3, (7,), 2, "relu"),
        nets.Conv1dSpec(4, 15, ((5, 5, 1),), (8,), 3, "tanh"),
    ):
        params = nets.init_params(spec, rng)
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, params, {"seed": 9, "note": "test"})
        loaded, meta = load_checkpoint(path)
        assert meta["seed"] == 9
        assert loaded.spec == spec
        assert np.array_equal(loaded.theta, params.theta)
        if isinstance(spec, nets.MlpSpec):
            x = rng.normal(size=(4, spec.input_dim))
            assert np.array_equal(nets.forward_mlp(params, x), nets.forward_mlp(loaded, x))
        else:
            w = rng.normal(size=(2, spec.channels_in, spec.window))
            assert np.array_equal(nets.forward_conv1d(params, w), nets.forward_conv1d(loaded, w))


def test_lipschitz_bound_linear_case_exact():
    # for a single affine layer the product bound is the induced norm itself
    spec = nets.MlpSpec(3, (), 2)
    w = np.array([[1.0, -2.0], [0.5, 0.0], [3.0, 1.0]])
    params = nets.NetworkParams(spec, np.concatenate([w.ravel(), np.zeros(2)]))
    assert nets.mlp_lipschitz_bound(params) == pytest.approx(4.0)  # max row sum
    assert nets.mlp_lipschitz_bound(params, slice(0, 1)) == pytest.approx(3.0)
    assert nets.mlp_lipschitz_bound(params, slice(3, 3)) == 0.0
