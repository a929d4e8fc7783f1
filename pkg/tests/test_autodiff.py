import numpy as np
import pytest

from safeadapt import autodiff as ad
from safeadapt import networks as nets


def rel_err(a, b, floor=1e-6):
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.max(np.abs(a - b) / scale)


def test_quadratic_gradient_is_theta():
    rng = np.random.default_rng(0)
    spec = nets.MlpSpec(3, (4,), 2)
    params = nets.init_params(spec, rng)

    def loss(leaves):
        terms = [ad.vsum(ad.square(v)) for v in leaves]
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return ad.scale(total, 0.5)

    grad = nets.gradient(loss, params)
    assert np.allclose(grad, params.theta, atol=0, rtol=0)


def test_constant_loss_zero_gradient():
    rng = np.random.default_rng(1)
    spec = nets.MlpSpec(2, (), 2)
    params = nets.init_params(spec, rng)
    grad = nets.gradient(lambda leaves: ad.lift(np.asarray(3.5)), params)
    assert np.all(grad == 0.0)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    spec = nets.MlpSpec(3, (6, 5), 2, "tanh")
    params = nets.init_params(spec, rng)
    x = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 2))

    def tape_loss(leaves):
        out = nets.mlp_apply(spec, leaves, x)
        return ad.mean(ad.square(ad.sub(out, ad.lift(target))))

    def plain_loss(theta):
        out = nets.forward_mlp(nets.NetworkParams(spec, theta), x)
        return np.mean((out - target) ** 2)

    grad = nets.gradient(tape_loss, params)
    fd = ad.finite_difference_gradient(plain_loss, params.theta, h=1e-5)
    assert rel_err(grad, fd) < 1e-4


def test_gradient_random_triples():
    # analytic vs central differences across random architectures/inputs
    # tanh only: central differences straddle relu kinks and disagree there
    # by construction, not because the tape is wrong
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        n_in = int(rng.integers(1, 5))
        n_out = int(rng.integers(1, 4))
        hidden = tuple(rng.integers(2, 7, size=rng.integers(0, 3)))
        spec = nets.MlpSpec(n_in, hidden, n_out, "tanh")
        params = nets.init_params(spec, rng)
        x = rng.normal(size=(3, n_in))

        def tape_loss(leaves):
            return ad.mean(ad.square(nets.mlp_apply(spec, leaves, x)))

        def plain_loss(theta):
            return np.mean(nets.forward_mlp(nets.NetworkParams(spec, theta), x) ** 2)

        grad = nets.gradient(tape_loss, params)
        fd = ad.finite_difference_gradient(plain_loss, params.theta, h=1e-5)
        worst = max(worst, rel_err(grad, fd, floor=1e-4))
    assert worst < 1e-4


def test_conv1d_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    spec = nets.Conv1dSpec(3, 14, ((4, 5, 1), (3, 3, 2)), (6,), 2)
    params = nets.init_params(spec, rng)
    window = rng.normal(size=(2, 3, 14))

    def tape_loss(leaves):
        return ad.mean(ad.square(nets.conv1d_apply(spec, leaves, window)))

    def plain_loss(theta):
        return np.mean(nets.forward_conv1d(nets.NetworkParams(spec, theta), window) ** 2)

    grad = nets.gradient(tape_loss, params)
    fd = ad.finite_difference_gradient(plain_loss, params.theta, h=1e-5)
    assert rel_err(grad, fd) < 1e-4


def test_bmatvec_and_concat_gradients():
    rng = np.random.default_rng(5)
    g_val = rng.normal(size=(3, 2, 2))
    a_val = rng.normal(size=(3, 2))
    g_var, a_var = ad.leaf(g_val), ad.leaf(a_val)
    out = ad.vsum(ad.square(ad.bmatvec(g_var, a_var)))
    ad.backward(out)

    def f_g(flat):
        return np.sum(np.einsum("bnm,bm->bn", flat.reshape(3, 2, 2), a_val) ** 2)

    fd = ad.finite_difference_gradient(f_g, g_val.ravel())
    assert rel_err(g_var.grad.ravel(), fd) < 1e-4

    parts = [ad.leaf(rng.normal(size=(2, 3))), ad.leaf(rng.normal(size=(2, 1)))]
    cat = ad.concat(parts, axis=1)
    loss = ad.vsum(ad.square(cat))
    ad.backward(loss)
    for part in parts:
        assert np.allclose(part.grad, 2.0 * part.value)


def test_slice_rows_gradient_scatters():
    w = ad.leaf(np.arange(12.0).reshape(4, 3))
    loss = ad.vsum(ad.square(ad.slice_rows(w, 1, 3)))
    ad.backward(loss)
    expected = np.zeros((4, 3))
    expected[1:3] = 2.0 * w.value[1:3]
    assert np.array_equal(w.grad, expected)


def test_backward_rejects_nonscalar_and_nonfinite():
    v = ad.leaf(np.ones(3))
    with pytest.raises(ValueError):
        ad.backward(v)
    bad = ad.Var(np.asarray(np.inf))  # bypass leaf validation to hit backward's check
    with pytest.raises(FloatingPointError):
        ad.backward(bad)


def test_nonfinite_input_rejected():
    with pytest.raises(FloatingPointError):
        ad.leaf(np.array([1.0, np.nan]))
