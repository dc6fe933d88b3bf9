import numpy as np
import pytest

from rtlab.attention import BiasSpec
from rtlab.autograd import (
    LayerGrads, dot_product_test, finite_diff_jacobian, gradcheck, rel_error, rt_backward,
    transformer_backward,
)
from rtlab.layers import init_layer_params, named_arrays, rt_forward_naive
from rtlab.tiling import rt_forward_tiled


def test_fd_jacobian_identity_and_linear(rng):
    x0 = rng.normal(size=5)
    np.testing.assert_allclose(finite_diff_jacobian(lambda x: x, x0), np.eye(5), atol=1e-10)
    m = rng.normal(size=(3, 5))
    np.testing.assert_allclose(finite_diff_jacobian(lambda x: m @ x, x0), m, atol=1e-8)
    with pytest.raises(ValueError):
        finite_diff_jacobian(lambda x: x, x0, h=0)


def test_rel_error_floor():
    assert rel_error(0.0, 0.0) == 0.0
    assert rel_error(1e-12, 0.0) == pytest.approx(1e-4)


@pytest.mark.parametrize("arch", ["rt", "tf"])
@pytest.mark.parametrize("qk_norm", [True, False])
def test_gradcheck_passes(rng, arch, qk_norm):
    p = init_layer_params(rng, 6, 2, qk_norm=qk_norm, bias=BiasSpec("alibi"))
    x, seed = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    rep = gradcheck(p, x, seed, tol=1e-6, arch=arch)
    assert rep.passed, rep


def test_gradcheck_no_kv_norm_and_scaled_logits(rng):
    p = init_layer_params(rng, 4, 1, kv_norm=False, scale_logits=True)
    x, seed = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    assert gradcheck(p, x, seed).passed


def test_corrupted_value_path_is_caught(rng):
    p = init_layer_params(rng, 6, 1)
    x, seed = rng.normal(size=(6, 6)), rng.normal(size=(6, 6))

    def broken(pp, xx, ss):
        g = rt_backward(pp, rt_forward_naive(pp, xx), ss)
        g.d_params.v_proj *= 1.01
        return g

    rep = gradcheck(p, x, seed, backward=broken)
    assert not rep.passed
    assert rep.worst_name == "v_proj"


def test_zero_seed_gives_zero(rng):
    p = init_layer_params(rng, 6, 2)
    x = rng.normal(size=(5, 6))
    g = rt_backward(p, rt_forward_naive(p, x), np.zeros((5, 6)))
    assert not np.any(g.d_x)
    assert all(not np.any(a) for a in named_arrays(g.d_params).values())


def test_single_position_equals_transformer_backward(rng):
    p = init_layer_params(rng, 6, 2)
    x, seed = rng.normal(size=(1, 6)), rng.normal(size=(1, 6))
    a = rt_backward(p, rt_forward_naive(p, x), seed)
    b = transformer_backward(p, x, seed)
    np.testing.assert_allclose(a.d_x, b.d_x, atol=1e-13)
    for (name, ga), gb in zip(named_arrays(a.d_params).items(), named_arrays(b.d_params).values()):
        if name in ("k_proj", "v_proj", "k_gain", "attn_gain"):
            continue  # persistent-pair gradients differ in form, both valid
        np.testing.assert_allclose(ga, gb, atol=1e-13, err_msg=name)


def test_linearity_in_seed(rng):
    p = init_layer_params(rng, 6, 2)
    x = rng.normal(size=(6, 6))
    io = rt_forward_naive(p, x)
    s1, s2 = rng.normal(size=(6, 6)), rng.normal(size=(6, 6))
    a, b = 0.7, -1.3
    lhs = rt_backward(p, io, a * s1 + b * s2)
    g1, g2 = rt_backward(p, io, s1), rt_backward(p, io, s2)
    np.testing.assert_allclose(lhs.d_x, a * g1.d_x + b * g2.d_x, atol=1e-10)
    for name, arr in named_arrays(lhs.d_params).items():
        np.testing.assert_allclose(arr, a * named_arrays(g1.d_params)[name] + b * named_arrays(g2.d_params)[name],
                                   atol=1e-10)


def test_causal_transpose(rng):
    p = init_layer_params(rng, 6, 2)
    x = rng.normal(size=(7, 6))
    io = rt_forward_naive(p, x)
    for t in range(7):
        seed = np.zeros((7, 6))
        seed[t] = rng.normal(size=6)
        dx = rt_backward(p, io, seed).d_x
        assert not np.any(dx[t + 1:])


def test_dot_product_transpose(rng):
    p = init_layer_params(rng, 6, 2)
    x, seed, u = (rng.normal(size=(6, 6)) for _ in range(3))
    fwd, rev = dot_product_test(p, x, seed, u)
    assert abs(fwd - rev) / max(abs(fwd), abs(rev)) < 1e-6


def test_backward_is_schedule_agnostic(rng):
    p = init_layer_params(rng, 8, 2)
    x, seed = rng.normal(size=(9, 8)), rng.normal(size=(9, 8))
    a = rt_backward(p, rt_forward_naive(p, x), seed)
    b = rt_backward(p, rt_forward_tiled(p, x), seed)
    np.testing.assert_allclose(a.d_x, b.d_x, atol=1e-9)


def test_non_finite_gradient_names_position(rng):
    p = init_layer_params(rng, 4, 1)
    x = rng.normal(size=(3, 4))
    seed = np.zeros((3, 4))
    seed[1, 0] = np.inf
    with pytest.raises(FloatingPointError, match="position 1"):
        rt_backward(p, rt_forward_naive(p, x), seed)


def test_seed_shape_checked(rng):
    p = init_layer_params(rng, 4, 1)
    io = rt_forward_naive(p, rng.normal(size=(3, 4)))
    with pytest.raises(ValueError):
        rt_backward(p, io, np.zeros((2, 4)))


def test_layer_grads_type(rng):
    p = init_layer_params(rng, 4, 1)
    x = rng.normal(size=(2, 4))
    assert isinstance(transformer_backward(p, x, np.ones((2, 4))), LayerGrads)
