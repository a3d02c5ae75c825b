import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from lidar_nsm import tensor_core as tc


def t(x, dtype=torch.float64):
    return torch.tensor(x, dtype=dtype)


# -- conv2d -----------------------------------------------------------------

def test_conv_identity_kernel():
    x = torch.randn(1, 1, 3, 3)
    assert torch.equal(tc.conv2d(x, torch.ones(1, 1, 1, 1)), x)


def test_conv_hand_sum():
    x = t([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert tc.conv2d(x, torch.ones(1, 1, 2, 2, dtype=torch.float64)).tolist() == [[[[10.0]]]]


@pytest.mark.parametrize("h,k,stride,pad", [(7, 3, 1, 0), (7, 3, 2, 1), (8, 4, 2, 1), (5, 5, 1, 2)])
def test_conv_output_shape(h, k, stride, pad):
    out = tc.conv2d(torch.zeros(2, 3, h, h), torch.zeros(4, 3, k, k), stride=stride, padding=pad)
    side = (h + 2 * pad - k) // stride + 1
    assert out.shape == (2, 4, side, side)


@pytest.mark.parametrize("x_shape,k_shape,kw", [
    ((1, 2, 5, 5), (1, 3, 3, 3), {}),           # channel mismatch
    ((1, 1, 2, 2), (1, 1, 3, 3), {}),           # kernel larger than input
    ((1, 1, 5, 5), (1, 1, 3, 3), {"stride": 0}),
    ((1, 5, 5), (1, 1, 3, 3), {}),
])
def test_conv_shape_errors(x_shape, k_shape, kw):
    with pytest.raises(tc.ShapeError):
        tc.conv2d(torch.zeros(x_shape), torch.zeros(k_shape), **kw)


# -- batch norm ---------------------------------------------------------------

def test_bn_constant_channel_is_zero():
    x = torch.full((2, 1, 3, 3), 7.0)
    out = tc.batch_norm(x, torch.ones(1), torch.zeros(1), training=True)
    assert torch.isfinite(out).all() and out.abs().max() == 0


def test_bn_gamma_zero_gives_beta():
    x = torch.randn(3, 2, 4, 4)
    beta = torch.tensor([0.3, -1.2])
    out = tc.batch_norm(x, torch.zeros(2), beta, training=True)
    assert torch.allclose(out, beta.view(1, 2, 1, 1).expand_as(out))


def test_bn_moments():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(4, 3, 8, 8, generator=g, dtype=torch.float64) * 3 + 1
    gamma, beta = t([0.5, 2.0, 1.5]), t([1.0, -0.5, 0.0])
    out = tc.batch_norm(x, gamma, beta, training=True)
    mean = out.mean(dim=(0, 2, 3))
    var = out.var(dim=(0, 2, 3), unbiased=False)
    assert torch.allclose(mean, beta, atol=1e-4)
    # epsilon shrinks the variance a little: gamma^2 * v / (v + eps)
    assert torch.allclose(var, gamma ** 2, rtol=1e-4)


def test_bn_matches_torch_reference_and_running_stats():
    x = torch.randn(4, 3, 5, 5, dtype=torch.float64)
    gamma, beta = torch.rand(3, dtype=torch.float64), torch.rand(3, dtype=torch.float64)
    rm, rv = torch.zeros(3, dtype=torch.float64), torch.ones(3, dtype=torch.float64)
    rm2, rv2 = rm.clone(), rv.clone()
    ours = tc.batch_norm(x, gamma, beta, True, rm, rv)
    ref = F.batch_norm(x, rm2, rv2, gamma, beta, training=True, momentum=0.1, eps=1e-5)
    assert torch.allclose(ours, ref, atol=1e-12)
    assert torch.allclose(rm, rm2) and torch.allclose(rv, rv2)
    # eval mode uses the running stats and leaves them alone
    before = rm.clone()
    ev = tc.batch_norm(x, gamma, beta, False, rm, rv)
    assert torch.equal(rm, before)
    assert torch.allclose(ev, F.batch_norm(x, rm2, rv2, gamma, beta, training=False, eps=1e-5))


def test_bn_training_needs_two_values():
    with pytest.raises(tc.ShapeError):
        tc.batch_norm(torch.zeros(1, 1, 1, 1), torch.ones(1), torch.zeros(1), training=True)


# -- max pool -------------------------------------------------------------------

def test_max_pool_basics():
    assert tc.max_pool(t([[[[1.0, 2.0], [3.0, 4.0]]]]), 2).tolist() == [[[[4.0]]]]
    c = torch.full((1, 2, 4, 4), 2.5)
    assert torch.equal(tc.max_pool(c, 2), torch.full((1, 2, 2, 2), 2.5))


def test_max_pool_tie_routes_to_first_index():
    x = torch.ones(1, 1, 2, 2, requires_grad=True)
    tc.max_pool(x, 2).sum().backward()
    assert x.grad.flatten().tolist() == [1.0, 0.0, 0.0, 0.0]


def test_max_pool_window_too_big():
    with pytest.raises(tc.ShapeError):
        tc.max_pool(torch.zeros(1, 1, 2, 2), 3)


# -- conditional instance norm ----------------------------------------------------

def test_cin_single_plain_style_is_instance_norm():
    x = torch.randn(2, 3, 6, 6, dtype=torch.float64)
    out = tc.instance_norm_conditional(x, 0, torch.ones(1, 3, dtype=torch.float64),
                                       torch.zeros(1, 3, dtype=torch.float64))
    assert torch.allclose(out, F.instance_norm(x, eps=1e-5), atol=1e-12)


def test_cin_identical_rows_are_bitwise_identical():
    x = torch.randn(2, 3, 5, 5)
    row = torch.randn(1, 3)
    scale, shift = row.repeat(2, 1), (row * 2).repeat(2, 1)
    assert torch.equal(tc.instance_norm_conditional(x, 0, scale, shift),
                       tc.instance_norm_conditional(x, 1, scale, shift))


def test_cin_mean_equals_shift():
    x = torch.randn(3, 4, 7, 7, dtype=torch.float64) * 5 + 2
    scale = torch.rand(2, 4, dtype=torch.float64) + 0.5
    shift = torch.randn(2, 4, dtype=torch.float64)
    out = tc.instance_norm_conditional(x, 1, scale, shift)
    assert torch.allclose(out.mean(dim=(2, 3)), shift[1].expand(3, 4), atol=1e-4)


def test_cin_style_only_changes_affine():
    x = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    scale = t([[1.0, 1.0], [2.0, 3.0]])
    shift = t([[0.0, 0.0], [1.0, -1.0]])
    a = tc.instance_norm_conditional(x, 0, scale, shift)
    b = tc.instance_norm_conditional(x, 1, scale, shift)
    assert torch.allclose(b, a * scale[1].view(1, 2, 1, 1) + shift[1].view(1, 2, 1, 1))


@pytest.mark.parametrize("idx", [-1, 2, [0, 5]])
def test_cin_index_out_of_range(idx):
    with pytest.raises(IndexError):
        tc.instance_norm_conditional(torch.zeros(2, 1, 3, 3), idx, torch.ones(2, 1), torch.zeros(2, 1))


# -- gram ------------------------------------------------------------------------------

def test_gram_examples():
    assert tc.gram_matrix(t([[1.0, 0.0], [0.0, 1.0]])).tolist() == [[1.0, 0.0], [0.0, 1.0]]
    assert tc.gram_matrix(t([[2.0, 3.0]])).tolist() == [[13.0]]


@given(st.integers(1, 6), st.integers(1, 20), st.integers(0, 2**31 - 1))
def test_gram_symmetric_psd(c, u, seed):
    a = torch.randn(c, u, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    g = tc.gram_matrix(a)
    assert torch.equal(g, g.t())
    eig = torch.linalg.eigvalsh(g)
    assert eig.min() >= -1e-6 * max(float(torch.trace(g)), 1e-300)
    assert torch.allclose(g, torch.einsum("ik,jk->ij", a, a))


# -- adam ---------------------------------------------------------------------------------

def test_adam_zero_grad_keeps_param():
    p = torch.tensor([1.0, -2.0], dtype=torch.float64)
    st_ = tc.AdamState.zeros_like(p)
    tc.adam_step(p, torch.zeros_like(p), st_)
    assert p.tolist() == [1.0, -2.0] and st_.step_count == 1


def test_adam_first_step_hand_value():
    p = torch.tensor([1.0], dtype=torch.float64)
    st_ = tc.AdamState.zeros_like(p, learning_rate=0.001, beta1=0.9, beta2=0.999, epsilon=1e-8)
    tc.adam_step(p, torch.tensor([0.5], dtype=torch.float64), st_)
    assert abs(p.item() - 0.999) <= 1e-9


def test_adam_matches_torch_optim():
    g = torch.Generator().manual_seed(1)
    p0 = torch.randn(5, dtype=torch.float64, generator=g)
    grads = [torch.randn(5, dtype=torch.float64, generator=g) for _ in range(20)]
    ours, ref = p0.clone(), p0.clone().requires_grad_(True)
    st_ = tc.AdamState.zeros_like(ours, learning_rate=0.01, beta1=0.5)
    opt = torch.optim.Adam([ref], lr=0.01, betas=(0.5, 0.999), eps=1e-8)
    for gr in grads:
        tc.adam_step(ours, gr, st_)
        ref.grad = gr.clone()
        opt.step()
    assert torch.allclose(ours, ref.detach(), atol=1e-12)
    assert st_.step_count == 20


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=15))
def test_adam_twin_params_stay_identical(grads):
    a, b = torch.tensor([0.3]), torch.tensor([0.3])
    sa, sb = tc.AdamState.zeros_like(a), tc.AdamState.zeros_like(b)
    for gr in grads:
        tc.adam_step(a, torch.tensor([gr]), sa)
        tc.adam_step(b, torch.tensor([gr]), sb)
    assert torch.equal(a, b)


@pytest.mark.parametrize("bad", [math.nan, math.inf])
def test_adam_non_finite_grad_aborts(bad):
    p = torch.tensor([1.0])
    st_ = tc.AdamState.zeros_like(p)
    with pytest.raises(tc.NonFiniteError):
        tc.adam_step(p, torch.tensor([bad]), st_)
    assert p.item() == 1.0 and st_.step_count == 0


def test_adam_optimizer_rejects_any_bad_grad_before_updating():
    a = torch.nn.Parameter(torch.ones(2))
    b = torch.nn.Parameter(torch.ones(2))
    opt = tc.Adam([("a", a), ("b", b)], lr=0.1)
    a.grad = torch.ones(2)
    b.grad = torch.tensor([1.0, math.nan])
    with pytest.raises(tc.NonFiniteError):
        opt.step()
    assert torch.equal(a.data, torch.ones(2))


# -- misc ----------------------------------------------------------------------------------

def test_op_probe_counts_and_nests():
    x = torch.randn(1, 1, 4, 4)
    with tc.count_ops() as outer:
        tc.relu(x)
        with tc.count_ops() as inner:
            tc.sigmoid(x)
        tc.relu(x)
    assert outer["relu"] == 2 and outer["sigmoid"] == 0
    assert inner["sigmoid"] == 1


def test_upsample_nearest():
    x = t([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert tc.upsample_nearest(x, 2)[0, 0].tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]


def test_distances():
    a, b = t([1.0, 2.0, 3.0]), t([0.0, 4.0, 3.0])
    assert tc.l1_distance(a, b).item() == 1.0
    assert tc.sq_l2_distance(a, b).item() == 5.0


def test_ops_are_deterministic():
    torch.manual_seed(0)
    x = torch.randn(2, 3, 8, 8)
    k = torch.randn(4, 3, 3, 3)

    def run():
        h = tc.conv2d(x, k, padding=1)
        h = tc.batch_norm(h, torch.ones(4), torch.zeros(4), True)
        h = tc.max_pool(tc.leaky_relu(h), 2)
        return tc.gram_matrix(h.reshape(2, 4, -1))

    assert torch.equal(run(), run())


def test_init_weights_seeded():
    m1, m2 = tc.Conv2d(2, 3, 3), tc.Conv2d(2, 3, 3)
    tc.init_weights(m1, 5)
    tc.init_weights(m2, 5)
    assert torch.equal(m1.weight, m2.weight)
    assert abs(float(m1.weight.detach().std()) - 0.02) < 0.01
    assert np.all(m1.bias.detach().numpy() == 0)
