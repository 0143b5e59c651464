import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unetformer import ops
from unetformer import tensor as T
from unetformer.gradcheck import gradcheck, rel_error
from unetformer.gradsuite import op_cases
from unetformer.tensor import ConfigError, ContractError, NonFiniteError, ShapeError, Tensor


def naive_conv3d(x, w, b, stride, padding):
    n, cin, H, W, D = x.shape
    cout, _, k, _, _ = w.shape
    xp = np.pad(x, [(0, 0), (0, 0)] + [(padding, padding)] * 3)
    oh, ow, od = ((s + 2 * padding - k) // stride + 1 for s in (H, W, D))
    out = np.zeros((n, cout, oh, ow, od))
    for o in range(cout):
        for i in range(oh):
            for j in range(ow):
                for l in range(od):
                    acc = 0.0 if b is None else b[o]
                    for c in range(cin):
                        for a in range(k):
                            for bb in range(k):
                                for cc in range(k):
                                    acc += xp[0, c, i * stride + a, j * stride + bb, l * stride + cc] * w[o, c, a, bb, cc]
                    out[0, o, i, j, l] = acc
    return out


def scatter_deconv(x, w, b):
    _, cin, h, wd, d = x.shape
    cout = w.shape[1]
    out = np.zeros((1, cout, 2 * h, 2 * wd, 2 * d))
    for ci in range(cin):
        for i in range(h):
            for j in range(wd):
                for l in range(d):
                    out[0, :, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2, 2 * l : 2 * l + 2] += x[0, ci, i, j, l] * w[ci]
    return out + b[None, :, None, None, None]


def trilinear_oracle(x, factor):
    _, c, h, w, d = x.shape
    out_dims = (h * factor, w * factor, d * factor)

    def taps(i, n_in, n_out):
        if n_in == 1:
            return [(0, 1.0)]
        p = i * (n_in - 1) / (n_out - 1)
        i0 = min(int(np.floor(p)), n_in - 2)
        f = p - i0
        return [(i0, 1 - f), (i0 + 1, f)]

    out = np.zeros((1, c) + out_dims)
    for i in range(out_dims[0]):
        for j in range(out_dims[1]):
            for l in range(out_dims[2]):
                for a, wa in taps(i, h, out_dims[0]):
                    for b, wb in taps(j, w, out_dims[1]):
                        for e, we in taps(l, d, out_dims[2]):
                            out[0, :, i, j, l] += wa * wb * we * x[0, :, a, b, e]
    return out


# -- tensor core -------------------------------------------------------------

def test_construction_rejects_nonfinite():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


def test_debug_mode_flags_nonfinite_results():
    x = Tensor([-1.0, 1.0])
    with T.debug_mode(True), np.errstate(invalid="ignore"):
        with pytest.raises(NonFiniteError):
            T.log(x)
    # release mode does not scan
    with T.debug_mode(False):
        with np.errstate(invalid="ignore"):
            T.log(x)


def test_backward_sum_and_square():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    x.zero_grad()
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_accumulates_until_zeroed():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_shared_subexpression_gradient():
    x = Tensor([1.5, -2.0], requires_grad=True)
    y = x * x
    (y + y * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3 * x.data**2)


def test_unbroadcast_shapes():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    (a * b).sum().backward()
    assert b.grad.shape == (4,)
    np.testing.assert_array_equal(b.grad, [3.0] * 4)


# -- conv ----------------------------------------------------------------------

def test_conv_box_sum_of_ones():
    x = Tensor(np.ones((1, 1, 4, 4, 4)))
    w = Tensor(np.ones((1, 1, 3, 3, 3)))
    y = ops.conv3d(x, w, Tensor(np.zeros(1)), stride=1, padding=1).data[0, 0]
    assert y[1, 1, 1] == 27.0 and y[2, 2, 2] == 27.0
    assert y[0, 0, 0] == 8.0 and y[3, 3, 3] == 8.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 1, 3, 4, 5))
    y = ops.conv3d(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(y.data, x)


@pytest.mark.parametrize("k,stride,padding", [(3, 1, 1), (3, 1, 0), (3, 2, 1), (3, 2, 0), (1, 1, 0), (1, 2, 0), (2, 2, 0), (3, 3, 2)])
def test_conv_matches_nested_loops(k, stride, padding):
    rng = np.random.default_rng(k * 10 + stride + padding)
    x = rng.standard_normal((1, 2, 5, 5, 5))
    w = rng.standard_normal((3, 2, k, k, k))
    b = rng.standard_normal(3)
    got = ops.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
    np.testing.assert_allclose(got, naive_conv3d(x, w, b, stride, padding), atol=1e-12, rtol=0)


def test_conv_output_extent_formula():
    x = Tensor(np.zeros((1, 1, 7, 6, 5)))
    w = Tensor(np.zeros((2, 1, 3, 3, 3)))
    for stride in (1, 2, 3):
        for padding in (0, 1, 2):
            y = ops.conv3d(x, w, stride=stride, padding=padding)
            assert y.shape[2:] == tuple((n + 2 * padding - 3) // stride + 1 for n in (7, 6, 5))


def test_conv_errors():
    x = Tensor(np.zeros((1, 2, 4, 4, 4)))
    with pytest.raises(ShapeError, match="channels"):
        ops.conv3d(x, Tensor(np.zeros((1, 3, 3, 3, 3))))
    with pytest.raises(ConfigError):
        ops.conv3d(x, Tensor(np.zeros((1, 2, 4, 4, 4))))
    with pytest.raises(ValueError):
        ops.conv3d(Tensor(np.zeros((1, 2, 2, 2, 2))), Tensor(np.zeros((1, 2, 3, 3, 3))))


# -- transposed conv ---------------------------------------------------------------

def test_deconv_disjoint_tiling():
    x = np.arange(1.0, 9.0).reshape(1, 1, 2, 2, 2)
    y = ops.transposed_conv3d(Tensor(x), Tensor(np.ones((1, 1, 2, 2, 2))), Tensor(np.zeros(1))).data
    assert y.shape == (1, 1, 4, 4, 4)
    np.testing.assert_array_equal(y[0, 0], x[0, 0].repeat(2, 0).repeat(2, 1).repeat(2, 2))


def test_deconv_shape_and_scatter_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 3, 6, 6, 6))
    w = rng.standard_normal((3, 2, 2, 2, 2))
    b = rng.standard_normal(2)
    y = ops.transposed_conv3d(Tensor(x), Tensor(w), Tensor(b)).data
    assert y.shape == (1, 2, 12, 12, 12)
    np.testing.assert_allclose(y, scatter_deconv(x, w, b), atol=1e-12, rtol=0)


def test_deconv_rejects_other_strides():
    x = Tensor(np.zeros((1, 1, 2, 2, 2)))
    with pytest.raises(ConfigError):
        ops.transposed_conv3d(x, Tensor(np.zeros((1, 1, 2, 2, 2))), stride=3)
    with pytest.raises(ConfigError):
        ops.transposed_conv3d(x, Tensor(np.zeros((1, 1, 3, 3, 3))), k=3)


# -- trilinear -------------------------------------------------------------------

def test_trilinear_constant():
    y = ops.trilinear_upsample(Tensor(np.full((1, 2, 3, 2, 4), 3.0)), 2).data
    assert y.shape == (1, 2, 6, 4, 8)
    np.testing.assert_allclose(y, 3.0, atol=1e-14)


def test_trilinear_monotone_and_corners():
    x = np.zeros((1, 1, 2, 1, 1))
    x[0, 0, 1] = 1.0
    y = ops.trilinear_upsample(Tensor(x), 2).data[0, 0, :, 0, 0]
    assert np.all(np.diff(y) >= 0)
    assert y[0] == 0.0 and y[-1] == 1.0


def test_trilinear_matches_weight_formula():
    x = np.random.default_rng(5).standard_normal((1, 2, 3, 3, 3))
    for factor in (2, 4):
        got = ops.trilinear_upsample(Tensor(x), factor).data
        np.testing.assert_allclose(got, trilinear_oracle(x, factor), atol=1e-12, rtol=0)


def test_trilinear_factor_check():
    with pytest.raises(ConfigError):
        ops.trilinear_upsample(Tensor(np.zeros((1, 1, 2, 2, 2))), 1)


# -- norms and softmax ---------------------------------------------------------------

def test_layer_norm_statistics():
    x = np.random.default_rng(1).standard_normal((50, 16)) * 4 + 2
    y = ops.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.abs(y.mean(axis=1)).max() < 1e-9
    assert np.abs(y.var(axis=1) - 1).max() < 1e-5  # eps-induced shrinkage only


def test_layer_norm_fixed_point_and_constant():
    z = np.random.default_rng(2).standard_normal((4, 32))
    z = (z - z.mean(1, keepdims=True)) / z.std(1, keepdims=True)
    y = ops.layer_norm(Tensor(z), Tensor(np.ones(32)), Tensor(np.zeros(32))).data
    np.testing.assert_allclose(y, z, rtol=1e-5, atol=0)  # scaled by 1/sqrt(1 + eps)
    y = ops.layer_norm(Tensor(z), Tensor(np.ones(32)), Tensor(np.zeros(32)), eps=1e-7).data
    np.testing.assert_allclose(y, z, atol=1e-6, rtol=0)
    beta = np.linspace(-1, 1, 8)
    y = ops.layer_norm(Tensor(np.full((3, 8), 7.0)), Tensor(np.ones(8)), Tensor(beta)).data
    np.testing.assert_allclose(y, np.broadcast_to(beta, (3, 8)), atol=1e-12)


def test_instance_norm_statistics():
    x = np.random.default_rng(4).standard_normal((1, 3, 4, 5, 3)) * 3 - 1
    y = ops.instance_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    m = y.mean(axis=(2, 3, 4))
    v = y.var(axis=(2, 3, 4))
    assert np.abs(m).max() < 1e-9
    assert np.abs(v - 1).max() < 1e-5


def test_norm_eps_must_be_positive():
    with pytest.raises(ConfigError):
        ops.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)
    with pytest.raises(ConfigError):
        ops.instance_norm(Tensor(np.ones((1, 1, 2, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)), eps=-1.0)


@settings(max_examples=40, deadline=None)
@given(group=st.integers(2, 64), seed=st.integers(0, 10_000))
def test_norm_stats_property(group, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, group)) * rng.uniform(0.5, 20) + rng.uniform(-5, 5)
    y = ops.layer_norm(Tensor(x), Tensor(np.ones(group)), Tensor(np.zeros(group))).data
    assert np.abs(y.mean(axis=1)).max() < 1e-9
    assert np.abs(y.var(axis=1) - 1).max() < 1e-6 * max(1.0, 1.0 / x.var(axis=1).min()) * 10


def test_softmax_examples():
    assert ops.softmax_lastaxis(Tensor([[5.0]])).data[0, 0] == 1.0
    np.testing.assert_allclose(ops.softmax_lastaxis(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    y = ops.softmax_lastaxis(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(y)) and y[0] == pytest.approx(1.0) and y[1] < 1e-300


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(values):
    y = ops.softmax_lastaxis(Tensor(np.array([values, values[::-1]]))).data
    assert np.abs(y.sum(axis=-1) - 1).max() <= 1e-12


# -- gradient checks ---------------------------------------------------------------

@pytest.mark.parametrize("case", op_cases(seed=7), ids=lambda c: c.name)
def test_op_gradients(case):
    report = gradcheck(case.fn, case.inputs, eps=case.eps, op_name=case.name, max_coords=case.max_coords)
    assert report.passed(1e-4), report


def test_gradcheck_linear_is_exact():
    rng = np.random.default_rng(0)
    r = gradcheck(lambda x, w: ops.linear(x, w), [Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((2, 4)))])
    assert r.max_rel_error < 1e-10


def test_gradcheck_conv_small():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 1, 4, 4, 4)))
    w = Tensor(rng.standard_normal((1, 1, 3, 3, 3)))
    r = gradcheck(lambda a, b: ops.conv3d(a, b, padding=1), [x, w])
    assert r.max_rel_error < 1e-5


def test_gradcheck_composite_pipeline():
    rng = np.random.default_rng(11)
    x = Tensor(rng.standard_normal((1, 2, 3, 3, 3)))
    w = Tensor(rng.standard_normal((2, 2, 3, 3, 3)))

    def pipeline(a, b):
        y = ops.instance_norm(ops.conv3d(a, b, padding=1), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        flat = y.reshape(2, -1)
        return (ops.softmax_lastaxis(flat) * flat).sum()

    assert gradcheck(pipeline, [x, w]).passed(1e-4)


def test_gradcheck_detects_wrong_gradient():
    def bad(a):
        return T.Tensor._result(a.data * 2.0, (a,), lambda g: (g * 3.0,), "bad")

    r = gradcheck(bad, [Tensor(np.ones(3))])
    assert r.max_rel_error == pytest.approx(1.0 / 3.0)
    assert not r.passed()


def test_gradcheck_rejects_nondeterministic_fn():
    counter = {"n": 0}

    def flaky(a):
        counter["n"] += 1
        return a * float(counter["n"])

    with pytest.raises(ContractError):
        gradcheck(flaky, [Tensor(np.ones(2))])


def test_rel_error_definition():
    assert rel_error(0.0, 0.5) == 0.5
    assert rel_error(10.0, 9.0) == pytest.approx(0.1)


def test_ops_bit_identical_across_runs():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((1, 2, 6, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    a = ops.conv3d(Tensor(x), Tensor(w), padding=1).data
    b = ops.conv3d(Tensor(x), Tensor(w), padding=1).data
    assert np.array_equal(a, b)
