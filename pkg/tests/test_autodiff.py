import numpy as np
import pytest

from basic_seg import autodiff as ad
from basic_seg.autodiff import RunningStats, Tape, Tensor


def conv_reference(x, k, b, stride, padding):
    """Direct nested-loop cross-correlation."""
    n, c, h, w = x.shape
    o, _, kk, _ = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kk) // stride + 1
    wo = (w + 2 * padding - kk) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oc] if b is not None else 0.0
                    for ic in range(c):
                        for a in range(kk):
                            for bb in range(kk):
                                acc += xp[bi, ic, i * stride + a, j * stride + bb] * k[oc, ic, a, bb]
                    out[bi, oc, i, j] = acc
    return out


# ---------------------------------------------------------------- conv2d


def test_conv_sum_of_ones():
    out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(2, 1, 6, 5))
    out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_matches_loop_reference_strided(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=2, padding=1)
    assert out.shape == (1, 3, 3, 3)
    np.testing.assert_allclose(out.data, conv_reference(x, k, b, 2, 1), rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_loop_reference_random(seed, stride, padding):
    r = np.random.default_rng(seed)
    n, c, h = r.integers(1, 3), r.integers(1, 5), r.integers(3, 9)
    o = r.integers(1, 4)
    x = r.normal(size=(n, c, h, h))
    k = r.normal(size=(o, c, 3, 3))
    b = r.normal(size=o)
    out = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, conv_reference(x, k, b, stride, padding), rtol=0, atol=1e-12)


def test_conv_output_extent():
    out = ad.conv2d(Tensor(np.zeros((1, 1, 9, 7))), Tensor(np.zeros((2, 1, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 2, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)


def test_conv_channel_mismatch_names_dimension():
    with pytest.raises(ad.ShapeError) as err:
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    assert err.value.dim == "input channels"


def test_conv_rejects_even_kernel():
    with pytest.raises(ad.ShapeError, match="parity"):
        ad.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))


def test_conv_gradients(rng):
    x = rng.normal(size=(2, 2, 6, 6))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    w = rng.normal(size=(2, 3, 3, 3))

    def through(fx=None, fk=None, fb=None):
        return lambda t: ad.sum(
            ad.mul(ad.conv2d(fx or t, fk or t, fb or t, stride=2, padding=1), w)
        )

    assert ad.grad_check(through(fk=Tensor(k), fb=Tensor(b)), x) < 1e-6
    assert ad.grad_check(through(fx=Tensor(x), fb=Tensor(b)), k) < 1e-6
    assert ad.grad_check(through(fx=Tensor(x), fk=Tensor(k)), b) < 1e-6


# ---------------------------------------------------------------- upsample


def test_upsample_constant():
    out = ad.upsample2x(Tensor(np.full((1, 1, 1, 1), 5.0)))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 5.0))


def test_upsample_block_repeat():
    out = ad.upsample2x(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
    expected = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=float)
    np.testing.assert_array_equal(out.data[0, 0], expected)


def test_upsample_gradient_of_sum_is_four(rng):
    x = rng.normal(size=(1, 2, 3, 3))
    leaf = Tensor(x, requires_grad=True)
    with Tape() as tape:
        grads = tape.backward(ad.sum(ad.upsample2x(leaf)))
    np.testing.assert_array_equal(grads[leaf], np.full(x.shape, 4.0))
    # finite-difference confirmation
    assert ad.grad_check(lambda t: ad.sum(ad.upsample2x(t)), x) < 1e-9


# ---------------------------------------------------------------- batchnorm


def test_batchnorm_train_standardizes(rng):
    x = rng.normal(3.0, 2.0, size=(4, 3, 5, 5))
    out = ad.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), RunningStats.empty(3))
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-5)


def test_batchnorm_constant_input_is_zero():
    out = ad.batchnorm2d(Tensor(np.full((2, 2, 3, 3), 7.0)), Tensor(np.ones(2)), Tensor(np.zeros(2)), RunningStats.empty(2))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_batchnorm_running_update(rng):
    x = rng.normal(size=(2, 2, 4, 4))
    rs = RunningStats(np.array([1.0, -1.0]), np.array([2.0, 3.0]), initialized=True)
    ad.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rs, momentum=0.9)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    np.testing.assert_allclose(rs.mean, 0.9 * np.array([1.0, -1.0]) + 0.1 * x.mean(axis=(0, 2, 3)))
    unbiased = x.var(axis=(0, 2, 3)) * m / (m - 1)
    np.testing.assert_allclose(rs.var, 0.9 * np.array([2.0, 3.0]) + 0.1 * unbiased)


def test_batchnorm_eval_uses_running_stats(rng):
    x = rng.normal(size=(1, 2, 3, 3))
    rs = RunningStats(np.array([0.5, -0.5]), np.array([4.0, 0.25]), initialized=True)
    out = ad.batchnorm2d(Tensor(x), Tensor(np.array([2.0, 1.0])), Tensor(np.array([0.0, 1.0])), rs, mode="eval", eps=1e-5)
    ref = (x - rs.mean[None, :, None, None]) / np.sqrt(rs.var[None, :, None, None] + 1e-5)
    ref = ref * np.array([2.0, 1.0])[None, :, None, None] + np.array([0.0, 1.0])[None, :, None, None]
    np.testing.assert_allclose(out.data, ref, atol=1e-14)


def test_batchnorm_eval_before_train_errors():
    with pytest.raises(RuntimeError, match="uninitialized running statistics"):
        ad.batchnorm2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)), RunningStats.empty(1), mode="eval")


def test_batchnorm_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        ad.batchnorm2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)), RunningStats.empty(1), eps=0.0)


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_gradients(rng, mode):
    x = rng.normal(size=(2, 3, 4, 4))
    gamma = rng.uniform(0.5, 1.5, size=3)
    beta = rng.normal(size=3)
    w = rng.normal(size=x.shape)
    rs = RunningStats(rng.normal(size=3), rng.uniform(0.5, 2, size=3), initialized=True)

    def f(xv, gv, bv):
        return ad.sum(ad.mul(ad.batchnorm2d(xv, gv, bv, rs.copy(), mode), w))

    assert ad.grad_check(lambda t: f(t, Tensor(gamma), Tensor(beta)), x) < 1e-6
    assert ad.grad_check(lambda t: f(Tensor(x), t, Tensor(beta)), gamma) < 1e-6
    assert ad.grad_check(lambda t: f(Tensor(x), Tensor(gamma), t), beta) < 1e-6


# ---------------------------------------------------------------- small ops


def test_relu_values():
    np.testing.assert_array_equal(ad.relu(Tensor(np.array([-3.0, 3.0]))).data, [0.0, 3.0])


def test_softmax_uniform_for_equal_logits():
    out = ad.softmax_channel(Tensor(np.full((1, 6, 2, 2), 0.3)))
    np.testing.assert_allclose(out.data, 1.0 / 6.0, atol=1e-15)


def test_softmax_channel_sums(rng):
    out = ad.softmax_channel(Tensor(rng.normal(scale=10.0, size=(3, 7, 5, 4))))
    assert np.all((out.data >= 0) & (out.data <= 1))
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_concat_backward_splits_by_channel(rng):
    a = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 3, 3, 3)), requires_grad=True)
    w = rng.normal(size=(1, 5, 3, 3))
    with Tape() as tape:
        grads = tape.backward(ad.sum(ad.mul(ad.concat_channels([a, b]), w)))
    np.testing.assert_array_equal(grads[a], w[:, :2])
    np.testing.assert_array_equal(grads[b], w[:, 2:])


def test_concat_mismatch_raises():
    with pytest.raises(ad.ShapeError, match="height"):
        ad.concat_channels([Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 4, 3)))])


def test_elementwise_gradients(rng):
    a = rng.uniform(0.5, 2.0, size=(2, 3))
    b = rng.uniform(0.5, 2.0, size=(2, 3))
    assert ad.grad_check(lambda t: ad.sum(ad.div(ad.mul(t, Tensor(b)), ad.add(t, 1.0))), a) < 1e-6
    assert ad.grad_check(lambda t: ad.mean(ad.square(ad.sub(Tensor(b), t))), a) < 1e-6
    assert ad.grad_check(lambda t: ad.sum(ad.log_clamped(t)), a) < 1e-6
    assert ad.grad_check(lambda t: ad.sum(ad.mul(ad.sum(t, axis=1, keepdims=True), Tensor(b))), a) < 1e-6


def test_channel_matmul_and_slice_gradients(rng):
    x = rng.normal(size=(3, 4, 2, 2))
    m = rng.normal(size=(4, 2))
    w = rng.normal(size=(2, 2, 2, 2))
    assert ad.grad_check(lambda t: ad.sum(ad.mul(ad.slice_batch(ad.channel_matmul(t, m), 1, 3), w)), x) < 1e-6


# ---------------------------------------------------------------- tape


def test_backward_linear():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        grads = tape.backward(ad.sum(x))
    np.testing.assert_array_equal(grads[x], np.ones((2, 3)))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square(rng):
    v = rng.normal(size=(4,))
    x = Tensor(v, requires_grad=True)
    with Tape():
        grads = ad.backward(ad.sum(ad.mul(x, x)))
    np.testing.assert_allclose(grads[x], 2 * v)


def test_backward_twice_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum(x)
        tape.backward(loss)
        with pytest.raises(ad.TapeError):
            tape.backward(loss)


def test_backward_rejects_nonscalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        with pytest.raises(ad.TapeError, match="scalar"):
            tape.backward(ad.mul(x, 2.0))


def test_backward_rejects_detached():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = ad.sum(x)  # no tape active
    with pytest.raises(ad.TapeError, match="detached"):
        ad.backward(loss)
    with Tape() as tape:
        with pytest.raises(ad.TapeError, match="detached"):
            tape.backward(Tensor(1.0))


def test_tape_records_in_topological_order(rng):
    x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ad.relu(ad.add(ad.mul(x, 3.0), 1.0))
        ad.sum(y)
        positions = {id(n.output): n.index for n in tape.nodes}
        for node in tape.nodes:
            for parent in node.parents:
                if parent.node is not None:
                    assert positions[id(parent)] < node.index


def test_untracked_inputs_do_not_record(rng):
    with Tape() as tape:
        ad.relu(Tensor(rng.normal(size=3)))
    assert tape.nodes == []


def test_paused_tape_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        with tape.paused():
            y = ad.mul(x, 2.0)
    assert y.node is None and tape.nodes == []


def test_grad_check_exact_for_linear(rng):
    assert ad.grad_check(ad.sum, rng.normal(size=(3, 4))) < 1e-10


def test_grad_check_softmax_ce(rng):
    x = rng.normal(size=(2, 4, 3, 3))
    target = np.eye(4)[rng.integers(0, 4, size=(2, 3, 3))].transpose(0, 3, 1, 2)

    def f(t):
        return ad.neg(ad.mean(ad.mul(ad.log_clamped(ad.softmax_channel(t)), target)))

    assert ad.grad_check(f, x) < 1e-6


def test_grad_check_relu_away_from_kink(rng):
    step = 1e-5
    x = rng.normal(size=50)
    x = np.where(np.abs(x) < 10 * step, 1.0, x)
    assert ad.grad_check(lambda t: ad.sum(ad.mul(ad.relu(t), t)), x, step) < 1e-6


def test_grad_check_reports_wrong_gradient():
    """A deliberately broken op must be caught."""

    def bad_square(t):
        return ad._record(t.data**2, (t,), lambda g: (g * t.data,))

    assert ad.grad_check(lambda t: ad.sum(bad_square(t)), np.array([1.0, 2.0, 3.0])) > 0.1


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    k = rng.normal(size=(4, 3, 3, 3))
    a = ad.softmax_channel(ad.conv2d(Tensor(x), Tensor(k), padding=1)).data
    b = ad.softmax_channel(ad.conv2d(Tensor(x), Tensor(k), padding=1)).data
    assert a.tobytes() == b.tobytes()
