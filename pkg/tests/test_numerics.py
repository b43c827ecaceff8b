import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sb2rb import numerics as nx
from sb2rb.numerics import Tensor


def fd_grad(fn, x, h=1e-6):
    """Central differences of scalar fn(ndarray) -> float."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def tape_grad(fn, *xs):
    ts = [Tensor(x) for x in xs]
    with nx.Tape() as tape:
        tape.watch(*ts)
        loss = fn(*ts)
    return tape.gradient(loss, ts)


class TestForward:
    def test_sigmoid_zero(self):
        assert nx.sigmoid(Tensor(0.0)).item() == 0.5

    def test_sigmoid_saturates_without_overflow(self):
        out = nx.sigmoid(Tensor([-1000.0, 1000.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == 0.0 and out[1] == 1.0

    def test_conv1d_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((2, 1, 9))
        y = nx.conv1d(Tensor(x), Tensor(np.ones((1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(y.data, x)

    def test_conv2d_matches_direct_loop(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 5, 6))
        w = rng.standard_normal((4, 3, 3, 5))
        b = rng.standard_normal(4)
        y = nx.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (2, 2)))
        ref = np.zeros((2, 4, 5, 6))
        for bb in range(2):
            for o in range(4):
                for i in range(5):
                    for j in range(6):
                        ref[bb, o, i, j] = (xp[bb, :, i:i + 3, j:j + 5] * w[o]).sum() + b[o]
        np.testing.assert_allclose(y, ref, atol=1e-12)

    def test_dense_identity(self):
        x = np.random.default_rng(2).standard_normal((3, 4))
        y = nx.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(y.data, x)

    def test_cmul_matches_complex_product(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal(5) + 1j * rng.standard_normal(5)
        b = rng.standard_normal(5) + 1j * rng.standard_normal(5)
        ta = Tensor(np.stack([a.real, a.imag]))
        tb = Tensor(np.stack([b.real, b.imag]))
        out = nx.cmul(ta, tb, axis=0).data
        np.testing.assert_allclose(out[0] + 1j * out[1], a * b, atol=1e-14)

    def test_shape_mismatch_names_op(self):
        with pytest.raises(nx.ShapeError, match="conv2d"):
            nx.conv2d(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
        with pytest.raises(nx.ShapeError, match="add"):
            nx.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_forward_is_pure(self):
        rng = np.random.default_rng(4)
        x, w, b = rng.standard_normal((2, 2, 4, 7)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
        y1 = nx.sigmoid(nx.conv2d(Tensor(x), Tensor(w), Tensor(b))).data
        y2 = nx.sigmoid(nx.conv2d(Tensor(x), Tensor(w), Tensor(b))).data
        assert y1.tobytes() == y2.tobytes()

    def test_tensors_are_read_only(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0


class TestBackward:
    def test_mean_gradient(self):
        (g,) = tape_grad(lambda x: nx.mean(x), np.arange(4.0))
        np.testing.assert_array_equal(g, [0.25] * 4)

    def test_sigmoid_gradient_at_zero(self):
        (g,) = tape_grad(lambda w: nx.sum(nx.sigmoid(w)), np.array([0.0]))
        assert g[0] == 0.25

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3))
        with nx.Tape() as tape:
            tape.watch(x)
            y = x * 2.0
        with pytest.raises(nx.ShapeError):
            nx.backward(tape, y)

    def test_untracked_inputs_do_not_record(self):
        with nx.Tape() as tape:
            _ = Tensor(np.ones(3)) * 2.0
        assert tape.records == []

    def test_two_layer_net_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((6, 5))
        w1, b1 = rng.standard_normal((5, 7)), rng.standard_normal(7)
        w2, b2 = rng.standard_normal((7, 1)), rng.standard_normal(1)

        def net(w1, b1, w2, b2):
            return nx.mean(nx.sigmoid(nx.dense(nx.sigmoid(nx.dense(Tensor(x), w1, b1)), w2, b2)))

        rep = nx.grad_check(net, [Tensor(w1), Tensor(b1), Tensor(w2), Tensor(b2)], tol=1e-6, step=1e-5)
        assert rep.passed, rep.message

    @pytest.mark.parametrize("op", ["conv1d", "conv2d", "cmul", "einsum", "take", "div", "sqrt"])
    def test_primitive_gradients(self, op):
        rng = np.random.default_rng(6)
        if op == "conv1d":
            x, w, b = rng.standard_normal((2, 3, 8)), rng.standard_normal((2, 3, 5)), rng.standard_normal(2)
            f = lambda x, w, b: nx.sum(nx.square(nx.conv1d(x, w, b)))
            args = [x, w, b]
        elif op == "conv2d":
            x, w, b = rng.standard_normal((2, 2, 4, 6)), rng.standard_normal((3, 2, 3, 5)), rng.standard_normal(3)
            f = lambda x, w, b: nx.sum(nx.square(nx.conv2d(x, w, b)))
            args = [x, w, b]
        elif op == "cmul":
            a, b = rng.standard_normal((3, 2, 4)), rng.standard_normal((3, 2, 4))
            f = lambda a, b: nx.sum(nx.square(nx.cmul(a, b, axis=1)))
            args = [a, b]
        elif op == "einsum":
            a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 5, 3))
            f = lambda a, b: nx.sum(nx.square(nx.einsum("bdt,bad->bat", a, b)))
            args = [a, b]
        elif op == "take":
            a = rng.standard_normal((2, 5))
            f = lambda a: nx.sum(nx.square(nx.take(a, [0, 3, 3, 1, 0, 4], axis=1)))
            args = [a]
        elif op == "div":
            a, b = rng.standard_normal(4), rng.uniform(1, 2, 4)
            f = lambda a, b: nx.sum(a / b)
            args = [a, b]
        else:
            a = rng.uniform(0.5, 2.0, 5)
            f = lambda a: nx.sum(nx.sqrt(a))
            args = [a]
        analytic = tape_grad(f, *args)
        for k, a in enumerate(args):
            def scalar(v, k=k):
                vals = [Tensor(x) for x in args]
                vals[k] = Tensor(v)
                return f(*vals).item()
            num = fd_grad(scalar, a)
            np.testing.assert_allclose(analytic[k], num, rtol=1e-6, atol=1e-7)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=2, max_size=6))
    def test_smooth_elementwise_chain(self, vals):
        x = np.array(vals)
        f = lambda t: nx.sum(nx.sigmoid(t) * nx.exp(t * 0.3) + nx.square(t))
        (g,) = tape_grad(f, x)
        num = fd_grad(lambda v: f(Tensor(v)).item(), x)
        np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-8)


class TestGradCheck:
    def test_linear_graph_is_exact(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((4, 3))
        rep = nx.grad_check(lambda w: nx.sum(nx.einsum("ij,j->i", Tensor(a), w)),
                            [Tensor(rng.standard_normal(3))])
        assert rep.passed and rep.max_rel_err <= 1e-9

    def test_rounding_op_is_flagged(self):
        rep = nx.grad_check(lambda w: nx.sum(nx.round_(w) * w), [Tensor([0.3, 1.7])])
        assert not rep.passed
        assert "non-differentiable op" in rep.message

    def test_backward_through_round_raises(self):
        w = Tensor([0.2])
        with nx.Tape() as tape:
            tape.watch(w)
            loss = nx.sum(nx.round_(w))
        with pytest.raises(nx.NonDifferentiableError):
            tape.gradient(loss, [w])


class TestAdam:
    def test_zero_gradient_is_identity(self):
        state = nx.AdamState()
        p = [Tensor([1.0, -2.0]), Tensor([[3.0]])]
        for _ in range(5):
            p = nx.adam_step(state, p, [np.zeros(2), np.zeros((1, 1))])
        np.testing.assert_array_equal(p[0].data, [1.0, -2.0])
        np.testing.assert_array_equal(p[1].data, [[3.0]])

    def test_first_step_hand_value(self):
        # m_hat = v_hat = 1 after bias correction, so the step is lr / (1 + eps)
        state = nx.AdamState(lr=0.001)
        (p,) = nx.adam_step(state, [Tensor(0.0)], [np.array(1.0)])
        assert p.item() == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-15)
        assert state.step == 1

    def test_identical_params_stay_identical(self):
        rng = np.random.default_rng(8)
        state = nx.AdamState()
        p = [Tensor([0.5]), Tensor([0.5])]
        for _ in range(20):
            g = rng.standard_normal(1)
            p = nx.adam_step(state, p, [g, g.copy()])
        assert p[0].data.tobytes() == p[1].data.tobytes()

    def test_shape_mismatch(self):
        with pytest.raises(nx.ShapeError):
            nx.adam_step(nx.AdamState(), [Tensor([1.0])], [np.zeros(2)])


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(9)
    params = {"a.w": Tensor(rng.standard_normal((3, 2, 5))), "a.b": Tensor(rng.standard_normal(3))}
    nx.save_checkpoint(tmp_path / "ck", params, {"lr": 1e-3})
    loaded, hyper = nx.load_checkpoint(tmp_path / "ck")
    assert list(loaded) == list(params)
    for k in params:
        assert loaded[k].data.tobytes() == params[k].data.tobytes()
    assert hyper == {"lr": 1e-3}
    raw = (tmp_path / "ck" / "weights.bin").read_bytes()
    assert len(raw) == 8 * (30 + 3)
    assert np.frombuffer(raw[:8], "<f8")[0] == params["a.w"].data.flat[0]
