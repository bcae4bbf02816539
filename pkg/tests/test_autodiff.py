import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moeslim import autodiff as ad
from moeslim.autodiff import (
    MASK_FILL,
    NumericsError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
)


def finite_difference(f, arrays, h=1e-5):
    """Central-difference gradients of scalar f(*arrays) w.r.t. every entry."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(*arrays)
            flat[i] = orig - h
            dn = f(*arrays)
            flat[i] = orig
            gflat[i] = (up - dn) / (2 * h)
        grads.append(g)
    return grads


def check_grads(build, arrays, rtol=1e-3, atol=1e-8):
    """Compare tape gradients of build(*tensors) against finite differences."""
    tensors = [Tensor(a, requires_grad=True, name=f"p{i}") for i, a in enumerate(arrays)]
    with Tape() as tape:
        loss = build(*tensors)
    grads = backward(tape, loss, {t.name: t for t in tensors})

    def f(*arrs):
        for t, a in zip(tensors, arrs):
            t.data = a
        return build(*tensors).item()

    fd = finite_difference(f, [t.data for t in tensors])
    for t, g_fd in zip(tensors, fd):
        np.testing.assert_allclose(grads[t.name], g_fd, rtol=rtol, atol=atol)


class TestForwardOps:
    def test_matmul_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(3, 2))
        out = ad.matmul(Tensor(a), Tensor(b)).data
        ref = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                for k in range(3):
                    ref[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-15)

    def test_matmul_shape_error_names_op(self):
        with pytest.raises(ShapeError, match="matmul"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gelu_zero(self):
        assert ad.gelu(Tensor(np.array(0.0))).item() == 0.0

    def test_gelu_one_matches_erf_formula(self):
        got = ad.gelu(Tensor(np.array(1.0))).item()
        want = 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
        assert got == pytest.approx(want, abs=1e-12)
        assert got == pytest.approx(0.8413447, abs=1e-7)

    def test_softmax_uniform_row(self):
        out = ad.softmax(Tensor(np.array([0.0, 0.0, 0.0]))).data
        np.testing.assert_allclose(out, np.full(3, 1 / 3), atol=1e-15)

    def test_bmm_matches_loop(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(4, 3, 5))
        b = rng.normal(size=(4, 5, 2))
        out = ad.bmm(Tensor(a), Tensor(b)).data
        for i in range(4):
            np.testing.assert_allclose(out[i], a[i] @ b[i], atol=1e-12)

    def test_finite_check_trips_on_overflow(self):
        big = Tensor(np.array([1e308]))
        with np.errstate(over="ignore"), pytest.raises(NumericsError):
            ad.mul(big, big)


class TestLogSoftmax:
    def test_symmetric_pair(self):
        out = ad.log_softmax(Tensor(np.array([0.0, 0.0]))).data
        np.testing.assert_allclose(out, [math.log(0.5)] * 2, atol=1e-15)

    def test_large_logits_no_overflow(self):
        out = ad.log_softmax(Tensor(np.array([1000.0, 0.0]))).data
        assert np.isfinite(out).all()
        assert out[0] == pytest.approx(0.0, abs=1e-12)
        assert out[1] == pytest.approx(-1000.0, abs=1e-12)

    def test_against_mpmath_oracle(self):
        import mpmath

        mpmath.mp.dps = 50
        logits = [1.0, 2.0, 3.0]
        z = sum(mpmath.exp(x) for x in logits)
        want = [float(mpmath.log(mpmath.exp(x) / z)) for x in logits]
        got = ad.log_softmax(Tensor(np.array(logits))).data
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-14)

    def test_rows_are_normalized(self):
        rng = np.random.default_rng(2)
        x = rng.normal(scale=3.0, size=(5, 7))
        ls = ad.log_softmax(Tensor(x)).data
        np.testing.assert_allclose(np.exp(ls).sum(axis=-1), np.ones(5), atol=1e-12)

    def test_nan_input_rejected(self):
        with pytest.raises(NumericsError):
            ad.log_softmax(Tensor(np.array([0.0, np.nan])))

    def test_softmax_exp_log_softmax_identity(self):
        rng = np.random.default_rng(3)
        x = rng.normal(scale=5.0, size=(4, 9))
        p1 = ad.softmax(Tensor(x)).data
        p2 = np.exp(ad.log_softmax(Tensor(x)).data)
        np.testing.assert_allclose(p1, p2, atol=1e-10)


class TestBackward:
    def test_sum_gradient_all_ones(self):
        w = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True, name="w")
        with Tape() as tape:
            loss = ad.sumt(w)
        grads = backward(tape, loss, {"w": w})
        np.testing.assert_array_equal(grads["w"], np.ones((2, 2)))

    def test_square_sum_gradient_is_2w(self):
        w = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True, name="w")
        with Tape() as tape:
            loss = ad.sumt(ad.mul(w, w))
        grads = backward(tape, loss, {"w": w})
        np.testing.assert_allclose(grads["w"], 2 * w.data, atol=1e-15)

    def test_unreachable_param_gets_zero_grad(self):
        w = Tensor(np.ones(3), requires_grad=True, name="w")
        u = Tensor(np.ones(2), requires_grad=True, name="u")
        with Tape() as tape:
            loss = ad.sumt(w)
        grads = backward(tape, loss, {"w": w, "u": u})
        np.testing.assert_array_equal(grads["u"], np.zeros(2))

    def test_non_scalar_loss_rejected(self):
        w = Tensor(np.ones(3), requires_grad=True, name="w")
        with Tape() as tape:
            out = ad.mul(w, w)
        with pytest.raises(TapeError, match="scalar"):
            backward(tape, out, {"w": w})

    def test_consumed_tape_rejected(self):
        w = Tensor(np.ones(3), requires_grad=True, name="w")
        with Tape() as tape:
            loss = ad.sumt(w)
        backward(tape, loss, {"w": w})
        with pytest.raises(TapeError, match="consumed"):
            backward(tape, loss, {"w": w})

    def test_off_tape_loss_rejected(self):
        w = Tensor(np.ones(3), requires_grad=True, name="w")
        loss = ad.sumt(w)  # no active tape: not recorded
        with Tape() as tape:
            with pytest.raises(TapeError, match="not recorded"):
                backward(tape, loss, {"w": w})

    def test_composed_loss_matches_finite_differences(self):
        rng = np.random.default_rng(7)

        def build(w1, w2):
            h = ad.gelu(ad.matmul(w1, w2))
            p = ad.log_softmax(h, axis=-1)
            return ad.meant(ad.mul(p, p))

        check_grads(build, [rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 5))])


class TestGradcheckPerOp:
    """Every differentiable op against central differences on inputs in [-1, 1]."""

    RNG = np.random.default_rng(11)

    def test_add_sub_mul_div(self):
        a = self.RNG.uniform(-1, 1, (3, 4))
        b = self.RNG.uniform(0.5, 1.5, (3, 4))
        check_grads(lambda x, y: ad.sumt(ad.mul(ad.add(x, y), ad.sub(x, y))), [a.copy(), b.copy()])
        check_grads(lambda x, y: ad.sumt(ad.div(x, y)), [a.copy(), b.copy()])

    def test_broadcast_add_mul(self):
        a = self.RNG.uniform(-1, 1, (3, 4))
        b = self.RNG.uniform(-1, 1, (4,))
        check_grads(lambda x, y: ad.sumt(ad.mul(ad.add(x, y), y)), [a.copy(), b.copy()])

    def test_matmul(self):
        a = self.RNG.uniform(-1, 1, (3, 4))
        b = self.RNG.uniform(-1, 1, (4, 2))
        check_grads(lambda x, y: ad.sumt(ad.mul(ad.matmul(x, y), ad.matmul(x, y))), [a, b])

    def test_bmm_transpose_reshape(self):
        a = self.RNG.uniform(-1, 1, (2, 3, 4))
        b = self.RNG.uniform(-1, 1, (2, 4, 3))

        def build(x, y):
            z = ad.bmm(x, y)
            z = ad.transpose(z, (1, 0, 2))
            z = ad.reshape(z, (3, 6))
            return ad.sumt(ad.mul(z, z))

        check_grads(build, [a, b])

    def test_gelu_softmax_logsoftmax(self):
        x = self.RNG.uniform(-1, 1, (3, 5))
        check_grads(lambda t: ad.sumt(ad.mul(ad.gelu(t), ad.gelu(t))), [x.copy()])
        check_grads(lambda t: ad.sumt(ad.powt(ad.softmax(t), 2.0)), [x.copy()])
        check_grads(lambda t: ad.meant(ad.mul(ad.log_softmax(t), ad.log_softmax(t))), [x.copy()])

    def test_reductions_and_pow(self):
        x = self.RNG.uniform(0.2, 1.0, (4, 3))
        check_grads(lambda t: ad.sumt(ad.powt(ad.meant(t, axis=0), 2.0)), [x.copy()])
        check_grads(lambda t: ad.sumt(ad.powt(ad.sumt(t, axis=1, keepdims=True), -0.5)), [x.copy()])
        check_grads(lambda t: ad.sumt(ad.l2norm(t, axis=1)), [x.copy()])

    def test_structure_ops(self):
        x = self.RNG.uniform(-1, 1, (5, 3))

        def build(t):
            top = ad.narrow(t, 0, 0, 2)
            rest = ad.narrow(t, 0, 2, 3)
            joined = ad.concat([rest, top], axis=0)
            picked = ad.take_rows(joined, np.array([0, 0, 4, 2]))
            spread = ad.scatter_rows(picked, np.array([3, 1, 0, 2]), 6)
            return ad.sumt(ad.mul(spread, spread))

        check_grads(build, [x])

    def test_gather_elements_and_embedding(self):
        w = self.RNG.uniform(-1, 1, (6, 3))

        def build(t):
            e = ad.embedding(t, np.array([[1, 3], [5, 1]]))
            e = ad.reshape(e, (4, 3))
            picked = ad.gather_elements(e, np.array([0, 1, 3]), np.array([2, 0, 1]))
            return ad.sumt(ad.mul(picked, picked))

        check_grads(build, [w])

    def test_masked_fill_and_relu(self):
        x = self.RNG.uniform(-1, 1, (4, 4)) + np.eye(4)  # keep entries away from the relu kink
        mask = np.triu(np.ones((4, 4), dtype=bool), k=1)

        def build(t):
            s = ad.softmax(ad.masked_fill(t, mask), axis=-1)
            return ad.sumt(ad.mul(s, ad.relu(t)))

        check_grads(build, [x])


class TestTopK:
    def test_returns_min_k_n(self):
        x = np.array([3.0, 1.0, 2.0])
        assert ad.topk_indices(x, 5).tolist() == [0, 2, 1]
        assert ad.topk_indices(x, 2).tolist() == [0, 2]

    def test_ties_break_to_lower_index(self):
        x = np.array([1.0, 5.0, 5.0, 5.0, 0.0])
        assert ad.topk_indices(x, 2).tolist() == [1, 2]

    @given(st.lists(st.integers(min_value=-5, max_value=5), min_size=1, max_size=12), st.integers(1, 12))
    @settings(max_examples=60, deadline=None)
    def test_property_matches_sorted_enumeration(self, vals, k):
        x = np.array(vals, dtype=float)
        got = ad.topk_indices(x, k).tolist()
        want = sorted(range(len(vals)), key=lambda i: (-x[i], i))[: min(k, len(vals))]
        assert got == want

    def test_rowwise(self):
        x = np.array([[1.0, 2.0], [2.0, 2.0]])
        np.testing.assert_array_equal(ad.topk_indices(x, 1, axis=-1), [[1], [0]])


class TestDeterminism:
    def test_same_seed_bit_identical_gradients(self):
        def run():
            rng = np.random.default_rng(123)
            w = Tensor(rng.normal(size=(8, 8)), requires_grad=True, name="w")
            x = Tensor(rng.normal(size=(4, 8)))
            with Tape() as tape:
                h = ad.gelu(ad.matmul(x, w))
                loss = ad.meant(ad.mul(h, h))
            return backward(tape, loss, {"w": w})["w"], loss.item()

        g1, l1 = run()
        g2, l2 = run()
        assert l1 == l2
        assert np.array_equal(g1, g2)

    def test_masked_softmax_zeroes_are_exact(self):
        x = Tensor(np.array([[0.5, 0.2, 0.1]]))
        mask = np.array([[False, True, True]])
        p = ad.softmax(ad.masked_fill(x, mask, MASK_FILL)).data
        assert p[0, 0] == 1.0
        assert p[0, 1] == 0.0 and p[0, 2] == 0.0
