import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import cadpose.autodiff as ad
from cadpose.autodiff import Tape, Tensor, backward
from cadpose.nn import ParameterStore, adam_step, grad_check


def randn(*shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).standard_normal(shape) * scale


class TestTrivialBackward:
    def test_identity_grad(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        with Tape() as tape:
            loss = ad.tsum(x)
            backward(tape, loss)
        assert np.allclose(x.grad, [1.0])

    def test_sum_of_squares(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            loss = ad.tsum(ad.mul(x, x))
            backward(tape, loss)
        assert np.allclose(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ad.mul(x, x)
            with pytest.raises(ad.AutodiffError, match="scalar"):
                backward(tape, y)

    def test_reuse_accumulates(self):
        # loss = sum(x) + sum(x) -> grad is 2 everywhere (linearity of accumulation)
        x = Tensor(np.ones(4), requires_grad=True)
        with Tape() as tape:
            loss = ad.add(ad.tsum(x), ad.tsum(x))
            backward(tape, loss)
        assert np.allclose(x.grad, 2.0)

    def test_shape_mismatch_message_names_shapes(self):
        with pytest.raises(ad.AutodiffError, match=r"\(2, 3\).*\(5, 4\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((5, 4))))


class TestForwardTrivials:
    def test_softmax_uniform(self):
        out = ad.softmax(Tensor(np.zeros(7)))
        assert np.allclose(out.data, 1 / 7)

    def test_sin_zero_weights(self):
        x = Tensor(randn(4, 3, seed=1))
        w = Tensor(np.zeros((3, 5)))
        b = Tensor(np.zeros(5))
        out = ad.sin(ad.linear(x, w, b))
        assert np.all(out.data == 0)

    def test_conv1d_kernel_one_identity(self):
        x = Tensor(randn(6, 1, seed=2))
        w = Tensor(np.ones((1, 1, 1)))
        out = ad.conv1d(x, w)
        assert np.allclose(out.data, x.data)

    def test_softmax_rows_sum_to_one(self):
        out = ad.softmax(Tensor(randn(5, 9, seed=3) * 10), axis=-1)
        assert np.abs(out.data.sum(axis=-1) - 1).max() < 1e-6
        assert (out.data >= 0).all()

    @given(st.integers(0, 500))
    @settings(max_examples=20, deadline=None)
    def test_softmax_property(self, seed):
        x = randn(4, 6, seed=seed, scale=5)
        out = ad.softmax(Tensor(x))
        assert np.abs(out.data.sum(-1) - 1).max() < 1e-6
        assert (out.data >= 0).all()

    def test_deterministic_forward(self):
        x = randn(8, 8, 3, seed=4)
        w = randn(3, 3, 3, 4, seed=5, scale=0.3)
        a = ad.conv2d(Tensor(x), Tensor(w), stride=1, pad=1)
        b = ad.conv2d(Tensor(x), Tensor(w), stride=1, pad=1)
        assert np.array_equal(a.data, b.data)


class TestGradChecks:
    """Central finite differences in double precision, rel err < 1e-4."""

    def test_linear(self):
        m = Tensor(randn(5, 3, seed=10))
        rep = grad_check(
            lambda ts: ad.tsum(ad.mul(ad.linear(ts[0], ts[1], ts[2]), m)),
            [randn(5, 4, seed=11), randn(4, 3, seed=12), randn(3, seed=13)],
        )
        assert rep.passed, rep.worst

    def test_conv1d(self):
        m = Tensor(randn(6, 4, seed=20))
        rep = grad_check(
            lambda ts: ad.tsum(ad.mul(ad.conv1d(ts[0], ts[1], ts[2]), m)),
            [randn(8, 3, seed=21), randn(3, 3, 4, seed=22, scale=0.5), randn(4, seed=23, scale=0.2)],
        )
        assert rep.passed, rep.worst

    def test_conv2d_stride_pad(self):
        m = Tensor(randn(3, 3, 3, seed=30))
        rep = grad_check(
            lambda ts: ad.tsum(ad.mul(ad.conv2d(ts[0], ts[1], ts[2], stride=2, pad=1), m)),
            [randn(6, 6, 2, seed=31), randn(3, 3, 2, 3, seed=32, scale=0.4), randn(3, seed=33, scale=0.2)],
        )
        assert rep.passed, rep.worst

    def test_upsample_bilinear(self):
        m = Tensor(randn(4, 8, 1, seed=40))
        rep = grad_check(
            lambda ts: ad.tsum(ad.mul(ad.upsample_bilinear(ts[0], 2), m)), [randn(2, 4, 1, seed=41)]
        )
        assert rep.passed, rep.worst

    def test_activations(self):
        m = Tensor(randn(3, 3, seed=50))
        for op in (ad.sigmoid, ad.sin, ad.exp):
            rep = grad_check(lambda ts: ad.tsum(ad.mul(op(ts[0]), m)), [randn(3, 3, seed=51)])
            assert rep.passed, rep.worst
        # relu probed away from the kink
        rep = grad_check(
            lambda ts: ad.tsum(ad.mul(ad.relu(ts[0]), m)), [randn(3, 3, seed=52) + 3.0]
        )
        assert rep.passed, rep.worst

    def test_softmax_logsumexp_mean(self):
        rep = grad_check(lambda ts: ad.mean(ad.logsumexp(ts[0], axis=1)), [randn(5, 9, seed=60)])
        assert rep.passed, rep.worst
        m = Tensor(randn(5, 9, seed=61))
        rep = grad_check(lambda ts: ad.tsum(ad.mul(ad.softmax(ts[0], axis=1), m)), [randn(5, 9, seed=62)])
        assert rep.passed, rep.worst

    def test_layernorm(self):
        m = Tensor(randn(4, 6, seed=70))
        rep = grad_check(
            lambda ts: ad.tsum(ad.mul(ad.layernorm(ts[0], ts[1], ts[2]), m)),
            [randn(4, 6, seed=71), 1 + 0.1 * randn(6, seed=72), 0.1 * randn(6, seed=73)],
        )
        assert rep.passed, rep.worst

    def test_take_and_concat(self):
        m = Tensor(randn(4, 3, seed=80))
        rep = grad_check(
            lambda ts: ad.tsum(ad.mul(ad.take(ts[0], np.array([0, 2, 2, 1])), m)), [randn(4, 3, seed=81)]
        )
        assert rep.passed, rep.worst
        m2 = Tensor(randn(3, 5, seed=82))
        rep = grad_check(
            lambda ts: ad.tsum(ad.mul(ad.concat([ts[0], ts[1]], axis=1), m2)),
            [randn(3, 2, seed=83), randn(3, 3, seed=84)],
        )
        assert rep.passed, rep.worst


class TestAttention:
    def test_constant_keys_average_values(self):
        # identical keys -> uniform attention -> output = mean value through W_o
        rng = np.random.default_rng(1)
        d = 4
        k = Tensor(np.tile(rng.standard_normal(d), (5, 1)))
        v = Tensor(rng.standard_normal((5, d)))
        q = Tensor(rng.standard_normal((2, d)))
        eye, zero = Tensor(np.eye(d)), Tensor(np.zeros(d))
        out = ad.multi_head_attention(q, k, v, 2, eye, eye, eye, eye, zero, zero, zero, zero)
        expect = np.tile(v.data.mean(axis=0), (2, 1))
        assert np.allclose(out.data, expect, atol=1e-6)

    def test_single_token_weight_one(self):
        rng = np.random.default_rng(2)
        d = 4
        q = Tensor(rng.standard_normal((1, d)))
        kv = Tensor(rng.standard_normal((1, d)))
        eye, zero = Tensor(np.eye(d)), Tensor(np.zeros(d))
        out = ad.multi_head_attention(q, kv, kv, 2, eye, eye, eye, eye, zero, zero, zero, zero)
        assert np.allclose(out.data, kv.data, atol=1e-6)
        w = ad.attention_weights(q, kv, 2, eye, eye)
        assert np.allclose(w, 1.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        L, D, heads = 3, 4, 2
        q, k, v = (rng.standard_normal((L, D)) for _ in range(3))
        wq, wk, wv, wo = (rng.standard_normal((D, D)) * 0.5 for _ in range(4))
        out = ad.multi_head_attention(
            Tensor(q), Tensor(k), Tensor(v), heads, Tensor(wq), Tensor(wk), Tensor(wv), Tensor(wo)
        )
        dh = D // heads
        qp, kp, vp = q @ wq, k @ wk, v @ wv
        ref = np.zeros((L, D))
        for h in range(heads):
            qs, ks, vs = (m[:, h * dh : (h + 1) * dh] for m in (qp, kp, vp))
            for i in range(L):
                logits = np.array([qs[i] @ ks[j] / np.sqrt(dh) for j in range(L)])
                w = np.exp(logits - logits.max())
                w /= w.sum()
                ref[i, h * dh : (h + 1) * dh] = sum(w[j] * vs[j] for j in range(L))
        assert np.abs(out.data - ref @ wo).max() < 1e-6

    def test_rows_sum_to_one_per_head(self):
        rng = np.random.default_rng(4)
        q, k = rng.standard_normal((6, 8)), rng.standard_normal((5, 8))
        wq, wk = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
        w = ad.attention_weights(Tensor(q), Tensor(k), 4, Tensor(wq), Tensor(wk))
        assert w.shape == (4, 6, 5)
        assert np.abs(w.sum(axis=-1) - 1).max() < 1e-6

    def test_head_divisibility_error(self):
        t = Tensor(np.ones((2, 4)))
        w = Tensor(np.ones((4, 6)))
        with pytest.raises(ad.AutodiffError, match="divisible"):
            ad.multi_head_attention(t, t, t, 4, w, w, w, Tensor(np.ones((6, 4))))
        with pytest.raises(ad.AutodiffError, match="head"):
            ad.multi_head_attention(t, t, t, 0, w, w, w, w)

    def test_grad_check(self):
        rng = np.random.default_rng(5)
        L, D, heads = 3, 4, 2
        arrs = [rng.standard_normal((L, D)) for _ in range(3)] + [
            rng.standard_normal((D, D)) * 0.5 for _ in range(4)
        ]
        rep = grad_check(
            lambda ts: ad.tsum(
                ad.mul(
                    ad.multi_head_attention(ts[0], ts[1], ts[2], heads, ts[3], ts[4], ts[5], ts[6]),
                    Tensor(randn(L, D, seed=55)),
                )
            ),
            arrs,
        )
        assert rep.passed, rep.worst


class TestAdam:
    def test_first_step_is_signed_lr(self):
        store = ParameterStore()
        w = store.add("w", np.array([1.0, -1.0]))
        w.grad = np.array([0.3, -0.7], dtype=np.float32)
        adam_step(store, lr=0.01)
        # bias-corrected first step is -lr * sign(g) up to the eps effect
        assert np.allclose(w.data, [1.0 - 0.01, -1.0 + 0.01], atol=1e-4)

    def test_zero_grad_keeps_parameter(self):
        store = ParameterStore()
        w = store.add("w", np.array([2.0]))
        w.grad = np.zeros(1, dtype=np.float32)
        adam_step(store, lr=0.5)
        assert np.allclose(w.data, [2.0])

    def test_missing_grad_skipped_and_reported(self):
        store = ParameterStore()
        store.add("a", np.ones(2))
        b = store.add("b", np.ones(2))
        b.grad = np.ones(2, dtype=np.float32)
        report = adam_step(store, lr=0.1)
        assert report["skipped"] == ["a"] and report["updated"] == ["b"]

    def test_quadratic_convergence(self):
        store = ParameterStore()
        w = store.add("w", np.array(0.0))
        for _ in range(100):
            with Tape() as tape:
                d = ad.sub(w, Tensor(np.float32(3.0)))
                loss = ad.mul(d, d)
                backward(tape, loss)
            adam_step(store, lr=0.1)
        assert abs(float(w.data) - 3.0) < 0.1
