"""Tensor core: forward oracles, gradient checks, tape discipline."""

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

import gridcast.autodiff as ad
from gridcast.autodiff import (
    GraphError,
    ShapeError,
    Tensor,
    backward,
    checkpoint_segment,
)

RNG = np.random.default_rng(20240811)


def t(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def fd_check(fn, tensors, rel_tol=1e-4, eps=1e-5, n_dirs=8, seed=0):
    """Directional finite differences against reverse-mode gradients.

    fn maps the tensors to a scalar Tensor.  For each random unit direction
    u over all inputs jointly, compares <grad, u> with the central
    difference (f(x+eps u) - f(x-eps u)) / 2 eps at relative tolerance.
    """
    rng = np.random.default_rng(seed)
    base = [x.values.copy() for x in tensors]
    y = fn(*tensors)
    grads = backward(y, leaves=tensors)
    gvec = np.concatenate([grads[x].ravel() for x in tensors])

    for _ in range(n_dirs):
        u = rng.standard_normal(gvec.size)
        u /= np.linalg.norm(u)
        parts = []
        off = 0
        for b in base:
            parts.append(u[off:off + b.size].reshape(b.shape))
            off += b.size

        def feval(sign):
            pts = [Tensor(b + sign * eps * p) for b, p in zip(base, parts)]
            with ad.no_grad():
                return fn(*pts).item()

        fd = (feval(+1.0) - feval(-1.0)) / (2.0 * eps)
        an = float(gvec @ u)
        assert abs(fd - an) <= rel_tol * max(abs(fd), abs(an), 1e-8), (
            f"directional derivative mismatch: fd={fd:.10g} analytic={an:.10g}")


# ---------------------------------------------------------------------------
# forward oracles
# ---------------------------------------------------------------------------

class TestForward:
    def test_add_mul_broadcast(self):
        a = t(RNG.standard_normal((3, 1, 4)))
        b = t(RNG.standard_normal((2, 4)))
        np.testing.assert_array_equal((a + b).values, a.values + b.values)
        np.testing.assert_array_equal((a * b).values, a.values * b.values)

    def test_matmul_batched(self):
        a = t(RNG.standard_normal((5, 2, 3)))
        b = t(RNG.standard_normal((5, 3, 4)))
        np.testing.assert_array_equal(ad.matmul(a, b).values, a.values @ b.values)

    def test_gelu_known_points(self):
        # gelu(0) = 0; gelu(x) -> x for large x; gelu(-x) = x*Phi(-x) symmetry
        x = t([0.0, 10.0, -10.0, 1.0])
        y = ad.gelu(x).values
        assert y[0] == 0.0
        assert abs(y[1] - 10.0) < 1e-12
        assert abs(y[2]) < 1e-12
        phi1 = 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
        assert abs(y[3] - phi1) < 1e-15

    def test_softmax_rows(self):
        x = t(RNG.standard_normal((6, 9)))
        p = ad.softmax(x, axis=-1).values
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        assert (p > 0).all()
        # shift invariance along the softmax axis
        q = ad.softmax(t(x.values + 123.0), axis=-1).values
        np.testing.assert_allclose(p, q, atol=1e-12)

    def test_layernorm_moments(self):
        x = t(RNG.standard_normal((4, 16)))
        g = t(np.ones(16))
        b = t(np.zeros(16))
        y = ad.layernorm(x, g, b).values
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)

    def test_pad_circular_matches_roll(self):
        x = t(RNG.standard_normal((3, 5)))
        y = ad.pad(x, [(0, 0), (2, 2)], mode="circular").values
        assert y.shape == (3, 9)
        np.testing.assert_array_equal(y[:, 2:7], x.values)
        np.testing.assert_array_equal(y[:, :2], x.values[:, -2:])
        np.testing.assert_array_equal(y[:, 7:], x.values[:, :2])

    def test_take_gather(self):
        x = t(RNG.standard_normal((7, 3)))
        idx = np.array([[0, 6], [2, 2]])
        y = ad.take(x, idx)
        assert y.shape == (2, 2, 3)
        np.testing.assert_array_equal(y.values, x.values[idx])
        with pytest.raises(ShapeError):
            ad.take(x, np.array([7]))

    def test_conv2d_delta_kernel_identity(self):
        # 1x1-centered delta kernel with wrap reproduces the input
        x = t(RNG.standard_normal((2, 6, 8)))
        w = np.zeros((2, 2, 3, 3))
        w[0, 0, 1, 1] = 1.0
        w[1, 1, 1, 1] = 1.0
        y = ad.conv(x, t(w), stride=1, pads=[(1, 1), (0, 0)], wrap=(False, True))
        np.testing.assert_array_equal(y.values, x.values)

    def test_conv2d_direct_summation_oracle(self):
        # wrap on the last axis, zero pad on the first
        c_in, c_out, h, wd, k = 3, 4, 5, 6, 3
        x = RNG.standard_normal((c_in, h, wd))
        w = RNG.standard_normal((c_out, c_in, k, k))
        b = RNG.standard_normal(c_out)
        y = ad.conv(t(x), t(w), t(b), stride=1, pads=[(1, 1), (0, 0)],
                    wrap=(False, True)).values
        ref = np.zeros((c_out, h, wd))
        for co in range(c_out):
            ref[co] = b[co]
            for ci in range(c_in):
                for i in range(h):
                    for j in range(wd):
                        for di in range(k):
                            for dj in range(k):
                                si = i + di - 1
                                sj = (j + dj - 1) % wd
                                if 0 <= si < h:
                                    ref[co, i, j] += w[co, ci, di, dj] * x[ci, si, sj]
        np.testing.assert_allclose(y, ref, atol=1e-12)

    def test_conv2d_strided_shapes(self):
        x = t(RNG.standard_normal((1, 8, 12)))
        w = t(RNG.standard_normal((5, 1, 3, 3)))
        y = ad.conv(x, w, stride=2, pads=[(1, 1), (0, 0)], wrap=(False, True))
        assert y.shape == (5, 4, 6)

    def test_conv3d_shapes(self):
        x = t(RNG.standard_normal((2, 3, 6, 8)))
        w = t(RNG.standard_normal((4, 2, 3, 3, 3)))
        y = ad.conv(x, w, stride=1, pads=[(1, 1), (1, 1), (0, 0)],
                    wrap=(False, False, True))
        assert y.shape == (4, 3, 6, 8)

    def test_conv_transpose_is_adjoint(self):
        # <conv(x), y> == <x, conv_transpose(y)> for every geometry tested
        geoms = [
            dict(stride=2, pads=[(1, 1), (0, 0)], wrap=(False, True), big=(6, 8), k=(4, 4)),
            dict(stride=1, pads=[(1, 1), (1, 1)], wrap=(False, False), big=(5, 5), k=(3, 3)),
            dict(stride=2, pads=[(0, 0), (0, 0)], wrap=(True, True), big=(6, 8), k=(3, 3)),
        ]
        for gm in geoms:
            c1, c2 = 3, 2
            xb = RNG.standard_normal((c1,) + gm["big"])
            wf = RNG.standard_normal((c2, c1) + gm["k"])
            y = ad.conv(t(xb), t(wf), stride=gm["stride"], pads=gm["pads"],
                        wrap=gm["wrap"]).values
            ys = RNG.standard_normal(y.shape)
            # weight for the transpose carries (C_in, C_out, *K) = (c2, c1, *K)
            xt = ad.conv_transpose(t(ys), t(wf.transpose(0, 1, *range(2, 2 + len(gm["k"])))),
                                   stride=gm["stride"], pads=gm["pads"], wrap=gm["wrap"],
                                   out_extents=gm["big"]).values
            lhs = float((y * ys).sum())
            rhs = float((xb * xt).sum())
            assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs)), gm

    def test_conv_wrap_stride_divisibility(self):
        x = t(RNG.standard_normal((1, 4, 7)))
        w = t(RNG.standard_normal((1, 1, 3, 3)))
        with pytest.raises(ShapeError):
            ad.conv(x, w, stride=2, pads=[(1, 1), (0, 0)], wrap=(False, True))

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            ad.matmul(t(RNG.standard_normal((2, 3))), t(RNG.standard_normal((4, 2))))
        with pytest.raises(ShapeError):
            ad.concat([], axis=0)
        with pytest.raises(ShapeError):
            t(np.ones((2, 2))).reshape(5)


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------

class TestGradients:
    def test_add_mul(self):
        a, b = t(RNG.standard_normal((3, 4))), t(RNG.standard_normal((4,)))
        fd_check(lambda x, y: ((x * y) + x).sum(), [a, b])

    def test_matmul(self):
        a, b = t(RNG.standard_normal((3, 4))), t(RNG.standard_normal((4, 2)))
        fd_check(lambda x, y: (ad.matmul(x, y) * ad.matmul(x, y)).sum(), [a, b])

    def test_gelu(self):
        x = t(RNG.standard_normal(40))
        fd_check(lambda v: (ad.gelu(v) * ad.gelu(v)).sum(), [x])

    def test_softmax(self):
        x = t(RNG.standard_normal((5, 7)))
        c = RNG.standard_normal((5, 7))
        fd_check(lambda v: (ad.softmax(v, axis=-1) * Tensor(c)).sum(), [x])

    def test_layernorm(self):
        x = t(RNG.standard_normal((3, 8)))
        g = t(RNG.standard_normal(8))
        b = t(RNG.standard_normal(8))
        c = RNG.standard_normal((3, 8))
        fd_check(lambda xx, gg, bb: (ad.layernorm(xx, gg, bb) * Tensor(c)).sum(),
                 [x, g, b])

    def test_reductions_views(self):
        x = t(RNG.standard_normal((4, 5, 2)))
        fd_check(lambda v: v.mean(axis=(0, 2)).sum(), [x])
        fd_check(lambda v: (v.transpose(2, 0, 1).reshape(8, 5) * 3.0).sum(), [x])
        fd_check(lambda v: v[1:3, ::2].sum(), [x])

    def test_concat_take_pad(self):
        a, b = t(RNG.standard_normal((2, 3))), t(RNG.standard_normal((4, 3)))
        fd_check(lambda x, y: (ad.concat([x, y], axis=0) ** 2 if False else
                               (ad.concat([x, y], axis=0) * ad.concat([x, y], axis=0))).sum(),
                 [a, b])
        x = t(RNG.standard_normal((5, 3)))
        idx = np.array([[0, 4, 2], [2, 2, 1]])
        fd_check(lambda v: (ad.take(v, idx) * ad.take(v, idx)).sum(), [x])
        fd_check(lambda v: (ad.pad(v, [(1, 2), (2, 1)], mode="circular")
                            * ad.pad(v, [(1, 2), (2, 1)], mode="circular")).sum(), [x])
        fd_check(lambda v: (ad.pad(v, [(1, 0), (0, 2)], mode="zero")
                            * ad.pad(v, [(1, 0), (0, 2)], mode="zero")).sum(), [x])

    def test_conv2d(self):
        x = t(RNG.standard_normal((2, 5, 6)))
        w = t(RNG.standard_normal((3, 2, 3, 3)))
        b = t(RNG.standard_normal(3))

        def f(xx, ww, bb):
            y = ad.conv(xx, ww, bb, stride=1, pads=[(1, 1), (0, 0)], wrap=(False, True))
            return (y * y).sum()

        fd_check(f, [x, w, b])

    def test_conv2d_strided(self):
        x = t(RNG.standard_normal((2, 6, 8)))
        w = t(RNG.standard_normal((3, 2, 4, 4)))

        def f(xx, ww):
            y = ad.conv(xx, ww, stride=2, pads=[(1, 1), (0, 0)], wrap=(False, True))
            return (y * y).sum()

        fd_check(f, [x, w])

    def test_conv3d(self):
        x = t(RNG.standard_normal((2, 3, 4, 6)))
        w = t(RNG.standard_normal((2, 2, 2, 3, 3)))

        def f(xx, ww):
            y = ad.conv(xx, ww, stride=1, pads=[(0, 1), (1, 1), (0, 0)],
                        wrap=(False, False, True))
            return (y * y).sum()

        fd_check(f, [x, w])

    def test_conv_transpose(self):
        x = t(RNG.standard_normal((3, 3, 4)))
        w = t(RNG.standard_normal((3, 2, 4, 4)))
        b = t(RNG.standard_normal(2))

        def f(xx, ww, bb):
            y = ad.conv_transpose(xx, ww, bb, stride=2, pads=[(1, 1), (0, 0)],
                                  wrap=(False, True), out_extents=(6, 8))
            return (y * y).sum()

        fd_check(f, [x, w, b])

    def test_disconnected_leaf_gets_zeros(self):
        a = t(RNG.standard_normal((2, 2)))
        b = t(RNG.standard_normal((3,)))
        y = (a * a).sum()
        grads = backward(y, leaves=[a, b])
        assert grads[b].shape == (3,)
        assert (grads[b] == 0).all()
        np.testing.assert_allclose(grads[a], 2 * a.values, atol=1e-14)

    def test_grad_accumulates_across_reuse(self):
        a = t(np.array([2.0]))
        y = (a * a * a).sum()  # d/da a^3 = 3a^2
        grads = backward(y)
        np.testing.assert_allclose(grads[a], [12.0], atol=1e-12)


# ---------------------------------------------------------------------------
# tape discipline
# ---------------------------------------------------------------------------

class TestTape:
    def test_backward_rejects_nonscalar_root(self):
        a = t(RNG.standard_normal((2, 2)))
        with pytest.raises(GraphError):
            backward(a * a)

    def test_backward_rejects_repeat(self):
        a = t(RNG.standard_normal(3))
        y = (a * a).sum()
        backward(y)
        with pytest.raises(GraphError):
            backward(y)

    def test_backward_rejects_shared_consumed_subgraph(self):
        a = t(RNG.standard_normal(3))
        h = a * a
        y1 = h.sum()
        y2 = (h * h).sum()
        backward(y2)
        with pytest.raises(GraphError):
            backward(y1)

    def test_no_grad_builds_no_tape(self):
        a = t(RNG.standard_normal(3))
        with ad.no_grad():
            y = (a * a).sum()
        assert y.node is None
        assert not y.requires_grad

    def test_seeded_vector_backward(self):
        a = t(RNG.standard_normal((2, 3)))
        y = a * 2.0
        seed = RNG.standard_normal((2, 3))
        grads = backward(y, seed=seed)
        np.testing.assert_allclose(grads[a], 2.0 * seed, atol=1e-14)

    def test_tensor_owns_buffer(self):
        buf = np.ones((2, 2))
        x = Tensor(buf)
        buf[0, 0] = 99.0
        assert x.values[0, 0] == 1.0
        v = Tensor(buf[:, 0])
        assert v.values.base is None


# ---------------------------------------------------------------------------
# checkpoint segments
# ---------------------------------------------------------------------------

def _mlp_segment(p1, p2):
    def seg(z):
        h = ad.gelu(ad.matmul(z, p1))
        return ad.matmul(h, p2)
    return seg


class TestCheckpoint:
    def test_bitwise_forward_and_grads(self):
        p1 = t(RNG.standard_normal((6, 6)))
        p2 = t(RNG.standard_normal((6, 6)))
        x = t(RNG.standard_normal((4, 6)))
        seg = _mlp_segment(p1, p2)

        y_plain = seg(seg(x)).sum()
        g_plain = backward(y_plain, leaves=[x, p1, p2])

        y_ck = checkpoint_segment(seg, checkpoint_segment(seg, x)).sum()
        g_ck = backward(y_ck, leaves=[x, p1, p2])

        assert y_plain.values.tobytes() == y_ck.values.tobytes()
        for k in (x, p1, p2):
            assert g_plain[k].tobytes() == g_ck[k].tobytes()

    def test_saved_count_drops(self):
        p1 = t(RNG.standard_normal((6, 6)))
        p2 = t(RNG.standard_normal((6, 6)))
        seg = _mlp_segment(p1, p2)

        ad.reset_tape_stats()
        x = t(RNG.standard_normal((4, 6)))
        y = seg(seg(seg(x)))
        plain_saved = ad.tape_stats().saved_current
        backward(y.sum())

        ad.reset_tape_stats()
        x = t(RNG.standard_normal((4, 6)))
        z = x
        for _ in range(3):
            z = checkpoint_segment(seg, z)
        ck_saved = ad.tape_stats().saved_current
        backward(z.sum())

        assert ck_saved == 3  # one pinned input per segment
        assert ck_saved < plain_saved

    def test_param_grads_route_through(self):
        p1 = t(RNG.standard_normal((5, 5)))
        p2 = t(RNG.standard_normal((5, 5)))
        x = t(RNG.standard_normal((2, 5)), grad=False)
        seg = _mlp_segment(p1, p2)
        y = checkpoint_segment(seg, x).sum()
        grads = backward(y, leaves=[p1, p2])
        assert grads[p1].shape == (5, 5)
        assert float(np.abs(grads[p1]).sum()) > 0

    def test_identity_segment(self):
        x = t(RNG.standard_normal(4))
        y = checkpoint_segment(lambda z: z, x).sum()
        grads = backward(y, leaves=[x])
        np.testing.assert_array_equal(grads[x], np.ones(4))

    def test_nonleaf_capture_rejected(self):
        p = t(RNG.standard_normal((3, 3)))
        hidden = ad.gelu(p)  # non-leaf with history
        x = t(RNG.standard_normal((2, 3)))
        y = checkpoint_segment(lambda z: ad.matmul(z, hidden), x).sum()
        with pytest.raises(GraphError):
            backward(y)

    def test_no_grad_checkpoint_passthrough(self):
        p1 = t(RNG.standard_normal((4, 4)))
        p2 = t(RNG.standard_normal((4, 4)))
        x = t(RNG.standard_normal((2, 4)))
        seg = _mlp_segment(p1, p2)
        with ad.no_grad():
            y = checkpoint_segment(seg, x)
        assert y.node is None


# ---------------------------------------------------------------------------
# determinism and property tests
# ---------------------------------------------------------------------------

class TestDeterminism:
    def test_repeat_run_bitwise(self):
        def run():
            rng = np.random.default_rng(7)
            x = Tensor(rng.standard_normal((3, 16)), requires_grad=True)
            w = Tensor(rng.standard_normal((16, 16)), requires_grad=True)
            g = Tensor(np.ones(16), requires_grad=True)
            b = Tensor(np.zeros(16), requires_grad=True)
            y = ad.layernorm(ad.gelu(ad.matmul(x, w)), g, b)
            loss = (y * y).mean()
            grads = backward(loss, leaves=[x, w, g, b])
            return loss.values.tobytes() + b"".join(grads[k].tobytes() for k in (x, w, g, b))

        assert run() == run()


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 9), st.integers(2, 9))
def test_softmax_rows_sum_to_one(rows, cols):
    rng = np.random.default_rng(rows * 100 + cols)
    p = ad.softmax(Tensor(rng.standard_normal((rows, cols)) * 10), axis=-1).values
    assert np.abs(p.sum(axis=-1) - 1.0).max() < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(2, 12))
def test_layernorm_shift_invariant(rows, d):
    rng = np.random.default_rng(rows * 1000 + d)
    x = rng.standard_normal((rows, d))
    g = Tensor(rng.standard_normal(d))
    b = Tensor(rng.standard_normal(d))
    y1 = ad.layernorm(Tensor(x), g, b).values
    y2 = ad.layernorm(Tensor(x + 7.5), g, b).values
    assert np.abs(y1 - y2).max() < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10), st.integers(1, 4), st.integers(0, 3))
def test_circular_pad_backward_is_adjoint(extent, before, after):
    assume(before <= extent and after <= extent)
    rng = np.random.default_rng(extent * 31 + before * 7 + after)
    x = Tensor(rng.standard_normal(extent), requires_grad=True)
    y = ad.pad(x, [(before, after)], mode="circular")
    seed = rng.standard_normal(y.shape)
    grads = backward(y, seed=seed)
    # adjoint property against a dense matrix of the padding map
    mat = np.zeros((extent + before + after, extent))
    for i in range(extent + before + after):
        mat[i, (i - before) % extent] = 1.0
    np.testing.assert_allclose(grads[x], mat.T @ seed, atol=1e-12)
