import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from otpush import numkit as nk
from otpush.numkit import (
    AdamWState,
    ContractError,
    SeededRng,
    ShapeError,
    Tape,
    adamw_step,
    backward,
    matrix,
)


def finite_diff(f, x, h=1e-5):
    """Central finite differences of a scalar function over an array."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        up = f(x)
        x[idx] = orig - h
        dn = f(x)
        x[idx] = orig
        g[idx] = (up - dn) / (2 * h)
        it.iternext()
    return g


def rel_err(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-10)
    return np.max(np.abs(a - b)) / denom


class TestMatrix:
    def test_matrix_builds_row_major(self):
        m = matrix(2, 3, [1, 2, 3, 4, 5, 6])
        assert m.shape == (2, 3)
        assert m[1, 0] == 4.0

    def test_matrix_rejects_bad_length(self):
        with pytest.raises(ShapeError):
            matrix(2, 2, [1, 2, 3])

    def test_matmul_identity(self):
        m = np.arange(9.0).reshape(3, 3)
        assert np.array_equal(nk.matmul(np.eye(3), m), m)

    def test_matmul_hand_case(self):
        out = nk.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0], [1.0]]))
        assert np.array_equal(out, np.array([[2.0], [4.0]]))

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            nk.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_matmul_adjoint_vs_finite_differences(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 3))
        w = rng.normal(size=(4, 3))  # random projection makes the output scalar

        tape = Tape()
        va, vb = tape.leaf(a), tape.leaf(b)
        loss = nk.ssum(nk.mul(nk.matmul(va, vb), tape.const(w)))
        grads = backward(tape, loss)

        fa = finite_diff(lambda x: float((x @ b * w).sum()), a.copy())
        fb = finite_diff(lambda x: float((a @ x * w).sum()), b.copy())
        assert rel_err(grads[va.nid], fa) <= 1e-6
        assert rel_err(grads[vb.nid], fb) <= 1e-6


class TestBackward:
    def test_sum_gradient_all_ones(self):
        tape = Tape()
        p = tape.leaf(np.arange(5.0))
        grads = backward(tape, nk.ssum(p))
        assert np.array_equal(grads[p.nid], np.ones((1, 5)))

    def test_inner_product_gradient(self):
        tape = Tape()
        x = np.array([[1.0, -2.0, 3.0]])
        p = tape.leaf(x)
        grads = backward(tape, nk.ssum(nk.mul(p, p)))
        assert np.allclose(grads[p.nid], 2 * x)

    def test_non_scalar_root_rejected(self):
        tape = Tape()
        p = tape.leaf(np.ones((2, 2)))
        with pytest.raises(ContractError):
            backward(tape, nk.tanh(p))

    def test_unused_leaf_gets_zero_gradient(self):
        tape = Tape()
        p = tape.leaf(np.ones((1, 3)))
        q = tape.leaf(np.ones((1, 3)))
        grads = backward(tape, nk.ssum(p))
        assert np.array_equal(grads[q.nid], np.zeros((1, 3)))

    def test_mlp_loss_vs_finite_differences(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 4))
        w1 = rng.normal(size=(4, 8)) * 0.5
        b1 = rng.normal(size=(1, 8)) * 0.1
        w2 = rng.normal(size=(8, 3)) * 0.5
        target = rng.normal(size=(6, 3))

        def forward(w1v, b1v, w2v):
            h = np.tanh(x @ w1v + b1v)
            d = h @ w2v - target
            return float((d * d).mean())

        tape = Tape()
        vw1, vb1, vw2 = tape.leaf(w1), tape.leaf(b1), tape.leaf(w2)
        h = nk.tanh(nk.matmul(tape.const(x), vw1) + vb1)
        d = nk.sub(nk.matmul(h, vw2), tape.const(target))
        loss = nk.smean(nk.mul(d, d))
        grads = backward(tape, loss)

        assert rel_err(grads[vw1.nid], finite_diff(lambda v: forward(v, b1, w2), w1.copy())) <= 1e-4
        assert rel_err(grads[vb1.nid], finite_diff(lambda v: forward(w1, v, w2), b1.copy())) <= 1e-4
        assert rel_err(grads[vw2.nid], finite_diff(lambda v: forward(w1, b1, v), w2.copy())) <= 1e-4

    @settings(max_examples=30, deadline=None)
    @given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 1000))
    def test_backward_is_linear(self, a, b, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, 4))

        def grad_of(scale_f, scale_g):
            tape = Tape()
            p = tape.leaf(x)
            f = nk.ssum(nk.mul(p, p))
            g = nk.ssum(nk.tanh(p))
            root = nk.add(nk.scale(f, scale_f), nk.scale(g, scale_g))
            return backward(tape, root)[p.nid]

        combined = grad_of(a, b)
        expected = a * grad_of(1.0, 0.0) + b * grad_of(0.0, 1.0)
        assert np.allclose(combined, expected, atol=1e-12)


# Every differentiable primitive, with a way to build random valid inputs.
def _primitive_cases(rng):
    n, m, d = 3, 4, 2
    return [
        ("matmul", lambda t, xs: nk.matmul(xs[0], xs[1]),
         [rng.normal(size=(n, d)), rng.normal(size=(d, m))]),
        ("add", lambda t, xs: nk.add(xs[0], xs[1]),
         [rng.normal(size=(n, m)), rng.normal(size=(n, m))]),
        ("add_bias", lambda t, xs: nk.add(xs[0], xs[1]),
         [rng.normal(size=(n, m)), rng.normal(size=(1, m))]),
        ("sub", lambda t, xs: nk.sub(xs[0], xs[1]),
         [rng.normal(size=(n, m)), rng.normal(size=(n, m))]),
        ("mul", lambda t, xs: nk.mul(xs[0], xs[1]),
         [rng.normal(size=(n, m)), rng.normal(size=(n, m))]),
        ("scale", lambda t, xs: nk.scale(xs[0], -1.7), [rng.normal(size=(n, m))]),
        ("tanh", lambda t, xs: nk.tanh(xs[0]), [rng.normal(size=(n, m))]),
        ("exp", lambda t, xs: nk.exp(xs[0]), [rng.normal(size=(n, m))]),
        ("smooth_l1", lambda t, xs: nk.smooth_l1(xs[0]), [rng.normal(size=(n, m)) * 2]),
        ("pairwise_sqdist", lambda t, xs: nk.pairwise_sqdist(xs[0], xs[1]),
         [rng.normal(size=(n, d)), rng.normal(size=(m, d))]),
    ]


@pytest.mark.parametrize("case_idx", range(10))
def test_primitive_gradients_vs_finite_differences(case_idx):
    """Central differences at h=1e-5, 100 random inputs per primitive."""
    failures = 0
    for trial in range(100):
        rng = np.random.default_rng(1000 * case_idx + trial)
        name, build, arrays = _primitive_cases(rng)[case_idx]
        proj = None

        def scalar_from(raw_arrays):
            tape = Tape()
            vs = [tape.leaf(a) for a in raw_arrays]
            out = build(tape, vs)
            nonlocal proj
            if proj is None:
                proj = rng.normal(size=out.value.shape)
            return tape, vs, nk.ssum(nk.mul(out, tape.const(proj)))

        tape, vs, root = scalar_from(arrays)
        grads = backward(tape, root)
        for k, arr in enumerate(arrays):
            def f(x):
                others = [a if i != k else x for i, a in enumerate(arrays)]
                _, _, r = scalar_from(others)
                return float(r.value[0, 0])

            fd = finite_diff(f, arr.copy())
            if rel_err(grads[vs[k].nid], fd) > 1e-4:
                failures += 1
    assert failures == 0


class TestAdamW:
    def test_zero_gradient_zero_decay_is_identity(self):
        params = {"w": np.array([[1.0, -2.0]])}
        grads = {"w": np.zeros((1, 2))}
        state = AdamWState.init(params)
        new, _ = adamw_step(params, grads, state, lr=0.1, weight_decay=0.0)
        assert np.array_equal(new["w"], params["w"])

    def test_first_step_direction_opposes_gradient(self):
        params = {"w": np.zeros((1, 3))}
        grads = {"w": np.array([[0.5, -2.0, 1e-3]])}
        state = AdamWState.init(params)
        new, _ = adamw_step(params, grads, state, lr=0.1, weight_decay=0.0)
        assert np.all(np.sign(new["w"]) == -np.sign(grads["w"]))

    def test_ten_steps_match_reference_update_rule(self):
        # independent reference implementation, written against the update
        # rule itself rather than the production code
        def reference(p, g, m, v, t, lr, wd, b1, b2, eps):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mh = m / (1 - b1**t)
            vh = v / (1 - b2**t)
            p = p - lr * (mh / (np.sqrt(vh) + eps) + wd * p)
            return p, m, v

        rng = np.random.default_rng(3)
        p0 = rng.normal(size=(2, 3))
        params = {"w": p0.copy()}
        state = AdamWState.init(params)
        p_ref = p0.copy()
        m_ref = np.zeros_like(p0)
        v_ref = np.zeros_like(p0)
        lr, wd, b1, b2, eps = 1e-2, 1e-2, 0.9, 0.999, 1e-8
        for t in range(1, 11):
            # quadratic loss 0.5 * ||p - 1||^2 has gradient (p - 1)
            g = params["w"] - 1.0
            params, state = adamw_step(params, {"w": g}, state, lr=lr,
                                       weight_decay=wd, betas=(b1, b2), eps=eps)
            g_ref = p_ref - 1.0
            p_ref, m_ref, v_ref = reference(p_ref, g_ref, m_ref, v_ref, t, lr, wd, b1, b2, eps)
            assert np.max(np.abs(params["w"] - p_ref)) <= 1e-12

    def test_shape_mismatch_rejected(self):
        params = {"w": np.zeros((1, 2))}
        state = AdamWState.init(params)
        with pytest.raises(ShapeError):
            adamw_step(params, {"w": np.zeros((2, 2))}, state, lr=0.1, weight_decay=0.0)


class TestSeededRng:
    def test_same_seed_same_stream(self):
        a = SeededRng(42).stream("data").uniform(size=16)
        b = SeededRng(42).stream("data").uniform(size=16)
        assert np.array_equal(a, b)

    def test_labels_are_independent(self):
        a = SeededRng(42).stream("data").uniform(size=16)
        b = SeededRng(42).stream("init").uniform(size=16)
        assert not np.array_equal(a, b)

    def test_bad_seed_rejected(self):
        with pytest.raises(ContractError):
            SeededRng(-1)

    def test_training_trajectory_is_bit_deterministic(self):
        """Same seed + same config: bit-identical parameters for 100+ steps."""

        def run():
            rng = SeededRng(7)
            init = rng.stream("init")
            data = rng.stream("data")
            params = {"w": init.uniform(-0.5, 0.5, size=(3, 2)),
                      "b": np.zeros((1, 2))}
            state = AdamWState.init(params)
            for _ in range(120):
                x = data.normal(size=(4, 3))
                y = data.normal(size=(4, 2))
                tape = Tape()
                vw, vb = tape.leaf(params["w"]), tape.leaf(params["b"])
                d = nk.sub(nk.add(nk.matmul(tape.const(x), vw), vb), tape.const(y))
                grads = backward(tape, nk.smean(nk.mul(d, d)))
                params, state = adamw_step(
                    params, {"w": grads[vw.nid], "b": grads[vb.nid]}, state,
                    lr=1e-3, weight_decay=1e-4)
            return params

        p1, p2 = run(), run()
        assert p1["w"].tobytes() == p2["w"].tobytes()
        assert p1["b"].tobytes() == p2["b"].tobytes()
