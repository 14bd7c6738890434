import numpy as np
import pytest

from leo import autodiff as ad
from oracles import central_difference, rel_error, softmax_cross_entropy_reference


def grad_arrays(target, sources, **kw):
    return [g.data for g in ad.gradients(target, sources, **kw)]


# ---------------------------------------------------------------------------
# forward values


def test_add_componentwise():
    out = ad.add(ad.constant([1.0, 2.0]), ad.constant([3.0, 4.0]))
    assert np.array_equal(out.data, [4.0, 6.0])


def test_relu_values():
    out = ad.relu(ad.constant([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_matmul_identity_and_dot():
    eye = ad.constant(np.eye(2))
    v = ad.constant([[5.0], [7.0]])
    assert np.array_equal(ad.matmul(eye, v).data, [[5.0], [7.0]])
    got = ad.matmul(ad.constant([[1.0, 2.0]]), ad.constant([[3.0], [4.0]]))
    assert np.array_equal(got.data, [[11.0]])


def test_reductions_values():
    assert ad.reduce_mean(ad.constant([2.0, 4.0, 6.0])).item() == pytest.approx(4.0)
    out = ad.reduce_sum(ad.constant([[1.0, 2.0], [3.0, 4.0]]), (0,))
    assert np.array_equal(out.data, [4.0, 6.0])


def test_log_nan_policy_propagates():
    out = ad.log(ad.constant([-1.0, 0.0, 1.0]))
    assert np.isnan(out.data[0]) and np.isnan(out.data[1]) and out.data[2] == 0.0


def test_operator_sugar_matches_functions():
    x = ad.variable([1.0, 2.0])
    y = ad.constant([3.0, 5.0])
    assert np.array_equal((x + y).data, [4.0, 7.0])
    assert np.array_equal((x - y).data, [-2.0, -3.0])
    assert np.array_equal((x * y).data, [3.0, 10.0])
    assert np.array_equal((y / x).data, [3.0, 2.5])
    assert np.array_equal((-x).data, [-1.0, -2.0])
    assert np.array_equal((2.0 * x).data, [2.0, 4.0])


# ---------------------------------------------------------------------------
# first-order gradients


def test_square_gradient_at_three():
    x = ad.variable(3.0)
    (g,) = ad.gradients(ad.square(x), [x])
    assert g.data == pytest.approx(6.0)


def test_matmul_chain_gradient_matches_fd():
    rng = np.random.default_rng(0)
    a0 = rng.uniform(-2.0, 2.0, (3, 4))
    b0 = rng.uniform(-2.0, 2.0, (4, 2))
    c0 = rng.uniform(-2.0, 2.0, (2, 3))

    def value(a_data):
        a = ad.constant(a_data)
        out = ad.matmul(ad.matmul(a, ad.constant(b0)), ad.constant(c0))
        return ad.reduce_sum(ad.square(out)).item()

    a = ad.variable(a0)
    loss = ad.reduce_sum(ad.square(ad.matmul(ad.matmul(a, ad.constant(b0)), ad.constant(c0))))
    (g,) = grad_arrays(loss, [a])
    fd = central_difference(value, a0)
    assert rel_error(g, fd) < 1e-6


def test_mean_gradient_is_uniform():
    x = ad.variable([1.0, 2.0, 3.0, 4.0])
    (g,) = grad_arrays(ad.reduce_mean(x), [x])
    assert np.allclose(g, 0.25)
    fd = central_difference(lambda v: float(np.mean(v)), x.data)
    assert rel_error(g, fd) < 1e-6


@pytest.mark.parametrize(
    "fn,lo,hi",
    [
        (ad.exp, -2.0, 2.0),
        (ad.log, 0.5, 3.0),
        (ad.sqrt, 0.5, 3.0),
        (ad.square, -2.0, 2.0),
        (ad.neg, -2.0, 2.0),
    ],
)
def test_unary_gradients_match_fd(fn, lo, hi):
    rng = np.random.default_rng(42)
    x0 = rng.uniform(lo, hi, (4, 3))
    x = ad.variable(x0)
    (g,) = grad_arrays(ad.reduce_sum(fn(x)), [x])
    fd = central_difference(lambda v: float(fn(ad.constant(v)).data.sum()), x0)
    assert rel_error(g, fd) < 1e-6


def test_relu_gradient_away_from_kink():
    x0 = np.array([-1.5, -0.4, 0.6, 2.0])
    x = ad.variable(x0)
    (g,) = grad_arrays(ad.reduce_sum(ad.relu(x)), [x])
    assert np.array_equal(g, [0.0, 0.0, 1.0, 1.0])


def test_div_gradients_match_fd():
    rng = np.random.default_rng(1)
    a0 = rng.uniform(0.5, 2.0, (3, 3))
    b0 = rng.uniform(0.5, 2.0, (3, 3))
    a, b = ad.variable(a0), ad.variable(b0)
    loss = ad.reduce_sum(ad.div(a, b))
    ga, gb = grad_arrays(loss, [a, b])
    assert rel_error(ga, central_difference(lambda v: float((v / b0).sum()), a0)) < 1e-6
    assert rel_error(gb, central_difference(lambda v: float((a0 / v).sum()), b0)) < 1e-6


def test_broadcast_gradient_shapes_and_values():
    rng = np.random.default_rng(2)
    cases = [((3, 4), (1, 4)), ((3, 4), (3, 1)), ((2, 3, 4), (4,)), ((5,), ())]
    for sa, sb in cases:
        a0 = rng.uniform(-2.0, 2.0, sa)
        b0 = rng.uniform(-2.0, 2.0, sb)
        a, b = ad.variable(a0), ad.variable(b0)
        loss = ad.reduce_sum(ad.square(ad.mul(a, b)))
        ga, gb = grad_arrays(loss, [a, b])
        assert ga.shape == sa and gb.shape == sb
        fd_b = central_difference(lambda v: float(np.square(a0 * v).sum()), b0)
        assert rel_error(gb, fd_b) < 1e-6


def test_reshape_transpose_concat_narrow_gradients():
    rng = np.random.default_rng(3)
    x0 = rng.uniform(-1.0, 1.0, (2, 6))

    def build(xv):
        t = ad.transpose(xv)                       # [6, 2]
        r = ad.reshape(t, (3, 4))
        left = ad.narrow(r, 1, 0, 2)
        right = ad.narrow(r, 1, 2, 2)
        back = ad.concat([left, right, left], axis=1)  # [3, 6]
        return ad.reduce_sum(ad.square(back))

    x = ad.variable(x0)
    (g,) = grad_arrays(build(x), [x])
    fd = central_difference(lambda v: build(ad.constant(v)).item(), x0)
    assert g.shape == x0.shape
    assert rel_error(g, fd) < 1e-6


def test_broadcast_to_gradient():
    x0 = np.array([1.0, -2.0, 0.5])
    x = ad.variable(x0)
    y = ad.broadcast_to(ad.reshape(x, (1, 3)), (4, 3))
    (g,) = grad_arrays(ad.reduce_sum(ad.square(y)), [x])
    assert rel_error(g, 8.0 * x0) < 1e-12


def test_gradient_accumulates_over_reuse():
    x = ad.variable(2.0)
    y = ad.add(ad.mul(x, x), ad.mul(x, ad.constant(3.0)))  # x^2 + 3x
    (g,) = grad_arrays(y, [x])
    assert g == pytest.approx(7.0)


# ---------------------------------------------------------------------------
# higher order


def test_second_derivative_of_cube():
    x = ad.variable(2.0)
    y = ad.mul(ad.mul(x, x), x)
    (g1,) = ad.gradients(y, [x], create_graph=True)
    (g2,) = ad.gradients(g1, [x])
    assert g2.data == pytest.approx(12.0)


def test_third_derivative_of_fourth_power():
    x = ad.variable(1.5)
    y = ad.square(ad.square(x))  # x^4
    (g1,) = ad.gradients(y, [x], create_graph=True)
    (g2,) = ad.gradients(g1, [x], create_graph=True)
    (g3,) = ad.gradients(g2, [x])
    assert g3.data == pytest.approx(24.0 * 1.5)


def test_meta_gradient_quadratic_closed_form():
    # one inner step on L_tr = h/2 (w-a)^2, outer L_val = hv/2 (w'-b)^2
    h, hv, a, b, alpha0, w0 = 1.7, 0.9, 0.3, -1.1, 0.25, 2.0
    w = ad.variable(w0)
    alpha = ad.variable(alpha0)
    l_tr = ad.mul(ad.constant(h / 2.0), ad.square(ad.sub(w, ad.constant(a))))
    (g_inner,) = ad.gradients(l_tr, [w], create_graph=True)
    w1 = ad.sub(w, ad.mul(alpha, g_inner))
    l_val = ad.mul(ad.constant(hv / 2.0), ad.square(ad.sub(w1, ad.constant(b))))
    gw, galpha = grad_arrays(l_val, [w, alpha])
    w1_val = w0 - alpha0 * h * (w0 - a)
    assert gw == pytest.approx(hv * (w1_val - b) * (1.0 - alpha0 * h), rel=1e-12)
    assert galpha == pytest.approx(hv * (w1_val - b) * (-h * (w0 - a)), rel=1e-12)


def test_meta_gradient_matches_fd_through_inner_steps():
    rng = np.random.default_rng(4)
    x_tr = rng.uniform(-2.0, 2.0, (6, 3))
    y_tr = rng.uniform(-2.0, 2.0, (6, 1))
    x_val = rng.uniform(-2.0, 2.0, (4, 3))
    y_val = rng.uniform(-2.0, 2.0, (4, 1))
    w0 = rng.uniform(-0.5, 0.5, (3, 1))
    alpha = 0.05

    def outer(w_data, steps):
        w = ad.variable(w_data)
        cur = w
        for _ in range(steps):
            loss = ad.reduce_sum(ad.square(ad.sub(ad.matmul(ad.constant(x_tr), cur), ad.constant(y_tr))))
            (g,) = ad.gradients(loss, [cur], create_graph=True)
            cur = ad.sub(cur, ad.mul(ad.constant(alpha), g))
        val = ad.reduce_sum(ad.square(ad.sub(ad.matmul(ad.constant(x_val), cur), ad.constant(y_val))))
        return w, val

    for steps in (1, 2, 3):
        w, val = outer(w0, steps)
        (g,) = grad_arrays(val, [w])
        fd = central_difference(lambda v: outer(v, steps)[1].item(), w0)
        assert rel_error(g, fd) < 1e-4


def test_hessian_via_double_backward_matches_fd():
    rng = np.random.default_rng(5)
    x0 = rng.uniform(-1.0, 1.0, 4)

    def scalar(xv):
        return ad.reduce_sum(ad.mul(ad.exp(ad.mul(xv, ad.constant(0.5))), ad.square(xv)))

    x = ad.variable(x0)
    (g,) = ad.gradients(scalar(x), [x], create_graph=True)
    hess = []
    for i in range(4):
        comp = ad.reshape(ad.narrow(g, 0, i, 1), ())
        (row,) = ad.gradients(comp, [x])
        hess.append(row.data)
    hess = np.array(hess)

    def grad_fn(v):
        xi = ad.variable(v)
        (gi,) = ad.gradients(scalar(xi), [xi])
        return gi.data

    fd_hess = np.array(
        [central_difference(lambda v, i=i: grad_fn(v)[i], x0) for i in range(4)]
    )
    assert rel_error(hess, fd_hess) < 1e-4
    assert rel_error(hess, hess.T) < 1e-8


# ---------------------------------------------------------------------------
# softmax cross-entropy


def test_softmax_uniform_logits():
    logits = ad.constant(np.zeros((1, 5)))
    loss = ad.softmax_cross_entropy(logits, np.array([2]))
    assert loss.item() == pytest.approx(np.log(5.0), rel=1e-12)


def test_softmax_saturated_correct_class():
    loss = ad.softmax_cross_entropy(ad.constant([[30.0, -30.0]]), np.array([0]))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_softmax_sums_over_batch_and_matches_reference():
    rng = np.random.default_rng(6)
    logits = rng.uniform(-3.0, 3.0, (7, 4))
    labels = rng.integers(0, 4, 7)
    loss = ad.softmax_cross_entropy(ad.constant(logits), labels)
    assert loss.item() == pytest.approx(
        softmax_cross_entropy_reference(logits, labels), rel=1e-12
    )


def test_softmax_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(7)
    logits0 = rng.uniform(-2.0, 2.0, (5, 3))
    labels = rng.integers(0, 3, 5)
    x = ad.variable(logits0)
    (g,) = grad_arrays(ad.softmax_cross_entropy(x, labels), [x])
    e = np.exp(logits0 - logits0.max(axis=1, keepdims=True))
    softmax = e / e.sum(axis=1, keepdims=True)
    onehot = np.zeros_like(logits0)
    onehot[np.arange(5), labels] = 1.0
    assert rel_error(g, softmax - onehot) < 1e-10
    fd = central_difference(
        lambda v: ad.softmax_cross_entropy(ad.constant(v), labels).item(), logits0
    )
    assert rel_error(g, fd) < 1e-6


def test_softmax_label_out_of_range():
    with pytest.raises(ad.LabelRangeError):
        ad.softmax_cross_entropy(ad.constant(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(ad.LabelRangeError):
        ad.softmax_cross_entropy(ad.constant(np.zeros((1, 3))), np.array([-1]))


def test_softmax_is_shift_invariant():
    rng = np.random.default_rng(8)
    logits = rng.uniform(-2.0, 2.0, (3, 4))
    labels = np.array([0, 1, 3])
    a = ad.softmax_cross_entropy(ad.constant(logits), labels).item()
    b = ad.softmax_cross_entropy(ad.constant(logits + 100.0), labels).item()
    assert a == pytest.approx(b, rel=1e-9)


# ---------------------------------------------------------------------------
# graph mechanics and errors


def test_no_grad_blocks_recording():
    x = ad.variable([1.0, 2.0])
    with ad.no_grad():
        y = ad.square(x)
    assert not y.requires_grad
    with pytest.raises(ad.UnreachableSourceError):
        ad.gradients(ad.reduce_sum(y), [x])


def test_detach_stops_gradient():
    x = ad.variable(3.0)
    y = ad.square(x)
    z = ad.mul(y.detach(), x)
    (g,) = grad_arrays(z, [x])
    assert g == pytest.approx(9.0)  # only the direct factor of x survives


def test_unreachable_source_and_allow_unused():
    x = ad.variable(1.0)
    z = ad.variable(2.0)
    y = ad.square(x)
    with pytest.raises(ad.UnreachableSourceError):
        ad.gradients(y, [z])
    gx, gz = grad_arrays(y, [x, z], allow_unused=True)
    assert gx == pytest.approx(2.0)
    assert gz == 0.0


def test_non_scalar_target_rejected():
    x = ad.variable([1.0, 2.0])
    with pytest.raises(ad.NonScalarTargetError):
        ad.gradients(ad.square(x), [x])


def test_shape_and_axis_errors():
    with pytest.raises(ad.ShapeMismatchError):
        ad.add(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((4, 3))))
    with pytest.raises(ad.ShapeMismatchError):
        ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((2, 3))))
    with pytest.raises(ad.InvalidAxisError):
        ad.reduce_sum(ad.constant(np.zeros((2, 3))), (2,))
    with pytest.raises(ad.InvalidAxisError):
        ad.narrow(ad.constant(np.zeros((2, 3))), 1, 2, 2)
    with pytest.raises(ad.ShapeMismatchError):
        ad.reshape(ad.constant(np.zeros((2, 3))), (4, 2))


def test_gradient_of_interior_node():
    x = ad.variable(1.5)
    y = ad.square(x)           # interior
    z = ad.exp(y)
    (gy,) = grad_arrays(z, [y])
    assert gy == pytest.approx(np.exp(1.5**2))


def test_gradients_are_bitwise_deterministic():
    rng = np.random.default_rng(9)
    x0 = rng.standard_normal((8, 8))

    def run():
        x = ad.variable(x0)
        h = ad.relu(ad.matmul(x, ad.constant(x0.T)))
        loss = ad.reduce_sum(ad.square(h)) + ad.reduce_sum(ad.exp(ad.mul(x, ad.constant(0.01))))
        (g,) = grad_arrays(loss, [x])
        return g.tobytes()

    assert run() == run()


def test_create_graph_false_returns_constants():
    x = ad.variable(2.0)
    (g,) = ad.gradients(ad.square(x), [x])
    assert not g.requires_grad and g.op is None


def test_random_small_networks_first_order():
    # a smaller rehearsal of the acceptance-gate sweep
    rng = np.random.default_rng(10)
    for _ in range(10):
        sizes = [int(rng.integers(2, 5)) for _ in range(3)]
        w0 = rng.uniform(-1.0, 1.0, (sizes[0], sizes[1]))
        v0 = rng.uniform(-1.0, 1.0, (sizes[1], sizes[2]))
        x0 = rng.uniform(-2.0, 2.0, (3, sizes[0]))

        def value(w_data, v_data):
            h = ad.matmul(ad.constant(x0), ad.constant(w_data))
            h = ad.relu(h)
            out = ad.matmul(h, ad.constant(v_data))
            return ad.reduce_mean(ad.square(out))

        pre = x0 @ w0
        if np.any(np.abs(pre) < 1e-3):
            continue  # keep FD away from the relu kink
        w = ad.variable(w0)
        v = ad.variable(v0)
        h = ad.relu(ad.matmul(ad.constant(x0), w))
        loss = ad.reduce_mean(ad.square(ad.matmul(h, v)))
        gw, gv = grad_arrays(loss, [w, v])
        assert rel_error(gw, central_difference(lambda u: value(u, v0).item(), w0)) < 1e-6
        assert rel_error(gv, central_difference(lambda u: value(w0, u).item(), v0)) < 1e-6
