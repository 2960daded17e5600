import numpy as np
import pytest

from robustlab import autodiff as ad


def make_graph(dtype=np.float64):
    return ad.Graph(dtype=dtype)


def test_identity_graph_returns_input_unchanged():
    g = make_graph()
    g.add_input("x", (None, 3))
    g.identity("y", "x")
    x = np.array([[1.0, -2.0, 3.5]])
    out = g.forward({"x": x})
    np.testing.assert_array_equal(out["y"], x)


def test_dense_zero_weights_gives_zero_output():
    g = make_graph()
    g.add_input("x", (None, 4))
    g.add_param("w", np.zeros((4, 2)))
    g.add_param("b", np.zeros(2))
    g.dense("y", "x", "w", "b")
    out = g.forward({"x": np.random.default_rng(0).normal(size=(5, 4))})
    np.testing.assert_array_equal(out["y"], np.zeros((5, 2)))


def test_conv2d_hand_computed():
    # 2x2 kernel on a 3x3 input, no padding: hand convolution arithmetic
    x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    w = np.array([[[[1.0, 0.0], [0.0, -1.0]]]])
    b = np.array([0.5])
    g = make_graph()
    g.add_input("x", (None, 1, 3, 3))
    g.add_param("w", w)
    g.add_param("b", b)
    g.conv2d("y", "x", "w", "b", pad=0)
    out = g.forward({"x": x})["y"]
    # window at (i,j): x[i,j] - x[i+1,j+1] + 0.5 = -4 + 0.5 everywhere
    np.testing.assert_allclose(out, np.full((1, 1, 2, 2), -3.5))


def test_linear_loss_gradient_is_input():
    # loss = sum(w * x) -> dloss/dw = x exactly
    x = np.array([[2.0, -1.0, 0.5]])
    g = make_graph()
    g.add_input("x", (None, 3))
    g.add_param("w", np.ones((3, 1)))
    g.add_param("b", np.zeros(1))
    g.dense("z", "x", "w", "b")
    g.sum_all("loss", "z")
    g.forward({"x": x})
    grads = g.backward("loss")
    np.testing.assert_array_equal(grads["w"], x.T)


def test_relu_dead_zone_gradient_zero():
    g = make_graph()
    g.add_input("x", (None, 1))
    g.add_param("w", np.array([[1.0]]))
    g.add_param("b", np.array([-5.0]))
    g.dense("z", "x", "w", "b")
    g.relu("r", "z")
    g.sum_all("loss", "r")
    g.forward({"x": np.array([[1.0]])})  # z = -4 < 0
    grads = g.backward("loss")
    np.testing.assert_array_equal(grads["w"], np.zeros((1, 1)))


def test_relu_subgradient_at_zero_is_zero():
    t = ad.Tensor(np.array([0.0, -1.0, 2.0]), requires_grad=True)
    out = ad.sum_all(ad.relu(t))
    out.backward()
    np.testing.assert_array_equal(t.grad, np.array([0.0, 0.0, 1.0]))


def _two_layer_graph(seed, n=3):
    rng = np.random.default_rng(seed)
    g = make_graph()
    g.add_input("x", (None, 1, 8, 8))
    g.add_input("y", (None,), integer=True)
    g.add_param("c1.w", rng.normal(scale=0.5, size=(3, 1, 3, 3)))
    g.add_param("c1.b", rng.normal(scale=0.1, size=3))
    g.add_param("fc.w", rng.normal(scale=0.5, size=(3, 4)))
    g.add_param("fc.b", rng.normal(scale=0.1, size=4))
    g.conv2d("c1", "x", "c1.w", "c1.b", pad=1)
    g.relu("r1", "c1")
    g.max_pool("p1", "r1")
    g.global_avg_pool("emb", "p1")
    g.dense("logits", "emb", "fc.w", "fc.b")
    g.softmax_cross_entropy("loss", "logits", "y")
    x = rng.uniform(size=(n, 1, 8, 8))
    y = rng.integers(0, 4, size=n)
    return g, {"x": x, "y": y}


def test_two_layer_network_matches_finite_differences_seed7():
    g, inputs = _two_layer_graph(seed=7)
    report = ad.finite_diff_check(g, inputs, "loss", h=1e-5, tol=1e-4)
    assert report["passed"], report


@pytest.mark.parametrize("seed", range(20))
def test_backward_matches_finite_differences_many_seeds(seed):
    g, inputs = _two_layer_graph(seed=seed, n=2)
    report = ad.finite_diff_check(g, inputs, "loss", h=1e-5, tol=1e-4)
    assert report["passed"], report


def test_finite_diff_linear_model_nearly_exact():
    g = make_graph()
    g.add_input("x", (None, 3))
    g.add_param("w", np.array([[0.3], [-0.7], [1.1]]))
    g.add_param("b", np.array([0.2]))
    g.dense("z", "x", "w", "b")
    g.sum_all("loss", "z")
    report = ad.finite_diff_check(
        g, {"x": np.array([[1.0, 2.0, -0.5]])}, "loss", h=1e-5)
    assert report["max_rel_error"] < 1e-8


def test_finite_diff_flags_planted_fault():
    class Corrupted(ad.Graph):
        def backward(self, loss_node):
            return {k: 2.0 * v for k, v in super().backward(loss_node).items()}

    g = Corrupted(dtype=np.float64)
    g.add_input("x", (None, 2))
    g.add_param("w", np.array([[0.5], [1.5]]))
    g.add_param("b", np.array([0.1]))
    g.dense("z", "x", "w", "b")
    g.sum_all("loss", "z")
    report = ad.finite_diff_check(g, {"x": np.array([[1.0, -2.0]])}, "loss")
    assert report["max_rel_error"] == pytest.approx(1.0, abs=1e-6)
    assert not report["passed"]


def test_forward_deterministic_bitwise():
    g1, inputs = _two_layer_graph(seed=11)
    out1 = g1.forward(inputs)
    g2, _ = _two_layer_graph(seed=11)
    out2 = g2.forward(inputs)
    for k in out1:
        assert np.array_equal(out1[k], out2[k])


def test_batch_gradient_linearity():
    # gradient of a summed loss over batch 4 == sum of per-sample gradients
    rng = np.random.default_rng(3)
    w0 = rng.normal(size=(5, 2))
    x = rng.normal(size=(4, 5))

    def grad_for(batch):
        g = make_graph()
        g.add_input("x", (None, 5))
        g.add_param("w", w0.copy())
        g.add_param("b", np.zeros(2))
        g.dense("z", "x", "w", "b")
        g.l1_norm("n", "z")
        g.sum_all("loss", "n")
        g.forward({"x": batch})
        return g.backward("loss")["w"]

    whole = grad_for(x)
    parts = sum(grad_for(x[i:i + 1]) for i in range(4))
    np.testing.assert_allclose(whole, parts, rtol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_norm_axioms(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(4, 6))
    b = rng.normal(size=(4, 6))
    for norm in (ad.l1_norm, ad.linf_norm):
        na = norm(ad.Tensor(a)).data
        nb = norm(ad.Tensor(b)).data
        nab = norm(ad.Tensor(a + b)).data
        assert np.all(na >= 0)
        c = 2.37
        np.testing.assert_allclose(norm(ad.Tensor(c * a)).data, abs(c) * na,
                                   rtol=1e-12)
        assert np.all(nab <= na + nb + 1e-12)


def test_linf_gradient_routes_to_first_max():
    t = ad.Tensor(np.array([[1.0, -3.0, 3.0]]), requires_grad=True)
    out = ad.sum_all(ad.linf_norm(t))
    out.backward()
    np.testing.assert_array_equal(t.grad, np.array([[0.0, -1.0, 0.0]]))


def test_maxpool_ties_break_row_major():
    x = np.full((1, 1, 2, 2), 2.0)
    t = ad.Tensor(x, requires_grad=True)
    out = ad.sum_all(ad.max_pool2(t))
    assert out.data == 2.0
    out.backward()
    expected = np.zeros((1, 1, 2, 2))
    expected[0, 0, 0, 0] = 1.0
    np.testing.assert_array_equal(t.grad, expected)


def test_backward_before_forward_rejected():
    g = make_graph()
    g.add_input("x", (None, 2))
    g.identity("y", "x")
    with pytest.raises(ad.GraphStateError):
        g.backward("y")


def test_non_scalar_loss_rejected():
    g = make_graph()
    g.add_input("x", (None, 2), differentiable=True)
    g.identity("y", "x")
    g.forward({"x": np.ones((1, 2))})
    with pytest.raises(ad.GraphStateError):
        g.backward("y")


def test_shape_mismatch_names_offending_node():
    g = make_graph()
    g.add_input("x", (None, 2))
    g.add_param("w", np.ones((3, 1)))
    g.add_param("b", np.zeros(1))
    g.dense("badnode", "x", "w", "b")
    with pytest.raises(ad.ShapeError, match="badnode"):
        g.forward({"x": np.ones((1, 2))})


def test_non_finite_output_rejected():
    g = make_graph()
    g.add_input("x", (None, 1))
    g.add_input("z", (None, 1))
    g.div("q", "x", "z")
    with pytest.raises(ad.NonFiniteError, match="q"):
        g.forward({"x": np.ones((1, 1)), "z": np.zeros((1, 1))})


def test_input_shape_mismatch_rejected():
    g = make_graph()
    g.add_input("x", (None, 3))
    g.identity("y", "x")
    with pytest.raises(ad.ShapeError, match="x"):
        g.forward({"x": np.ones((1, 4))})


def test_sgd_lr_zero_leaves_params():
    params = {"w": np.array([1.0, 2.0])}
    ad.sgd_step(params, {"w": np.array([5.0, -5.0])}, lr=0.0)
    np.testing.assert_array_equal(params["w"], [1.0, 2.0])


def test_sgd_single_step_no_momentum():
    params = {"w": np.array([1.0])}
    ad.sgd_step(params, {"w": np.array([0.5])}, lr=0.1, momentum=0.0)
    np.testing.assert_allclose(params["w"], [1.0 - 0.05])


def test_sgd_two_steps_momentum_hand_computed():
    params = {"w": np.array([1.0])}
    vel = ad.sgd_step(params, {"w": np.array([0.5])}, lr=0.1, momentum=0.9)
    # v1 = 0.5, w = 0.95
    np.testing.assert_allclose(params["w"], [0.95])
    ad.sgd_step(params, {"w": np.array([0.5])}, lr=0.1, momentum=0.9,
                velocity=vel)
    # v2 = 0.9*0.5 + 0.5 = 0.95, w = 0.95 - 0.095 = 0.855
    np.testing.assert_allclose(params["w"], [0.855])


def test_sgd_key_mismatch_rejected():
    with pytest.raises(KeyError):
        ad.sgd_step({"w": np.ones(1)}, {"nope": np.ones(1)}, lr=0.1)


def test_sgd_skips_params_absent_from_grads():
    params = {"f.w": np.array([1.0]), "g.w": np.array([1.0])}
    ad.sgd_step(params, {"g.w": np.array([1.0])}, lr=0.5)
    np.testing.assert_array_equal(params["f.w"], [1.0])
    np.testing.assert_allclose(params["g.w"], [0.5])
