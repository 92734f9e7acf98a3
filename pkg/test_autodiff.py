"""Tests for the reverse-mode autodiff core and the SGD optimizer."""

import numpy as np
import pytest

import autodiff as ad
from autodiff import OptimizerState, ParameterSet, Tensor


def _params(**arrays):
    return ParameterSet({name: np.asarray(v, dtype=np.float64) for name, v in arrays.items()})


# ---------------------------------------------------------------------------
# Forward values
# ---------------------------------------------------------------------------

def test_tanh_at_origin():
    assert ad.tanh(Tensor(0.0)).item() == 0.0


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(a, np.eye(2)).values, a.values)


def test_cosine_matrix_hand_value():
    sim = ad.cosine_matrix(Tensor([[1.0, 0.0]]), Tensor([[0.6, 0.8]]))
    assert sim.values[0, 0] == pytest.approx(0.6)


def test_l2_normalize_keeps_zero_rows():
    out = ad.l2_normalize(Tensor([[0.0, 0.0], [3.0, 4.0]]))
    np.testing.assert_allclose(out.values, [[0.0, 0.0], [0.6, 0.8]])


def test_shape_mismatch_raises():
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_domain_errors():
    with pytest.raises(ad.DomainError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(ad.DomainError):
        ad.divide(Tensor([1.0]), Tensor([0.0]))


def test_non_finite_output_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.exp(Tensor([1000.0]))


def test_conv1d_same_padding_keeps_length():
    x = Tensor(np.arange(10, dtype=float).reshape(1, 5, 2))
    w = Tensor(np.ones((3, 2, 4)))
    out = ad.conv1d(x, w, Tensor(np.zeros(4)))
    assert out.shape == (1, 5, 4)
    # middle position sums 3 positions x 2 channels
    assert out.values[0, 2, 0] == pytest.approx(x.values[0, 1:4].sum())


# ---------------------------------------------------------------------------
# backward()
# ---------------------------------------------------------------------------

def test_backward_square():
    params = _params(p=[3.0])
    with ad.recording() as record:
        grads = record.backward(ad.sum(params["p"] * params["p"]), params)
    np.testing.assert_allclose(grads["p"].values, [6.0])


def test_unused_parameter_gets_zero_gradient():
    params = _params(p=[1.0, 2.0], q=[3.0])
    with ad.recording() as record:
        grads = record.backward(ad.sum(params["q"]), params)
    np.testing.assert_array_equal(grads["p"].values, [0.0, 0.0])
    np.testing.assert_array_equal(grads["q"].values, [1.0])


def test_stop_gradient_blocks_gradient():
    params = _params(p=[1.0, -2.0])
    with ad.recording() as record:
        grads = record.backward(ad.sum(ad.stop_gradient(params["p"])), params)
    np.testing.assert_array_equal(grads["p"].values, [0.0, 0.0])


def test_backward_rejects_non_scalar_and_reuse():
    params = _params(p=[1.0, 2.0])
    with ad.recording() as record:
        with pytest.raises(ad.RecordError):
            record.backward(params["p"] * 2.0)
    with ad.recording() as record:
        root = ad.sum(params["p"])
        record.backward(root, params)
        with pytest.raises(ad.RecordError):
            record.backward(root, params)


def test_module_backward_needs_active_record():
    with pytest.raises(ad.RecordError):
        ad.backward(Tensor(1.0))


def test_backward_is_linear():
    params = _params(p=np.array([0.3, -0.7]))

    def grad_of(build):
        with ad.recording() as record:
            return record.backward(build(params["p"]), params)["p"].values

    f = lambda p: ad.sum(ad.tanh(p))
    g = lambda p: ad.sum(ad.exp(p) * p)
    np.testing.assert_allclose(grad_of(lambda p: f(p) + g(p)), grad_of(f) + grad_of(g), rtol=1e-12)


def test_max_routes_gradient_to_first_argmax():
    params = _params(p=[1.0, 5.0, 5.0])
    with ad.recording() as record:
        grads = record.backward(ad.max(params["p"], axis=0), params)
    np.testing.assert_array_equal(grads["p"].values, [0.0, 1.0, 0.0])


def test_embedding_padding_row_gets_no_gradient():
    params = _params(table=np.arange(8, dtype=float).reshape(4, 2))
    with ad.recording() as record:
        rows = ad.embedding(params["table"], np.array([[0, 2, 2]]), padding_idx=0)
        grads = record.backward(ad.sum(rows), params)
    np.testing.assert_array_equal(grads["table"].values, [[0, 0], [0, 0], [2, 2], [0, 0]])


# ---------------------------------------------------------------------------
# grad_check over every primitive
# ---------------------------------------------------------------------------

def test_grad_check_quadratic():
    params = _params(x=[3.0])
    assert ad.grad_check(lambda p: ad.sum(ad.square(p["x"])), params, 1e-5) < 1e-6


def test_grad_check_constant_function():
    params = _params(x=[3.0, 1.0])
    assert ad.grad_check(lambda p: Tensor(2.5), params, 1e-5) == 0.0


def test_grad_check_epsilon_range():
    with pytest.raises(ValueError):
        ad.grad_check(lambda p: Tensor(0.0), _params(x=[1.0]), 1e-2)


PRIMITIVE_CASES = {
    "add": lambda p: ad.sum(ad.add(p["a"], p["row"]) * p["b"]),
    "subtract": lambda p: ad.sum(ad.subtract(p["a"], p["row"]) * p["b"]),
    "multiply": lambda p: ad.sum(ad.multiply(p["a"], p["b"])),
    "divide": lambda p: ad.sum(ad.divide(p["a"], ad.exp(p["b"]))),
    "matmul": lambda p: ad.sum(ad.tanh(ad.matmul(p["a"], ad.transpose(p["b"])))),
    "concat": lambda p: ad.sum(ad.square(ad.concat([p["a"], p["b"]], axis=0))),
    "reshape": lambda p: ad.sum(ad.tanh(ad.reshape(p["a"], (3, 2)) @ ad.reshape(p["b"], (2, 3)))),
    "sum_axis": lambda p: ad.sum(ad.tanh(ad.sum(p["a"] * p["b"], axis=1))),
    "max_axis": lambda p: ad.sum(ad.max(p["a"] * p["b"], axis=1)),
    "tanh": lambda p: ad.sum(ad.tanh(p["a"])),
    "sigmoid": lambda p: ad.sum(ad.sigmoid(p["a"] * 3.0)),
    "exp": lambda p: ad.sum(ad.exp(p["a"])),
    "log": lambda p: ad.sum(ad.log(ad.square(p["a"]) + 1.0)),
    "masked_fill": lambda p: ad.sum(ad.square(ad.masked_fill(p["a"], np.array([[True, False, True]]), 0.5))),
    "l2_normalize": lambda p: ad.sum(ad.l2_normalize(p["a"]) * p["b"]),
    "cosine_matrix": lambda p: ad.sum(ad.cosine_matrix(p["a"], p["b"]) * ad.cosine_matrix(p["a"], p["b"])),
    "mean": lambda p: ad.mean(ad.square(p["a"] - p["b"])),
    "maximum_zero": lambda p: ad.sum(ad.maximum_zero(p["a"] - 0.05)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
@pytest.mark.parametrize("seed", range(10))
def test_grad_check_primitives(name, seed):
    rng = np.random.default_rng(seed)
    params = _params(a=rng.normal(size=(2, 3)), b=rng.normal(size=(2, 3)), row=rng.normal(size=(3,)))
    assert ad.grad_check(PRIMITIVE_CASES[name], params, 1e-6) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_grad_check_conv1d(seed):
    rng = np.random.default_rng(seed)
    params = _params(x=rng.normal(size=(2, 5, 3)), w=rng.normal(size=(3, 3, 4)) * 0.3, bias=rng.normal(size=(4,)))
    fn = lambda p: ad.sum(ad.tanh(ad.conv1d(p["x"], p["w"], p["bias"])))
    assert ad.grad_check(fn, params, 1e-6) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_grad_check_embedding(seed):
    rng = np.random.default_rng(seed)
    params = _params(table=rng.normal(size=(5, 3)))
    ids = np.array([[1, 2, 0], [4, 4, 3]])
    fn = lambda p: ad.sum(ad.tanh(ad.embedding(p["table"], ids, padding_idx=0)))
    assert ad.grad_check(fn, params, 1e-6) < 1e-4


# ---------------------------------------------------------------------------
# ParameterSet and optimizer
# ---------------------------------------------------------------------------

def test_parameter_set_orders_names_and_round_trips():
    params = _params(zeta=np.ones((2, 2)), alpha=[1.0, 2.0, 3.0])
    assert params.names() == ["alpha", "zeta"]
    flat = params.flatten()
    np.testing.assert_array_equal(flat, [1, 2, 3, 1, 1, 1, 1])
    restored = params.unflatten(flat)
    np.testing.assert_array_equal(restored["alpha"], [1, 2, 3])
    np.testing.assert_array_equal(restored["zeta"], np.ones((2, 2)))


def test_parameter_set_rejects_duplicates():
    params = _params(w=[1.0])
    with pytest.raises(ValueError):
        params.add("w", [2.0])


def test_optimizer_step_hand_value():
    params = _params(theta=[1.0])
    ad.optimizer_step(params, {"theta": np.array([2.0])}, OptimizerState(lr=0.1, momentum=0.0))
    assert params["theta"].values[0] == pytest.approx(0.8)


def test_optimizer_zero_gradient_leaves_params():
    params = _params(theta=[1.0, -1.0])
    ad.optimizer_step(params, {"theta": np.zeros(2)}, OptimizerState(lr=0.1, momentum=0.0))
    np.testing.assert_array_equal(params["theta"].values, [1.0, -1.0])


def test_optimizer_is_deterministic_and_uses_momentum():
    runs = []
    for _ in range(2):
        params = _params(theta=[1.0])
        state = OptimizerState(lr=0.1, momentum=0.5)
        ad.optimizer_step(params, {"theta": np.array([1.0])}, state)
        ad.optimizer_step(params, {"theta": np.array([1.0])}, state)
        runs.append(params["theta"].values.copy())
    np.testing.assert_array_equal(runs[0], runs[1])
    # v1 = 1, v2 = 1.5 -> 1 - 0.1 - 0.15
    assert runs[0][0] == pytest.approx(0.75)


def test_optimizer_errors():
    params = _params(theta=[1.0, 2.0])
    with pytest.raises(ValueError):
        ad.optimizer_step(params, {}, OptimizerState())
    with pytest.raises(ad.ShapeError):
        ad.optimizer_step(params, {"theta": np.ones(3)}, OptimizerState())
    with pytest.raises(ValueError):
        OptimizerState(lr=0.1, momentum=1.0)


def test_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        params = _params(w=rng.normal(size=(3, 2)))
        x = Tensor(rng.normal(size=(4, 3)))
        state = OptimizerState(lr=0.05)
        for _ in range(3):
            with ad.recording() as record:
                loss = ad.mean(ad.square(ad.tanh(x @ params["w"])))
                grads = record.backward(loss, params)
            ad.optimizer_step(params, grads, state)
        return params.flatten()

    np.testing.assert_array_equal(run(), run())
