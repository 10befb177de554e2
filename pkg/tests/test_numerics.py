import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from toyunlearn.numerics import (
    AdamState,
    ContractError,
    GradSet,
    Optimizer,
    ParamSet,
    adam_step,
    as_tensor,
    backward,
    cross_entropy,
    finite_diff_grad,
    gelu,
    matmul,
    relative_error,
    sgd_step,
    softmax,
)


def scalar_params(**values) -> ParamSet:
    ps = ParamSet()
    for name, v in values.items():
        ps.add(name, np.array([v], dtype=np.float64), "language_model")
    return ps


def test_softmax_symmetric_pair():
    out = softmax(as_tensor([0.0, 0.0]))
    assert out.tolist() == [0.5, 0.5]


def test_matmul_identity(rng):
    a = as_tensor(rng.normal(size=(3, 3)))
    assert torch.equal(matmul(torch.eye(3, dtype=torch.float64), a), a)


def test_matmul_shape_mismatch():
    with pytest.raises(ContractError):
        matmul(torch.zeros(2, 3, dtype=torch.float64), torch.zeros(2, 3, dtype=torch.float64))


def test_cross_entropy_uniform():
    loss = cross_entropy(as_tensor([[0.0, 0.0, 0.0, 0.0]]), [2])
    assert abs(float(loss) - math.log(4)) < 1e-12


def test_softmax_rejects_nan():
    with pytest.raises(ContractError):
        softmax(as_tensor([0.0, float("nan")]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-500, 500)))
def test_softmax_is_a_distribution(x):
    p = softmax(as_tensor(x)).numpy()
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) < 1e-12


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(2, 10), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariant(x, c):
    a = softmax(as_tensor(x)).numpy()
    b = softmax(as_tensor(x + c)).numpy()
    assert np.allclose(a, b, atol=1e-12)


def test_grad_of_square():
    ps = scalar_params(w=3.0)
    g = backward((ps["w"] ** 2).sum(), ps)
    assert float(g["w"]) == 6.0


def test_unused_parameter_has_zero_grad():
    ps = scalar_params(w=3.0, p=1.0)
    g = backward((ps["w"] ** 2).sum(), ps)
    assert torch.equal(g["p"], torch.zeros(1, dtype=torch.float64))


def test_backward_rejects_non_scalar():
    ps = scalar_params(w=1.0)
    with pytest.raises(ContractError):
        backward(torch.cat([ps["w"], ps["w"]]), ps)


def test_two_layer_net_matches_finite_differences(rng):
    ps = ParamSet()
    ps.add("w1", rng.normal(size=(5, 4)), "vision_encoder")
    ps.add("b1", rng.normal(size=(5,)), "connector")
    ps.add("w2", rng.normal(size=(3, 5)), "language_model")
    x = as_tensor(rng.normal(size=(6, 4)))
    labels = rng.integers(0, 3, size=6)

    def loss_fn(p):
        h = gelu(matmul(x, p["w1"].T) + p["b1"])
        return cross_entropy(matmul(h, p["w2"].T), labels)

    g = backward(loss_fn(ps), ps)
    coords = [(n, int(rng.integers(ps[n].numel()))) for n in ps for _ in range(7)]
    for name, idx in coords[:21]:
        fd = finite_diff_grad(loss_fn, ps, (name, idx), h=1e-5)
        assert relative_error(float(g[name].reshape(-1)[idx]), fd) <= 1e-4


@pytest.mark.parametrize(
    "fn,w,expected,tol",
    [
        (lambda t: t**2, 3.0, 6.0, 1e-6),
        (lambda t: t * 0 + 5.0, 2.0, 0.0, 1e-9),
        (torch.sin, 0.0, 1.0, 1e-6),
    ],
)
def test_finite_diff_examples(fn, w, expected, tol):
    ps = scalar_params(w=w)
    fd = finite_diff_grad(lambda p: fn(p["w"]).sum(), ps, ("w", 0), h=1e-4)
    assert abs(fd - expected) <= tol


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ContractError):
        finite_diff_grad(lambda p: p["w"].sum(), scalar_params(w=1.0), ("w", 0), h=0.0)


def _grads(**values) -> GradSet:
    return GradSet((k, torch.tensor([v], dtype=torch.float64)) for k, v in values.items())


def test_sgd_examples():
    ps = scalar_params(w=1.0)
    assert float(sgd_step(ps, _grads(w=2.0), 0.1)["w"].detach()) == pytest.approx(0.8, abs=1e-15)
    assert torch.equal(sgd_step(ps, _grads(w=0.0), 0.1)["w"], ps["w"])
    assert torch.equal(sgd_step(ps, _grads(w=2.0), 0.0)["w"], ps["w"])


def test_sgd_does_not_mutate_input():
    ps = scalar_params(w=1.0)
    sgd_step(ps, _grads(w=2.0), 0.5)
    assert float(ps["w"].detach()) == 1.0


def test_adam_first_step_is_unit_step():
    ps = scalar_params(w=0.0)
    new, state = adam_step(ps, _grads(w=1.0), AdamState.zeros(ps), 0.1)
    assert abs(float(new["w"].detach()) + 0.1) < 1e-6
    assert state.step == 1


def test_adam_zero_gradient_is_a_no_op():
    ps = scalar_params(w=0.7)
    new, _ = adam_step(ps, _grads(w=0.0), AdamState.zeros(ps), 0.1)
    assert torch.equal(new["w"], ps["w"])


def test_adam_momentum_differs_from_double_step():
    ps = scalar_params(w=0.0)
    opt = Optimizer("adam", 0.1, ps)
    two = opt.step(opt.step(ps, _grads(w=1.0)), _grads(w=1.0))
    one, _ = adam_step(ps, _grads(w=1.0), AdamState.zeros(ps), 0.2)
    assert float(two["w"].detach()) != float(one["w"].detach())


def test_gradset_mismatch_rejected():
    with pytest.raises(ContractError):
        sgd_step(scalar_params(w=1.0), _grads(v=1.0), 0.1)


def test_paramset_replace_is_functional():
    ps = scalar_params(w=1.0)
    q = ps.perturbed("w", 0, 0.5)
    assert float(q["w"].detach()) == 1.5 and float(ps["w"].detach()) == 1.0
    assert ps.equal(ps.clone())
    assert not ps.equal(q)
