import numpy as np
import pytest
import torch

from emt.gradcheck import ABS_FLOOR, check_gradients, grad_check, relative_error
from emt.model import EmTConfig


def test_relu_subgradient():
    x = torch.tensor([1.0, -1.0], requires_grad=True)
    torch.relu(x).sum().backward()
    assert x.grad.tolist() == [1.0, 0.0]


def test_relative_error_metric():
    np.testing.assert_allclose(relative_error(np.array([1.0, 0.0]), np.array([1.1, 0.0])),
                               [0.1 / 1.1, 0.0])
    # tiny gradients are compared on an absolute scale
    assert relative_error(np.array([1e-9]), np.array([0.0]))[0] == pytest.approx(1e-9 / ABS_FLOOR)


def test_smooth_function_passes():
    w = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
    x = torch.randn(4, 5, dtype=torch.float64)
    rep = check_gradients(lambda: torch.tanh(x @ w).pow(2).sum(), {"w": w})
    assert rep.passed and rep.max_rel_err < 1e-7


def test_kink_is_stepped_around():
    # a pre-activation 1e-6 from zero is crossed by a 1e-5 probe
    w = torch.tensor([1e-6, 0.5], dtype=torch.float64, requires_grad=True)
    loss = lambda: torch.nn.functional.relu(w).sum() * 3.0
    rep = check_gradients(loss, {"w": w})
    assert rep.passed and rep.checks[0].n_kinks == 1 and rep.checks[0].n_unresolved == 0


@pytest.mark.parametrize("task,variant,rnn", [("classification", "S", "gru"),
                                              ("regression", "S", "gru")])
def test_fresh_model_passes(task, variant, rnn):
    rep = grad_check(EmTConfig(n_nodes=8, task=task, variant=variant, rnn=rnn), seed=0)
    assert rep.passed, [(c.name, c.max_rel_err) for c in rep.failures()]
    assert all(c.n_checked == min(32, c.numel) for c in rep.checks)
    assert rep.max_rel_err < 1e-4


def test_corrupted_gradient_fails():
    def corrupt(name, grad):
        return grad * 1.01 if name.endswith("head.fc.weight") else grad

    rep = grad_check(EmTConfig(n_nodes=8, variant="S", no_tct=True), seed=0, corrupt=corrupt)
    assert not rep.passed
    assert [c.name for c in rep.failures()] == ["head.fc.weight"]


def test_sign_flip_fails():
    rep = grad_check(EmTConfig(n_nodes=8, variant="S", no_tct=True), seed=1,
                     corrupt=lambda n, g: -g if "adj" in n else g)
    assert {c.name for c in rep.failures()} >= {"rmpg.branches.0.adj"}
