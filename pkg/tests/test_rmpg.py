import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from emt.rmpg import (RMPG, ChebLayer, GraphBranch, cheb_conv, chebyshev_terms,
                      effective_adjacency, mean_fusion, normalized_laplacian)

from oracles import cheb_conv_dense, chebyshev_coeffs, dense_laplacian, matrix_polynomial

D = torch.float64


def test_two_node_hand_example():
    a = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=D)
    lap = normalized_laplacian(a)
    # A + I = ones, degrees 2 -> -ones / 2
    np.testing.assert_allclose(lap.numpy(), -0.5 * np.ones((2, 2)))
    np.testing.assert_allclose(np.linalg.eigvalsh(lap.numpy()), [-1.0, 0.0], atol=1e-15)


def test_empty_graph_gives_minus_identity():
    lap = normalized_laplacian(torch.zeros(5, 5, dtype=D))
    np.testing.assert_array_equal(lap.numpy(), -np.eye(5))
    # negative logits are clipped to "no edge"
    lap = normalized_laplacian(-torch.ones(4, 4, dtype=D))
    np.testing.assert_array_equal(lap.numpy(), -np.eye(4))


def test_effective_adjacency_symmetric_nonnegative(rng):
    a = torch.as_tensor(rng.standard_normal((6, 6)))
    e = effective_adjacency(a)
    assert torch.equal(e, e.T) and torch.all(e >= 0)


def test_laplacian_matches_dense_oracle(rng):
    a = rng.standard_normal((7, 7))
    np.testing.assert_allclose(normalized_laplacian(torch.as_tensor(a)).numpy(),
                               dense_laplacian(a), rtol=1e-13, atol=1e-15)


def random_init_adjacency(rng, c):
    """Adjacency logits drawn like a freshly initialised branch: N(0, 0.01^2)."""
    return torch.as_tensor(0.01 * rng.standard_normal((c, c)))


def laplacian_spectrum_check(n_draws=100, seed=7):
    """Largest violation of the [-1, 0] bound over random initial adjacencies."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_draws):
        c = int(rng.integers(2, 63))
        ev = np.linalg.eigvalsh(normalized_laplacian(random_init_adjacency(rng, c)).numpy())
        worst = max(worst, -1 - ev.min(), ev.max())
    return worst


def test_laplacian_spectrum_in_minus_one_zero():
    assert laplacian_spectrum_check() <= 1e-9


def test_laplacian_spectrum_general_bound():
    # For arbitrary logits only [-1, 1] is guaranteed: the bound [-1, 0] needs
    # A_eff + I positive semi-definite (e.g. diagonally dominant).
    rng = np.random.default_rng(3)
    for _ in range(50):
        c = int(rng.integers(2, 30))
        a = torch.as_tensor(10 ** rng.uniform(-3, 2) * rng.standard_normal((c, c)))
        ev = np.linalg.eigvalsh(normalized_laplacian(a).numpy())
        assert ev.min() >= -1 - 1e-9 and ev.max() <= 1 + 1e-9
    strong = torch.tensor([[0.0, 3.0], [3.0, 0.0]], dtype=D)
    np.testing.assert_allclose(np.linalg.eigvalsh(normalized_laplacian(strong).numpy()),
                               [-1.0, 0.5], atol=1e-12)


def test_laplacian_bound_holds_for_diagonally_dominant(rng):
    for _ in range(50):
        c = int(rng.integers(2, 20))
        a = np.abs(rng.standard_normal((c, c)))
        a = (a + a.T) / 2
        np.fill_diagonal(a, 0)
        a /= a.sum(1).max()  # off-diagonal row sums <= 1 = self-loop weight
        ev = np.linalg.eigvalsh(normalized_laplacian(torch.as_tensor(a)).numpy())
        assert ev.min() >= -1 - 1e-9 and ev.max() <= 1e-9


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_chebyshev_recursion_matches_matrix_polynomial(k, rng):
    lap = torch.as_tensor(dense_laplacian(rng.standard_normal((9, 9))))
    x = torch.as_tensor(rng.standard_normal((9, 5)))
    terms = chebyshev_terms(x, lap, k)
    assert len(terms) == k
    for j, t in enumerate(terms):
        ref = matrix_polynomial(chebyshev_coeffs(j), lap.numpy()) @ x.numpy()
        np.testing.assert_allclose(t.numpy(), ref, atol=1e-10)


def test_chebyshev_coefficient_oracle_sanity():
    # T_3 = 4x^3 - 3x, T_4 = 8x^4 - 8x^2 + 1
    np.testing.assert_array_equal(chebyshev_coeffs(3), [0, -3, 0, 4])
    np.testing.assert_array_equal(chebyshev_coeffs(4), [1, 0, -8, 0, 8])


@pytest.mark.parametrize("k", [2, 3, 4])
def test_cheb_conv_matches_dense(k, rng):
    lap = dense_laplacian(rng.standard_normal((6, 6)))
    x = rng.standard_normal((6, 4))
    theta = rng.standard_normal((k, 4, 3))
    bias = rng.standard_normal(3)
    out = cheb_conv(*(torch.as_tensor(v) for v in (x, lap, theta, bias)))
    np.testing.assert_allclose(out.numpy(), cheb_conv_dense(x, lap, theta, bias), atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.integers(2, 12), k=st.integers(1, 4))
def test_cheb_conv_permutation_equivariance(seed, c, k):
    rng = np.random.default_rng(seed)
    a = torch.as_tensor(rng.standard_normal((c, c)))
    x = torch.as_tensor(rng.standard_normal((3, c, 4)))
    theta = torch.as_tensor(rng.standard_normal((k, 4, 5)))
    bias = torch.as_tensor(rng.standard_normal(5))
    perm = torch.as_tensor(rng.permutation(c))
    out = cheb_conv(x, normalized_laplacian(a), theta, bias)
    a_p = a[perm][:, perm]
    out_p = cheb_conv(x[:, perm], normalized_laplacian(a_p), theta, bias)
    np.testing.assert_allclose(out_p.numpy(), out[:, perm].numpy(), atol=1e-10)


def test_cheb_conv_dimension_errors():
    lap = torch.zeros(4, 4)
    with pytest.raises(ValueError):
        cheb_conv(torch.zeros(4, 3), lap, torch.zeros(2, 5, 2), torch.zeros(2))
    with pytest.raises(ValueError):
        cheb_conv(torch.zeros(5, 3), lap, torch.zeros(2, 3, 2), torch.zeros(2))
    with pytest.raises(ValueError):
        ChebLayer(3, 2, 0)


def test_rmpg_shapes_and_fusion(rng):
    model = RMPG(8, 7, 32, depths=(1, 2), k_order=3).double()
    g = torch.as_tensor(rng.random((2, 5, 8, 7)))
    out = model(g)
    assert out.shape == (2, 5, 32)
    views = model.views(g)
    assert len(views) == 3 and all(v.shape == (2, 5, 32) for v in views)
    np.testing.assert_allclose(out.detach().numpy(),
                               torch.stack(views).mean(0).detach().numpy(), atol=1e-14)
    with pytest.raises(ValueError):
        model(torch.zeros(2, 5, 7, 7, dtype=D))


def test_mean_fusion_idempotent_exactly(rng):
    for n in range(1, 6):
        v = torch.as_tensor(rng.standard_normal((4, 9, 32)))
        assert torch.equal(mean_fusion([v] * n), v)


def test_branch_depth_and_parameters():
    br = GraphBranch(8, 7, depth=2, k_order=3, hidden=32, d_g=32)
    assert len(br.layers) == 2
    assert br.adj.shape == (8, 8)
    assert br.node_features(torch.rand(3, 8, 7)).shape == (3, 8, 32)
    base_only = RMPG(8, depths=())
    assert len(base_only.views(torch.rand(2, 8, 7))) == 1


def test_rmpg_gradient_finite_difference(rng):
    # hand-rolled central differences on a small encoder, float64
    torch.manual_seed(0)
    model = RMPG(4, 3, 5, depths=(1, 2), k_order=3, hidden=4).double()
    g = torch.as_tensor(rng.random((2, 3, 4, 3)))
    w = torch.as_tensor(rng.standard_normal((2, 3, 5)))

    def loss():
        return (model(g) * w).sum()

    model.zero_grad()
    loss().backward()
    eps = 1e-6
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        for i in range(min(6, flat.numel())):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = loss().item()
                flat[i] = orig - eps
                down = loss().item()
                flat[i] = orig
            num = (up - down) / (2 * eps)
            ana = p.grad.view(-1)[i].item()
            assert abs(num - ana) <= 1e-6 * max(1.0, abs(ana)), name
