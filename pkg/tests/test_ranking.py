import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from synthcount.ranking import (
    BadLambda,
    ShapeMismatch,
    ZeroVector,
    feature_similarity,
    label_similarity,
    pred_similarity,
    rk,
    rk_grad,
    soft_rk,
    sort_loss,
    triplet_sort_loss,
)


def brute_rank(v):
    """Descending ranks with lower-index tie-break, by plain sorting."""
    order = sorted(range(len(v)), key=lambda i: (-v[i], i))
    ranks = [0] * len(v)
    for pos, i in enumerate(order, 1):
        ranks[i] = pos
    return ranks


def test_label_similarity_values():
    s = label_similarity([0, 1, 2])
    np.testing.assert_array_equal(s.numpy(), [[0, -1, -2], [-1, 0, -1], [-2, -1, 0]])
    np.testing.assert_array_equal(label_similarity([0, 0]).numpy(), np.zeros((2, 2)))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=2, max_size=8))
def test_label_similarity_symmetric(y):
    s = label_similarity(y).numpy()
    np.testing.assert_array_equal(s, s.T)
    assert (np.diag(s) == 0).all() and (s <= 0).all()


def test_pred_similarity():
    np.testing.assert_array_equal(pred_similarity([0.0, 1.0, 2.0]).numpy(), label_similarity([0, 1, 2]).numpy())
    np.testing.assert_array_equal(pred_similarity([5, 5, 5]).numpy(), np.zeros((3, 3)))
    a = pred_similarity([0.0, 1.0])[0, 1]
    b = pred_similarity([0.0, 2.0])[0, 1]
    assert b <= a


def test_feature_similarity():
    np.testing.assert_allclose(feature_similarity(np.eye(3)).numpy(), np.eye(3))
    z = np.array([[1.0, 2.0, -1.0], [3.0, 6.0, -3.0]])
    assert feature_similarity(z)[0, 1].item() == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    z = rng.standard_normal((3, 5))
    brute = np.array([[np.dot(a, b) / np.sqrt(np.dot(a, a) * np.dot(b, b)) for b in z] for a in z])
    np.testing.assert_allclose(feature_similarity(z).numpy(), brute, atol=1e-6)
    with pytest.raises(ZeroVector):
        feature_similarity(np.array([[0.0, 0.0], [1.0, 0.0]]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(-10, 10), min_size=4, max_size=4), min_size=2, max_size=5), st.floats(0.1, 10))
def test_feature_similarity_scale_invariant(rows, scale):
    z = np.array(rows)
    if (np.linalg.norm(z, axis=1) < 1e-3).any():
        return
    s = feature_similarity(z).numpy()
    np.testing.assert_allclose(s, s.T, atol=1e-12)
    z2 = z.copy()
    z2[0] *= scale
    np.testing.assert_allclose(feature_similarity(z2).numpy(), s, atol=1e-9)


def test_rk_examples():
    assert rk([0, -1, -2]).tolist() == [1, 2, 3]
    assert rk([-2, 0, -1]).tolist() == [3, 1, 2]
    assert rk([5, 5, 1]).tolist() == [1, 2, 3]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=10))
def test_rk_matches_brute_and_monotone_invariance(v):
    assert rk(v).tolist() == brute_rank(v)
    # doubling is exact in floating point, so strictly increasing without new ties
    assert rk(2.0 * np.asarray(v)).tolist() == rk(v).tolist()
    assert rk(np.asarray(v) ** 3).tolist() == rk(v).tolist() or len(set(np.asarray(v) ** 3)) < len(v)


def test_rk_grad_examples():
    v = [1.0, 0.9]
    assert rk_grad(v, [0.0, 0.0], 0.5).tolist() == [0.0, 0.0]
    assert rk_grad(v, [-0.01, 0.01], 0.5).tolist() == [0.0, 0.0]
    # v + 0.5 * (-2, 2) = (0, 1.9): ranks flip from (1, 2) to (2, 1)
    g = rk_grad(v, [-2.0, 2.0], 0.5).tolist()
    assert g == [-(1 - 2) / 0.5, -(2 - 1) / 0.5] == [2.0, -2.0]
    with pytest.raises(BadLambda):
        rk_grad(v, [1.0, 1.0], 0.0)


def test_rk_grad_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(1, 7))
        v, u, lam = rng.standard_normal(n), rng.standard_normal(n), float(rng.uniform(0.01, 3))
        expected = [-(a - b) / lam for a, b in zip(brute_rank(list(v)), brute_rank(list(v + lam * u)))]
        np.testing.assert_allclose(rk_grad(v, u, lam).numpy(), expected, atol=1e-9)


def test_soft_rk_backward_uses_rk_grad():
    v = torch.tensor([0.3, -0.2, 0.5, 0.1], dtype=torch.float64, requires_grad=True)
    up = torch.tensor([1.0, -2.0, 0.5, 3.0], dtype=torch.float64)
    (soft_rk(v, 0.7) * up).sum().backward()
    np.testing.assert_allclose(v.grad.numpy(), rk_grad(v.detach(), up, 0.7).numpy())


def test_sort_loss_zero_when_perfect():
    s_y = label_similarity([0, 1, 2])
    total, l_y, l_z = sort_loss(s_y, pred_similarity([0.0, 1.0, 2.0]), s_y)
    assert float(total) == float(l_y) == float(l_z) == 0.0


def test_sort_loss_one_transposition_per_row():
    # rows of off-diagonal S^y for ranks (0, 1, 2): [-1, -2], [-1, -1], [-2, -1]
    s_y = label_similarity([0, 1, 2])
    # predictions 0, 2, 0.5: every row's pair order is swapped
    s_yhat = pred_similarity([0.0, 2.0, 0.5])
    total, l_y, l_z = sort_loss(s_y, s_yhat, s_y, lambda_weight=5.0)
    assert float(l_y) == 6.0 and float(l_z) == 0.0 and float(total) == 6.0


def test_sort_loss_default_lambda_and_shape_check():
    assert sort_loss.__defaults__[0] == 5.0
    with pytest.raises(ShapeMismatch):
        sort_loss(torch.zeros(3, 3), torch.zeros(2, 2), torch.zeros(3, 3))


def test_sort_loss_nonnegative_and_batched_mean():
    rng = np.random.default_rng(2)
    s_y = label_similarity(torch.tensor([[0.0, 1, 2], [0, 1, 2]]))
    yhat = torch.tensor(rng.standard_normal((2, 3)))
    z = torch.tensor(rng.standard_normal((2, 3, 4)))
    total, l_y, l_z = sort_loss(s_y, pred_similarity(yhat), feature_similarity(z))
    singles = [sort_loss(s_y[i], pred_similarity(yhat[i]), feature_similarity(z[i]))[0] for i in range(2)]
    assert float(total) >= 0
    assert float(total) == pytest.approx(float(sum(singles)) / 2)


def test_lambda_zero_blocks_feature_gradient():
    z = torch.randn(1, 3, 4, dtype=torch.float64, requires_grad=True)
    yhat = torch.tensor([[0.0, 2.0, 1.0]], dtype=torch.float64, requires_grad=True)
    total, _, l_z = triplet_sort_loss(yhat, z, torch.tensor([[0, 1, 2]]), lambda_weight=0.0)
    total.backward()
    assert z.grad is None or float(z.grad.abs().sum()) == 0.0
    assert yhat.grad is not None


def _agree(y, p):
    """Independent check that every off-diagonal row ranks the same way."""
    for i in range(3):
        others = [j for j in range(3) if j != i]
        ry = brute_rank([-abs(y[i] - y[j]) for j in others])
        rp = brute_rank([-abs(p[i] - p[j]) for j in others])
        if ry != rp:
            return False
    return True


def test_exhaustive_three_element_orderings():
    cases = 0
    for ly in itertools.permutations([0, 1, 2]):
        for lp in itertools.permutations([0, 1, 2]):
            y = [float(v) for v in ly]
            p = [float(v) * 1.3 + 0.1 * v * v for v in lp]
            s_y = label_similarity(y)
            total, _, _ = sort_loss(s_y, pred_similarity(p), s_y)
            assert (float(total) == 0.0) == _agree(y, p)
            cases += 1
    assert cases == 36
