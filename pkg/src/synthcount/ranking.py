"""Similarity matrices, the rank operator and the sorting loss.

``rk`` maps a vector to descending ranks (largest entry gets rank 1, ties
go to the lower index).  It is piecewise constant, so gradients are
obtained with the blackbox-solver interpolation: descending ranks are the
minimiser of ``<v, pi>`` over permutations ``pi``, and the backward pass
returns ``-(rk(v) - rk(v + lambda_bb * upstream)) / lambda_bb``.
"""

from __future__ import annotations

import numpy as np
import torch

DEFAULT_LAMBDA_WEIGHT = 5.0
DEFAULT_LAMBDA_BB = 0.5


class RankingError(ValueError):
    pass


class ZeroVector(RankingError):
    pass


class BadLambda(RankingError):
    pass


class ShapeMismatch(RankingError):
    pass


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def label_similarity(labels) -> torch.Tensor:
    """``S[i, j] = -|y_i - y_j|`` for rank labels (last axis)."""
    y = _as_tensor(labels)
    if y.shape[-1] < 2:
        raise RankingError("need at least two labels")
    return -(y.unsqueeze(-1) - y.unsqueeze(-2)).abs()


def pred_similarity(yhat) -> torch.Tensor:
    """Prediction-space analogue of :func:`label_similarity`; differentiable."""
    return label_similarity(yhat)


def feature_similarity(z, eps: float | None = None) -> torch.Tensor:
    """Cosine similarity between feature vectors along the last axis.

    ``z`` has shape (..., n, d); the result has shape (..., n, n).  Zero
    vectors raise :class:`ZeroVector` unless ``eps`` is given, in which case
    norms are clamped to ``eps``.
    """
    z = _as_tensor(z)
    norms = z.norm(dim=-1)
    if eps is not None:
        norms = norms.clamp_min(eps)
    elif bool((norms == 0).any()):
        raise ZeroVector("cosine similarity is undefined for a zero feature vector")
    zn = z / norms.unsqueeze(-1)
    s = zn @ zn.transpose(-1, -2)
    # exact unit diagonal regardless of rounding
    eye = torch.eye(s.shape[-1], dtype=torch.bool, device=s.device)
    return torch.where(eye, torch.ones_like(s), s.clamp(-1.0, 1.0))


def _rank_rows(v: torch.Tensor) -> torch.Tensor:
    # stable descending argsort gives the lower index first among ties
    order = torch.argsort(-v, dim=-1, stable=True)
    ranks = torch.empty_like(order)
    positions = torch.arange(1, v.shape[-1] + 1, device=v.device).expand_as(order)
    ranks.scatter_(-1, order, positions)
    return ranks


def rk(v) -> torch.Tensor:
    """Descending ranks 1..n along the last axis (integer tensor)."""
    v = _as_tensor(v)
    if v.shape[-1] < 1:
        raise RankingError("cannot rank an empty vector")
    return _rank_rows(v.detach())


def rk_grad(v, upstream, lambda_bb: float = DEFAULT_LAMBDA_BB) -> torch.Tensor:
    """Blackbox interpolation gradient of ``rk`` at ``v`` for ``upstream``."""
    if not lambda_bb > 0:
        raise BadLambda(f"lambda_bb must be positive, got {lambda_bb}")
    v = _as_tensor(v).detach()
    g = _as_tensor(upstream).to(v.dtype)
    r0 = _rank_rows(v).to(v.dtype)
    r1 = _rank_rows(v + lambda_bb * g).to(v.dtype)
    return -(r0 - r1) / lambda_bb


class _BlackboxRank(torch.autograd.Function):
    @staticmethod
    def forward(ctx, v, lambda_bb, upstream_scale):
        ctx.lambda_bb = lambda_bb
        ctx.upstream_scale = upstream_scale
        ctx.save_for_backward(v)
        return _rank_rows(v).to(v.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        (v,) = ctx.saved_tensors
        s = ctx.upstream_scale
        return rk_grad(v, grad_output * s, ctx.lambda_bb) / s, None, None


def soft_rk(v: torch.Tensor, lambda_bb: float = DEFAULT_LAMBDA_BB, upstream_scale: float = 1.0) -> torch.Tensor:
    """``rk`` as a float tensor that back-propagates via :func:`rk_grad`.

    The interpolation step uses ``upstream_scale * grad_output`` and the
    result is divided by ``upstream_scale`` again.  Passing the batch size
    when the loss is a batch mean makes every matrix perturb with its own
    loss gradient; otherwise the perturbation shrinks as 1/B and ranks stop
    flipping.
    """
    if not lambda_bb > 0:
        raise BadLambda(f"lambda_bb must be positive, got {lambda_bb}")
    return _BlackboxRank.apply(v, lambda_bb, upstream_scale)


def off_diagonal(s: torch.Tensor) -> torch.Tensor:
    """Drop the diagonal of (..., n, n) matrices, giving (..., n, n - 1) rows."""
    n = s.shape[-1]
    keep = ~torch.eye(n, dtype=torch.bool, device=s.device)
    return s[..., keep].reshape(*s.shape[:-2], n, n - 1)


def row_rank_loss(
    s_target,
    s_pred,
    lambda_bb: float = DEFAULT_LAMBDA_BB,
    include_diagonal: bool = False,
) -> torch.Tensor:
    """Sum over rows of squared differences between row rank vectors.

    Leading batch dimensions are kept; the result has shape ``s.shape[:-2]``
    and is meant to be averaged over them (see :func:`soft_rk`).
    """
    s_target = _as_tensor(s_target)
    s_pred = _as_tensor(s_pred)
    if s_target.shape != s_pred.shape or s_target.shape[-1] != s_target.shape[-2]:
        raise ShapeMismatch(f"expected matching square matrices, got {tuple(s_target.shape)} and {tuple(s_pred.shape)}")
    if not include_diagonal:
        s_target, s_pred = off_diagonal(s_target), off_diagonal(s_pred)
    target = _rank_rows(s_target.detach()).to(s_pred.dtype)
    n_mats = max(1, s_pred[..., 0, 0].numel())
    pred = soft_rk(s_pred, lambda_bb, upstream_scale=float(n_mats))
    return ((target - pred) ** 2).sum(dim=(-1, -2))


def sort_loss(
    s_y,
    s_yhat,
    s_z,
    lambda_weight: float = DEFAULT_LAMBDA_WEIGHT,
    lambda_bb: float = DEFAULT_LAMBDA_BB,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Combined sorting loss ``l_y + lambda_weight * l_z``.

    Accepts single n x n matrices or batches (B, n, n); batched losses are
    averaged over the batch.  Returns ``(total, l_y, l_z)``.
    """
    s_y, s_yhat, s_z = _as_tensor(s_y), _as_tensor(s_yhat), _as_tensor(s_z)
    if not (s_y.shape == s_yhat.shape == s_z.shape):
        raise ShapeMismatch(f"shapes differ: {tuple(s_y.shape)}, {tuple(s_yhat.shape)}, {tuple(s_z.shape)}")
    l_y = row_rank_loss(s_y, s_yhat, lambda_bb).mean()
    if lambda_weight == 0:
        l_z = row_rank_loss(s_y, s_z.detach(), lambda_bb).mean()
        return l_y, l_y, l_z
    l_z = row_rank_loss(s_y, s_z, lambda_bb).mean()
    return l_y + lambda_weight * l_z, l_y, l_z


def triplet_sort_loss(
    yhat: torch.Tensor,
    z: torch.Tensor,
    ranks: torch.Tensor,
    lambda_weight: float = DEFAULT_LAMBDA_WEIGHT,
    lambda_bb: float = DEFAULT_LAMBDA_BB,
):
    """Sorting loss for a batch of triplets.

    ``yhat`` is (B, 3), ``z`` is (B, 3, d) pooled features and ``ranks`` is
    (B, 3) rank labels.
    """
    s_y = label_similarity(ranks.to(yhat.dtype))
    s_yhat = pred_similarity(yhat)
    s_z = feature_similarity(z, eps=1e-12)
    return sort_loss(s_y, s_yhat, s_z, lambda_weight, lambda_bb)
