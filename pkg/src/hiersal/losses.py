"""Training losses: per-level KL divergence, domain NLL, and their combination.

Maps entering a KL term are normalized over pixels: predictions get an
epsilon floor added before dividing by their sum (keeps the divergence
finite and differentiable), targets are divided by their sum with exact
zeros preserved (they contribute nothing to the divergence).
"""

import numpy as np

from . import ops
from .errors import DegenerateTargetError, ShapeError
from .tensor import Tensor

EPS_FLOOR = 1e-8
PROB_EPS = 1e-7


def normalize_map(x):
    """Differentiable pixel normalization: (x + eps) / sum(x + eps)."""
    xe = ops.add_scalar(x, EPS_FLOOR)
    return ops.div(xe, ops.sum(xe))


def normalize_target(g):
    """Plain-numpy target normalization; zeros stay exactly zero."""
    g = np.asarray(g, dtype=np.float64)
    s = g.sum()
    if not np.isfinite(s) or s <= 0:
        raise DegenerateTargetError("target map sums to zero; cannot normalize")
    return g / s


def kl_divergence(target, pred):
    """KL(target || pred) over pixels, differentiable w.r.t. ``pred``.

    ``target`` is a constant normalized map (numpy or Tensor), ``pred`` a
    normalized prediction Tensor. Prediction values are clamped at the
    epsilon floor; target zeros contribute zero by convention.
    """
    g = target.data if isinstance(target, Tensor) else np.asarray(target)
    if tuple(g.shape) != tuple(pred.shape):
        raise ShapeError(f"KL shapes differ: target {g.shape} vs pred {pred.shape}")
    logp = ops.log(ops.clamp_min(pred, EPS_FLOOR))
    cross = ops.sum(ops.mul(Tensor(g.astype(pred.dtype.type)), logp))
    pos = g[g > 0]
    entropy_term = float((pos * np.log(pos)).sum())
    return ops.add_scalar(ops.mul_scalar(cross, -1.0), entropy_term)


def multi_level_loss(s_map, conspicuity_maps, target):
    """Sum of KL(G-hat || C-hat_j) over branches plus KL(G-hat || S-hat).

    ``target`` is the raw (unnormalized) ground-truth density for one frame;
    predictions are raw maps that get pixel-normalized here.
    """
    ghat = normalize_target(target)
    total = None
    for m in list(conspicuity_maps) + [s_map]:
        if tuple(m.shape) != tuple(ghat.shape):
            raise ShapeError(
                f"loss map shape {tuple(m.shape)} differs from target {ghat.shape}")
        term = kl_divergence(ghat, normalize_map(m))
        total = term if total is None else ops.add(total, term)
    return total


def domain_nll(d, d_hat):
    """Negative log-likelihood of domain label ``d`` under probability ``d_hat``.

    Returns the mean when ``d_hat`` holds a batch of probabilities.
    Probabilities are clamped away from {0,1} for stability.
    """
    if d not in (0, 1):
        raise ValueError(f"domain label must be 0 or 1, got {d}")
    if d == 1:
        nll = ops.mul_scalar(ops.log(ops.clamp_min(d_hat, PROB_EPS)), -1.0)
    else:
        one_minus = ops.add_scalar(ops.mul_scalar(d_hat, -1.0), 1.0)
        nll = ops.mul_scalar(ops.log(ops.clamp_min(one_minus, PROB_EPS)), -1.0)
    return ops.mean(nll)


def total_loss(saliency_loss, domain_losses=()):
    """Combined objective: L_s plus the sum of per-branch domain losses.

    ``saliency_loss`` is None on target-domain batches, where only the
    domain heads produce gradients.
    """
    parts = ([] if saliency_loss is None else [saliency_loss]) + list(domain_losses)
    if not parts:
        raise ValueError("total_loss needs at least one component")
    out = parts[0]
    for p in parts[1:]:
        out = ops.add(out, p)
    return out
