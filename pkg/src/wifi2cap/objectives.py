"""Shared training objectives.

Pure, differentiable loss functions used by every training stage:
symmetric InfoNCE over matched embedding batches, margin hinges that
separate an embedding from its direction-mirrored caption, and the
autoregressive NLL for caption generation.

All functions are dtype-generic (run them in float64 for numerical
verification, float32 for training) and hold no state, so they are safe
to call concurrently.

Convention: similarities are cosines of pre-normalized embeddings. The
temperature divides similarities only inside InfoNCE; the mirror hinges
compare raw cosines against an explicit margin.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F


def cosine_similarities(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """N x M matrix of inner products between rows of two embedding batches.

    Rows are expected to be unit-norm, so entries lie in [-1, 1] up to
    rounding.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"expected 2-D batches with equal dim, got {tuple(a.shape)} and {tuple(b.shape)}")
    return a @ b.T


def info_nce_symmetric(v: torch.Tensor, t: torch.Tensor, tau: float) -> torch.Tensor:
    """Symmetric InfoNCE over a batch of matched (v_i, t_i) pairs.

    Row i of ``v`` pairs with row i of ``t``; all other rows in the batch
    act as negatives. Similarities are scaled by 1/tau, and the two
    softmax directions (v->t over rows, t->v over columns) are averaged.

    The value is invariant under any simultaneous permutation of both
    batches, and equals log(N) when all similarities are identical.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if v.shape != t.shape:
        raise ValueError(f"batch shapes differ: {tuple(v.shape)} vs {tuple(t.shape)}")
    if v.ndim != 2 or v.shape[0] < 1:
        raise ValueError("expected non-empty N x d batches")
    logits = cosine_similarities(v, t) / tau
    targets = torch.arange(v.shape[0], device=v.device)
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))


def _dot(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"embedding shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a * b).sum(dim=-1)


def mirror_hinge_bidirectional(
    v: torch.Tensor,
    t: torch.Tensor,
    v_m: torch.Tensor,
    t_m: torch.Tensor,
    margin: float,
) -> torch.Tensor:
    """Two-sided hinge separating correct pairings from mirrored ones.

    Penalizes s(v, t_m) exceeding s(v, t) - margin, and symmetrically for
    the mirrored sample (v_m, t_m) against the original caption. Zero --
    with exactly zero gradient -- once both correct similarities beat
    their mirrored counterparts by more than the margin.

    Accepts single embeddings or batches with matching leading dims;
    batches are reduced by mean.
    """
    hinge = F.relu(margin + _dot(v, t_m) - _dot(v, t)) + F.relu(
        margin + _dot(v_m, t) - _dot(v_m, t_m)
    )
    return hinge.mean()


def mirror_hinge_text_only(
    c: torch.Tensor,
    t: torch.Tensor,
    t_m: torch.Tensor,
    margin: float,
) -> torch.Tensor:
    """One-sided mirror hinge for encoders with no mirrored input view.

    Only the caption has a mirrored twin here, so the hinge pushes
    s(c, t) above s(c, t_m) + margin and nothing else.
    """
    hinge = F.relu(margin + _dot(c, t_m) - _dot(c, t))
    return hinge.mean()


def teacher_total(con: torch.Tensor | float, mc: torch.Tensor | float, lambda_mc: float):
    """Weighted sum of the contrastive and mirror terms.

    The same combination is used for the teacher and the student stage;
    lambda_mc = 0 disables the mirror term entirely (the no-mirror
    ablation arm).
    """
    return con + lambda_mc * mc


def lm_nll(step_log_probs: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Autoregressive NLL: token log-probs summed per sequence, mean over batch.

    ``step_log_probs[i, t]`` is the log-probability of the target token at
    position t of sequence i under a normalized next-token distribution.
    Positions at or beyond ``lengths[i]`` are padding and excluded.
    """
    if step_log_probs.ndim != 2:
        raise ValueError(f"expected N x T_max log-probs, got shape {tuple(step_log_probs.shape)}")
    n, t_max = step_log_probs.shape
    lengths = torch.as_tensor(lengths, device=step_log_probs.device)
    if lengths.shape != (n,):
        raise ValueError(f"lengths shape {tuple(lengths.shape)} does not match batch {n}")
    if bool((lengths > t_max).any()) or bool((lengths < 0).any()):
        raise ValueError(f"lengths must lie in [0, {t_max}]")
    mask = torch.arange(t_max, device=step_log_probs.device).unsqueeze(0) < lengths.unsqueeze(1)
    return -(step_log_probs * mask).sum() / n
