"""Sample-wise cross-task saliency alignment.

Per task, the affinity map of sample b is the channel Gram matrix of its
saliency, ``M_t[b] = R Rᵀ`` with ``R = S_t[b]`` reshaped to C×(H'W'). The
per-sample anchor is the outer product of the saliency averaged over space
(and, by default, over tasks). Both are flattened and L2-normalized; the
contrastive loss pulls each anchor toward the same sample's task affinities
and pushes it away from the anchors of other samples in the batch.
"""

from __future__ import annotations

import csv
import logging
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad

logger = logging.getLogger(__name__)

ANCHOR_REDUCTIONS = ("mean", "concat-then-mean")
TASK_REDUCTIONS = ("mean", "sum")
EXCLUSIONS = ("sample", "pair")


class AlignmentError(ValueError):
    pass


class ZeroSaliencyWarning(UserWarning):
    pass


def _check_saliency(s: ad.Node):
    if s.ndim != 4:
        raise AlignmentError(f"expected B×C×H'×W' saliency, got shape {s.shape}")


def affinity_maps(s) -> ad.Node:
    """B×C×H'×W' -> B×C×C channel Gram matrices."""
    s = ad.as_node(s)
    _check_saliency(s)
    B, C, H, W = s.shape
    r = ad.reshape(s, (B, C, H * W))
    return ad.matmul(r, ad.swap_last(r))


def anchors(saliencies: Sequence, reduction: str = "mean"):
    """Per-sample anchors ``(A, Â)`` with A: B×C and Â: B×C×C.

    ``mean``: A averages saliency over tasks and positions, Â = A Aᵀ.
    ``concat-then-mean``: the T per-task spatial means are stacked into a
    T×C matrix R_b and Â_b = R_bᵀ R_b / T, i.e. the task-mean of per-task
    outer products. A is the task mean in both cases.
    """
    if reduction not in ANCHOR_REDUCTIONS:
        raise AlignmentError(f"unknown anchor reduction {reduction!r}")
    sal = [ad.as_node(s) for s in saliencies]
    if not sal:
        raise AlignmentError("need at least one task saliency")
    for s in sal:
        _check_saliency(s)
        if s.shape != sal[0].shape:
            raise AlignmentError("task saliencies must share one shape")
    B, C, H, W = sal[0].shape
    T = len(sal)
    # T, B, C, H·W -> spatial mean per task: T, B, C
    per_task = ad.mean(ad.reshape(ad.stack(sal, axis=0), (T, B, C, H * W)), axis=3)
    a = ad.mean(per_task, axis=0)
    if reduction == "mean":
        a_hat = ad.matmul(ad.reshape(a, (B, C, 1)), ad.reshape(a, (B, 1, C)))
    else:
        r = ad.transpose(per_task, (1, 0, 2))  # B, T, C
        a_hat = ad.mul(ad.matmul(ad.swap_last(r), r), 1.0 / T)
    return a, a_hat


def normalize_flatten(m):
    """Flatten each sample's C×C matrix row-major and scale to unit L2 norm.

    Returns ``(z, valid)``: ``z`` is B×(C·C); ``valid[b]`` is False where the
    matrix was all zero, in which case ``z[b]`` is the zero vector.
    """
    m = ad.as_node(m)
    B = m.shape[0]
    flat = ad.reshape(m, (B, int(np.prod(m.shape[1:]))))
    ss = ad.sum(ad.square(flat), axis=1, keepdims=True)
    valid = ss.value[:, 0] > 0
    if not valid.all():
        ss = ad.add(ss, ad.constant((~valid).astype(np.float64)[:, None]))
    norm = ad.sqrt(ss)
    return ad.div(flat, ad.broadcast_to(norm, flat.shape)), valid


def _as_task_list(z_t) -> list:
    if isinstance(z_t, (list, tuple)):
        return [ad.as_node(z) for z in z_t]
    z_t = ad.as_node(z_t)
    if z_t.ndim != 3:
        raise AlignmentError(f"task vectors must be T×B×D, got shape {z_t.shape}")
    return [ad.reshape(ad.take(z_t, [t], axis=0), z_t.shape[1:]) for t in range(z_t.shape[0])]


def _unit_rows(z: ad.Node, valid: Optional[np.ndarray] = None) -> ad.Node:
    ss = ad.sum(ad.square(z), axis=1, keepdims=True)
    if valid is not None and not valid.all():
        ss = ad.add(ss, ad.constant((~valid).astype(np.float64)[:, None]))
    return ad.div(z, ad.broadcast_to(ad.sqrt(ss), z.shape))


def _select_samples(z_a, z_ts, valid, exclusion):
    B = z_a.shape[0]
    if B < 2:
        raise AlignmentError("no negative pairs: batch size must be >= 2")
    ok = np.linalg.norm(z_a.value, axis=1) > 0
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    pair = np.stack([np.linalg.norm(z.value, axis=1) > 0 for z in z_ts], axis=1)
    if exclusion == "sample":
        ok &= pair.all(axis=1)
    else:
        ok &= pair.any(axis=1)
    keep = np.nonzero(ok)[0]
    if len(keep) == 0:
        raise AlignmentError("all samples excluded: every sample has zero-norm saliency")
    if len(keep) < B:
        msg = f"excluded {B - len(keep)} of {B} samples with zero-norm saliency"
        warnings.warn(msg, ZeroSaliencyWarning, stacklevel=3)
        if len(keep) < 2:
            raise AlignmentError("no negative pairs: fewer than 2 samples remain after exclusion")
        z_a = ad.take(z_a, keep, axis=0)
        z_ts = [ad.take(z, keep, axis=0) for z in z_ts]
    return z_a, z_ts, keep, pair[keep]


def csa_pair_losses(z_a, z_t, tau: float, include_positive: bool = False, valid=None,
                    exclusion: str = "sample"):
    """Per (sample, task) contrastive terms.

    Returns ``(losses, kept, mask)``: ``losses`` is n_kept×T, ``kept`` holds
    the batch indices that survived zero-norm exclusion and ``mask[b, t]``
    marks pairs whose task vector is nonzero. With ``exclusion="sample"``
    the mask is all True; with ``"pair"`` a sample stays as long as one of its
    task vectors is nonzero and the loss of masked pairs must be ignored.
    """
    if not tau > 0:
        raise AlignmentError(f"temperature must be > 0, got {tau}")
    if exclusion not in EXCLUSIONS:
        raise AlignmentError(f"unknown exclusion mode {exclusion!r}")
    z_a = ad.as_node(z_a)
    z_ts = _as_task_list(z_t)
    if any(z.shape != z_a.shape for z in z_ts):
        raise AlignmentError("anchor and task vectors must share shape B×D")
    z_a, z_ts, kept, mask = _select_samples(z_a, z_ts, valid, exclusion)
    n = z_a.shape[0]
    inv_tau = 1.0 / tau
    ua = _unit_rows(z_a)
    neg_logits = ad.mul(ad.matmul(ua, ad.transpose(ua)), inv_tau)     # n×n
    off = 1.0 - np.eye(n)
    neg_max = np.max(np.where(off > 0, neg_logits.value, -np.inf), axis=1, keepdims=True)
    columns = []
    for t, z in enumerate(z_ts):
        pos_logit = ad.mul(ad.sum(ad.mul(ua, _unit_rows(z, mask[:, t])), axis=1, keepdims=True), inv_tau)
        shift = np.maximum(neg_max, pos_logit.value) if include_positive else neg_max
        shifted = ad.sub(neg_logits, ad.broadcast_to(ad.constant(shift), (n, n)))
        den = ad.sum(ad.mul(ad.exp(shifted), ad.constant(off)), axis=1, keepdims=True)
        if include_positive:
            den = ad.add(den, ad.exp(ad.sub(pos_logit, ad.constant(shift))))
        lse = ad.add(ad.log(den), ad.constant(shift))
        columns.append(ad.sub(lse, pos_logit))
    return ad.reshape(ad.stack(columns, axis=1), (n, len(z_ts))), kept, mask


def csa_loss(z_a, z_t, tau: float = 0.5, include_positive: bool = False,
             task_reduction: str = "mean", valid=None, exclusion: str = "sample") -> ad.Node:
    """Contrastive alignment loss: mean over samples, mean (or sum) over tasks.

    With ``include_positive=False`` the denominator holds only the negatives
    ``k != b``, so the loss may be negative. Under pair exclusion each
    sample averages (or sums) over its valid tasks only.
    """
    if task_reduction not in TASK_REDUCTIONS:
        raise AlignmentError(f"unknown task reduction {task_reduction!r}")
    losses, _, mask = csa_pair_losses(z_a, z_t, tau, include_positive, valid, exclusion)
    return _reduce(losses, mask, task_reduction)


def _reduce(losses: ad.Node, mask: np.ndarray, task_reduction: str) -> ad.Node:
    if mask.all():
        per_sample = ad.mean(losses, axis=0)
        return ad.mean(per_sample) if task_reduction == "mean" else ad.sum(per_sample)
    m = mask.astype(np.float64)
    if task_reduction == "mean":
        m = m / m.sum(axis=1, keepdims=True)
    per_sample = ad.sum(ad.mul(losses, ad.constant(m)), axis=1)
    return ad.mean(per_sample)


def csa_from_saliency(saliencies: Sequence, tau: float = 0.5, include_positive: bool = False,
                      task_reduction: str = "mean", anchor_reduction: str = "mean",
                      exclusion: str = "sample"):
    """Full alignment pipeline from task saliencies. Returns ``(loss, n_excluded)``."""
    _, a_hat = anchors(saliencies, anchor_reduction)
    z_a, valid = normalize_flatten(a_hat)
    zs = [normalize_flatten(affinity_maps(s))[0] for s in saliencies]
    if task_reduction not in TASK_REDUCTIONS:
        raise AlignmentError(f"unknown task reduction {task_reduction!r}")
    losses, kept, mask = csa_pair_losses(z_a, zs, tau, include_positive, valid, exclusion)
    return _reduce(losses, mask, task_reduction), z_a.shape[0] - len(kept)


def dump_similarity_csv(z_a, z_t, path) -> None:
    """Write anchor-anchor and anchor-task cosine similarities as long-form CSV."""
    za = ad.value_of(z_a)
    zts = [ad.value_of(z) for z in _as_task_list(z_t)]

    def unit(v):
        n = np.linalg.norm(v, axis=1, keepdims=True)
        return np.divide(v, n, out=np.zeros_like(v), where=n > 0)

    ua = unit(za)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "task", "row", "col", "similarity"])
        sim = ua @ ua.T
        for b in range(sim.shape[0]):
            for k in range(sim.shape[1]):
                w.writerow(["anchor", "", b, k, repr(float(sim[b, k]))])
        for t, zt in enumerate(zts):
            pos = np.sum(ua * unit(zt), axis=1)
            for b, v in enumerate(pos):
                w.writerow(["positive", t, b, b, repr(float(v))])
