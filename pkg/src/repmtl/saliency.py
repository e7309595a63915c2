"""Task saliency and the entropy-based task-specific saliency regularizer.

Saliency of task t is the gradient of its loss with respect to the shared
representation Z (shape B×C×H'×W'). Channel-averaged saliencies are turned into
a per-position distribution over tasks; the regularizer is the mean Shannon
entropy (natural log) of those distributions.

Positions are enumerated (b, h, w) row-major, so row i of the distribution
matrix corresponds to ``i = (b * H' + h) * W' + w``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from . import autodiff as ad

DEFAULT_EPS = 1e-12
ROW_SUM_TOL = 1e-6


class SaliencyError(ValueError):
    pass


@dataclass
class SaliencyBundle:
    saliency: list          # per task, B×C×H'×W' (Node)
    aggregated: list        # per task, B×H'×W'
    distribution: ad.Node   # (B·H'·W')×T
    differentiable: bool

    @property
    def n_tasks(self) -> int:
        return len(self.saliency)


def compute_task_saliency(z: ad.Node, losses: Union[Mapping[str, ad.Node], Sequence[ad.Node]],
                          create_graph: bool = True) -> list:
    """S_t = dL_t/dZ for each task loss.

    Raises if some loss was not computed from ``z`` at all; a loss that merely
    has zero gradient (e.g. through dead ReLUs) yields a zero saliency.
    """
    items = list(losses.values()) if isinstance(losses, Mapping) else list(losses)
    if not items:
        raise SaliencyError("need at least one task loss")
    for i, loss in enumerate(items):
        if loss.size != 1:
            raise SaliencyError(f"task loss {i} is not scalar (shape {loss.shape})")
        if z.tape is None or not z.tape.depends_on(loss, z):
            raise SaliencyError(f"task loss {i} is not reachable from the representation")
    out = []
    for loss in items:
        (s,) = ad.gradient(loss, [z], create_graph=create_graph)
        out.append(s if create_graph else ad.constant(s))
    return out


def channel_aggregate(s) -> ad.Node:
    """Signed mean over the channel axis: B×C×H'×W' -> B×H'×W'."""
    s = ad.as_node(s)
    if s.ndim != 4 or s.shape[1] < 1:
        raise SaliencyError(f"expected B×C×H'×W' saliency, got shape {s.shape}")
    return ad.mean(s, axis=1)


def task_distribution(aggregated: Sequence, eps: float = DEFAULT_EPS) -> ad.Node:
    """Row-stochastic N×T matrix P[i, t] = (|Ŝ_it| + eps) / (Σ_k |Ŝ_ik| + T·eps)."""
    if not aggregated:
        raise SaliencyError("need at least one task")
    if eps < 0:
        raise SaliencyError(f"eps must be >= 0, got {eps}")
    nodes = [ad.as_node(a) for a in aggregated]
    shape = nodes[0].shape
    if any(n.shape != shape for n in nodes):
        raise SaliencyError("all aggregated saliencies must share one shape")
    T = len(nodes)
    n_pos = int(np.prod(shape))
    mags = ad.reshape(ad.abs(ad.stack(nodes, axis=-1)), (n_pos, T))
    if eps == 0 and np.any(mags.value.sum(axis=1) == 0):
        raise SaliencyError("some position has all-zero saliency; use eps > 0")
    num = ad.add(mags, eps) if eps else mags
    den = ad.sum(num, axis=1, keepdims=True)
    return ad.div(num, ad.broadcast_to(den, (n_pos, T)))


def tsr_loss(p, check: bool = True) -> ad.Node:
    """Mean over positions of -Σ_t P log P, with 0·log 0 = 0."""
    p = ad.as_node(p)
    if p.ndim != 2:
        raise SaliencyError(f"distribution must be N×T, got shape {p.shape}")
    if check:
        if np.any(p.value < 0):
            raise SaliencyError("distribution has negative entries")
        if np.any(np.abs(p.value.sum(axis=1) - 1.0) > ROW_SUM_TOL):
            raise SaliencyError("distribution rows do not sum to 1")
    zero = (p.value == 0).astype(np.float64)
    safe = ad.add(p, ad.constant(zero)) if zero.any() else p
    plogp = ad.mul(p, ad.log(safe))
    return ad.neg(ad.mean(ad.sum(plogp, axis=1)))


def build_bundle(saliency: Sequence, eps: float = DEFAULT_EPS) -> SaliencyBundle:
    sal = [ad.as_node(s) for s in saliency]
    agg = [channel_aggregate(s) for s in sal]
    p = task_distribution(agg, eps)
    return SaliencyBundle(sal, agg, p, differentiable=any(s.requires_grad for s in sal))


def dump_distribution_csv(p, path, task_names: Sequence[str] = ()) -> None:
    """Write P as CSV: one row per position, one column per task."""
    values = ad.value_of(p)
    names = list(task_names) or [f"task{t}" for t in range(values.shape[1])]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["position", *names])
        for i, row in enumerate(values):
            w.writerow([i, *(repr(float(v)) for v in row)])
