"""Joint objective (task losses plus saliency regularizers) and the training step.

The regularizers are functions of the task saliencies, which are themselves
gradients. Unless ``detach_saliency`` is set, the saliencies are built with
``create_graph`` so that the parameter gradient of the total objective
includes the second-order paths through them.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import alignment, baselines, saliency
from . import autodiff as ad
from .model import Batch, HpsModel, bind_params, forward, task_losses


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class RepHyper:
    lambda_tsr: float = 0.9
    lambda_csa: float = 0.9
    tau: float = 0.5
    eps: float = saliency.DEFAULT_EPS
    detach_saliency: bool = False
    include_positive: bool = False
    csa_task_reduction: str = "mean"
    anchor_task_reduction: str = "mean"
    csa_exclusion: str = "sample"  # "pair" when samples carry labels for one task only
    # add each regularizer/T to every task loss before gradient manipulation
    combine_with_manipulation: bool = False

    def __post_init__(self):
        if self.lambda_tsr < 0 or self.lambda_csa < 0:
            raise ValueError("regularizer weights must be >= 0")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")

    @property
    def active(self) -> bool:
        return self.lambda_tsr > 0 or self.lambda_csa > 0


EW_HYPER = RepHyper(lambda_tsr=0.0, lambda_csa=0.0)


@dataclass
class LossBreakdown:
    task_losses: dict
    weights: dict
    l_tsr: Optional[float]
    l_csa: Optional[float]
    lambda_tsr: float
    lambda_csa: float
    total: float
    n_excluded: int = 0

    def recompute_total(self) -> float:
        tot = sum(self.weights[k] * v for k, v in self.task_losses.items())
        if self.l_tsr is not None:
            tot += self.lambda_tsr * self.l_tsr
        if self.l_csa is not None:
            tot += self.lambda_csa * self.l_csa
        return tot


@dataclass
class ObjectiveGraph:
    tape: ad.Tape
    leaves: dict
    z: ad.Node
    predictions: dict
    losses: dict
    tsr: Optional[ad.Node]
    csa: Optional[ad.Node]
    total: ad.Node
    extra_leaves: dict = field(default_factory=dict)


def regularizers(z: ad.Node, losses: Mapping[str, ad.Node], hyper: RepHyper):
    """Returns ``(L_tsr or None, L_csa or None, n_excluded)`` for the active terms."""
    if not hyper.active:
        return None, None, 0
    sal = saliency.compute_task_saliency(z, losses, create_graph=not hyper.detach_saliency)
    tsr = csa = None
    n_excluded = 0
    if hyper.lambda_tsr > 0:
        tsr = saliency.tsr_loss(saliency.build_bundle(sal, hyper.eps).distribution)
    if hyper.lambda_csa > 0:
        if z.shape[0] < 2:
            raise alignment.AlignmentError("no negative pairs: alignment needs batch size >= 2")
        csa, n_excluded = alignment.csa_from_saliency(
            sal, hyper.tau, hyper.include_positive, hyper.csa_task_reduction,
            hyper.anchor_task_reduction, hyper.csa_exclusion)
    return tsr, csa, n_excluded


def _weighted_sum(losses: Mapping[str, ad.Node], weights: Optional[Mapping[str, float]]):
    total = None
    for name, loss in losses.items():
        term = loss if weights is None else ad.mul(loss, float(weights[name]))
        total = term if total is None else ad.add(total, term)
    return total


def rep_mtl_loss(model: HpsModel, batch: Batch, hyper: RepHyper = RepHyper(),
                 weights: Optional[Mapping[str, float]] = None, tape: Optional[ad.Tape] = None,
                 leaves: Optional[dict] = None):
    """Σ_t w_t·L_t + λ_tsr·L_tsr + λ_csa·L_csa. Returns ``(LossBreakdown, ObjectiveGraph)``.

    ``weights=None`` means equal weighting (no multiplication at all).
    """
    tape = tape if tape is not None else ad.Tape()
    leaves = leaves if leaves is not None else bind_params(model, tape)
    z, preds = forward(model, batch, tape, leaves)
    losses = task_losses(preds, batch.targets, model.tasks)
    tsr, csa, n_excl = regularizers(z, losses, hyper)
    total = _weighted_sum(losses, weights)
    if tsr is not None:
        total = ad.add(total, ad.mul(tsr, hyper.lambda_tsr))
    if csa is not None:
        total = ad.add(total, ad.mul(csa, hyper.lambda_csa))
    w = {k: 1.0 for k in losses} if weights is None else {k: float(weights[k]) for k in losses}
    breakdown = LossBreakdown(
        task_losses={k: v.item() for k, v in losses.items()}, weights=w,
        l_tsr=None if tsr is None else tsr.item(), l_csa=None if csa is None else csa.item(),
        lambda_tsr=hyper.lambda_tsr, lambda_csa=hyper.lambda_csa,
        total=total.item(), n_excluded=n_excl)
    return breakdown, ObjectiveGraph(tape, leaves, z, preds, losses, tsr, csa, total)


# ---------------------------------------------------------------- optimizers

@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"  # "adam" (decoupled weight decay) or "sgd"
    lr: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    lr_scale: float = 1.0


def optimizer_update(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                     cfg: OptimizerConfig, state: OptimizerState):
    """One update of every parameter that has a gradient. Returns ``(params, state)``."""
    lr = cfg.lr * state.lr_scale
    new = dict(params)
    st = OptimizerState(state.step + 1, dict(state.m), dict(state.v), state.lr_scale)
    for name in sorted(grads):
        p, g = params[name], grads[name]
        if cfg.kind == "sgd":
            new[name] = p - lr * (g + cfg.weight_decay * p)
            continue
        m = cfg.beta1 * st.m.get(name, 0.0) + (1 - cfg.beta1) * g
        v = cfg.beta2 * st.v.get(name, 0.0) + (1 - cfg.beta2) * g * g
        st.m[name], st.v[name] = m, v
        m_hat = m / (1 - cfg.beta1 ** st.step)
        v_hat = v / (1 - cfg.beta2 ** st.step)
        new[name] = p - lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p)
    return new, st


# ---------------------------------------------------------------- training step

def _flatten(grads: Mapping[str, np.ndarray], names) -> np.ndarray:
    return np.concatenate([grads[n].reshape(-1) for n in names])


def _unflatten(vec: np.ndarray, like: Mapping[str, np.ndarray], names) -> dict:
    out, pos = {}, 0
    for n in names:
        size = like[n].size
        out[n] = vec[pos:pos + size].reshape(like[n].shape)
        pos += size
    return out


def _grad(output: ad.Node, leaves: Mapping[str, ad.Node], names) -> dict:
    try:
        gs = ad.gradient(output, [leaves[n] for n in names])
    except ad.NonFiniteError as exc:
        raise TrainingError(f"non-finite value during backward pass: {exc}") from exc
    return dict(zip(names, gs))


def _check_finite(grads: Mapping[str, np.ndarray]) -> None:
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")


def _norm(grads: Mapping[str, np.ndarray], names) -> float:
    return float(np.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in names)))


def train_step(model: HpsModel, batch: Batch, state: baselines.MtoState, opt_state: OptimizerState,
               hyper: RepHyper = RepHyper(), opt: OptimizerConfig = OptimizerConfig(),
               rng: Optional[np.random.Generator] = None):
    """One update. Returns ``(new model, LossBreakdown, diagnostics, new optimizer state)``.

    Regularizers apply only for ``repmtl`` (or for manipulation methods with
    ``combine_with_manipulation``); every other method uses the plain task losses.
    ``state`` is updated in place (UW log-variances, GradNorm weights).
    """
    method = state.method
    rng = rng if rng is not None else np.random.default_rng(0)
    if method == "repmtl":
        h = hyper
    elif method in baselines.GRADIENT_MANIPULATION and hyper.combine_with_manipulation:
        h = hyper
    else:
        h = EW_HYPER
    names = sorted(model.params)
    shared = model.shared_names
    tasks = model.task_names
    diag: dict = {}

    tape = ad.Tape()
    leaves = bind_params(model, tape)
    extra = {}
    if method == "uw":
        extra["mto.logvar"] = tape.leaf(state.logvars, name="mto.logvar")

    if method in ("ew", "repmtl"):
        weights = None
    elif method == "uw":
        weights = None  # uw objective applied below
    else:
        w = state.loss_weights()
        weights = dict(zip(tasks, w)) if method in ("dwa", "gradnorm") else None

    if method in baselines.GRADIENT_MANIPULATION:
        breakdown, graph = rep_mtl_loss(model, batch, h, None, tape, leaves)
        grads = _manipulated_grads(model, graph, h, state, rng, diag)
    elif method == "uw":
        breakdown, graph = rep_mtl_loss(model, batch, h, None, tape, leaves)
        obj = baselines.uw_objective([graph.losses[t] for t in tasks], extra["mto.logvar"])
        grads = _grad(obj, {**leaves, **extra}, names + ["mto.logvar"])
        breakdown.weights = dict(zip(tasks, baselines.uw_weights(state.logvars)))
        breakdown.total = obj.item()
    else:
        breakdown, graph = rep_mtl_loss(model, batch, h, weights, tape, leaves)
        if method == "gradnorm":
            norms = []
            for t in tasks:
                g_t = _grad(graph.losses[t], leaves, shared)
                norms.append(_norm(g_t, shared))
            diag["task_grad_norms"] = norms
        grads = _grad(graph.total, leaves, names)

    _check_finite(grads)
    diag["shared_grad_norm"] = _norm(grads, shared)
    params_and_extra = dict(model.params)
    if method == "uw":
        params_and_extra["mto.logvar"] = state.logvars
    new_params, new_opt = optimizer_update(params_and_extra, grads, opt, opt_state)
    if method == "uw":
        state.logvars = new_params.pop("mto.logvar")
    if method == "gradnorm":
        losses_now = np.array([breakdown.task_losses[t] for t in tasks])
        if state.gn_initial is None:
            state.gn_initial = losses_now
        state.gn_weights = baselines.gradnorm_step(
            state.gn_weights, diag["task_grad_norms"], losses_now, state.gn_initial,
            state.gradnorm_alpha, state.gradnorm_lr)
    return model.with_params(new_params), breakdown, diag, new_opt


def _manipulated_grads(model: HpsModel, graph: ObjectiveGraph, hyper: RepHyper,
                       state: baselines.MtoState, rng, diag) -> dict:
    shared = model.shared_names
    tasks = model.task_names
    T = len(tasks)
    reg = None
    if graph.tsr is not None:
        reg = ad.mul(graph.tsr, hyper.lambda_tsr / T)
    if graph.csa is not None:
        c = ad.mul(graph.csa, hyper.lambda_csa / T)
        reg = c if reg is None else ad.add(reg, c)
    grads: dict = {}
    per_task = []
    for t in tasks:
        obj = graph.losses[t] if reg is None else ad.add(graph.losses[t], reg)
        own = model.task_param_names(t)
        g = _grad(obj, graph.leaves, shared + own)
        _check_finite(g)
        per_task.append(_flatten(g, shared))
        for n in own:
            grads[n] = g[n]
    diag["task_grad_norms"] = [float(np.linalg.norm(g)) for g in per_task]
    agg = baselines.manipulate(state.method, per_task, state, rng)
    grads.update(_unflatten(agg, model.params, shared))
    return grads


def full_gradient(model: HpsModel, batch: Batch, hyper: RepHyper = RepHyper()) -> dict:
    """Gradient of the total objective wrt every parameter (testing/diagnostics)."""
    breakdown, graph = rep_mtl_loss(model, batch, hyper)
    return _grad(graph.total, graph.leaves, sorted(model.params))
