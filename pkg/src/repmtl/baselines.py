"""Comparator multi-task optimization methods.

Loss scaling: EW, UW (homoscedastic uncertainty), DWA (dynamic weight
average). Gradient manipulation over the flattened shared-parameter gradient:
GradNorm, PCGrad, MGDA (min-norm via Frank-Wolfe) and CAGrad.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize

from . import autodiff as ad

METHODS = ("ew", "uw", "dwa", "gradnorm", "pcgrad", "mgda", "cagrad", "repmtl")
LOSS_SCALING = ("ew", "uw", "dwa", "gradnorm", "repmtl")
GRADIENT_MANIPULATION = ("pcgrad", "mgda", "cagrad")

MGDA_MAX_ITER = 250
MGDA_TOL = 1e-10
CAGRAD_MAX_ITER = 500
GRADNORM_MIN_WEIGHT = 1e-6


class BaselineError(ValueError):
    pass


@dataclass
class MtoState:
    """Mutable per-run state of the selected method.

    ``loss_history`` holds one vector of epoch-mean task losses per finished
    epoch (DWA). ``logvars`` are UW's learnable s_t = log σ_t². GradNorm keeps
    its weights and the losses recorded at its first step.
    """

    method: str
    n_tasks: int
    dwa_temp: float = 2.0
    gradnorm_alpha: float = 1.5
    gradnorm_lr: float = 0.025
    cagrad_c: float = 0.4
    loss_history: list = field(default_factory=list)
    logvars: Optional[np.ndarray] = None
    gn_weights: Optional[np.ndarray] = None
    gn_initial: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise BaselineError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.n_tasks < 1:
            raise BaselineError("need at least one task")
        if self.logvars is None:
            self.logvars = np.zeros(self.n_tasks)
        if self.gn_weights is None:
            self.gn_weights = np.ones(self.n_tasks)

    def loss_weights(self) -> np.ndarray:
        """Current strictly positive loss-scaling weights (ones for non-scaling methods)."""
        if self.method == "uw":
            return uw_weights(self.logvars)
        if self.method == "dwa":
            return dwa_weights(self.loss_history, self.dwa_temp, self.n_tasks)
        if self.method == "gradnorm":
            return self.gn_weights.copy()
        return np.ones(self.n_tasks)

    def end_epoch(self, mean_losses: Sequence[float]) -> None:
        self.loss_history.append(np.asarray(mean_losses, dtype=np.float64))


def _stack(grads: Sequence) -> np.ndarray:
    g = np.stack([np.asarray(x, dtype=np.float64).reshape(-1) for x in grads])
    if g.shape[0] < 1:
        raise BaselineError("need at least one task gradient")
    return g


def ew_aggregate(grads: Sequence) -> np.ndarray:
    shapes = {np.shape(g) for g in grads}
    if len(shapes) != 1:
        raise BaselineError(f"task gradients must share a shape, got {shapes}")
    out = np.zeros(next(iter(shapes)))
    for g in grads:
        out = out + g
    return out


# ---------------------------------------------------------------- UW

def uw_weights(logvars) -> np.ndarray:
    s = np.asarray(logvars, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise BaselineError("log-variances must be finite")
    return np.exp(-s) / 2.0


def uw_objective(losses: Sequence, logvars) -> ad.Node:
    """Σ_t L_t·exp(−s_t)/2 + s_t/2, differentiable in both losses and ``logvars``."""
    s = ad.as_node(logvars)
    if s.shape != (len(losses),):
        raise BaselineError(f"need one log-variance per task, got shape {s.shape}")
    total = None
    for t, loss in enumerate(losses):
        s_t = ad.reshape(ad.take(s, [t]), ())
        term = ad.mul(ad.add(ad.mul(ad.as_node(loss), ad.exp(ad.neg(s_t))), s_t), 0.5)
        total = term if total is None else ad.add(total, term)
    return total


# ---------------------------------------------------------------- DWA

def dwa_weights(history: Sequence, temperature: float = 2.0, n_tasks: Optional[int] = None) -> np.ndarray:
    """w_t = T·softmax(r/temp)_t with r_t = L_t(k−1)/L_t(k−2); ones before epoch 2."""
    if not temperature > 0:
        raise BaselineError(f"DWA temperature must be > 0, got {temperature}")
    if len(history) < 2:
        if n_tasks is None:
            if not history:
                raise BaselineError("n_tasks required when loss history is empty")
            n_tasks = len(history[0])
        return np.ones(n_tasks)
    prev, last = np.asarray(history[-2], float), np.asarray(history[-1], float)
    if np.any(prev == 0):
        raise BaselineError("DWA: zero historical loss")
    r = last / prev / temperature
    e = np.exp(r - r.max())
    return len(r) * e / e.sum()


# ---------------------------------------------------------------- GradNorm

def gradnorm_step(weights, grad_norms, losses, initial_losses, alpha: float = 1.5,
                  lr: float = 0.025) -> np.ndarray:
    """One descent step on Σ_t |w_t‖g_t‖ − Ḡ·r̃_t^α| with the targets held constant.

    Weights are then clipped to stay positive and rescaled to sum to T.
    """
    w = np.asarray(weights, float)
    n = np.asarray(grad_norms, float)
    L = np.asarray(losses, float)
    L0 = np.asarray(initial_losses, float)
    if alpha < 0:
        raise BaselineError(f"GradNorm alpha must be >= 0, got {alpha}")
    if np.any(L0 == 0):
        raise BaselineError("GradNorm: initial loss is zero")
    ratio = L / L0
    r_inv = ratio / ratio.mean()
    g_w = w * n
    target = g_w.mean() * r_inv ** alpha
    grad = np.sign(g_w - target) * n
    new = np.maximum(w - lr * grad, GRADNORM_MIN_WEIGHT)
    return new * (len(w) / new.sum())


def gradnorm_objective(weights, grad_norms, target) -> float:
    return float(np.sum(np.abs(np.asarray(weights) * grad_norms - target)))


# ---------------------------------------------------------------- PCGrad

def pcgrad(grads: Sequence, rng: np.random.Generator) -> np.ndarray:
    """Project each task gradient off the conflicting originals, in seeded random order."""
    g = _stack(grads)
    T = g.shape[0]
    out = np.zeros(g.shape[1])
    for i in range(T):
        gi = g[i].copy()
        others = [j for j in rng.permutation(T) if j != i]
        for j in others:
            dot = gi @ g[j]
            if dot < 0:
                gi = gi - dot / (g[j] @ g[j]) * g[j]
        out = out + gi
    return out.reshape(np.shape(grads[0]))


# ---------------------------------------------------------------- MGDA

def _line_search(v1v1: float, v1v2: float, v2v2: float) -> float:
    """argmin_γ∈[0,1] ‖γ·v1 + (1−γ)·v2‖² from inner products."""
    if v1v2 >= v1v1:
        return 1.0
    if v1v2 >= v2v2:
        return 0.0
    return (v2v2 - v1v2) / (v1v1 + v2v2 - 2.0 * v1v2)


def min_norm_weights(gram: np.ndarray, max_iter: int = MGDA_MAX_ITER, tol: float = MGDA_TOL) -> np.ndarray:
    """Frank-Wolfe on the simplex for min γᵀGγ, started from the best pair."""
    T = gram.shape[0]
    if T == 1:
        return np.ones(1)
    best, gamma = np.inf, None
    for i in range(T):
        for j in range(i + 1, T):
            c = _line_search(gram[i, i], gram[i, j], gram[j, j])
            val = c * c * gram[i, i] + 2 * c * (1 - c) * gram[i, j] + (1 - c) ** 2 * gram[j, j]
            if val < best:
                best = val
                gamma = np.zeros(T)
                gamma[i], gamma[j] = c, 1 - c
    for _ in range(max_iter):
        grad = gram @ gamma
        k = int(np.argmin(grad))
        v1v1 = gamma @ grad
        v1v2 = grad[k]
        v2v2 = gram[k, k]
        step = _line_search(v1v1, v1v2, v2v2)
        new = step * gamma
        new[k] += 1 - step
        change = np.abs(new - gamma).sum()
        gamma = new
        if change < tol:
            break
    return gamma


def mgda_minnorm(grads: Sequence):
    """Returns ``(γ, Σ γ_t g_t)`` with γ the min-norm simplex weights."""
    g = _stack(grads)
    gamma = min_norm_weights(g @ g.T)
    return gamma, (gamma @ g).reshape(np.shape(grads[0]))


# ---------------------------------------------------------------- CAGrad

def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def cagrad_objective(w, gram: np.ndarray, c: float) -> float:
    """F(w) = g_wᵀg₀ + c‖g₀‖·‖g_w‖ evaluated through the Gram matrix."""
    T = gram.shape[0]
    g0g0 = gram.sum() / T ** 2
    b = gram.mean(axis=1)
    gwgw = max(float(w @ gram @ w), 0.0)
    return float(w @ b + c * np.sqrt(g0g0) * np.sqrt(gwgw))


def cagrad_weights(gram: np.ndarray, c: float, max_iter: int = CAGRAD_MAX_ITER) -> np.ndarray:
    """argmin of F over the simplex by SLSQP, started from uniform weights.

    The Gram matrix is rescaled by its mean diagonal first (the argmin is
    unchanged). A 1e-12 floor inside the square root keeps the objective
    differentiable where g_w vanishes.
    """
    T = gram.shape[0]
    if T == 1:
        return np.ones(1)
    scale = float(np.mean(np.diag(gram)))
    g = gram / scale if scale > 0 else gram
    b = g.mean(axis=1)
    sqrt_phi = c * np.sqrt(max(g.sum() / T ** 2, 0.0))

    def fun(w):
        gw = g @ w
        norm = np.sqrt(max(float(w @ gw), 0.0) + 1e-12)
        return float(w @ b + sqrt_phi * norm), b + sqrt_phi * gw / norm

    res = optimize.minimize(fun, np.full(T, 1.0 / T), jac=True, method="SLSQP",
                            bounds=[(0.0, 1.0)] * T,
                            constraints=[{"type": "eq", "fun": lambda w: w.sum() - 1.0,
                                          "jac": lambda w: np.ones_like(w)}],
                            options={"ftol": 1e-12, "maxiter": max_iter})
    return project_simplex(res.x)


def cagrad(grads: Sequence, c: float = 0.4) -> np.ndarray:
    """g₀ + (√φ/‖g_w*‖)·g_w* with w* minimizing F over the simplex."""
    if c < 0:
        raise BaselineError(f"CAGrad c must be >= 0, got {c}")
    g = _stack(grads)
    g0 = g.mean(axis=0)
    shape = np.shape(grads[0])
    if c == 0:
        return g0.reshape(shape)
    w = cagrad_weights(g @ g.T, c)
    gw = w @ g
    norm = np.linalg.norm(gw)
    if norm == 0:
        return g0.reshape(shape)
    return (g0 + c * np.linalg.norm(g0) / norm * gw).reshape(shape)


def manipulate(method: str, grads: Sequence, state: MtoState, rng: np.random.Generator) -> np.ndarray:
    if method == "pcgrad":
        return pcgrad(grads, rng)
    if method == "mgda":
        return mgda_minnorm(grads)[1]
    if method == "cagrad":
        return cagrad(grads, state.cagrad_c)
    raise BaselineError(f"{method!r} is not a gradient-manipulation method")
