"""Shared oracles for the test suite: finite differences and tiny models."""

from __future__ import annotations

import numpy as np

from repmtl.model import Batch, TaskSpec, build_model

TINY_TASKS = (TaskSpec("reg", "mse", 1), TaskSpec("cls", "cross_entropy", 2), TaskSpec("l1", "l1", 1))


def rel_err(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.linalg.norm(a), floor))


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def fd_param_grads(f, params: dict, names=None, h: float = 1e-5) -> dict:
    """Central differences of ``f(params)`` for each named parameter tensor."""
    names = sorted(params) if names is None else names
    out = {}
    for n in names:
        def g(v, n=n):
            return f({**params, n: v})
        out[n] = fd_grad(g, params[n], h)
    return out


def tiny_model(seed: int = 0, tasks=TINY_TASKS[:2], encoder: str = "conv"):
    """Conv encoder 1×4×4 -> 2×2×2, heads with 3 hidden units."""
    return build_model(tasks, input_shape=(1, 4, 4), channels=(2, 2), strides=(1, 2),
                       head_hidden=3, encoder=encoder, seed=seed)


def tiny_batch(model, n: int = 3, seed: int = 0) -> Batch:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, *model.input_shape))
    targets = {}
    for t in model.tasks:
        if t.loss == "cross_entropy":
            y = rng.integers(0, t.out_dim, size=n).astype(np.float64)
            y[0] = 0
            y[1 % n] = t.out_dim - 1
            targets[t.name] = y
        else:
            targets[t.name] = rng.normal(size=(n, t.out_dim))
    return Batch(x, targets, tuple(range(n)))


def perturb_biases(model, seed: int = 0, scale: float = 0.1):
    """Nonzero biases so relu kinks are not aligned with zero-initialized biases."""
    rng = np.random.default_rng(seed + 1000)
    params = {n: (v + scale * rng.normal(size=v.shape) if n.endswith(".bias") else v)
              for n, v in model.params.items()}
    return model.with_params(params)
