"""Synthetic multi-task datasets with controllable inter-task correlation.

Both scenarios plant K latent Gaussian factors h_0..h_{K-1} into 1×8×8 inputs
through fixed random spatial patterns, ``x = Σ_j h_j Φ_j + σ_x·noise``.

task-shift
    Heterogeneous tasks over the same inputs. Task 0 uses the shared
    functional f_0 = h_0; task t ≥ 1 uses f_t = ρ·h_0 + √(1−ρ²)·h_t.
    Regression targets are f_t + σ_n·ε, classification labels are
    1[f_t + σ_n·ε > 0]. Kinds alternate regression/classification by default.

domain-shift
    One binary classification task per domain; sample i belongs to domain
    i mod T and is labelled only for its own task (other tasks get -1,
    ignored by the loss). Labels come from the same ρ-mixture functionals,
    thresholded to match ``class_prior``; domain d rescales and offsets the
    input by a seeded per-domain affine map of strength ``domain_shift``.

Text format (``dump``/``load``)::

    #repmtl-dataset 1
    #meta {json: spec, input shape, task descriptors}
    id,domain,x0,...,x{D-1},<task names...>
    one row per sample, floats written with repr() so loading is bit-exact
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Iterator, Optional, Sequence

import numpy as np

from .model import IGNORE_LABEL, Batch, TaskSpec

SCENARIOS = ("task-shift", "domain-shift")
FORMAT_TAG = "#repmtl-dataset 1"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    scenario: str = "task-shift"
    n_tasks: int = 3
    n_samples: int = 600
    input_shape: tuple = (1, 8, 8)
    rho: float = 0.8
    noise: float = 0.1          # target noise σ_n
    input_noise: float = 0.1    # σ_x
    n_nuisance: int = 4         # extra latent factors unrelated to any task
    task_kinds: Optional[tuple] = None  # per task: "regression" | "classification"
    class_prior: float = 0.5
    domain_shift: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise DatasetError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.n_tasks < 2:
            raise DatasetError("need at least 2 tasks")
        if self.n_samples < 1:
            raise DatasetError("need at least one sample")
        if not 0.0 <= self.rho <= 1.0:
            raise DatasetError(f"rho must lie in [0, 1], got {self.rho}")
        if self.noise < 0 or self.input_noise < 0 or self.n_nuisance < 0 or self.domain_shift < 0:
            raise DatasetError("noise levels, nuisance count and domain shift must be >= 0")
        if not 0.0 < self.class_prior < 1.0:
            raise DatasetError(f"class_prior must lie in (0, 1), got {self.class_prior}")
        if len(self.input_shape) != 3:
            raise DatasetError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.task_kinds is not None:
            if len(self.task_kinds) != self.n_tasks:
                raise DatasetError("task_kinds must list one kind per task")
            if any(k not in ("regression", "classification") for k in self.task_kinds):
                raise DatasetError(f"unknown task kind in {self.task_kinds}")

    def kinds(self) -> tuple:
        if self.scenario == "domain-shift":
            return ("classification",) * self.n_tasks
        if self.task_kinds is not None:
            return tuple(self.task_kinds)
        return tuple("regression" if t % 2 == 0 else "classification" for t in range(self.n_tasks))


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray                 # N×C×H×W
    targets: dict                 # task -> N×1 (regression) or N (labels, -1 = unlabelled)
    tasks: tuple                  # TaskSpec per task
    ids: np.ndarray               # stable sample ids
    domains: np.ndarray           # domain index per sample (zeros for task-shift)
    functionals: dict = field(default_factory=dict, repr=False)  # task -> noiseless f_t
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], {k: v[idx] for k, v in self.targets.items()}, self.tasks,
                       self.ids[idx], self.domains[idx],
                       {k: v[idx] for k, v in self.functionals.items()}, dict(self.meta))

    def batch(self, idx=None) -> Batch:
        d = self if idx is None else self.subset(idx)
        return Batch(d.x, d.targets, tuple(int(i) for i in d.ids))


def _task_specs(kinds: Sequence[str], prefix: str) -> tuple:
    out = []
    for t, k in enumerate(kinds):
        if k == "regression":
            out.append(TaskSpec(f"{prefix}{t}", "mse", 1))
        else:
            out.append(TaskSpec(f"{prefix}{t}", "cross_entropy", 2))
    return tuple(out)


def _latent_inputs(spec: SyntheticSpec, rng: np.random.Generator, n_factors: int):
    d = int(np.prod(spec.input_shape))
    patterns = rng.normal(size=(n_factors, d))
    patterns /= np.linalg.norm(patterns, axis=1, keepdims=True)
    h = rng.normal(size=(spec.n_samples, n_factors))
    x = h @ patterns + spec.input_noise * rng.normal(size=(spec.n_samples, d))
    return h, x


def _functionals(h: np.ndarray, n_tasks: int, rho: float) -> list:
    mix = np.sqrt(1.0 - rho * rho)
    return [h[:, 0]] + [rho * h[:, 0] + mix * h[:, t] for t in range(1, n_tasks)]


def gen_task_shift(spec: SyntheticSpec) -> Dataset:
    if spec.scenario != "task-shift":
        raise DatasetError("gen_task_shift needs scenario 'task-shift'")
    rng = np.random.default_rng(spec.seed)
    n_factors = spec.n_tasks + spec.n_nuisance
    h, x = _latent_inputs(spec, rng, n_factors)
    fs = _functionals(h, spec.n_tasks, spec.rho)
    tasks = _task_specs(spec.kinds(), "t")
    targets, funcs = {}, {}
    for task, f in zip(tasks, fs):
        noisy = f + spec.noise * rng.normal(size=f.shape)
        if task.loss == "mse":
            targets[task.name] = noisy.reshape(-1, 1)
        else:
            targets[task.name] = (noisy > 0).astype(np.float64)
        funcs[task.name] = f
    n = spec.n_samples
    return Dataset(x.reshape((n,) + tuple(spec.input_shape)), targets, tasks, np.arange(n),
                   np.zeros(n, dtype=np.int64), funcs, {"spec": _spec_dict(spec)})


def gen_domain_shift(spec: SyntheticSpec) -> Dataset:
    if spec.scenario != "domain-shift":
        raise DatasetError("gen_domain_shift needs scenario 'domain-shift'")
    rng = np.random.default_rng(spec.seed)
    T, n = spec.n_tasks, spec.n_samples
    h, x = _latent_inputs(spec, rng, T + spec.n_nuisance)
    d = x.shape[1]
    scales = np.exp(0.5 * spec.domain_shift * rng.normal(size=T))
    offsets = spec.domain_shift * rng.normal(size=(T, 1)) * np.ones((1, d))
    domains = np.arange(n) % T
    x = scales[domains, None] * x + offsets[domains]
    fs = _functionals(h, T, spec.rho)
    # f_t + σ_n·ε is N(0, 1 + σ_n²); threshold it at the (1 − prior) quantile
    thr = NormalDist().inv_cdf(1.0 - spec.class_prior) * np.sqrt(1.0 + spec.noise ** 2)
    tasks = _task_specs(spec.kinds(), "d")
    targets, funcs = {}, {}
    for t, (task, f) in enumerate(zip(tasks, fs)):
        labels = (f + spec.noise * rng.normal(size=n) > thr).astype(np.float64)
        labels[domains != t] = IGNORE_LABEL
        targets[task.name] = labels
        funcs[task.name] = f
    return Dataset(x.reshape((n,) + tuple(spec.input_shape)), targets, tasks, np.arange(n),
                   domains.astype(np.int64), funcs, {"spec": _spec_dict(spec)})


def generate(spec: SyntheticSpec) -> Dataset:
    return gen_task_shift(spec) if spec.scenario == "task-shift" else gen_domain_shift(spec)


def _spec_dict(spec: SyntheticSpec) -> dict:
    d = dataclasses.asdict(spec)
    d["input_shape"] = list(spec.input_shape)
    d["task_kinds"] = list(spec.task_kinds) if spec.task_kinds is not None else None
    return d


def split(dataset: Dataset, fractions: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0):
    """Seeded shuffle, then contiguous train/val/test blocks of round(f·N) samples.

    The test block takes whatever remains so the split is exhaustive.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise DatasetError(f"need three non-negative fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    return tuple(dataset.subset(np.sort(p)) for p in parts)


def iterate_batches(dataset: Dataset, batch_size: int, rng: Optional[np.random.Generator] = None,
                    min_batch: int = 1) -> Iterator[Batch]:
    """Shuffled (if ``rng`` is given) mini-batches; a trailing batch smaller than
    ``min_batch`` is dropped."""
    if batch_size < 1:
        raise DatasetError("batch_size must be >= 1")
    n = len(dataset)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < min_batch:
            break
        yield dataset.batch(idx)


# ---------------------------------------------------------------- text format

def dump(dataset: Dataset, path) -> None:
    meta = {
        "input_shape": list(dataset.x.shape[1:]),
        "tasks": [dataclasses.asdict(t) for t in dataset.tasks],
        "meta": dataset.meta,
    }
    names = [t.name for t in dataset.tasks]
    d = int(np.prod(dataset.x.shape[1:]))
    flat = dataset.x.reshape(len(dataset), d)
    with Path(path).open("w", newline="") as fh:
        fh.write(FORMAT_TAG + "\n")
        fh.write("#meta " + json.dumps(meta, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(["id", "domain", *(f"x{i}" for i in range(d)), *names])
        for i in range(len(dataset)):
            ys = [repr(float(dataset.targets[k][i].reshape(-1)[0])) for k in names]
            w.writerow([int(dataset.ids[i]), int(dataset.domains[i]),
                        *(repr(float(v)) for v in flat[i]), *ys])


def load(path) -> Dataset:
    with Path(path).open(newline="") as fh:
        tag = fh.readline().rstrip("\n")
        if tag != FORMAT_TAG:
            raise DatasetError(f"not a dataset file (first line {tag!r})")
        meta_line = fh.readline()
        if not meta_line.startswith("#meta "):
            raise DatasetError("missing #meta header line")
        meta = json.loads(meta_line[len("#meta "):])
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    shape = tuple(meta["input_shape"])
    tasks = tuple(TaskSpec(**t) for t in meta["tasks"])
    d = int(np.prod(shape))
    if len(header) != 2 + d + len(tasks):
        raise DatasetError("column count does not match header metadata")
    arr = np.array([[float(v) for v in r] for r in body], dtype=np.float64).reshape(len(body), len(header))
    targets = {}
    for j, t in enumerate(tasks):
        col = arr[:, 2 + d + j]
        targets[t.name] = col.reshape(-1, 1) if t.loss != "cross_entropy" else col
    return Dataset(arr[:, 2:2 + d].reshape((len(body),) + shape), targets, tasks,
                   arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), {}, meta.get("meta", {}))


# ---------------------------------------------------------------- evaluation metrics

def task_metric_specs(task: TaskSpec) -> list[tuple[str, bool]]:
    """(metric name, lower_is_better) per task kind."""
    if task.is_classification:
        return [("accuracy", False)]
    return [("mae", True), ("rmse", True)]


def evaluate_predictions(task: TaskSpec, pred: np.ndarray, target: np.ndarray) -> dict:
    if task.is_classification:
        labels = np.asarray(target).reshape(-1)
        keep = labels != IGNORE_LABEL
        if not keep.any():
            raise DatasetError(f"task {task.name!r} has no labelled samples to evaluate")
        hits = np.argmax(pred, axis=1)[keep] == labels[keep]
        return {"accuracy": float(np.mean(hits))}
    err = pred.reshape(-1) - np.asarray(target).reshape(-1)
    return {"mae": float(np.mean(np.abs(err))), "rmse": float(np.sqrt(np.mean(err ** 2)))}
