"""Relative-improvement metrics and power-law spectral analysis of weights.

Δp compares a method's metrics against single-task baselines, per metric and
per task. The spectral audit fits a power law to the tail of each weight
matrix's eigenvalue spectrum (ESD of WᵀW); the fitted exponent α is the
training-quality indicator from heavy-tailed self-regularization theory.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

DEFAULT_MIN_TAIL = 8
CLAMP_TOL = 1e-10

LABELS = ("under-trained", "well-trained", "intermediate", "over-or-under-trained")


class AnalysisError(ValueError):
    pass


# ---------------------------------------------------------------- Δp

@dataclass(frozen=True)
class Metric:
    name: str
    value: float
    lower_is_better: bool  # the sign σ: True means σ = 1


@dataclass(frozen=True)
class MetricTable:
    tasks: tuple  # of (task name, tuple of Metric)

    def __post_init__(self):
        for name, metrics in self.tasks:
            if len(metrics) < 1:
                raise AnalysisError(f"task {name!r} has no metrics")

    @classmethod
    def from_rows(cls, values: Sequence[float], lower_is_better: Sequence[int],
                  groups: Sequence[int], task_names: Optional[Sequence[str]] = None,
                  metric_names: Optional[Sequence[str]] = None) -> "MetricTable":
        """Build from flat rows: ``groups[i]`` is the task index of metric i."""
        if not (len(values) == len(lower_is_better) == len(groups)):
            raise AnalysisError("values, signs and groups must have equal length")
        n_tasks = max(groups) + 1
        names = list(task_names) if task_names else [f"task{t}" for t in range(n_tasks)]
        mnames = list(metric_names) if metric_names else [f"m{i}" for i in range(len(values))]
        tasks = []
        for t in range(n_tasks):
            ms = tuple(Metric(mnames[i], float(values[i]), bool(lower_is_better[i]))
                       for i in range(len(values)) if groups[i] == t)
            tasks.append((names[t], ms))
        return cls(tuple(tasks))

    def structure(self):
        return [(name, [(m.name, m.lower_is_better) for m in ms]) for name, ms in self.tasks]

    def to_dict(self) -> dict:
        return {name: {m.name: m.value for m in ms} for name, ms in self.tasks}


def metric_gains(method: MetricTable, baseline: MetricTable) -> list[list[float]]:
    """Per task, per metric: (−1)^σ·(M_m − M_b)/M_b."""
    if method.structure() != baseline.structure():
        raise AnalysisError("method and baseline tables differ in task/metric structure")
    out = []
    for (_, ms), (_, bs) in zip(method.tasks, baseline.tasks):
        row = []
        for m, b in zip(ms, bs):
            if b.value == 0:
                raise AnalysisError(f"baseline value of metric {b.name!r} is zero")
            g = (m.value - b.value) / b.value
            row.append(-g if m.lower_is_better else g)
        out.append(row)
    return out


def delta_p(method: MetricTable, baseline: MetricTable) -> tuple[float, float]:
    """Returns ``(Δp_task, Δp_metric)`` in percent.

    Δp_task averages within each task first (1/n_t), then over tasks;
    Δp_metric averages over all metrics.
    """
    gains = metric_gains(method, baseline)
    per_task = [sum(row) / len(row) for row in gains]
    flat = [g for row in gains for g in row]
    return 100.0 * sum(per_task) / len(per_task), 100.0 * sum(flat) / len(flat)


# ---------------------------------------------------------------- spectra

def as_matrix(w: np.ndarray) -> np.ndarray:
    """Conv kernels out×in×kh×kw become out×(in·kh·kw)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 4:
        return w.reshape(w.shape[0], -1)
    if w.ndim != 2:
        raise AnalysisError(f"expected a 2-D or 4-D weight, got shape {w.shape}")
    return w


def esd(w: np.ndarray) -> np.ndarray:
    """Ascending eigenvalues of the smaller Gram matrix of W, negatives clamped to 0."""
    w = as_matrix(w)
    if min(w.shape) < 2:
        raise AnalysisError(f"degenerate weight shape {w.shape}: need both dims >= 2")
    x = w @ w.T if w.shape[0] <= w.shape[1] else w.T @ w
    ev = np.linalg.eigvalsh(x)
    if ev[0] < -CLAMP_TOL * max(1.0, ev[-1]):
        raise AnalysisError(f"Gram matrix has a negative eigenvalue {ev[0]}")
    return np.maximum(ev, 0.0)


@dataclass(frozen=True)
class PlThresholds:
    well_lower: float = 2.0         # below: under-trained
    well_upper: float = 4.0         # [well_lower, well_upper]: well-trained
    intermediate_upper: float = 6.0  # (well_upper, this]: intermediate; above: over-or-under-trained

    def label(self, alpha: float) -> str:
        if alpha < self.well_lower:
            return LABELS[0]
        if alpha <= self.well_upper:
            return LABELS[1]
        if alpha <= self.intermediate_upper:
            return LABELS[2]
        return LABELS[3]


@dataclass(frozen=True)
class PlFit:
    alpha: float
    xmin: float
    ks: float
    n_tail: int
    label: str


def pl_fit(eigenvalues, min_tail: int = DEFAULT_MIN_TAIL,
           thresholds: PlThresholds = PlThresholds()) -> PlFit:
    """Power-law tail fit with xmin chosen by minimum KS distance.

    For each candidate xmin (a positive eigenvalue leaving at least
    ``min_tail`` values at or above it) the exponent is the maximum-likelihood
    estimate α = 1 + n / Σ ln(λ_i / xmin). Ratios λ_i/xmin are formed directly,
    so multiplying every eigenvalue by a power of two leaves α bit-identical.
    """
    if min_tail < 2:
        raise AnalysisError("min_tail must be >= 2")
    x = np.sort(np.asarray(eigenvalues, dtype=np.float64))
    x = x[x > 0]
    n = len(x)
    if n < min_tail:
        raise AnalysisError(f"insufficient tail: {n} positive eigenvalues, need >= {min_tail}")
    best = None
    for i in range(n - min_tail + 1):
        if i > 0 and x[i] == x[i - 1]:
            continue
        ratio = x[i:] / x[i]
        s = np.sum(np.log(ratio))
        if s <= 0:
            continue
        m = n - i
        alpha = 1.0 + m / s
        fitted = 1.0 - ratio ** (1.0 - alpha)
        k = np.arange(m)
        ks = float(np.max(np.maximum(np.abs(fitted - k / m), np.abs(fitted - (k + 1) / m))))
        if best is None or ks < best[0]:
            best = (ks, alpha, x[i], m)
    if best is None:
        raise AnalysisError("insufficient tail: all candidate tails are constant")
    ks, alpha, xmin, m = best
    return PlFit(float(alpha), float(xmin), ks, int(m), thresholds.label(alpha))


# ---------------------------------------------------------------- checkpoint audit

def part_of(name: str) -> Optional[str]:
    """Map a parameter name to ``backbone`` or ``head:<task>``."""
    if name.startswith("encoder."):
        return "backbone"
    if name.startswith("heads."):
        return "head:" + name.split(".")[1]
    return None


def qualifying(params: Mapping[str, np.ndarray], min_tail: int = DEFAULT_MIN_TAIL) -> dict:
    """Weight tensors whose ESD has at least ``min_tail`` positive eigenvalues."""
    out = {}
    for name in sorted(params):
        w = np.asarray(params[name])
        if w.ndim not in (2, 4):
            continue
        mat = as_matrix(w)
        if min(mat.shape) < max(2, min_tail):
            continue
        ev = esd(mat)
        if np.count_nonzero(ev > 0) >= min_tail:
            out[name] = ev
    return out


@dataclass
class PartAudit:
    part: str
    fits: dict          # layer name -> PlFit
    aggregate: float    # unweighted mean α over layers

    def to_dict(self) -> dict:
        return {"part": self.part, "aggregate_alpha": self.aggregate,
                "layers": {k: asdict(v) for k, v in self.fits.items()}}


def audit_part(params: Mapping[str, np.ndarray], part: str, min_tail: int = DEFAULT_MIN_TAIL,
               thresholds: PlThresholds = PlThresholds()) -> PartAudit:
    selected = {n: v for n, v in params.items() if part_of(n) == part}
    if not selected:
        raise AnalysisError(f"part {part!r} has no parameters")
    spectra = qualifying(selected, min_tail)
    if not spectra:
        raise AnalysisError(f"part {part!r} has no qualifying weight matrices")
    fits = {n: pl_fit(ev, min_tail, thresholds) for n, ev in spectra.items()}
    return PartAudit(part, fits, float(np.mean([f.alpha for f in fits.values()])))


@dataclass
class AuditReport:
    parts: dict = field(default_factory=dict)  # part -> PartAudit
    head_spread: Optional[float] = None

    def to_dict(self) -> dict:
        return {"parts": {k: v.to_dict() for k, v in self.parts.items()},
                "head_spread": self.head_spread}


def audit_checkpoint(params: Mapping[str, np.ndarray], parts: Optional[Sequence[str]] = None,
                     min_tail: int = DEFAULT_MIN_TAIL,
                     thresholds: PlThresholds = PlThresholds()) -> AuditReport:
    """Fit every qualifying matrix of the selected parts (default: all parts).

    ``head_spread`` is max − min of the per-head aggregate α (None with < 1 head).
    """
    if parts is None:
        parts = sorted({p for p in map(part_of, params) if p is not None})
    report = AuditReport()
    for part in parts:
        report.parts[part] = audit_part(params, part, min_tail, thresholds)
    heads = [a.aggregate for p, a in report.parts.items() if p.startswith("head:")]
    if heads:
        report.head_spread = float(max(heads) - min(heads))
    return report


def write_audit(report: AuditReport, json_path, csv_path=None) -> None:
    Path(json_path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    if csv_path is None:
        return
    with Path(csv_path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["part", "layer", "alpha", "xmin", "ks", "n_tail", "label"])
        for part, audit in report.parts.items():
            for layer, f in audit.fits.items():
                w.writerow([part, layer, repr(f.alpha), repr(f.xmin), repr(f.ks), f.n_tail, f.label])
