"""Experiment orchestration: config parsing, training runs, sweeps and repeats.

A run trains one single-task (STL) model per task plus the configured
multi-task method on the same seeded data split, evaluates both on the test
split, computes Δp of the method against the STL baselines and audits the
final multi-task checkpoint with the power-law fit.

Outputs per run directory:
    metrics.csv   one row per (epoch, method); methods are "stl" and the MTL method
    report.json   numeric report (validated against REPORT_SCHEMA)
    timing.json   wall-clock per epoch, kept apart so report.json is reproducible
    checkpoint.rmt   final MTL parameters (tensorio format)
    curves.svg    training-loss curves (optional)
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import jsonschema
import numpy as np
import yaml

from . import analysis, baselines, benchmarks, plots, tensorio
from . import objective as obj
from .model import HpsModel, build_model, predict

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "REPMTL_OUTPUT_ROOT"
DEFAULT_LAMBDA_GRID = (0.7, 0.9, 1.1, 1.3, 1.5)
DEFAULT_LR_GRID = tuple(round(1e-4 + 5e-5 * i, 10) for i in range(9))


class ConfigError(ValueError):
    pass


class RunError(RuntimeError):
    pass


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class ModelConfig:
    encoder: str = "conv"
    channels: tuple = (8, 8)
    strides: tuple = (1, 2)
    head_hidden: int = 16


@dataclass(frozen=True)
class MethodConfig:
    name: str = "repmtl"
    dwa_temp: float = 2.0
    gradnorm_alpha: float = 1.5
    gradnorm_lr: float = 0.025
    cagrad_c: float = 0.4


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 20
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 1e-4
    weight_decay: float = 1e-5
    halve_at: Optional[int] = None   # epoch index from which the learning rate is halved
    split: tuple = (0.6, 0.2, 0.2)
    min_batch: int = 2               # trailing batches smaller than this are dropped


@dataclass(frozen=True)
class AnalysisConfig:
    min_tail: int = analysis.DEFAULT_MIN_TAIL
    well_lower: float = 2.0
    well_upper: float = 4.0
    intermediate_upper: float = 6.0

    def thresholds(self) -> analysis.PlThresholds:
        return analysis.PlThresholds(self.well_lower, self.well_upper, self.intermediate_upper)


@dataclass(frozen=True)
class OutputConfig:
    dir: Optional[str] = None
    name: Optional[str] = None
    plots: bool = True
    checkpoint: bool = True


@dataclass(frozen=True)
class RunConfig:
    dataset: benchmarks.SyntheticSpec = benchmarks.SyntheticSpec()
    dataset_seed: Optional[int] = None  # None: follow the run seed
    model: ModelConfig = ModelConfig()
    method: MethodConfig = MethodConfig()
    rep: obj.RepHyper = obj.RepHyper()
    training: TrainingConfig = TrainingConfig()
    analysis: AnalysisConfig = AnalysisConfig()
    output: OutputConfig = OutputConfig()
    seed: int = 0

    def data_spec(self) -> benchmarks.SyntheticSpec:
        seed = self.seed if self.dataset_seed is None else self.dataset_seed
        return dataclasses.replace(self.dataset, seed=seed)


_SECTIONS = {
    "dataset": benchmarks.SyntheticSpec,
    "model": ModelConfig,
    "method": MethodConfig,
    "rep": obj.RepHyper,
    "training": TrainingConfig,
    "analysis": AnalysisConfig,
    "output": OutputConfig,
}
_TUPLE_FIELDS = {"input_shape", "task_kinds", "channels", "strides", "split"}


def _section(cls, raw: Mapping, where: str):
    if not isinstance(raw, Mapping):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where!r}: {', '.join(unknown)}")
    kwargs = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where!r} section: {exc}") from exc


def config_from_dict(raw: Optional[Mapping]) -> RunConfig:
    raw = dict(raw or {})
    unknown = sorted(set(raw) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs: dict[str, Any] = {}
    if "seed" in raw:
        if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
            raise ConfigError("seed must be an integer")
        kwargs["seed"] = raw["seed"]
    for name, cls in _SECTIONS.items():
        if name not in raw:
            continue
        section = dict(raw[name] or {})
        if name == "dataset" and "seed" in section:
            kwargs["dataset_seed"] = section.pop("seed")
        kwargs[name] = _section(cls, section, name)
    cfg = RunConfig(**kwargs)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(raw)


def config_to_dict(cfg: RunConfig) -> dict:
    out: dict[str, Any] = {"seed": cfg.seed}
    for name in _SECTIONS:
        sec = dataclasses.asdict(getattr(cfg, name))
        out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
    out["dataset"].pop("seed")
    if cfg.dataset_seed is not None:
        out["dataset"]["seed"] = cfg.dataset_seed
    return out


def validate(cfg: RunConfig) -> None:
    if cfg.method.name not in baselines.METHODS:
        raise ConfigError(f"unknown method {cfg.method.name!r}; expected one of {baselines.METHODS}")
    t = cfg.training
    if t.epochs < 0:
        raise ConfigError("training.epochs must be >= 0")
    if t.batch_size < 1 or t.min_batch < 1:
        raise ConfigError("training.batch_size and training.min_batch must be >= 1")
    if not t.lr > 0:
        raise ConfigError("training.lr must be > 0")
    if t.optimizer not in ("adam", "sgd"):
        raise ConfigError(f"unknown optimizer {t.optimizer!r}")
    if len(t.split) != 3 or abs(sum(t.split) - 1.0) > 1e-9 or any(f < 0 for f in t.split):
        raise ConfigError(f"training.split must be three non-negative fractions summing to 1, got {t.split}")
    if cfg.model.encoder not in ("conv", "mlp"):
        raise ConfigError(f"unknown encoder {cfg.model.encoder!r}")
    if len(cfg.model.channels) != len(cfg.model.strides):
        raise ConfigError("model.channels and model.strides must have equal length")
    uses_csa = cfg.method.name == "repmtl" or (
        cfg.method.name in baselines.GRADIENT_MANIPULATION and cfg.rep.combine_with_manipulation)
    if uses_csa and cfg.rep.lambda_csa > 0 and min(t.batch_size, t.min_batch) < 2:
        raise ConfigError("alignment needs batches of at least 2 samples (batch_size and min_batch >= 2)")


def with_overrides(cfg: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Apply dotted-key overrides such as ``{"rep.lambda_tsr": 0.7, "seed": 3}``."""
    raw = config_to_dict(cfg)
    for key, value in overrides.items():
        parts = key.split(".")
        node = raw
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown override key {key!r}")
            node = node[p]
        node[parts[-1]] = value
    return config_from_dict(raw)


def output_root(cfg: RunConfig) -> Path:
    if cfg.output.dir:
        return Path(cfg.output.dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


# ---------------------------------------------------------------- evaluation

def evaluate(model: HpsModel, data: benchmarks.Dataset) -> dict:
    preds = predict(model, data.x)
    return {t.name: benchmarks.evaluate_predictions(t, preds[t.name], data.targets[t.name])
            for t in model.tasks}


def metric_table(evals: Mapping[str, Mapping[str, float]], tasks) -> analysis.MetricTable:
    rows = []
    for t in tasks:
        ms = tuple(analysis.Metric(m, evals[t.name][m], lower)
                   for m, lower in benchmarks.task_metric_specs(t))
        rows.append((t.name, ms))
    return analysis.MetricTable(tuple(rows))


def _opt_config(cfg: RunConfig) -> obj.OptimizerConfig:
    t = cfg.training
    return obj.OptimizerConfig(kind=t.optimizer, lr=t.lr, weight_decay=t.weight_decay)


def _mto_state(cfg: RunConfig, method: str, n_tasks: int) -> baselines.MtoState:
    m = cfg.method
    return baselines.MtoState(method, n_tasks, dwa_temp=m.dwa_temp, gradnorm_alpha=m.gradnorm_alpha,
                              gradnorm_lr=m.gradnorm_lr, cagrad_c=m.cagrad_c)


@dataclass
class TrainResult:
    model: HpsModel
    rows: list            # per-epoch dicts
    initial: dict         # evaluation before training
    epoch_seconds: list


def train(cfg: RunConfig, model: HpsModel, method: str, train_set, val_set,
          hyper: obj.RepHyper, label: str) -> TrainResult:
    """Seeded training loop for one model; returns the final model and per-epoch rows."""
    t = cfg.training
    state = _mto_state(cfg, method, len(model.tasks))
    opt_cfg = _opt_config(cfg)
    opt_state = obj.OptimizerState()
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    method_rng = np.random.default_rng([cfg.seed, 2])
    initial = evaluate(model, val_set)
    rows, seconds = [], []
    task_names = model.task_names
    for epoch in range(t.epochs):
        started = time.perf_counter()
        if t.halve_at is not None and epoch >= t.halve_at:
            opt_state.lr_scale = 0.5
        sums = {k: 0.0 for k in task_names}
        reg = {"l_tsr": 0.0, "l_csa": 0.0, "total": 0.0, "shared_grad_norm": 0.0, "n_excluded": 0}
        has = {"l_tsr": False, "l_csa": False}
        steps = 0
        for batch in benchmarks.iterate_batches(train_set, t.batch_size, shuffle_rng, t.min_batch):
            try:
                model, bd, diag, opt_state = obj.train_step(
                    model, batch, state, opt_state, hyper, opt_cfg, method_rng)
            except (obj.TrainingError, FloatingPointError) as exc:
                raise RunError(f"{label}: training diverged at epoch {epoch}, step {steps}: {exc}") from exc
            steps += 1
            for k in task_names:
                sums[k] += bd.task_losses[k]
            for k in ("l_tsr", "l_csa"):
                v = getattr(bd, k)
                if v is not None:
                    reg[k] += v
                    has[k] = True
            reg["total"] += bd.total
            reg["shared_grad_norm"] += diag["shared_grad_norm"]
            reg["n_excluded"] += bd.n_excluded
        if steps == 0:
            raise RunError(f"{label}: training split yields no batch of at least {t.min_batch} samples")
        if not np.isfinite(reg["total"]):
            raise RunError(f"{label}: non-finite loss at epoch {epoch}")
        mean_losses = [sums[k] / steps for k in task_names]
        state.end_epoch(mean_losses)
        row = {"epoch": epoch, "method": label}
        row.update({f"loss_{k}": v for k, v in zip(task_names, mean_losses)})
        row["l_tsr"] = reg["l_tsr"] / steps if has["l_tsr"] else None
        row["l_csa"] = reg["l_csa"] / steps if has["l_csa"] else None
        row["total"] = reg["total"] / steps
        row["shared_grad_norm"] = reg["shared_grad_norm"] / steps
        row["n_excluded"] = reg["n_excluded"]
        row["val"] = evaluate(model, val_set)
        rows.append(row)
        seconds.append(time.perf_counter() - started)
    return TrainResult(model, rows, initial, seconds)


_STL_CACHE: dict = {}


def _stl_key(cfg: RunConfig) -> str:
    d = config_to_dict(cfg)
    key = {k: d[k] for k in ("seed", "dataset", "model", "training")}
    key["dataset_seed"] = cfg.dataset_seed
    return json.dumps(key, sort_keys=True)


def train_stl(cfg: RunConfig, base: HpsModel, train_set, val_set) -> dict:
    """One single-task model per task, each starting from the shared initialization."""
    key = _stl_key(cfg)
    if key in _STL_CACHE:
        return _STL_CACHE[key]
    out = {}
    for task in base.task_names:
        single = base.single_task(task)
        out[task] = train(cfg, single, "ew", train_set, val_set, obj.EW_HYPER, f"stl:{task}")
    _STL_CACHE[key] = out
    return out


def clear_stl_cache() -> None:
    _STL_CACHE.clear()


def _merge_stl_rows(stl: Mapping[str, TrainResult], epochs: int, task_names) -> list:
    rows = []
    for e in range(epochs):
        row = {"epoch": e, "method": "stl"}
        val = {}
        total = 0.0
        for t in task_names:
            r = stl[t].rows[e]
            row[f"loss_{t}"] = r[f"loss_{t}"]
            total += r["total"]
            val[t] = r["val"][t]
        row.update({"l_tsr": None, "l_csa": None, "total": total,
                    "shared_grad_norm": None, "n_excluded": 0, "val": val})
        rows.append(row)
    return rows


# ---------------------------------------------------------------- run

@dataclass
class RunResult:
    config: RunConfig
    report: dict
    rows: list
    timing: dict
    checkpoint: dict = field(repr=False, default_factory=dict)
    out_dir: Optional[Path] = None

    @property
    def delta_p_task(self) -> float:
        return self.report["delta_p"]["task"]

    @property
    def delta_p_metric(self) -> float:
        return self.report["delta_p"]["metric"]

    @property
    def head_spread(self) -> Optional[float]:
        return self.report["audit"]["head_spread"]


def _hyper_for_run(cfg: RunConfig) -> obj.RepHyper:
    if cfg.dataset.scenario == "domain-shift" and cfg.rep.csa_exclusion == "sample":
        # every sample is labelled for one task only, so other tasks' saliency is zero there
        return dataclasses.replace(cfg.rep, csa_exclusion="pair")
    return cfg.rep


def run(cfg: RunConfig, write: bool = True, out_dir=None) -> RunResult:
    validate(cfg)
    data = benchmarks.generate(cfg.data_spec())
    train_set, val_set, test_set = benchmarks.split(data, cfg.training.split, seed=cfg.seed)
    if len(train_set) == 0 or len(test_set) == 0:
        raise RunError("train and test splits must be nonempty")
    base = build_model(data.tasks, input_shape=data.x.shape[1:], channels=cfg.model.channels,
                       strides=cfg.model.strides, head_hidden=cfg.model.head_hidden,
                       encoder=cfg.model.encoder, seed=cfg.seed)
    tasks = data.tasks
    stl = train_stl(cfg, base, train_set, val_set)
    method = cfg.method.name
    mtl = train(cfg, base, method, train_set, val_set, _hyper_for_run(cfg), method)

    stl_test = {t.name: evaluate(stl[t.name].model, test_set)[t.name] for t in tasks}
    mtl_test = evaluate(mtl.model, test_set)
    dp_task, dp_metric = analysis.delta_p(metric_table(mtl_test, tasks), metric_table(stl_test, tasks))
    audit = analysis.audit_checkpoint(mtl.model.params, min_tail=cfg.analysis.min_tail,
                                      thresholds=cfg.analysis.thresholds())
    rows = []
    stl_rows = _merge_stl_rows(stl, cfg.training.epochs, [t.name for t in tasks])
    for e in range(cfg.training.epochs):
        rows.append(stl_rows[e])
        rows.append(mtl.rows[e])
    report = {
        "schema_version": 1,
        "config": config_to_dict(cfg),
        "methods": ["stl", method],
        "tasks": [dataclasses.asdict(t) for t in tasks],
        "epochs": cfg.training.epochs,
        "initial": {"stl": {t.name: stl[t.name].initial[t.name] for t in tasks}, method: mtl.initial},
        "final": {"stl": stl_test, method: mtl_test},
        "delta_p": {"task": dp_task, "metric": dp_metric},
        "audit": audit.to_dict(),
        "n_excluded": int(sum(r["n_excluded"] for r in mtl.rows)),
    }
    timing = {"stl": {t: stl[t].epoch_seconds for t in stl}, method: mtl.epoch_seconds}
    result = RunResult(cfg, report, rows, timing, dict(mtl.model.params))
    if write:
        result.out_dir = write_run(result, out_dir)
    return result


# ---------------------------------------------------------------- persistence

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "config", "methods", "tasks", "epochs", "initial", "final",
                 "delta_p", "audit", "n_excluded"],
    "properties": {
        "schema_version": {"const": 1},
        "config": {"type": "object"},
        "methods": {"type": "array", "items": {"type": "string"}, "minItems": 2},
        "tasks": {"type": "array", "minItems": 1, "items": {
            "type": "object", "required": ["name", "loss", "out_dim"]}},
        "epochs": {"type": "integer", "minimum": 0},
        "initial": {"type": "object"},
        "final": {"type": "object", "additionalProperties": {
            "type": "object", "additionalProperties": {
                "type": "object", "additionalProperties": {"type": "number"}}}},
        "delta_p": {"type": "object", "required": ["task", "metric"],
                    "properties": {"task": {"type": "number"}, "metric": {"type": "number"}}},
        "audit": {"type": "object", "required": ["parts", "head_spread"], "properties": {
            "head_spread": {"type": ["number", "null"]},
            "parts": {"type": "object", "additionalProperties": {
                "type": "object", "required": ["aggregate_alpha", "layers"]}}}},
        "n_excluded": {"type": "integer", "minimum": 0},
    },
}


def csv_columns(task_names: Sequence[str], tasks) -> list:
    cols = ["epoch", "method", *(f"loss_{t}" for t in task_names),
            "l_tsr", "l_csa", "total", "shared_grad_norm", "n_excluded"]
    for t in tasks:
        cols += [f"val_{t.name}_{m}" for m, _ in benchmarks.task_metric_specs(t)]
    return cols


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(rows: Sequence[Mapping], tasks, path) -> None:
    from .model import TaskSpec
    specs = [TaskSpec(**t) if isinstance(t, Mapping) else t for t in tasks]
    cols = csv_columns([t.name for t in specs], specs)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            flat = {k: v for k, v in r.items() if k != "val"}
            for t, ms in r["val"].items():
                flat.update({f"val_{t}_{m}": v for m, v in ms.items()})
            w.writerow([_fmt(flat.get(c)) for c in cols])


def dumps_json(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_run(result: RunResult, out_dir=None) -> Path:
    cfg = result.config
    if out_dir is None:
        name = cfg.output.name or f"{cfg.method.name}-seed{cfg.seed}"
        out_dir = output_root(cfg) / name
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jsonschema.validate(result.report, REPORT_SCHEMA)
    write_csv(result.rows, result.report["tasks"], out_dir / "metrics.csv")
    (out_dir / "report.json").write_text(dumps_json(result.report))
    (out_dir / "timing.json").write_text(dumps_json(result.timing))
    if cfg.output.checkpoint:
        tensorio.save(out_dir / "checkpoint.rmt", result.checkpoint)
    if cfg.output.plots and result.rows:
        series = {}
        for r in result.rows:
            xs, ys = series.setdefault(r["method"], ([], []))
            xs.append(r["epoch"])
            ys.append(r["total"])
        (out_dir / "curves.svg").write_text(
            plots.line_chart(series, "training loss", "epoch", "mean total loss"))
    return out_dir


# ---------------------------------------------------------------- repeat & sweep

def aggregate(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "values": [float(v) for v in arr]}


def repeat(cfg: RunConfig, n_seeds: int = 3, write: bool = True, out_dir=None) -> dict:
    """Runs seeds ``seed .. seed+n−1``; mean and population std of Δp and head α spread."""
    if n_seeds < 1:
        raise ConfigError("repeat needs n_seeds >= 1")
    root = Path(out_dir) if out_dir is not None else output_root(cfg) / (
        cfg.output.name or f"{cfg.method.name}-repeat")
    results = []
    for i in range(n_seeds):
        c = dataclasses.replace(cfg, seed=cfg.seed + i)
        results.append(run(c, write=write, out_dir=root / f"seed{c.seed}" if write else None))
    spreads = [r.head_spread for r in results if r.head_spread is not None]
    summary = {
        "method": cfg.method.name,
        "seeds": [r.config.seed for r in results],
        "delta_p_task": aggregate([r.delta_p_task for r in results]),
        "delta_p_metric": aggregate([r.delta_p_metric for r in results]),
        "head_spread": aggregate(spreads) if spreads else None,
        "alpha": {part: aggregate([r.report["audit"]["parts"][part]["aggregate_alpha"] for r in results])
                  for part in sorted(results[0].report["audit"]["parts"])},
    }
    if write:
        root.mkdir(parents=True, exist_ok=True)
        (root / "repeat.json").write_text(dumps_json(summary))
    return summary


def compare(configs: Mapping[str, RunConfig], n_seeds: int = 5, write: bool = True, out_dir=None) -> dict:
    """``repeat`` for several labelled configs; writes compare.json and an α-per-part chart."""
    if not configs:
        raise ConfigError("compare needs at least one config")
    first = next(iter(configs.values()))
    root = Path(out_dir) if out_dir is not None else output_root(first) / "compare"
    summaries = {label: repeat(c, n_seeds, write, root / label) for label, c in configs.items()}
    if write:
        root.mkdir(parents=True, exist_ok=True)
        (root / "compare.json").write_text(dumps_json(summaries))
        labels = list(summaries)
        parts = sorted({p for s in summaries.values() for p in s["alpha"]})
        series = {p: (list(range(len(labels))),
                      [summaries[lab]["alpha"].get(p, {}).get("mean") for lab in labels]) for p in parts}
        (root / "alpha.svg").write_text(
            plots.line_chart(series, "PL exponent α per part", "method", "mean α", xticklabels=labels))
    return summaries


def default_lambda_grid() -> dict:
    """One-at-a-time λ grid: each axis over 5 values while the other stays at 0.9."""
    return {"mode": "one-at-a-time",
            "base": {"rep.lambda_tsr": 0.9, "rep.lambda_csa": 0.9},
            "axes": {"rep.lambda_tsr": list(DEFAULT_LAMBDA_GRID),
                     "rep.lambda_csa": list(DEFAULT_LAMBDA_GRID)},
            "seeds": 1}


def default_lr_grid() -> dict:
    return {"mode": "one-at-a-time", "axes": {"training.lr": list(DEFAULT_LR_GRID)}, "seeds": 1}


def grid_points(grid: Mapping) -> list:
    """Expand a grid spec into ``(axis label, value, overrides)`` triples."""
    unknown = sorted(set(grid) - {"mode", "axes", "base", "seeds"})
    if unknown:
        raise ConfigError(f"unknown grid key(s): {', '.join(unknown)}")
    axes = grid.get("axes") or {}
    if not axes or any(not list(v) for v in axes.values()):
        raise ConfigError("grid needs at least one axis with at least one value")
    base = dict(grid.get("base") or {})
    mode = grid.get("mode", "one-at-a-time")
    points = []
    if mode == "one-at-a-time":
        for axis, values in axes.items():
            for v in values:
                points.append((axis, v, {**base, axis: v}))
    elif mode == "product":
        import itertools
        names = list(axes)
        for combo in itertools.product(*(axes[n] for n in names)):
            over = {**base, **dict(zip(names, combo))}
            points.append(("×".join(names), list(combo), over))
    else:
        raise ConfigError(f"unknown grid mode {mode!r}")
    return points


def load_grid(path) -> dict:
    try:
        grid = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse grid {path}: {exc}") from exc
    if grid in (None, "default-lambda"):
        return default_lambda_grid()
    if grid == "default-lr":
        return default_lr_grid()
    if not isinstance(grid, Mapping):
        raise ConfigError("grid file must hold a mapping")
    return dict(grid)


def sweep(cfg: RunConfig, grid: Mapping, write: bool = True, out_dir=None) -> dict:
    """One run per grid point and seed; Δp_task mean ± std per point."""
    points = grid_points(grid)
    n_seeds = int(grid.get("seeds", 1))
    if n_seeds < 1:
        raise ConfigError("grid seeds must be >= 1")
    root = Path(out_dir) if out_dir is not None else output_root(cfg) / (cfg.output.name or "sweep")
    configs = [with_overrides(cfg, over) for _, _, over in points]  # validate all before training
    cache: dict = {}
    rows = []
    for i, ((axis, value, over), pcfg) in enumerate(zip(points, configs)):
        key = json.dumps(config_to_dict(pcfg), sort_keys=True)
        if key not in cache:
            res = []
            for s in range(n_seeds):
                c = dataclasses.replace(pcfg, seed=pcfg.seed + s)
                res.append(run(c, write=write, out_dir=root / f"point{i}" / f"seed{c.seed}" if write else None))
            cache[key] = res
        res = cache[key]
        rows.append({"axis": axis, "value": value, "overrides": over,
                     "delta_p_task": aggregate([r.delta_p_task for r in res]),
                     "delta_p_metric": aggregate([r.delta_p_metric for r in res])})
    summary = {"grid": {"mode": grid.get("mode", "one-at-a-time"), "axes": grid["axes"], "seeds": n_seeds},
               "points": rows, "n_runs": len(cache) * n_seeds}
    if write:
        root.mkdir(parents=True, exist_ok=True)
        (root / "sweep.json").write_text(dumps_json(summary))
        with (root / "sweep.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["axis", "value", "dp_task_mean", "dp_task_std", "dp_metric_mean", "dp_metric_std"])
            for r in rows:
                w.writerow([r["axis"], r["value"], repr(r["delta_p_task"]["mean"]), repr(r["delta_p_task"]["std"]),
                            repr(r["delta_p_metric"]["mean"]), repr(r["delta_p_metric"]["std"])])
        if cfg.output.plots:
            series = {}
            for r in rows:
                if isinstance(r["value"], (int, float)):
                    xs, ys = series.setdefault(r["axis"], ([], []))
                    xs.append(float(r["value"]))
                    ys.append(r["delta_p_task"]["mean"])
            if series:
                (root / "sweep.svg").write_text(
                    plots.line_chart(series, "Δp_task vs hyperparameter", "value", "Δp_task (%)"))
    return summary


def analyze_checkpoint(path, out_dir=None, min_tail: int = analysis.DEFAULT_MIN_TAIL,
                       write_csv_file: bool = True) -> dict:
    params = tensorio.load(path)
    report = analysis.audit_checkpoint(params, min_tail=min_tail)
    out_dir = Path(out_dir) if out_dir is not None else Path(path).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    analysis.write_audit(report, out_dir / "audit.json",
                         out_dir / "audit.csv" if write_csv_file else None)
    return report.to_dict()
