"""Hard-parameter-sharing model: shared conv/MLP encoder plus per-task heads."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad

LOSS_KINDS = ("mse", "l1", "cross_entropy")
IGNORE_LABEL = -1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" or "linear"
    in_dim: int
    out_dim: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    activation: Optional[str] = "relu"

    def weight_shape(self):
        if self.kind == "conv":
            return (self.out_dim, self.in_dim, self.kernel, self.kernel)
        return (self.out_dim, self.in_dim)

    def fans(self):
        if self.kind == "conv":
            rf = self.kernel * self.kernel
            return self.in_dim * rf, self.out_dim * rf
        return self.in_dim, self.out_dim


@dataclass(frozen=True)
class TaskSpec:
    name: str
    loss: str  # one of LOSS_KINDS
    out_dim: int
    log_transform: bool = False

    @property
    def is_classification(self) -> bool:
        return self.loss == "cross_entropy"


@dataclass(frozen=True)
class Batch:
    x: np.ndarray
    targets: Mapping[str, np.ndarray]
    ids: Sequence[int] = ()

    def __post_init__(self):
        n = self.x.shape[0]
        if n < 1:
            raise ModelError("batch must contain at least one sample")
        for name, y in self.targets.items():
            if y.shape[0] != n:
                raise ModelError(f"target {name!r} has leading dim {y.shape[0]}, expected {n}")

    @property
    def size(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class HpsModel:
    """Parameters plus architecture. Instances are never mutated in place."""

    input_shape: tuple
    encoder: tuple
    heads: Mapping[str, tuple]
    tasks: tuple
    params: Mapping[str, np.ndarray] = field(repr=False)

    @property
    def task_names(self) -> list[str]:
        return [t.name for t in self.tasks]

    @property
    def shared_names(self) -> list[str]:
        return sorted(n for n in self.params if n.startswith("encoder."))

    def task_param_names(self, task: str) -> list[str]:
        prefix = f"heads.{task}."
        return sorted(n for n in self.params if n.startswith(prefix))

    @property
    def representation_shape(self) -> tuple:
        c, h, w = self.input_shape
        for layer in self.encoder:
            if layer.kind == "conv":
                h = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
                w = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
                c = layer.out_dim
            else:
                c, h, w = layer.out_dim, 1, 1
        return (c, h, w)

    def with_params(self, params: Mapping[str, np.ndarray]) -> "HpsModel":
        return dataclasses.replace(self, params=dict(params))

    def single_task(self, task: str) -> "HpsModel":
        """Same encoder, only ``task``'s head (used for single-task baselines)."""
        keep = {n: v for n, v in self.params.items()
                if n.startswith("encoder.") or n.startswith(f"heads.{task}.")}
        spec = [t for t in self.tasks if t.name == task]
        return dataclasses.replace(self, heads={task: self.heads[task]},
                                   tasks=tuple(spec), params=keep)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def build_model(tasks: Sequence[TaskSpec], input_shape=(1, 8, 8), channels=(8, 8),
                strides=(1, 2), head_hidden: int = 16, encoder: str = "conv",
                seed: int = 0) -> HpsModel:
    """Seeded HPS model.

    The default conv encoder maps 1×8×8 inputs to an 8×4×4 representation.
    Heads are ``flatten -> linear(head_hidden) -> relu -> linear(out)``; with
    ``head_hidden=0`` a head is a single linear layer.
    """
    if len(channels) != len(strides):
        raise ModelError("channels and strides must have equal length")
    names = [t.name for t in tasks]
    if len(set(names)) != len(names) or not names:
        raise ModelError(f"task names must be unique and nonempty: {names}")
    for t in tasks:
        if t.loss not in LOSS_KINDS:
            raise ModelError(f"unknown loss kind {t.loss!r}; expected one of {LOSS_KINDS}")
    c_in = input_shape[0]
    layers = []
    if encoder == "conv":
        for c_out, s in zip(channels, strides):
            layers.append(LayerSpec("conv", c_in, c_out, kernel=3, stride=s, padding=1))
            c_in = c_out
    elif encoder == "mlp":
        d = int(np.prod(input_shape))
        for c_out in channels:
            layers.append(LayerSpec("linear", d, c_out))
            d = c_out
    else:
        raise ModelError(f"unknown encoder kind {encoder!r}")

    rng = np.random.default_rng(seed)
    params = {}
    for i, layer in enumerate(layers):
        fi, fo = layer.fans()
        params[f"encoder.{i}.weight"] = glorot_uniform(rng, layer.weight_shape(), fi, fo)
        params[f"encoder.{i}.bias"] = np.zeros(layer.out_dim)

    proto = HpsModel(tuple(input_shape), tuple(layers), {}, tuple(tasks), {})
    rep_dim = int(np.prod(proto.representation_shape))
    heads = {}
    for t in tasks:
        if head_hidden:
            hl = (LayerSpec("linear", rep_dim, head_hidden),
                  LayerSpec("linear", head_hidden, t.out_dim, activation=None))
        else:
            hl = (LayerSpec("linear", rep_dim, t.out_dim, activation=None),)
        heads[t.name] = hl
        for i, layer in enumerate(hl):
            fi, fo = layer.fans()
            params[f"heads.{t.name}.{i}.weight"] = glorot_uniform(rng, layer.weight_shape(), fi, fo)
            params[f"heads.{t.name}.{i}.bias"] = np.zeros(layer.out_dim)
    return HpsModel(tuple(input_shape), tuple(layers), heads, tuple(tasks), params)


def bind_params(model: HpsModel, tape: ad.Tape) -> dict[str, ad.Node]:
    """Register every parameter as a leaf on ``tape`` (sorted name order)."""
    return {name: tape.leaf(model.params[name], name=name) for name in sorted(model.params)}


def _apply(layer: LayerSpec, h, w, b):
    if layer.kind == "conv":
        out = ad.conv2d(h, w, b, stride=layer.stride, padding=layer.padding)
    else:
        out = ad.linear(h, w, b)
    return ad.relu(out) if layer.activation == "relu" else out


def encode(model: HpsModel, x, leaves: Mapping[str, ad.Node]) -> ad.Node:
    x = ad.as_node(x)
    if tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ModelError(f"input shape {x.shape[1:]} does not match encoder input {model.input_shape}")
    h = x
    for i, layer in enumerate(model.encoder):
        if layer.kind == "linear" and h.ndim != 2:
            h = ad.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
        h = _apply(layer, h, leaves[f"encoder.{i}.weight"], leaves[f"encoder.{i}.bias"])
    if h.ndim == 2:
        h = ad.reshape(h, (h.shape[0], h.shape[1], 1, 1))
    return h


def head(model: HpsModel, task: str, z, leaves: Mapping[str, ad.Node]) -> ad.Node:
    h = ad.reshape(z, (z.shape[0], int(np.prod(z.shape[1:]))))
    for i, layer in enumerate(model.heads[task]):
        h = _apply(layer, h, leaves[f"heads.{task}.{i}.weight"], leaves[f"heads.{task}.{i}.bias"])
    return h


def forward(model: HpsModel, batch, tape: ad.Tape, leaves: Optional[Mapping[str, ad.Node]] = None):
    """Run encoder and heads. Returns ``(Z, {task: prediction})``.

    ``leaves`` defaults to freshly bound parameter leaves on ``tape``.
    """
    if leaves is None:
        leaves = bind_params(model, tape)
    x = batch.x if isinstance(batch, Batch) else batch
    z = encode(model, x, leaves)
    preds = {t.name: head(model, t.name, z, leaves) for t in model.tasks}
    return z, preds


def _cross_entropy(logits: ad.Node, labels: np.ndarray) -> ad.Node:
    labels = np.asarray(labels)
    if labels.ndim == 2 and labels.shape[1] == 1:
        labels = labels[:, 0]
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ModelError(f"cross_entropy: labels shape {labels.shape} vs logits {logits.shape}")
    if not np.all(np.equal(np.mod(labels, 1), 0)):
        raise ModelError("cross_entropy: class targets must be integers")
    labels = labels.astype(np.int64)
    k = logits.shape[1]
    keep = labels != IGNORE_LABEL
    if np.any((labels[keep] < 0) | (labels[keep] >= k)):
        raise ModelError(f"cross_entropy: class index out of range [0, {k})")
    onehot = np.zeros(logits.shape)
    onehot[np.nonzero(keep)[0], labels[keep]] = 1.0
    count = max(int(keep.sum()), 1)
    nll = ad.neg(ad.sum(ad.mul(ad.log_softmax(logits, axis=1), ad.constant(onehot))))
    return ad.mul(nll, 1.0 / count)


def task_loss(pred: ad.Node, target: np.ndarray, kind: str, log_transform: bool = False,
              log_eps: float = 1e-8) -> ad.Node:
    if kind == "cross_entropy":
        loss = _cross_entropy(pred, target)
    elif kind in ("mse", "l1"):
        target = np.asarray(target, dtype=np.float64)
        if target.size != pred.size:
            raise ModelError(f"{kind}: target shape {target.shape} does not match prediction {pred.shape}")
        target = target.reshape(pred.shape)
        diff = ad.sub(pred, ad.constant(target))
        loss = ad.mean(ad.mul(diff, diff) if kind == "mse" else ad.abs(diff))
    else:
        raise ModelError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    if log_transform:
        loss = ad.log(ad.add(loss, log_eps))
    return loss


def task_losses(predictions: Mapping[str, ad.Node], targets: Mapping[str, np.ndarray],
                tasks: Sequence[TaskSpec]) -> dict[str, ad.Node]:
    """One mean-reduced scalar loss per task, in task order."""
    return {t.name: task_loss(predictions[t.name], targets[t.name], t.loss, t.log_transform)
            for t in tasks}


def predict(model: HpsModel, x: np.ndarray) -> dict[str, np.ndarray]:
    with ad.no_record():
        leaves = {n: ad.constant(v) for n, v in model.params.items()}
        _, preds = forward(model, x, ad.Tape(), leaves)
    return {k: v.value.copy() for k, v in preds.items()}
