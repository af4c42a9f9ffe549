"""Minimal float64 MLP engine: forward, backprop, SGD/Adam and a seeded trainer.

Everything here is deterministic. Batch order comes from a Philox stream keyed
on ``(seed, epoch)`` so no global RNG state is ever touched.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .data import Dataset
    from .regularizers import RegularizerSpec

Params = Dict[str, np.ndarray]

DIVERGENCE_THRESHOLD = 1e6


class DimensionError(ValueError):
    """Raised when tensor shapes do not line up."""


class NumericError(FloatingPointError):
    """Raised when a gradient or loss stops being finite."""


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


def philox(*key: int) -> np.random.Generator:
    """Counter-based generator keyed on a tuple of non-negative ints."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


@dataclass
class Layer:
    name: str
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]
    activation: str = "relu"

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class Model:
    layers: List[Layer]
    arch_id: str = ""

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.fan_in != prev.fan_out:
                raise DimensionError(
                    f"layer {nxt.name} expects {nxt.fan_in} inputs, {prev.name} gives {prev.fan_out}"
                )
        if self.layers[-1].activation != "identity":
            raise DimensionError("last layer must have identity activation")
        names = self.param_names()
        if len(set(names)) != len(names):
            raise DimensionError("parameter names must be unique")
        for layer in self.layers:
            if layer.activation not in ("relu", "identity"):
                raise ValueError(f"unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.fan_out,):
                raise DimensionError(f"bias of {layer.name} has shape {layer.bias.shape}")
        if not self.arch_id:
            self.arch_id = arch_id_for(self.sizes, [l.activation for l in self.layers])

    @property
    def sizes(self) -> List[int]:
        return [self.layers[0].fan_in] + [l.fan_out for l in self.layers]

    def param_names(self) -> List[str]:
        out = []
        for layer in self.layers:
            out += [f"{layer.name}.weight", f"{layer.name}.bias"]
        return out

    def params(self) -> Params:
        """Ordered name -> array view of every parameter tensor (not copies)."""
        out: Params = {}
        for layer in self.layers:
            out[f"{layer.name}.weight"] = layer.weight
            out[f"{layer.name}.bias"] = layer.bias
        return out

    def with_params(self, params: Mapping[str, np.ndarray]) -> "Model":
        layers = []
        for layer in self.layers:
            w = np.asarray(params[f"{layer.name}.weight"], dtype=np.float64)
            b = np.asarray(params[f"{layer.name}.bias"], dtype=np.float64)
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise DimensionError(f"shape mismatch for layer {layer.name}")
            layers.append(Layer(layer.name, w, b, layer.activation))
        return Model(layers, self.arch_id)

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params().values())


def arch_id_for(sizes: Sequence[int], activations: Sequence[str]) -> str:
    act = "".join("r" if a == "relu" else "i" for a in activations)
    return "mlp-" + "-".join(str(s) for s in sizes) + "-" + act


def parse_arch_id(arch_id: str) -> Tuple[List[int], List[str]]:
    parts = arch_id.split("-")
    if len(parts) < 4 or parts[0] != "mlp":
        raise ValueError(f"unrecognised arch_id {arch_id!r}")
    sizes = [int(p) for p in parts[1:-1]]
    acts = ["relu" if c == "r" else "identity" for c in parts[-1]]
    if len(acts) != len(sizes) - 1:
        raise ValueError(f"arch_id {arch_id!r} has inconsistent activation code")
    return sizes, acts


def init_mlp(sizes: Sequence[int], seed: int = 0, init: str = "normal") -> Model:
    """He-initialised MLP with ReLU hidden layers and identity logits.

    ``init="normal"`` draws weights from N(0, 2/fan_in) and biases from
    N(0, 1/fan_in); ``init="uniform"`` uses the matching uniform bounds
    sqrt(6/fan_in) and 1/sqrt(fan_in).
    """
    if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
        raise ValueError("sizes must hold at least two positive ints")
    rng = philox(seed, 0x1A17)
    layers = []
    n = len(sizes) - 1
    for i in range(n):
        fan_in, fan_out = int(sizes[i]), int(sizes[i + 1])
        if init == "normal":
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
            b = rng.normal(0.0, math.sqrt(1.0 / fan_in), size=fan_out)
        elif init == "uniform":
            bound = math.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            bb = 1.0 / math.sqrt(fan_in)
            b = rng.uniform(-bb, bb, size=fan_out)
        else:
            raise ValueError(f"unknown init {init!r}")
        act = "identity" if i == n - 1 else "relu"
        layers.append(Layer(f"fc{i + 1}", w, b, act))
    return Model(layers)


# --------------------------------------------------------------------------- forward / backward


def _check_inputs(model: Model, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.layers[0].fan_in:
        raise DimensionError(
            f"inputs of shape {x.shape} do not match input width {model.layers[0].fan_in}"
        )
    return x


def _forward_cache(model: Model, x: np.ndarray):
    acts = [x]
    pre = []
    h = x
    for layer in model.layers:
        z = h @ layer.weight.T + layer.bias
        pre.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        acts.append(h)
    return acts, pre


def forward(model: Model, inputs) -> np.ndarray:
    """Logits for a batch; rows of ``inputs`` are samples."""
    x = _check_inputs(model, inputs)
    h = x
    for layer in model.layers:
        h = h @ layer.weight.T + layer.bias
        if layer.activation == "relu":
            h = np.maximum(h, 0.0)
    return h


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _loss_and_dlogits(logits: np.ndarray, labels, loss: str):
    n = logits.shape[0]
    if loss == "cross_entropy":
        y = np.asarray(labels)
        if y.shape != (n,):
            raise ValueError(f"labels must have shape ({n},), got {y.shape}")
        y = y.astype(np.int64)
        c = logits.shape[1]
        if n and (y.min() < 0 or y.max() >= c):
            raise ValueError(f"label index out of range for {c} classes")
        logp = log_softmax(logits)
        value = -logp[np.arange(n), y].mean()
        d = np.exp(logp)
        d[np.arange(n), y] -= 1.0
        return float(value), d / n
    if loss == "mse":
        t = np.asarray(labels, dtype=np.float64)
        if t.shape != logits.shape:
            raise ValueError(f"mse targets must have shape {logits.shape}, got {t.shape}")
        diff = logits - t
        return float((diff**2).sum(axis=1).mean()), 2.0 * diff / n
    raise ValueError(f"unknown loss {loss!r}")


def loss_and_grad(model: Model, inputs, labels, loss: str = "cross_entropy") -> Tuple[float, Params]:
    """Batch-mean loss and its gradient w.r.t. every parameter tensor."""
    x = _check_inputs(model, inputs)
    if x.shape[0] == 0:
        raise ValueError("empty batch has no mean loss")
    acts, pre = _forward_cache(model, x)
    value, d = _loss_and_dlogits(acts[-1], labels, loss)
    grads: Params = {}
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if layer.activation == "relu":
            d = d * (pre[i] > 0.0)
        grads[f"{layer.name}.weight"] = d.T @ acts[i]
        grads[f"{layer.name}.bias"] = d.sum(axis=0)
        if i:
            d = d @ layer.weight
    return value, {k: grads[k] for k in model.param_names()}


def evaluate(model: Model, inputs, labels, loss: str = "cross_entropy") -> Tuple[float, float]:
    """(mean loss, accuracy) on a labelled set."""
    logits = forward(model, inputs)
    value, _ = _loss_and_dlogits(logits, labels, loss)
    if loss == "cross_entropy":
        acc = float((logits.argmax(axis=1) == np.asarray(labels)).mean())
    else:
        acc = float((logits.argmax(axis=1) == np.asarray(labels).argmax(axis=1)).mean())
    return value, acc


# --------------------------------------------------------------------------- optimizers


@dataclass
class OptimizerState:
    kind: str = "sgd"
    learning_rate: float = 0.05
    momentum: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValueError("adam betas must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise ValueError("adam_eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def optimizer_step(state: OptimizerState, model: Model, gradients: Mapping[str, np.ndarray]) -> Model:
    """One in-place update of ``model``; returns it for chaining.

    Weight decay is coupled: ``weight_decay * w`` is added to the gradient
    before the SGD or Adam recurrence runs.
    """
    params = model.params()
    for name, g in gradients.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
    state.step_count += 1
    t = state.step_count
    for name, w in params.items():
        g = gradients.get(name)
        if g is None:
            continue
        if state.weight_decay:
            g = g + state.weight_decay * w
        if state.kind == "sgd":
            if state.momentum:
                buf = state.buffers.get(name)
                buf = g.copy() if buf is None else state.momentum * buf + g
                state.buffers[name] = buf
                g = buf
            w -= state.learning_rate * g
        else:
            b1, b2 = state.adam_beta1, state.adam_beta2
            m = state.buffers.get(name)
            v = state.second.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            state.buffers[name], state.second[name] = m, v
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            w -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.adam_eps)
    return model


def clip_grad_norm(grads: Params, max_norm: Optional[float]) -> Params:
    if not max_norm:
        return grads
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm:
        return grads
    scale = max_norm / (total + 1e-12)
    return {k: g * scale for k, g in grads.items()}


# --------------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    optimizer: str = "sgd"
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: str = "cross_entropy"
    max_grad_norm: Optional[float] = None
    log_scopes: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def make_optimizer(self) -> OptimizerState:
        return OptimizerState(
            kind=self.optimizer,
            learning_rate=self.learning_rate,
            momentum=self.momentum if self.optimizer == "sgd" else 0.0,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            weight_decay=self.weight_decay,
        )


def batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return philox(seed, 0xBA7C, epoch).permutation(n)


def total_loss_and_grad(model: Model, x, y, loss: str, regularizer: "Optional[RegularizerSpec]" = None):
    """Data loss plus optional penalty; gradients are summed."""
    value, grads = loss_and_grad(model, x, y, loss)
    if regularizer is not None and regularizer.is_active:
        from .regularizers import penalty_and_grad

        pen, pgrads = penalty_and_grad(regularizer, model)
        value += pen
        grads = {k: g + pgrads[k] for k, g in grads.items()}
    return value, grads


def train(
    model: Model,
    dataset: "Dataset",
    config: TrainConfig,
    regularizer: "Optional[RegularizerSpec]" = None,
    rng_seed: int = 0,
) -> Tuple[Model, List[dict]]:
    """Mini-batch training; returns a new model and one log row per epoch.

    The input model is left untouched. Each log row holds the full-train-set
    loss and accuracy after the epoch plus every tensor's scope.
    """
    from .scope import scope_estimate

    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = model.copy()
    opt = config.make_optimizer()
    x, y = dataset.features, dataset.labels
    n = len(dataset)
    log: List[dict] = []
    step = 0
    for epoch in range(config.epochs):
        order = batch_order(n, rng_seed, epoch)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            value, grads = total_loss_and_grad(model, x[idx], y[idx], config.loss, regularizer)
            if not math.isfinite(value) or value > DIVERGENCE_THRESHOLD:
                raise TrainingDiverged(
                    f"loss {value!r} at epoch {epoch} step {step}", epoch=epoch, step=step
                )
            optimizer_step(opt, model, clip_grad_norm(grads, config.max_grad_norm))
            step += 1
        loss_val, acc = evaluate(model, x, y, config.loss)
        row = {"epoch": epoch, "loss": loss_val, "acc": acc}
        if config.log_scopes:
            for name, s in scope_estimate(model).entries.items():
                row[f"{name}_mu"] = s.mu
                row[f"{name}_sigma"] = s.sigma
        log.append(row)
    return model, log


def metrics_csv(log: Iterable[dict]) -> str:
    rows = list(log)
    buf = io.StringIO()
    if not rows:
        buf.write("epoch,loss,acc\n")
        return buf.getvalue()
    writer = csv.writer(buf, lineterminator="\n")
    header = list(rows[0].keys())
    writer.writerow(header)
    for r in rows:
        writer.writerow([_fmt(r[h]) for h in header])
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


# --------------------------------------------------------------------------- checkpoints


def model_to_dict(model: Model, seed: Optional[int] = None) -> dict:
    return {
        "arch_id": model.arch_id,
        "seed": seed,
        "layers": [
            {"name": name, "shape": list(p.shape), "values": [float(v) for v in p.ravel()]}
            for name, p in model.params().items()
        ],
    }


def dumps_checkpoint(model: Model, seed: Optional[int] = None) -> str:
    # json emits repr() floats, the shortest exact round-trip form
    return json.dumps(model_to_dict(model, seed))


def model_from_dict(obj: Mapping) -> Model:
    sizes, acts = parse_arch_id(obj["arch_id"])
    tensors = {}
    for entry in obj["layers"]:
        shape = tuple(int(s) for s in entry["shape"])
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise DimensionError(f"tensor {entry['name']} has {values.size} values for shape {shape}")
        tensors[entry["name"]] = values.reshape(shape)
    layers = []
    names = []
    for n in tensors:
        base = n.rsplit(".", 1)[0]
        if base not in names:
            names.append(base)
    if len(names) != len(acts):
        raise DimensionError("checkpoint layer count does not match arch_id")
    for base, act in zip(names, acts):
        layers.append(Layer(base, tensors[base + ".weight"], tensors[base + ".bias"], act))
    model = Model(layers, obj["arch_id"])
    if model.sizes != sizes:
        raise DimensionError("checkpoint shapes do not match arch_id")
    return model


def save_checkpoint(model: Model, path, seed: Optional[int] = None) -> None:
    Path(path).write_text(dumps_checkpoint(model, seed))


def load_checkpoint(path) -> Model:
    return model_from_dict(json.loads(Path(path).read_text()))
