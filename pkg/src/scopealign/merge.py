"""Interpolation, loss barriers, neuron permutations, manual layer scaling
and 2-D loss landscapes."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from .engine import DimensionError, Layer, Model, evaluate

ModelOrArray = Union[Model, np.ndarray]


def _check_same_arch(w1: Model, w2: Model) -> None:
    if w1.arch_id != w2.arch_id:
        raise DimensionError(f"architecture mismatch: {w1.arch_id} vs {w2.arch_id}")
    for a, b in zip(w1.params().values(), w2.params().values()):
        if a.shape != b.shape:
            raise DimensionError("parameter shapes differ")


def _lerp_array(a: np.ndarray, b: np.ndarray, alpha: float) -> np.ndarray:
    # anchored on the nearer endpoint: exact at 0 and 1, and exact when a == b
    if alpha <= 0.5:
        return a + alpha * (b - a)
    return b + (1.0 - alpha) * (a - b)


def lerp(w1: ModelOrArray, w2: ModelOrArray, alpha: float) -> ModelOrArray:
    """(1 - alpha) * w1 + alpha * w2, tensor by tensor."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if isinstance(w1, Model):
        _check_same_arch(w1, w2)
        p2 = w2.params()
        return w1.with_params({k: _lerp_array(v, p2[k], alpha) for k, v in w1.params().items()})
    return _lerp_array(np.asarray(w1, dtype=np.float64), np.asarray(w2, dtype=np.float64), alpha)


# --------------------------------------------------------------------------- barriers


def alpha_grid(grid_size: int = 21) -> np.ndarray:
    if grid_size < 3:
        raise ValueError("grid_size must be at least 3")
    return np.linspace(0.0, 1.0, grid_size)


def interpolation_barrier(alphas: Sequence[float], values: Sequence[float]) -> Tuple[float, float]:
    """max over the grid of value(alpha) minus the chord between endpoints.

    Returns ``(barrier, argmax_alpha)``. The raw maximum is reported; it can
    be negative for strictly convex paths.
    """
    a = np.asarray(alphas, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    # anchored form so equal endpoints give an exactly flat chord
    excess = v - (v[0] + a * (v[-1] - v[0]))
    i = int(np.argmax(excess))
    return float(excess[i]), float(a[i])


def path_barrier(loss_fn: Callable, w1, w2, grid_size: int = 21) -> Tuple[float, float]:
    alphas = alpha_grid(grid_size)
    return interpolation_barrier(alphas, [loss_fn(lerp(w1, w2, a)) for a in alphas])


@dataclass
class InterpolationCurve:
    alphas: np.ndarray
    losses: np.ndarray
    accuracies: np.ndarray

    @property
    def endpoint_losses(self) -> Tuple[float, float]:
        return float(self.losses[0]), float(self.losses[-1])

    @property
    def errors(self) -> np.ndarray:
        return 1.0 - self.accuracies

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "loss", "acc"])
        for a, l, c in zip(self.alphas, self.losses, self.accuracies):
            w.writerow([format(float(a), ".17g"), format(float(l), ".17g"), format(float(c), ".17g")])
        return buf.getvalue()


@dataclass
class BarrierReport:
    barrier_loss: float
    barrier_err: float
    argmax_alpha: float

    def to_dict(self) -> dict:
        return {
            "barrier_loss": self.barrier_loss,
            "barrier_err": self.barrier_err,
            "argmax_alpha": self.argmax_alpha,
        }


def interpolation_curve(w1: Model, w2: Model, dataset, grid_size: int = 21) -> InterpolationCurve:
    alphas = alpha_grid(grid_size)
    losses, accs = [], []
    for a in alphas:
        l, c = evaluate(lerp(w1, w2, float(a)), dataset.features, dataset.labels)
        losses.append(l)
        accs.append(c)
    return InterpolationCurve(alphas, np.array(losses), np.array(accs))


def barrier(
    w1: Model,
    w2: Model,
    dataset,
    permutation: Optional["Permutation"] = None,
    grid_size: int = 21,
) -> Tuple[BarrierReport, InterpolationCurve]:
    """Loss and error barriers along the straight path from w1 to (permuted) w2."""
    if permutation is not None:
        w2 = apply_permutation(w2, permutation)
    curve = interpolation_curve(w1, w2, dataset, grid_size)
    b_loss, arg = interpolation_barrier(curve.alphas, curve.losses)
    b_err, _ = interpolation_barrier(curve.alphas, curve.errors)
    return BarrierReport(b_loss, b_err, arg), curve


# --------------------------------------------------------------------------- permutations


@dataclass
class Permutation:
    """One index array per hidden layer; unit i of the result is unit perm[i]."""

    perms: List[np.ndarray]

    def __post_init__(self):
        self.perms = [np.asarray(p, dtype=np.int64) for p in self.perms]
        for p in self.perms:
            if not np.array_equal(np.sort(p), np.arange(p.size)):
                raise ValueError("permutation arrays must be bijections")

    @classmethod
    def identity(cls, model: Model) -> "Permutation":
        return cls([np.arange(l.fan_out) for l in model.layers[:-1]])

    @classmethod
    def random(cls, model: Model, rng: np.random.Generator) -> "Permutation":
        return cls([rng.permutation(l.fan_out) for l in model.layers[:-1]])

    def inverse(self) -> "Permutation":
        return Permutation([np.argsort(p) for p in self.perms])

    def is_identity(self) -> bool:
        return all(np.array_equal(p, np.arange(p.size)) for p in self.perms)

    def to_dict(self) -> dict:
        return {"perms": [p.tolist() for p in self.perms]}


def apply_permutation(model: Model, perm: Permutation) -> Model:
    hidden = model.layers[:-1]
    if len(perm.perms) != len(hidden) or any(p.size != l.fan_out for p, l in zip(perm.perms, hidden)):
        raise DimensionError("permutation sizes do not match hidden widths")
    layers = []
    prev = None
    for i, layer in enumerate(model.layers):
        w, b = layer.weight, layer.bias
        if prev is not None:
            w = w[:, prev]
        if i < len(hidden):
            p = perm.perms[i]
            w, b = w[p, :], b[p]
            prev = p
        layers.append(Layer(layer.name, np.array(w), np.array(b), layer.activation))
    return Model(layers, model.arch_id)


def _matching_objective(w1: Model, w2: Model) -> float:
    return float(sum(np.vdot(a, b) for a, b in zip(w1.params().values(), w2.params().values())))


@dataclass
class MatchResult:
    permutation: Permutation
    objectives: List[float] = field(default_factory=list)
    sweeps: int = 0
    converged: bool = False


def match_weights(w1: Model, w2: Model, max_sweeps: int = 50) -> MatchResult:
    """Weight matching: permute w2's hidden units to maximise the inner
    product with w1, one layer at a time with an exact assignment solver.

    Sweeps run over layers in order until no assignment changes.
    """
    _check_same_arch(w1, w2)
    L1, L2 = w1.layers, w2.layers
    n_hidden = len(L1) - 1
    perms = [np.arange(l.fan_out) for l in L1[:-1]]
    result = MatchResult(Permutation(perms))
    if n_hidden == 0:
        result.converged = True
        return result
    result.objectives.append(_matching_objective(w1, apply_permutation(w2, Permutation(perms))))
    for sweep in range(max_sweeps):
        changed = False
        for i in range(n_hidden):
            w2_in = L2[i].weight if i == 0 else L2[i].weight[:, perms[i - 1]]
            cost = L1[i].weight @ w2_in.T + np.outer(L1[i].bias, L2[i].bias)
            nxt = L2[i + 1].weight
            if i + 1 < n_hidden:
                nxt = nxt[perms[i + 1], :]
            cost += L1[i + 1].weight.T @ nxt
            _, cols = linear_sum_assignment(cost, maximize=True)
            if not np.array_equal(cols, perms[i]):
                # keep the incumbent on exact ties so sweeps cannot cycle
                if cost[np.arange(cols.size), cols].sum() > cost[np.arange(cols.size), perms[i]].sum():
                    perms[i] = cols
                    changed = True
        result.sweeps = sweep + 1
        result.objectives.append(_matching_objective(w1, apply_permutation(w2, Permutation(perms))))
        if not changed:
            result.converged = True
            break
    result.permutation = Permutation(perms)
    return result


# --------------------------------------------------------------------------- manual scaling


def scale_layer(model: Model, layer_index: int, alpha: float) -> Model:
    """Multiply layer ``layer_index`` (weight and bias) by alpha and divide the
    next layer's weight by alpha. ReLU makes this function-preserving."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if not 0 <= layer_index < len(model.layers) - 1:
        raise ValueError("layer_index must name a layer that has a successor")
    if model.layers[layer_index].activation != "relu":
        raise ValueError("only ReLU layers can be rescaled without changing the function")
    layers = [Layer(l.name, l.weight.copy(), l.bias.copy(), l.activation) for l in model.layers]
    if alpha != 1.0:
        cur, nxt = layers[layer_index], layers[layer_index + 1]
        cur.weight *= alpha
        cur.bias *= alpha
        nxt.weight /= alpha
    return Model(layers, model.arch_id)


# --------------------------------------------------------------------------- landscapes


@dataclass
class LandscapeGrid:
    coords: np.ndarray  # shared u/v coordinates
    losses: np.ndarray  # [len(coords) (u), len(coords) (v)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["u", "v", "loss"])
        for i, u in enumerate(self.coords):
            for j, v in enumerate(self.coords):
                w.writerow([format(float(u), ".17g"), format(float(v), ".17g"), format(float(self.losses[i, j]), ".17g")])
        return buf.getvalue()


def plane_point(w_origin: Model, w_axis1: Model, w_axis2: Model, u: float, v: float) -> Model:
    p0, p1, p2 = w_origin.params(), w_axis1.params(), w_axis2.params()
    return w_origin.with_params({k: p0[k] + u * (p1[k] - p0[k]) + v * (p2[k] - p0[k]) for k in p0})


def landscape_grid(w_origin: Model, w_axis1: Model, w_axis2: Model, dataset, resolution: int = 11, margin: float = 0.0) -> LandscapeGrid:
    """Loss on the plane through three models.

    Point (u, v) is ``origin + u*(axis1 - origin) + v*(axis2 - origin)``;
    coordinates span ``[-margin, 1 + margin]``.
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    _check_same_arch(w_origin, w_axis1)
    _check_same_arch(w_origin, w_axis2)
    coords = np.linspace(-margin, 1.0 + margin, resolution)
    losses = np.empty((resolution, resolution))
    for i, u in enumerate(coords):
        for j, v in enumerate(coords):
            m = plane_point(w_origin, w_axis1, w_axis2, float(u), float(v))
            losses[i, j] = evaluate(m, dataset.features, dataset.labels)[0]
    return LandscapeGrid(coords, losses)
