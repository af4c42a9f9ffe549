"""Per-tensor Gaussian weight scopes, their KL divergence and fusion."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .engine import Model

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8
MIN_SCOPE_SIZE = 2


@dataclass(frozen=True)
class LayerScope:
    mu: float
    sigma: float
    count: int

    @classmethod
    def of(cls, tensor) -> "LayerScope":
        w = np.asarray(tensor, dtype=np.float64).ravel()
        mu = float(w.mean())
        sigma = float(np.sqrt(np.mean((w - mu) ** 2)))
        return cls(mu, sigma, int(w.size))


@dataclass
class WeightScope:
    entries: Dict[str, LayerScope] = field(default_factory=dict)
    skipped: List[str] = field(default_factory=list)

    def __getitem__(self, name: str) -> LayerScope:
        return self.entries[name]

    def names(self) -> List[str]:
        return list(self.entries)

    def report(self, model_id: str = "") -> dict:
        return {
            "model_id": model_id,
            "entries": {
                k: {"mu": s.mu, "sigma": s.sigma, "count": s.count} for k, s in self.entries.items()
            },
            "floored": [k for k, s in self.entries.items() if s.sigma < SIGMA_FLOOR],
        }

    @classmethod
    def from_report(cls, obj: Mapping) -> "WeightScope":
        try:
            entries = {
                k: LayerScope(float(v["mu"]), float(v["sigma"]), int(v["count"])) for k, v in obj["entries"].items()
            }
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed scope report: missing {exc}") from exc
        return cls(entries)


@dataclass
class ScopeTarget:
    """Target (mu, sigma) per tensor name; sigmas are clamped to ``SIGMA_FLOOR``."""

    entries: Dict[str, Tuple[float, float]]
    origin: str = "fixed_hyperparameter"
    floored: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.origin not in ("fixed_hyperparameter", "fused", "init_scope"):
            raise ValueError(f"unknown target origin {self.origin!r}")
        clean = {}
        for name, (mu, sigma) in self.entries.items():
            mu, sigma = float(mu), float(sigma)
            if not (math.isfinite(mu) and math.isfinite(sigma)) or sigma < 0:
                raise ValueError(f"invalid target for {name}: ({mu}, {sigma})")
            if sigma < SIGMA_FLOOR:
                self.floored.append(name)
                sigma = SIGMA_FLOOR
            clean[name] = (mu, sigma)
        self.entries = clean

    def __getitem__(self, name: str) -> Tuple[float, float]:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    @classmethod
    def from_scope(cls, scope: WeightScope, origin: str = "init_scope") -> "ScopeTarget":
        return cls({k: (s.mu, s.sigma) for k, s in scope.entries.items()}, origin)

    @classmethod
    def constant(cls, names: Sequence[str], mu: float, sigma: float) -> "ScopeTarget":
        return cls({n: (mu, sigma) for n in names}, "fixed_hyperparameter")

    def to_dict(self) -> dict:
        return {
            "origin": self.origin,
            "entries": {k: {"mu": m, "sigma": s} for k, (m, s) in self.entries.items()},
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "ScopeTarget":
        entries = {k: (v["mu"], v["sigma"]) for k, v in obj["entries"].items()}
        return cls(entries, obj.get("origin", "fixed_hyperparameter"))


def scoped_tensors(params: Mapping[str, np.ndarray], weights_only: bool = False) -> Dict[str, np.ndarray]:
    out = {}
    for name, p in params.items():
        if weights_only and not name.endswith(".weight"):
            continue
        if p.size < MIN_SCOPE_SIZE:
            continue
        out[name] = p
    return out


def scope_estimate(model: Union[Model, Mapping[str, np.ndarray]], weights_only: bool = False) -> WeightScope:
    """Maximum-likelihood (population) mean and std of every scoped tensor.

    Tensors with fewer than two entries are skipped and listed in
    ``WeightScope.skipped``.
    """
    params = model.params() if isinstance(model, Model) else model
    scope = WeightScope()
    for name, p in params.items():
        if weights_only and not name.endswith(".weight"):
            continue
        if p.size < MIN_SCOPE_SIZE:
            logger.warning("tensor %s has %d element(s); excluded from scoping", name, p.size)
            scope.skipped.append(name)
            continue
        scope.entries[name] = LayerScope.of(p)
    return scope


def _as_pair(p) -> Tuple[float, float]:
    if isinstance(p, LayerScope):
        return p.mu, p.sigma
    mu, sigma = p
    return float(mu), float(sigma)


def scope_kl(p, target) -> float:
    """KL( N(mu, sigma^2) || N(mu_t, sigma_t^2) ), sigmas floored first."""
    mu, sigma = _as_pair(p)
    mu_t, sigma_t = _as_pair(target)
    sigma = max(sigma, SIGMA_FLOOR)
    sigma_t = max(sigma_t, SIGMA_FLOOR)
    kl = math.log(sigma_t / sigma) + (sigma * sigma + (mu - mu_t) ** 2) / (2.0 * sigma_t * sigma_t) - 0.5
    # cancellation can leave a tiny negative residue at the minimum
    return max(kl, 0.0)


def scope_kl_grad(tensor, target) -> np.ndarray:
    """Gradient of ``scope_kl(LayerScope.of(tensor), target)`` w.r.t. each entry.

    The target is a constant. Below the sigma floor the sigma path is cut.
    """
    return scope_kl_and_grad(tensor, target)[1]


def scope_kl_and_grad(tensor, target) -> Tuple[float, np.ndarray]:
    """KL of the tensor's scope to ``target`` and its gradient, in one pass."""
    w = np.asarray(tensor, dtype=np.float64)
    n = w.size
    mu_t, sigma_t = _as_pair(target)
    sigma_t = max(sigma_t, SIGMA_FLOOR)
    mu = float(w.sum()) / n
    dev = w - mu
    sigma = math.sqrt(float(np.vdot(dev, dev)) / n)
    var_t = sigma_t * sigma_t
    grad = np.full(w.shape, (mu - mu_t) / (n * var_t))
    if sigma >= SIGMA_FLOOR:
        grad += dev * ((sigma / var_t - 1.0 / sigma) / (n * sigma))
    return scope_kl((mu, sigma), (mu_t, sigma_t)), grad


def scope_fuse(scopes: Sequence[WeightScope], weights: Optional[Sequence[float]] = None) -> ScopeTarget:
    """Fuse scopes: mean of means and root-mean of variances per tensor.

    ``weights`` (non-negative, per scope) switch both means to weighted
    averages. Sums use ``math.fsum`` so the result is independent of input
    order.
    """
    if not scopes:
        raise ValueError("need at least one scope to fuse")
    names = set(scopes[0].entries)
    for s in scopes[1:]:
        other = set(s.entries)
        if other != names:
            diff = sorted(names ^ other)
            raise ValueError(f"scopes cover different tensors: {diff}")
    if weights is None:
        weights = [1.0] * len(scopes)
    weights = [float(w) for w in weights]
    if len(weights) != len(scopes) or any(w < 0 for w in weights) or not sum(weights) > 0:
        raise ValueError("weights must be non-negative, one per scope, with positive sum")
    total = math.fsum(weights)
    entries = {}
    for name in scopes[0].entries:
        mu = math.fsum(w * s.entries[name].mu for w, s in zip(weights, scopes)) / total
        var = math.fsum(w * s.entries[name].sigma ** 2 for w, s in zip(weights, scopes)) / total
        entries[name] = (mu, math.sqrt(var))
    return ScopeTarget(entries, "fused")


def mean_scope_kl(a: WeightScope, b: WeightScope) -> float:
    """Average over shared tensors of KL(a || b)."""
    names = [n for n in a.entries if n in b.entries]
    if not names:
        raise ValueError("scopes share no tensors")
    return math.fsum(scope_kl(a[n], b[n]) for n in names) / len(names)
