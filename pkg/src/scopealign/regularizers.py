"""Training penalties (weight decay, proximal, scope alignment) and the
mean/std decompositions of the two classical ones."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .engine import Model, Params
from .scope import MIN_SCOPE_SIZE, LayerScope, ScopeTarget, scope_kl_and_grad

KINDS = ("none", "weight_decay", "proximal", "wsa", "predefined_gaussian")


class RegularizerConfigError(ValueError):
    pass


@dataclass
class RegularizerSpec:
    kind: str = "none"
    lam: float = 0.0
    target: Optional[ScopeTarget] = None
    anchor: Optional[Model] = None
    mu: float = 0.0
    sigma: float = 0.1
    weights_only: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise RegularizerConfigError(f"unknown regularizer kind {self.kind!r}")
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise RegularizerConfigError("lam must be a finite non-negative float")
        if self.kind == "proximal" and self.anchor is None:
            raise RegularizerConfigError("proximal regularizer needs an anchor model")
        if self.kind == "wsa" and self.target is None:
            raise RegularizerConfigError("wsa regularizer needs a target scope")
        if self.kind == "predefined_gaussian" and not self.sigma > 0:
            raise RegularizerConfigError("predefined_gaussian needs sigma > 0")

    @property
    def is_active(self) -> bool:
        return self.kind != "none" and self.lam > 0

    def target_for(self, name: str) -> Tuple[float, float]:
        if self.kind == "predefined_gaussian":
            return self.mu, self.sigma
        if self.target is None or name not in self.target:
            raise RegularizerConfigError(f"target scope has no entry for tensor {name}")
        return self.target[name]

    def scoped(self, name: str, p: np.ndarray) -> bool:
        if p.size < MIN_SCOPE_SIZE:
            return False
        return not (self.weights_only and not name.endswith(".weight"))


def penalty_and_grad(spec: RegularizerSpec, model: Model) -> Tuple[float, Params]:
    """Penalty value and exact gradient for every parameter tensor."""
    params = model.params()
    grads: Dict[str, np.ndarray] = {k: np.zeros_like(p) for k, p in params.items()}
    if not spec.is_active:
        return 0.0, grads
    lam = spec.lam
    if spec.kind == "weight_decay":
        total = math.fsum(float((p * p).sum()) for p in params.values())
        for k, p in params.items():
            grads[k] = lam * p
        return 0.5 * lam * total, grads
    if spec.kind == "proximal":
        anchor = spec.anchor.params()
        parts = []
        for k, p in params.items():
            if k not in anchor or anchor[k].shape != p.shape:
                raise RegularizerConfigError(f"anchor does not match tensor {k}")
            d = p - anchor[k]
            parts.append(float((d * d).sum()))
            grads[k] = lam * d
        return 0.5 * lam * math.fsum(parts), grads
    # wsa / predefined_gaussian
    parts = []
    for k, p in params.items():
        if not spec.scoped(k, p):
            continue
        kl, g = scope_kl_and_grad(p, spec.target_for(k))
        parts.append(kl)
        grads[k] = lam * g
    return lam * math.fsum(parts), grads


def check_decay_identity(w, lam: float) -> Tuple[float, float, float]:
    """Both sides of  lam/2 * ||w||^2  ==  lam*n/2 * (sigma^2 + mu^2)."""
    w = np.asarray(w, dtype=np.float64).ravel()
    n = w.size
    if n < 1:
        raise ValueError("need at least one element")
    s = LayerScope.of(w)
    lhs = 0.5 * lam * float(np.dot(w, w))
    rhs = 0.5 * lam * n * (s.sigma**2 + s.mu**2)
    return lhs, rhs, abs(lhs - rhs)


def check_proximal_identity(w, w_tilde) -> Tuple[float, float, float]:
    """Both sides of the mean/std expansion of ||w - w_tilde||^2."""
    w = np.asarray(w, dtype=np.float64)
    wt = np.asarray(w_tilde, dtype=np.float64)
    if w.shape != wt.shape:
        raise ValueError(f"shape mismatch: {w.shape} vs {wt.shape}")
    w, wt = w.ravel(), wt.ravel()
    n = w.size
    if n < 1:
        raise ValueError("need at least one element")
    a, b = LayerScope.of(w), LayerScope.of(wt)
    d = w - wt
    lhs = float(np.dot(d, d))
    rhs = n * a.sigma**2 + n * a.mu**2 + n * b.sigma**2 + n * b.mu**2 - 2.0 * float(np.dot(w, wt))
    return lhs, rhs, abs(lhs - rhs)
