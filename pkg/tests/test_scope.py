import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from scopealign.engine import dumps_checkpoint, init_mlp, model_from_dict
from scopealign.scope import (
    SIGMA_FLOOR,
    LayerScope,
    ScopeTarget,
    WeightScope,
    scope_estimate,
    scope_fuse,
    scope_kl,
    scope_kl_grad,
)

from .conftest import central_diff, rel_err


def mc_kl(mu, sigma, mu_t, sigma_t, n=4_000_000, seed=0):
    """Monte-Carlo estimate of E_p[log p - log q]."""
    rng = np.random.default_rng(seed)
    total = 0.0
    chunk = 1_000_000
    for start in range(0, n, chunk):
        x = rng.normal(mu, sigma, size=min(chunk, n - start))
        total += float(np.sum(stats.norm.logpdf(x, mu, sigma) - stats.norm.logpdf(x, mu_t, sigma_t)))
    return total / n


def quad_kl(mu, sigma, mu_t, sigma_t):
    p = stats.norm(mu, sigma)
    q = stats.norm(mu_t, sigma_t)
    f = lambda x: p.pdf(x) * (p.logpdf(x) - q.logpdf(x))
    return integrate.quad(f, mu - 30 * sigma, mu + 30 * sigma, limit=200)[0]


def test_estimate_hand_values():
    s = LayerScope.of([1.0, 3.0])
    assert (s.mu, s.sigma, s.count) == (2.0, 1.0, 2)
    s = LayerScope.of([4.25] * 7)
    assert (s.mu, s.sigma) == (4.25, 0.0)
    s = LayerScope.of([-2.5, 2.5])
    assert (s.mu, s.sigma) == (0.0, 2.5)


def test_estimate_covers_model_and_skips_scalars():
    m = init_mlp([3, 4, 1], seed=0)
    scope = scope_estimate(m)
    assert scope.names() == ["fc1.weight", "fc1.bias", "fc2.weight"]
    assert scope.skipped == ["fc2.bias"]
    assert scope_estimate(m, weights_only=True).names() == ["fc1.weight", "fc2.weight"]


def test_estimate_recomputes_exactly(rng):
    w = rng.normal(size=(13, 7))
    s = LayerScope.of(w)
    assert abs(s.mu - w.mean()) < 1e-12
    assert abs(s.sigma - w.std()) < 1e-12


def test_kl_zero_at_equality():
    assert scope_kl((0.3, 0.7), (0.3, 0.7)) == 0.0


@pytest.mark.parametrize(
    "p, q, exact",
    [((0.0, 1.0), (0.0, 2.0), math.log(2) + 1 / 8 - 1 / 2), ((1.0, 1.0), (0.0, 1.0), 0.5)],
)
def test_kl_against_monte_carlo(p, q, exact):
    oracle = mc_kl(*p, *q)
    assert abs(scope_kl(p, q) - oracle) < 1e-3
    assert abs(scope_kl(p, q) - quad_kl(*p, *q)) < 1e-8
    assert abs(scope_kl(p, q) - exact) < 1e-12


def test_kl_nonnegative_on_grid():
    vals = [-1.0, 0.0, 0.5, 2.0]
    sig = [0.1, 0.5, 1.0, 3.0]
    for mu, s, mt, st_ in itertools.product(vals, sig, vals, sig):
        kl = scope_kl((mu, s), (mt, st_))
        assert kl >= 0.0
        assert (kl == 0.0) == (mu == mt and s == st_)


def test_kl_floors_degenerate_sigma():
    assert math.isfinite(scope_kl((1.0, 0.0), (1.0, 0.0)))
    assert math.isfinite(scope_kl((1.0, 0.0), (0.0, 1.0)))


def test_grad_zero_when_scope_equals_target(rng):
    w = rng.normal(0.2, 0.5, size=50)
    s = LayerScope.of(w)
    assert np.max(np.abs(scope_kl_grad(w, (s.mu, s.sigma)))) < 1e-12


def kl_of(w, target):
    return scope_kl(LayerScope.of(w), target)


def test_grad_random_tensor_finite_differences(rng):
    w = rng.normal(0.1, 0.3, size=64)
    target = (-0.05, 0.45)
    fd = central_diff(lambda: kl_of(w, target), w)
    assert rel_err(scope_kl_grad(w, target), fd) < 1e-6


def test_grad_two_element_case():
    w = np.array([-1.0, 1.0])
    target = (0.0, 2.0)
    fd = central_diff(lambda: kl_of(w, target), w)
    g = scope_kl_grad(w, target)
    # hand value: sigma=1, mu=0 -> (w_i/2)(1/4 - 1)
    assert np.allclose(g, [0.375, -0.375], atol=1e-15)
    assert np.max(np.abs(g - fd)) < 1e-8


def test_grad_constant_tensor_has_only_mean_term():
    w = np.full(5, 2.0)
    g = scope_kl_grad(w, (0.0, 1.0))
    assert np.allclose(g, 2.0 / 5)


def test_fuse_hand_value():
    a = WeightScope({"w": LayerScope(0.0, 1.0, 4)})
    b = WeightScope({"w": LayerScope(2.0, 3.0, 4)})
    fused = scope_fuse([a, b])
    mu, sigma = fused["w"]
    assert fused.origin == "fused"
    assert mu == 1.0
    assert abs(sigma - math.sqrt(5)) < 1e-12


def test_fuse_single_and_identical():
    a = WeightScope({"w": LayerScope(0.3, 0.2, 4), "b": LayerScope(-1.0, 0.5, 2)})
    assert scope_fuse([a])["w"] == (0.3, 0.2)
    three = scope_fuse([a, a, a])
    assert three["w"] == pytest.approx((0.3, 0.2), abs=1e-15)
    assert three["b"] == pytest.approx((-1.0, 0.5), abs=1e-15)


def test_fuse_mismatch_lists_symmetric_difference():
    a = WeightScope({"w": LayerScope(0, 1, 2), "x": LayerScope(0, 1, 2)})
    b = WeightScope({"w": LayerScope(0, 1, 2), "y": LayerScope(0, 1, 2)})
    with pytest.raises(ValueError, match=r"\['x', 'y'\]"):
        scope_fuse([a, b])


def test_fuse_weighted():
    a = WeightScope({"w": LayerScope(0.0, 1.0, 4)})
    b = WeightScope({"w": LayerScope(3.0, 2.0, 4)})
    mu, sigma = scope_fuse([a, b], weights=[2, 1])["w"]
    assert mu == pytest.approx(1.0)
    assert sigma == pytest.approx(math.sqrt(2.0))


scope_lists = st.lists(
    st.tuples(st.floats(-5, 5), st.floats(1e-3, 5.0)), min_size=1, max_size=8
)


@settings(max_examples=200, deadline=None)
@given(scope_lists, st.randoms(use_true_random=False))
def test_fuse_bounds_and_order_invariance(pairs, rnd):
    scopes = [WeightScope({"w": LayerScope(m, s, 3)}) for m, s in pairs]
    mu, sigma = scope_fuse(scopes)["w"]
    mus = [m for m, _ in pairs]
    var = [s * s for _, s in pairs]
    assert min(mus) - 1e-12 <= mu <= max(mus) + 1e-12
    assert min(var) * (1 - 1e-12) <= sigma**2 <= max(var) * (1 + 1e-12)
    shuffled = list(scopes)
    rnd.shuffle(shuffled)
    assert scope_fuse(shuffled)["w"] == (mu, sigma)


@settings(max_examples=200, deadline=None)
@given(st.floats(-3, 3), st.floats(0.01, 3), st.floats(-3, 3), st.floats(0.01, 3))
def test_kl_nonnegative_property(mu, s, mt, st_):
    assert scope_kl((mu, s), (mt, st_)) >= 0.0


def test_target_floors_sigma():
    t = ScopeTarget({"w": (0.0, 0.0)})
    assert t["w"][1] == SIGMA_FLOOR and t.floored == ["w"]


def test_scope_survives_checkpoint_round_trip():
    import json

    m = init_mlp([6, 9, 3], seed=2)
    back = model_from_dict(json.loads(dumps_checkpoint(m)))
    a, b = scope_estimate(m), scope_estimate(back)
    for n in a.names():
        assert abs(a[n].mu - b[n].mu) < 1e-12 and abs(a[n].sigma - b[n].sigma) < 1e-12
