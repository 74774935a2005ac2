import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpnas.controller import DomainController, log_softmax, softmax
from mpnas.space import DecisionPoint
from mpnas.supernet import PathSelection


def points(*arities):
    return [DecisionPoint(f"b0.d{i}", a, 0, f"d{i}") for i, a in enumerate(arities)]


def path(pts, idx):
    return PathSelection.from_indices(pts, list(idx))


def test_fresh_controller_is_uniform():
    pts = points(2, 3, 4)
    c = DomainController(pts)
    assert c.log_prob(path(pts, [1, 2, 3])) == pytest.approx(-math.log(24), abs=1e-12)
    assert c.entropy() == pytest.approx(math.log(24), abs=1e-12)


def test_saturated_logits_sample_deterministically():
    pts = points(3, 3)
    c = DomainController(pts)
    c.logits[0][:] = [0, 1000, 0]
    c.logits[1][:] = [1000, 0, 0]
    rng = np.random.default_rng(0)
    assert all(tuple(c.sample_path(rng)[0].indices) == (1, 0) for _ in range(200))


def test_sampling_frequencies_match_softmax():
    pts = points(4)
    c = DomainController(pts)
    c.logits[0][:] = [0.5, -1.0, 1.2, 0.0]
    p = softmax(c.logits[0])
    rng = np.random.default_rng(1)
    n = 100_000
    counts = np.bincount([c.sample_path(rng)[0].indices[0] for _ in range(n)], minlength=4)
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 3 * sigma)


def test_sample_returns_matching_log_prob():
    pts = points(2, 3)
    c = DomainController(pts)
    c.logits[1][:] = [0.3, -0.2, 1.0]
    pth, logp = c.sample_path(np.random.default_rng(2))
    assert logp == pytest.approx(c.log_prob(pth), abs=1e-12)


def test_two_armed_bandit_converges():
    pts = points(2)
    c = DomainController(pts)
    rng = np.random.default_rng(0)
    reached = None
    for t in range(2000):
        pth, _ = c.sample_path(rng)
        arm = pth.indices[0]
        c.reinforce_update(pth, float(rng.random() < (0.8 if arm == 1 else 0.2)))
        if c.probabilities()[0][1] >= 0.95:
            reached = t
            break
    assert reached is not None


def test_positive_advantage_raises_sampled_probability():
    pts = points(3, 2)
    c = DomainController(pts)
    pth = path(pts, [2, 1])
    before = c.log_prob(pth)
    adv = c.reinforce_update(pth, 1.0)
    assert adv > 0 and c.log_prob(pth) > before


def test_negative_advantage_lowers_sampled_probability():
    pts = points(3)
    c = DomainController(pts)
    c.baseline = 0.5
    pth = path(pts, [0])
    before = c.log_prob(pth)
    assert c.reinforce_update(pth, 0.0) < 0
    assert c.log_prob(pth) < before


def test_zero_advantage_leaves_logits_unchanged():
    pts = points(3, 2)
    c = DomainController(pts)
    c.logits[0][:] = [0.1, 0.2, 0.3]
    c.baseline = 0.42
    before = [z.copy() for z in c.logits]
    c.reinforce_update(path(pts, [1, 0]), 0.42)
    assert all(np.array_equal(a, b) for a, b in zip(before, c.logits))


def test_observe_moves_baseline_only():
    pts = points(2)
    c = DomainController(pts, baseline_momentum=0.9)
    c.observe(1.0)
    assert c.baseline == pytest.approx(0.1)
    assert np.array_equal(c.logits[0], [0.0, 0.0])


def test_non_finite_reward_is_rejected():
    pts = points(2)
    with pytest.raises(ValueError):
        DomainController(pts).reinforce_update(path(pts, [0]), float("nan"))


def test_ties_resolve_to_lowest_index():
    pts = points(3, 2)
    c = DomainController(pts)
    c.logits[0][:] = [0.0, 1.0, 1.0]
    assert tuple(c.most_likely_path().indices) == (1, 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=6), st.floats(-50, 50))
def test_softmax_is_shift_invariant(z, c):
    z = np.array(z)
    assert np.allclose(softmax(z), softmax(z + c), atol=1e-12)
    assert np.allclose(np.exp(log_softmax(z)), softmax(z), atol=1e-12)
    assert softmax(z).sum() == pytest.approx(1.0)


def _exact_gradient(c, pts, reward):
    probs = c.probabilities()
    g = [np.zeros(p.arity) for p in pts]
    for idx in itertools.product(*[range(p.arity) for p in pts]):
        pth = path(pts, idx)
        w = math.exp(c.log_prob(pth)) * reward(idx)
        for acc, s in zip(g, c.score_function(pth)):
            acc += w * s
    return np.concatenate(g), probs


@pytest.mark.parametrize("arities", [(2,), (3, 2), (4, 3, 2), (4, 4, 4)])
def test_monte_carlo_update_points_along_exact_gradient(arities):
    rng = np.random.default_rng(sum(arities))
    pts = points(*arities)
    table = {idx: float(rng.random()) for idx in itertools.product(*[range(a) for a in arities])}
    c = DomainController(pts, baseline_momentum=None)
    for z in c.logits:
        z[:] = rng.standard_normal(z.shape) * 0.5
    exact, _ = _exact_gradient(c, pts, table.__getitem__)
    mc = np.zeros_like(exact)
    n = 10_000
    for _ in range(n):
        pth, _ = c.sample_path(rng)
        mc += table[tuple(pth.indices)] * np.concatenate(c.score_function(pth))
    mc /= n
    cos = exact @ mc / (np.linalg.norm(exact) * np.linalg.norm(mc))
    assert cos > 0


def test_state_dict_round_trip():
    pts = points(3, 2)
    c = DomainController(pts)
    rng = np.random.default_rng(5)
    for _ in range(20):
        pth, _ = c.sample_path(rng)
        c.reinforce_update(pth, float(rng.random()))
    d = DomainController(pts)
    d.load_state_dict(c.state_dict())
    assert all(np.array_equal(a, b) for a, b in zip(c.logits, d.logits))
    pth = path(pts, [1, 1])
    c.reinforce_update(pth, 0.9)
    d.reinforce_update(pth, 0.9)
    assert all(np.array_equal(a, b) for a, b in zip(c.logits, d.logits))
