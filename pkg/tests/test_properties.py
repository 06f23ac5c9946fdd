"""Randomized invariants across the public API."""

import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cgdd.config import parse_config
from cgdd.losses import (
    LossWeights,
    attention_transfer_loss,
    discrepancy_estimation_loss,
    information_entropy_loss,
    relative_accuracy,
)
from cgdd.trainer import TrainSchedule, budget_schedule

finite = st.floats(-20, 20, allow_nan=False)
positive = st.floats(1e-3, 10, allow_nan=False)


def logits(n, c):
    return arrays("float64", (n, c), elements=finite).map(torch.from_numpy)


@st.composite
def logit_triples(draw):
    n, c = draw(st.integers(1, 5)), draw(st.integers(2, 8))
    return draw(logits(n, c)), draw(logits(n, c)), draw(logits(n, c))


@settings(max_examples=150, deadline=None)
@given(logit_triples())
def test_discrepancy_is_a_metric(xyz):
    x, y, z = xyz
    d = discrepancy_estimation_loss
    assert d(x, y).item() >= 0
    assert d(x, y).item() == d(y, x).item()
    assert d(x, z).item() <= d(x, y).item() + d(y, z).item() + 1e-9


@settings(max_examples=150, deadline=None)
@given(logit_triples())
def test_entropy_between_uniform_and_point_mass(xyz):
    x = xyz[0]
    c = x.shape[1]
    v = information_entropy_loss(x).item()
    assert -math.log(c) / c - 1e-12 <= v <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), positive, positive)
def test_attention_scale_invariance(seed, alpha, beta):
    g = torch.Generator().manual_seed(seed)
    s = [torch.randn(2, 3, 5, 5, generator=g, dtype=torch.float64)]
    t = [torch.randn(2, 4, 5, 5, generator=g, dtype=torch.float64)]
    base = attention_transfer_loss(s, t).item()
    assert attention_transfer_loss([alpha * s[0]], [beta * t[0]]).item() == pytest.approx(base, abs=1e-7)
    assert 0 <= base <= 2


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 1), st.floats(0, 1))
def test_relative_accuracy_bounds(t, s):
    r = relative_accuracy(t, s)
    assert r >= 0 and (r <= 100 + 1e-9 if s <= t else r > 100 - 1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 300), st.integers(1, 299), st.lists(st.integers(1, 299), max_size=3, unique=True))
def test_budget_decays_stay_inside_budget(epochs, budget, decays):
    decays = sorted(d for d in decays if d < epochs)
    if budget >= epochs:
        return
    s = budget_schedule(TrainSchedule(epochs=epochs, lr_decay_epochs=decays), budget)
    assert s.epochs == budget
    assert all(1 <= d < budget for d in s.lr_decay_epochs)
    assert list(s.lr_decay_epochs) == sorted(set(s.lr_decay_epochs))


weights = st.fixed_dictionaries({
    k: st.floats(0, 50, allow_nan=False) for k in ("lambda_ie", "lambda_US", "lambda_CM", "lambda_GT", "lambda_AT")
})


@settings(max_examples=60, deadline=None)
@given(weights, st.integers(0, 10**6), st.booleans(), st.booleans(), st.integers(2, 200))
def test_config_round_trip(w, seed, at, bn, epochs):
    cfg = parse_config({"weights": w, "seed": seed, "ablation": {"enable_AT": at, "enable_BN": bn}},
                       [f"schedule.epochs={epochs}"])
    again = parse_config(cfg.to_dict())
    assert again == cfg and again.config_hash() == cfg.config_hash()
    eff = cfg.effective_weights()
    assert (eff.lambda_AT == 0) == (not at or w["lambda_AT"] == 0)
    assert (eff.lambda_bn > 0) == bn


@settings(max_examples=30, deadline=None)
@given(weights)
def test_weights_round_trip(w):
    lw = LossWeights(**w)
    assert LossWeights(**lw.to_dict()) == lw
