import json
import math

import numpy as np
import pytest

from sparsevqa import autodiff as ad
from sparsevqa.autodiff import Tensor, Tape, backward, grad_check
from sparsevqa.losses import (BiasPrior, bce_loss, entropy_penalty,
                              fit_bias_prior, gate_value, lmh_fuse, lmh_loss,
                              poe_fuse)

# w . h = softplus^-1(1), which pins the gate to exactly one
GATE_ONE = math.log(math.e - 1.0)


def test_bce_saturated_correct_is_near_zero():
    loss = bce_loss(Tensor([[20.0]]), np.array([[1.0]]))
    assert float(loss.data) < 1e-8


def test_bce_analytic_value():
    loss = bce_loss(Tensor([[0.0]]), np.array([[0.5]]))
    assert np.isclose(float(loss.data), math.log(2.0), atol=1e-12)


def test_bce_matches_scalar_loop():
    rng = np.random.default_rng(0)
    logits = rng.normal(scale=3.0, size=(7, 5))
    targets = rng.uniform(size=(7, 5))
    loss = float(bce_loss(Tensor(logits), targets).data)
    acc = 0.0
    for i in range(7):
        for j in range(5):
            p = 1.0 / (1.0 + math.exp(-logits[i, j]))
            t = targets[i, j]
            acc -= t * math.log(max(p, 1e-9)) + (1 - t) * math.log(max(1 - p, 1e-9))
    assert np.isclose(loss, acc / 35.0, atol=1e-12)


def test_bce_rejects_bad_targets():
    with pytest.raises(ValueError):
        bce_loss(Tensor([[0.0]]), np.array([[1.5]]))


def test_poe_uniform_identity():
    p_m = Tensor([[0.2, 0.3, 0.5]])
    fused = poe_fuse(p_m, np.array([[1 / 3, 1 / 3, 1 / 3]]))
    assert np.allclose(fused.data, p_m.data, atol=1e-9)


def test_poe_analytic_product():
    fused = poe_fuse(Tensor([[0.5, 0.5]]), np.array([[0.9, 0.1]]))
    assert np.allclose(fused.data, [[0.9, 0.1]], atol=1e-12)


def test_poe_argmax_matches_product_oracle():
    rng = np.random.default_rng(1)
    for _ in range(25):
        p_m = rng.dirichlet(np.ones(6))
        p_b = rng.dirichlet(np.ones(6))
        fused = poe_fuse(Tensor(p_m[None]), p_b[None])
        assert np.argmax(fused.data) == np.argmax(p_m * p_b)


def test_poe_scaling_invariance():
    rng = np.random.default_rng(2)
    p_m = rng.dirichlet(np.ones(5))[None]
    p_b = rng.dirichlet(np.ones(5))[None]
    a = poe_fuse(Tensor(p_m), p_b).data
    b = poe_fuse(Tensor(p_m), 7.0 * p_b).data
    assert np.allclose(a, b, atol=1e-12)


def _gate_inputs(g_target, dim=4):
    # h = e1, w = (softplus^-1(g), 0, ...) so softplus(w . h) = g_target
    h = np.zeros((1, dim))
    h[0, 0] = 1.0
    w = np.zeros(dim)
    w[0] = math.log(math.expm1(g_target)) if g_target > 0 else -40.0
    return Tensor(h), Tensor(w)


def test_gate_is_nonnegative():
    rng = np.random.default_rng(3)
    h = Tensor(rng.normal(size=(8, 5)))
    w = Tensor(rng.normal(size=5))
    g = gate_value(h, w)
    assert np.all(g.data >= 0.0)


def test_lmh_fuse_closed_gate_returns_main():
    p_m = np.array([[0.1, 0.6, 0.3]])
    h, w = _gate_inputs(0.0)
    fused, g = lmh_fuse(Tensor(p_m), np.array([[0.7, 0.2, 0.1]]), h, w)
    assert float(g.data[0]) < 1e-16
    assert np.allclose(fused.data, p_m, atol=1e-9)


def test_lmh_fuse_gate_one_equals_poe():
    rng = np.random.default_rng(4)
    p_m = rng.dirichlet(np.ones(6))[None]
    p_b = rng.dirichlet(np.ones(6))[None]
    h, w = _gate_inputs(1.0)
    fused, g = lmh_fuse(Tensor(p_m), p_b, h, w)
    assert np.isclose(float(g.data[0]), 1.0, atol=1e-15)
    assert np.allclose(fused.data, poe_fuse(Tensor(p_m), p_b).data, atol=1e-12)


def test_lmh_fuse_gate_two_hand_product():
    p_m = np.array([[0.6, 0.4]])
    p_b = np.array([[0.9, 0.1]])
    h, w = _gate_inputs(2.0)
    fused, _ = lmh_fuse(Tensor(p_m), p_b, h, w)
    expected = np.array([0.6 * 0.81, 0.4 * 0.01])
    expected /= expected.sum()
    assert np.allclose(fused.data[0], expected, atol=1e-9)


def test_entropy_uniform_prior_is_log_k():
    p_b = np.full((1, 4), 0.25)
    h, w = _gate_inputs(3.0)
    g = gate_value(h, w)
    r = entropy_penalty(p_b, g, z=1.0)
    assert np.isclose(float(r.data), math.log(4.0), atol=1e-9)


def test_entropy_zero_gate_is_log_k():
    p_b = np.array([[0.7, 0.2, 0.05, 0.05]])
    h, w = _gate_inputs(0.0)
    r = entropy_penalty(p_b, gate_value(h, w), z=2.0)
    assert np.isclose(float(r.data), 2.0 * math.log(4.0), atol=1e-8)


def test_entropy_direct_evaluation():
    p_b = np.array([[0.9, 0.1]])
    h, w = _gate_inputs(1.0)
    r = entropy_penalty(p_b, gate_value(h, w), z=1.0)
    expected = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
    assert np.isclose(float(r.data), expected, atol=1e-6)
    assert np.isclose(expected, 0.3251, atol=5e-5)


def test_entropy_rejects_negative_z():
    with pytest.raises(ValueError):
        entropy_penalty(np.array([[0.5, 0.5]]), Tensor([1.0]), z=-0.1)


def test_lmh_loss_reduces_to_bce():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(3, 4))
    targets = rng.uniform(size=(3, 4))
    p_b = rng.dirichlet(np.ones(4), size=3)
    h = Tensor(np.tile([[1.0, 0, 0]], (3, 1)))
    w = Tensor(np.array([-40.0, 0.0, 0.0]))
    full = lmh_loss(Tensor(logits), p_b, h, w, targets, z=0.0)
    plain = bce_loss(Tensor(logits), targets)
    assert np.isclose(float(full.data), float(plain.data), atol=1e-9)


def test_lmh_loss_nonnegative():
    rng = np.random.default_rng(6)
    for _ in range(10):
        logits = Tensor(rng.normal(scale=4.0, size=(4, 5)))
        targets = rng.uniform(size=(4, 5))
        p_b = rng.dirichlet(np.ones(5), size=4)
        h = Tensor(rng.normal(size=(4, 3)))
        w = Tensor(rng.normal(size=3))
        loss = lmh_loss(logits, p_b, h, w, targets, z=0.36)
        assert float(loss.data) >= 0.0


def test_bias_prior_receives_no_gradient():
    rng = np.random.default_rng(7)
    logits = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    p_b = Tensor(rng.dirichlet(np.ones(3), size=2), requires_grad=True)
    h = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=4), requires_grad=True)
    targets = rng.uniform(size=(2, 3))
    with Tape() as tape:
        loss = lmh_loss(logits, p_b, h, w, targets, z=0.5)
        backward(loss, tape)
    assert p_b.grad is None
    assert logits.grad is not None and np.any(logits.grad != 0)
    assert w.grad is not None and h.grad is not None


def test_lmh_loss_gradients_check():
    rng = np.random.default_rng(8)
    p_b = rng.dirichlet(np.ones(4), size=3)
    targets = rng.uniform(size=(3, 4))
    h = Tensor(rng.normal(size=(3, 5)))
    base_w = rng.normal(size=5)
    base_logits = rng.normal(size=(3, 4))

    w_const = Tensor(base_w.copy())
    err = grad_check(
        lambda t: lmh_loss(t, p_b, h, w_const, targets, z=0.36),
        Tensor(base_logits.copy()), step=1e-5)
    assert err < 1e-4
    logits_const = Tensor(base_logits.copy())
    err = grad_check(
        lambda t: lmh_loss(logits_const, p_b, h, t, targets, z=0.36),
        Tensor(base_w.copy()), step=1e-5)
    assert err < 1e-4


def test_fit_bias_prior_frequencies():
    class Ex:
        def __init__(self, proto, answer, k=2):
            self.prototype = proto
            self.targets = np.eye(k)[answer]
    examples = [Ex(0, 0) for _ in range(80)] + [Ex(0, 1) for _ in range(20)]
    prior = fit_bias_prior(examples, answers=2, smoothing=0.0)
    assert np.allclose(prior.lookup(0), [0.8, 0.2])


def test_fit_bias_prior_smoothing_uniform():
    prior = BiasPrior(table={}, answers=4, smoothing=1.0)
    assert np.allclose(prior.lookup(123), [0.25] * 4)


def test_fit_bias_prior_recovers_generator():
    from sparsevqa.data import SynthSpec, generate
    spec = SynthSpec(answers=6, prototypes=3, beta=0.8, gamma=0.5,
                     train_size=30000, test_size=10, seed=11)
    train, _ = generate(spec)
    prior = fit_bias_prior(train.examples, answers=6, smoothing=0.0)
    slices = spec.answer_slices()
    types = spec.prototype_types()
    for p in range(3):
        sl = slices[types[p]]
        expected = np.zeros(6)
        for a in sl:
            expected[a] = spec.beta if a == train.preferred[p] else \
                (1 - spec.beta) / (len(sl) - 1)
        tv = 0.5 * np.abs(prior.lookup(p) - expected).sum()
        assert tv < 0.02


def test_bias_prior_json_round_trip():
    prior = BiasPrior(table={3: np.array([0.7, 0.3])}, answers=2, smoothing=0.5)
    back = BiasPrior.from_json(prior.to_json())
    assert back.answers == 2
    assert back.smoothing == 0.5
    assert np.allclose(back.lookup(3), [0.7, 0.3])
    assert np.allclose(back.lookup(99), [0.5, 0.5])


def test_lookup_batch_shapes():
    prior = BiasPrior(table={0: np.array([1.0, 0.0])}, answers=2)
    out = prior.lookup_batch(np.array([0, 1, 0]))
    assert out.shape == (3, 2)
    assert np.allclose(out[1], [0.5, 0.5])
