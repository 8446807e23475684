from __future__ import annotations

import numpy as np
import pytest

from kalekit import tensor as T
from kalekit.align import KaleConfig, kale_loss
from kalekit.encoder import EncoderConfig, TransformerEncoder
from kalekit.errors import DimensionError, NumericError, ParameterError
from kalekit.gradcheck import check_parameters, gradient_check, relative_error
from kalekit.optim import Adam, AdamState, adam_step
from kalekit.tensor import Tensor
from kalekit.trainer import cosine_loss, in_batch_contrastive_loss

# a wide init keeps attention gradients far above finite-difference roundoff
TOY = EncoderConfig(num_layers=2, hidden_dim=8, num_heads=2, ff_dim=16, vocab_size=12, max_seq_len=6,
                    dropout_rate=0.0, init_std=0.5)


def _toy_inputs(seed=0):
    rng = np.random.default_rng(seed)
    ids = rng.integers(4, TOY.vocab_size, size=(3, 5))
    mask = np.ones_like(ids)
    mask[1, 3:] = 0
    ids[1, 3:] = 0
    return ids, mask


# -- Adam --------------------------------------------------------------------

def test_first_adam_step_moves_by_learning_rate_against_gradient_sign():
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    state = AdamState.for_parameter(p, learning_rate=0.1)
    adam_step(p, np.array([3.0, -0.5, 1e-3]), state)
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [0.9, -1.9, 0.4], atol=1e-5)
    assert state.step == 1


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(5)
    p = Tensor(rng.normal(size=4), requires_grad=True)
    ref = p.data.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    state = AdamState.for_parameter(p, learning_rate=0.01)
    for t in range(1, 6):
        g = rng.normal(size=4)
        adam_step(p, g, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_adam_minimises_quadratic():
    x = Tensor(np.array([3.0, -4.0]), requires_grad=True)
    opt = Adam({"x": x}, learning_rate=0.1)
    for _ in range(300):
        opt.zero_grad()
        (x * x).sum().backward()
        opt.step()
    assert np.max(np.abs(x.data)) < 1e-2


def test_adam_rejects_bad_state():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ParameterError):
        AdamState.for_parameter(p, beta1=1.0)
    with pytest.raises(ParameterError):
        AdamState.for_parameter(p, epsilon=0.0)
    with pytest.raises(DimensionError):
        adam_step(p, np.zeros(3), AdamState.for_parameter(p))


# -- gradient checking -------------------------------------------------------

def test_relative_error_floor_and_empty():
    assert relative_error(np.zeros(0), np.zeros(0)) == 0.0
    assert relative_error(np.array([1.0]), np.array([1.0])) == 0.0
    assert relative_error(np.array([1.0]), np.array([3.0])) == pytest.approx(0.5)


def test_gradient_check_detects_wrong_gradient():
    def broken(x):
        out = Tensor(x.data * x.data, requires_grad=x.requires_grad)
        if x.requires_grad:
            out._parents = (x,)
            out._backward = lambda g: (g * x.data,)  # missing factor 2
        return out.sum()

    assert gradient_check(broken, np.array([1.0, 2.0])) > 0.3


def test_gradient_check_rejects_non_finite_and_bad_step():
    with pytest.raises(NumericError):
        gradient_check(lambda x: T.log(x - 10.0).sum(), np.array([1.0]))
    with pytest.raises(ParameterError):
        gradient_check(lambda x: x.sum(), np.array([1.0]), h=0.0)


def test_gradcheck_toy_encoder_with_cosine_loss():
    query = TransformerEncoder(TOY, seed=1).astype(np.float64).eval()
    doc = TransformerEncoder(TOY.replace(num_layers=1), seed=2).astype(np.float64).eval()
    ids, mask = _toy_inputs()
    params = {f"q.{n}": p for n, p in query.parameters.items()}
    params.update({f"d.{n}": p for n, p in doc.parameters.items()})
    errors = check_parameters(lambda: cosine_loss(query(ids, mask), doc(ids[::-1], mask[::-1])), params)
    assert max(errors.values()) < 1e-3, max(errors.items(), key=lambda kv: kv[1])


def test_gradcheck_toy_encoder_with_contrastive_loss():
    query = TransformerEncoder(TOY, seed=3).astype(np.float64).eval()
    doc = TransformerEncoder(TOY, seed=4).astype(np.float64).eval()
    ids, mask = _toy_inputs(1)
    params = dict(query.parameters)
    errors = check_parameters(lambda: in_batch_contrastive_loss(query(ids, mask), doc(ids, mask), 0.5), params)
    assert max(errors.values()) < 1e-3


def test_gradcheck_toy_encoder_with_kale_loss():
    student = TransformerEncoder(TOY.replace(num_layers=1), seed=5).astype(np.float64).eval()
    teacher = TransformerEncoder(TOY, seed=6).astype(np.float64).eval()
    ids, mask = _toy_inputs(2)
    with T.no_grad():
        target = teacher(ids, mask).data
    for cfg in (KaleConfig(), KaleConfig(temperature=10.0), KaleConfig(direction="teacher_student")):
        errors = check_parameters(lambda: kale_loss(student(ids, mask), target, cfg), student.parameters)
        assert max(errors.values()) < 1e-3
