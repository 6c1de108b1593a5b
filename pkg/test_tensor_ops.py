#!/usr/bin/env python3
# -*- coding: UTF-8 -*-

"""
Forward contracts of the dense ops, the gradient tape and the finite-difference checker.
"""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from utils import tensor_ops as ops
from utils.allocation import AllocationVector
from utils.exceptions import ContractError, DimensionError
from utils.layers import AttentionVariantConfig, grouped_attention_forward


def naive_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def test_matmul_small_cases():
    eye = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    rhs = torch.tensor([[3.0, 4.0], [5.0, 6.0]])
    assert torch.equal(ops.matmul(eye, rhs), rhs)
    assert ops.matmul(torch.tensor([[1.0, 2.0]]), torch.tensor([[3.0], [4.0]])).item() == 11.0


def test_matmul_matches_triple_loop():
    a, b = torch.randn(5, 7), torch.randn(7, 3)
    expected = naive_matmul(a.numpy(), b.numpy())
    assert np.allclose(ops.matmul(a, b).numpy(), expected, atol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as e:
        ops.matmul(torch.zeros(2, 3), torch.zeros(4, 5))
    assert "(2, 3)" in str(e.value) and "(4, 5)" in str(e.value)


def test_softmax_cases():
    assert torch.allclose(ops.softmax_lastdim(torch.zeros(3)), torch.full((3,), 1.0 / 3.0))
    big = ops.softmax_lastdim(torch.tensor([1000.0, 0.0]))
    assert abs(big[0].item() - 1.0) < 1e-12 and abs(big[1].item()) < 1e-12
    x = np.array([1.0, 2.0, 3.0])
    oracle = np.exp(x) / np.exp(x).sum()
    assert np.allclose(ops.softmax_lastdim(torch.from_numpy(x)).numpy(), oracle, atol=1e-15)


@settings(deadline=None, max_examples=50)
@given(
    arrays(
        np.float64,
        st.tuples(st.integers(1, 4), st.integers(1, 6)),
        elements=st.floats(-50.0, 50.0, allow_nan=False),
    )
)
def test_softmax_rows_are_distributions(x):
    probs = ops.softmax_lastdim(torch.from_numpy(x)).numpy()
    assert np.all(probs >= 0.0) and np.all(probs <= 1.0)
    assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-12)


def test_layernorm_cases():
    ones, zeros = torch.ones(4), torch.zeros(4)
    assert torch.equal(ops.layernorm(torch.full((4,), 7.0), ones, zeros), torch.zeros(4))
    out = ops.layernorm(torch.tensor([1.0, -1.0]), torch.ones(2), torch.zeros(2), eps=1e-12)
    assert torch.allclose(out, torch.tensor([1.0, -1.0]), atol=1e-9)

    x = np.random.default_rng(0).normal(size=4)
    gain, bias = np.array([1.0, 2.0, 0.5, -1.0]), np.array([0.1, 0.0, -0.2, 0.3])
    oracle = (x - x.mean()) / np.sqrt(x.var() + 1e-5) * gain + bias
    got = ops.layernorm(torch.from_numpy(x), torch.from_numpy(gain), torch.from_numpy(bias))
    assert np.allclose(got.numpy(), oracle, atol=1e-12)


def test_elementwise_and_reductions():
    assert ops.l2norm_lastdim(torch.tensor([3.0, 4.0])).item() == 5.0
    assert ops.l2norm_lastdim(torch.zeros(3)).item() == 0.0
    for C in (2, 10):
        loss = ops.cross_entropy_logits(torch.zeros(4, C), torch.tensor([0, 1, 1, 0]))
        assert abs(loss.item() - math.log(C)) < 1e-12
    with pytest.raises(DimensionError):
        ops.add(torch.zeros(2, 3), torch.zeros(4))
    with pytest.raises(ContractError):
        ops.cross_entropy_logits(torch.zeros(2, 3), torch.tensor([0, 3]))
    with pytest.raises(DimensionError):
        ops.slice_dim(torch.zeros(4), 0, 2, 6)


def test_gelu_uses_tanh_form():
    x = torch.linspace(-3, 3, 13)
    expected = 0.5 * x * (1 + torch.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    assert torch.allclose(ops.gelu(x), expected, atol=1e-15)


def test_tape_records_ops_and_gradients():
    x = torch.randn(3, requires_grad=True)
    with ops.GradTape() as tape:
        scaled = ops.scale(x, 2.0)
        activated = ops.gelu(scaled)
        loss = ops.reduce_sum(activated)
    tape.backward(loss)
    assert tape.ops() == ["scale", "gelu", "reduce_sum"]
    assert torch.allclose(tape.grad_of(activated), torch.ones(3))
    # gradients flow from the last recorded op back to the first
    inner = [i for i in tape.visit_order if i < 2]
    assert inner == [1, 0]
    with pytest.raises(ContractError):
        tape.backward(activated)


_WEIGHTS = torch.Generator().manual_seed(1)


def weighted(fn, shape):
    w = torch.randn(shape, generator=_WEIGHTS, dtype=torch.float64)
    return lambda x: (fn(x) * w).sum()


@pytest.mark.parametrize(
    "name,fn,out_shape",
    [
        ("softmax", ops.softmax_lastdim, (3, 4)),
        ("gelu", ops.gelu, (3, 4)),
        ("layernorm", lambda x: ops.layernorm(x, torch.ones(4) * 1.5, torch.full((4,), 0.1)), (3, 4)),
        ("l2norm", ops.l2norm_lastdim, (3,)),
        ("transpose", ops.transpose, (4, 3)),
        ("permute", lambda x: ops.permute(x, (1, 0)), (4, 3)),
        ("reshape", lambda x: ops.reshape(x, (2, 6)), (2, 6)),
        ("slice", lambda x: ops.slice_dim(x, 1, 1, 3), (3, 2)),
        ("concat", lambda x: ops.concat([x, ops.scale(x, 3.0)], dim=0), (6, 4)),
        ("mul", lambda x: ops.mul(x, x), (3, 4)),
        ("reduce_mean", lambda x: ops.reduce_mean(x, dim=1), (3,)),
    ],
)
def test_grad_check_per_op(name, fn, out_shape):
    x = torch.rand(3, 4) + 0.5
    assert ops.grad_check(weighted(fn, out_shape), x) < 1e-5, name


def test_grad_check_sum_of_squares():
    x = torch.rand(6) + 0.5
    assert ops.grad_check(lambda t: ops.reduce_sum(ops.mul(t, t)), x) < 1e-7


def test_grad_check_cross_entropy():
    logits = torch.randn(3, 4)
    labels = torch.tensor([0, 3, 1])
    assert ops.grad_check(lambda t: ops.cross_entropy_logits(t, labels), logits) < 1e-5


def test_grad_check_matmul():
    b = torch.randn(4, 2)
    assert ops.grad_check(weighted(lambda a: ops.matmul(a, b), (3, 2)), torch.randn(3, 4)) < 1e-6


def test_grad_check_attention_block():
    cfg = AttentionVariantConfig(variant="gqa", n_heads=4, n_kv_heads=2, head_dim=3)
    k, v = torch.randn(1, 3, 2, 3), torch.randn(1, 3, 2, 3)
    alloc = AllocationVector((2, 2))
    f = weighted(lambda q: grouped_attention_forward(q, k, v, alloc, cfg)[0], (1, 3, 12))
    assert ops.grad_check(f, torch.randn(1, 3, 4, 3)) < 1e-4


def test_grad_check_contracts():
    with pytest.raises(ContractError):
        ops.grad_check(lambda t: t.sum(), torch.ones(2, dtype=torch.float32))
    with pytest.raises(ContractError):
        ops.grad_check(lambda t: t * 2, torch.ones(2))
    with pytest.raises(ContractError):
        ops.grad_check(lambda t: t.sum(), torch.ones(2), h=1e-2)


def test_precision_switch():
    assert ops.get_precision() == 64
    ops.set_precision(32)
    assert torch.get_default_dtype() == torch.float32
    with pytest.raises(ValueError):
        ops.set_precision(16)
