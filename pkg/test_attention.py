#!/usr/bin/env python3
# -*- coding: UTF-8 -*-

"""
Grouped attention variants: grouping, oracle agreement, PGQA noise and the layer wrapper.
"""

import logging

import numpy as np
import pytest
import torch

from utils import tensor_ops as ops
from utils.allocation import AllocationVector, kdgqa_allocate
from utils.exceptions import ContractError, ValidationError
from utils.layers import (
    AttentionVariantConfig,
    GroupAttentionMap,
    GroupedQueryAttention,
    NoiseSpec,
    group_boundaries,
    grouped_attention_forward,
    head_outputs,
    normalize_variant,
    pgqa_perturb,
)


def naive_attention(q, k, v, alloc):
    """Per-head softmax(q k^T / sqrt(d_k)) v with head h reading key head group_of(h)."""
    q, k, v = (t.detach().numpy() for t in (q, k, v))
    B, T, H, d_k = q.shape
    owner = np.repeat(np.arange(len(alloc)), alloc)
    out = np.zeros((B, T, H, d_k))
    for b in range(B):
        for h in range(H):
            g = owner[h]
            scores = q[b, :, h] @ k[b, :, g].T / np.sqrt(d_k)
            scores = np.exp(scores - scores.max(axis=-1, keepdims=True))
            probs = scores / scores.sum(axis=-1, keepdims=True)
            out[b, :, h] = probs @ v[b, :, g]
    return out.reshape(B, T, H * d_k)


def qkv(B=2, T=5, H=4, G=2, d_k=3):
    return torch.randn(B, T, H, d_k), torch.randn(B, T, G, d_k), torch.randn(B, T, G, d_k)


def test_group_boundaries():
    assert group_boundaries(AllocationVector((2, 2, 2))) == [(0, 2), (2, 4), (4, 6)]
    assert group_boundaries(AllocationVector((1, 2, 4, 5))) == [(0, 1), (1, 3), (3, 7), (7, 12)]
    assert group_boundaries(AllocationVector((8,))) == [(0, 8)]


def test_variant_config_validation():
    assert normalize_variant("DGQA-EMA") == "dgqa_ema"
    with pytest.raises(ValidationError):
        normalize_variant("flash")
    with pytest.raises(ValidationError):
        AttentionVariantConfig(variant="mha", n_heads=8, n_kv_heads=4)
    with pytest.raises(ValidationError):
        AttentionVariantConfig(variant="mqa", n_heads=8, n_kv_heads=2)
    with pytest.raises(ValidationError):
        AttentionVariantConfig(variant="gqa", n_heads=8, n_kv_heads=3)
    with pytest.raises(ValidationError):
        AttentionVariantConfig(variant="dgqa-diff", n_heads=8, n_kv_heads=4, alpha=1.5)
    cfg = AttentionVariantConfig(variant="kdgqa", n_heads=12, n_kv_heads=5)
    assert not cfg.dynamic
    assert AttentionVariantConfig(variant="dgqa-diff").cache_mode == "difference"


def test_mha_matches_naive_oracle():
    q, k, v = qkv(H=4, G=4)
    cfg = AttentionVariantConfig(variant="mha", n_heads=4, n_kv_heads=4, head_dim=3)
    out, maps = grouped_attention_forward(q, k, v, AllocationVector((1, 1, 1, 1)), cfg)
    assert np.allclose(out.numpy(), naive_attention(q, k, v, [1, 1, 1, 1]), atol=1e-10)
    assert len(maps) == 4


def random_layer(variant, G, H=4, d_k=3):
    layer = GroupedQueryAttention(H * d_k, AttentionVariantConfig(variant=variant, n_heads=H, n_kv_heads=G, head_dim=d_k))
    with torch.no_grad():
        for p in layer.parameters():
            p.copy_(0.5 * torch.randn_like(p))
    return layer


def layer_by_hand(layer, x, alloc):
    B, T, _ = x.shape
    d_k = layer.attention_head_size
    q = layer.query_layer(x).reshape(B, T, layer.num_attention_heads, d_k)
    k = layer.key_layer(x).reshape(B, T, layer.num_kv_heads, d_k)
    v = layer.value_layer(x).reshape(B, T, layer.num_kv_heads, d_k)
    return layer.dense(torch.from_numpy(naive_attention(q, k, v, alloc)).to(x.dtype))


@pytest.mark.parametrize("seed", range(50))
def test_gqa_degenerates_to_mha_and_mqa(seed):
    torch.manual_seed(seed)
    x = torch.randn(2, 5, 12)
    full = random_layer("mha", 4)
    mha_out = full(x)
    assert torch.allclose(mha_out, layer_by_hand(full, x, [1, 1, 1, 1]), atol=1e-6)
    full.set_variant(AttentionVariantConfig(variant="gqa", n_heads=4, n_kv_heads=4, head_dim=3))
    assert torch.allclose(full(x), mha_out, atol=1e-6)

    single = random_layer("gqa", 1)
    gqa_out = single(x)
    single.set_variant(AttentionVariantConfig(variant="mqa", n_heads=4, n_kv_heads=1, head_dim=3))
    assert torch.allclose(single(x), gqa_out, atol=1e-6)
    assert torch.allclose(gqa_out, layer_by_hand(single, x, [4]), atol=1e-6)

    # one key / value head shared by all four query heads is mha with that head tiled
    with torch.no_grad():
        for name in ("query_layer", "dense"):
            getattr(full, name).weight.copy_(getattr(single, name).weight)
            getattr(full, name).bias.copy_(getattr(single, name).bias)
        for name in ("key_layer", "value_layer"):
            getattr(full, name).weight.copy_(getattr(single, name).weight.repeat(1, 4))
            getattr(full, name).bias.copy_(getattr(single, name).bias.repeat(4))
    assert torch.allclose(full(x), gqa_out, atol=1e-6)


def test_uneven_allocation_matches_oracle_and_rows_sum_to_one():
    q, k, v = qkv(H=12, G=4, d_k=2)
    cfg = AttentionVariantConfig(variant="dgqa_ema", n_heads=12, n_kv_heads=4, head_dim=2)
    alloc = AllocationVector((1, 2, 4, 5))
    out, maps = grouped_attention_forward(q, k, v, alloc, cfg)
    assert np.allclose(out.numpy(), naive_attention(q, k, v, [1, 2, 4, 5]), atol=1e-10)
    assert [m.heads for m in maps] == [(0, 1), (1, 3), (3, 7), (7, 12)]
    for m in maps:
        assert torch.allclose(m.A_hat.sum(dim=-1), torch.ones(()), atol=1e-5)


def test_kdgqa_recomputes_allocation_from_keys():
    q, k, v = qkv(H=12, G=4, d_k=2)
    cfg = AttentionVariantConfig(variant="kdgqa", n_heads=12, n_kv_heads=4, head_dim=2)
    out, maps = grouped_attention_forward(q, k, v, AllocationVector.uniform(12, 4), cfg)
    alloc = kdgqa_allocate(k, 12)
    assert [m.heads for m in maps] == group_boundaries(alloc)
    assert np.allclose(out.numpy(), naive_attention(q, k, v, list(alloc.q)), atol=1e-10)


def test_single_token_returns_values():
    q, k, v = qkv(T=1, H=4, G=2)
    cfg = AttentionVariantConfig(variant="gqa", n_heads=4, n_kv_heads=2, head_dim=3)
    heads = head_outputs(q, k, v, None, cfg)
    for h in range(4):
        assert torch.allclose(heads[:, h, 0], v[:, 0, h // 2])


def test_head_outputs_concatenate_to_forward():
    q, k, v = qkv()
    cfg = AttentionVariantConfig(variant="gqa", n_heads=4, n_kv_heads=2, head_dim=3)
    heads = head_outputs(q, k, v, None, cfg)
    out, _ = grouped_attention_forward(q, k, v, None, cfg)
    B, H, T, d_k = heads.shape
    assert torch.equal(heads.permute(0, 2, 1, 3).reshape(B, T, H * d_k), out)


def test_permuting_queries_within_a_group_permutes_outputs():
    q, k, v = qkv(H=4, G=2)
    cfg = AttentionVariantConfig(variant="gqa", n_heads=4, n_kv_heads=2, head_dim=3)
    swapped = q[:, :, [1, 0, 2, 3]]
    a = head_outputs(q, k, v, None, cfg)
    b = head_outputs(swapped, k, v, None, cfg)
    assert torch.allclose(a[:, [1, 0, 2, 3]], b)


def test_identical_kv_heads_make_outputs_query_only():
    q, k, v = qkv(H=4, G=2)
    k = k[:, :, :1].expand(-1, -1, 2, -1).contiguous()
    v = v[:, :, :1].expand(-1, -1, 2, -1).contiguous()
    cfg = AttentionVariantConfig(variant="dgqa_ema", n_heads=4, n_kv_heads=2, head_dim=3)
    a = head_outputs(q, k, v, AllocationVector((1, 3)), cfg)
    b = head_outputs(q, k, v, AllocationVector((3, 1)), cfg)
    assert torch.allclose(a, b, atol=1e-12)


def test_allocation_mismatch_is_a_contract_error():
    q, k, v = qkv(H=4, G=2)
    cfg = AttentionVariantConfig(variant="dgqa_ema", n_heads=4, n_kv_heads=2, head_dim=3)
    with pytest.raises(ContractError):
        grouped_attention_forward(q, k, v, AllocationVector((2, 3)), cfg)
    with pytest.raises(ContractError):
        grouped_attention_forward(q, k, v[:, :3], None, cfg)


"""
PGQA
"""


def test_constant_map_noise_is_mean_off_diagonal():
    T = 4
    A = torch.full((2, 3, T, T), 1.0 / T)
    perturbed = pgqa_perturb(GroupAttentionMap(A, 0, (0, 3)), NoiseSpec(0, 0, 0, 0))
    assert perturbed.sigma == 0.0
    off = ~torch.eye(T, dtype=torch.bool)
    assert torch.allclose(perturbed.noise[..., off], torch.full((), 1.0 / T))
    assert torch.allclose(perturbed.A_hat[..., off], torch.zeros(()), atol=1e-15)
    assert torch.allclose(torch.diagonal(perturbed.A_hat, dim1=-2, dim2=-1), torch.full((), 1.0 / T))


def test_noise_diagonal_is_zero_and_replayable():
    A = ops.softmax_lastdim(torch.randn(2, 2, 6, 6))
    for seed in range(5):
        spec = NoiseSpec(seed, 3, 1, 0)
        first = pgqa_perturb(GroupAttentionMap(A, 0, (0, 2)), spec)
        second = pgqa_perturb(GroupAttentionMap(A, 0, (0, 2)), spec)
        assert torch.equal(first.noise, second.noise)
        assert torch.count_nonzero(torch.diagonal(first.noise, dim1=-2, dim2=-1)) == 0
    later = pgqa_perturb(GroupAttentionMap(A, 0, (0, 2)), NoiseSpec(4, 4, 1, 0))
    assert not torch.equal(first.noise, later.noise)


def test_noise_matches_group_statistics_on_a_large_map():
    T = 1000
    A = torch.rand(1, 1, T, T)
    group_map = GroupAttentionMap(A, 0, (0, 1))
    noise = pgqa_perturb(group_map, NoiseSpec(7, 0, 0, 0)).noise
    off = ~torch.eye(T, dtype=torch.bool)
    sample = noise[0, 0][off]
    standard_error = group_map.sigma / np.sqrt(sample.numel())
    assert abs(sample.mean().item() - group_map.mu) < 3 * standard_error
    assert abs(sample.std(unbiased=False).item() - group_map.sigma) < 0.02 * group_map.sigma
    assert torch.count_nonzero(torch.diagonal(noise[0, 0])) == 0


def test_single_token_map_is_left_alone(caplog):
    A = torch.ones(1, 2, 1, 1)
    with caplog.at_level(logging.WARNING):
        out = pgqa_perturb(GroupAttentionMap(A, 0, (0, 2)), NoiseSpec(0, 0, 0, 0))
    assert out.A_hat is A and out.noise is None
    assert "single-token" in caplog.text


def test_pgqa_with_zero_statistics_reproduces_gqa():
    cfg = AttentionVariantConfig(variant="pgqa", n_heads=4, n_kv_heads=2, head_dim=4)
    layer = GroupedQueryAttention(16, cfg)
    x = torch.randn(2, 5, 16)
    noisy = layer(x, step=3)
    layer.stats_override = (0.0, 0.0)
    silent = layer(x, step=3)
    layer.stats_override = None
    layer.set_variant(AttentionVariantConfig(variant="gqa", n_heads=4, n_kv_heads=2, head_dim=4))
    plain = layer(x, step=3)
    assert torch.equal(silent, plain)
    assert not torch.allclose(noisy, plain)


def test_pgqa_noise_at_inference_flag():
    cfg = AttentionVariantConfig(variant="pgqa", n_heads=4, n_kv_heads=2, head_dim=4, noise_at_inference=False)
    layer = GroupedQueryAttention(16, cfg).eval()
    x = torch.randn(1, 5, 16)
    quiet = layer(x)
    layer.set_variant(AttentionVariantConfig(variant="gqa", n_heads=4, n_kv_heads=2, head_dim=4))
    assert torch.equal(quiet, layer(x))


"""
Layer wrapper
"""


def test_dgqa_layer_logs_events_and_freezes_in_eval():
    cfg = AttentionVariantConfig(variant="dgqa-diff", n_heads=8, n_kv_heads=4, head_dim=2, window=2)
    layer = GroupedQueryAttention(16, cfg, layer_index=1)
    for step in range(5):
        layer(torch.randn(2, 6, 16), step=step)
    assert [e["step"] for e in layer.pending_events] == [0, 2, 4]
    assert all(e["layer"] == 1 for e in layer.pending_events)
    assert layer.pending_events[0]["alloc"] == [2, 2, 2, 2]

    layer.eval()
    frozen = layer.scheduler.allocation
    x = torch.randn(1, 6, 16)
    first, second = layer(x, step=6), layer(x, step=6)
    assert torch.equal(first, second)
    assert layer.last_alloc == frozen and len(layer.pending_events) == 3


def test_allocation_state_round_trip():
    cfg = AttentionVariantConfig(variant="dgqa-ema", n_heads=8, n_kv_heads=4, head_dim=2, window=1)
    layer = GroupedQueryAttention(16, cfg)
    for step in range(3):
        layer(torch.randn(2, 6, 16), step=step)
    clone = GroupedQueryAttention(16, cfg)
    clone.load_allocation_state(layer.allocation_state())
    assert clone.last_alloc == layer.last_alloc
    assert clone.scheduler.cache == layer.scheduler.cache


def test_layer_rejects_mismatched_configs():
    with pytest.raises(ValidationError):
        GroupedQueryAttention(15, AttentionVariantConfig(n_heads=4, n_kv_heads=2, head_dim=4))
    layer = GroupedQueryAttention(16, AttentionVariantConfig(n_heads=4, n_kv_heads=2, head_dim=4))
    with pytest.raises(ValidationError):
        layer.set_variant(AttentionVariantConfig(variant="mha", n_heads=4, n_kv_heads=4, head_dim=4))
