# -*- coding: UTF-8 -*-

import math
import logging
from dataclasses import asdict, dataclass
from itertools import accumulate
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from utils import tensor_ops as ops
from utils.allocation import (
    DIFFERENCE,
    EMA,
    AllocationVector,
    WindowScheduler,
    kdgqa_allocate,
)
from utils.constants import *
from utils.exceptions import ContractError, ValidationError

_NOISE_RETRIES = 8


def normalize_variant(name: str) -> str:
    variant = str(name).strip().lower().replace("-", "_")
    if variant not in VARIANTS:
        raise ValidationError(
            "unknown attention variant {!r}, choose from {}".format(
                name, ", ".join(v.replace("_", "-") for v in VARIANTS)
            )
        )
    return variant


@dataclass
class AttentionVariantConfig:
    variant: str = GQA
    n_heads: int = 8
    n_kv_heads: int = 4
    head_dim: int = 8
    window: int = DEFAULT_WINDOW
    alpha: float = DEFAULT_ALPHA
    seed: int = 0
    noise_at_inference: bool = True

    def __post_init__(self):
        self.variant = normalize_variant(self.variant)
        H, G = self.n_heads, self.n_kv_heads
        if not 1 <= G <= H:
            raise ValidationError("need 1 <= kv heads ({}) <= heads ({})".format(G, H))
        if self.variant in (GQA, PGQA) and H % G != 0:
            raise ValidationError(
                "{} needs kv heads dividing heads, got H={} G={}".format(self.variant, H, G)
            )
        if self.variant == MHA and G != H:
            raise ValidationError("mha needs kv heads == heads ({}), got {}".format(H, G))
        if self.variant == MQA and G != 1:
            raise ValidationError("mqa needs a single kv head, got {}".format(G))
        if self.head_dim < 1:
            raise ValidationError("head_dim must be positive, got {}".format(self.head_dim))
        if self.window < 1:
            raise ValidationError("window must be >= 1, got {}".format(self.window))
        if not 0.0 < self.alpha <= 1.0:
            raise ValidationError("alpha must lie in (0, 1], got {}".format(self.alpha))

    @property
    def dynamic(self) -> bool:
        return self.variant in DYNAMIC_VARIANTS

    @property
    def cache_mode(self) -> str:
        return DIFFERENCE if self.variant == DGQA_DIFF else EMA

    def to_dict(self) -> dict:
        return asdict(self)


class GroupAttentionMap(object):
    """
    Post-softmax attention weights of one group, [batch, heads_in_group, tokens, tokens],
    with the group statistics mu / sigma pooled over every entry of the group.
    """

    def __init__(self, A_hat, group, heads, mu=None, sigma=None, noise=None):
        self.A_hat = A_hat
        self.group = group
        self.heads = heads
        self.noise = noise
        self._mu, self._sigma = mu, sigma

    @property
    def mu(self) -> float:
        if self._mu is None:
            self._mu = self.A_hat.detach().mean().item()
        return self._mu

    @property
    def sigma(self) -> float:
        if self._sigma is None:
            self._sigma = self.A_hat.detach().std(unbiased=False).item()
        return self._sigma


@dataclass(frozen=True)
class NoiseSpec:
    """Counter-based noise stream for one (seed, step, layer, group)."""

    seed: int
    step: int
    layer: int
    group: int

    def sample(self, shape, dtype=None, attempt: int = 0) -> torch.Tensor:
        entropy = [int(self.seed), int(self.step), int(self.layer), int(self.group), attempt]
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
        raw = rng.standard_normal(size=tuple(shape))
        return torch.from_numpy(raw).to(dtype or torch.get_default_dtype())


def group_boundaries(alloc: AllocationVector) -> List[Tuple[int, int]]:
    """Left-to-right query ranges [start, end) per key-value head."""
    ends = list(accumulate(alloc.q))
    return [(end - size, end) for size, end in zip(alloc.q, ends)]


def pgqa_perturb(group_map: GroupAttentionMap, noise: NoiseSpec) -> GroupAttentionMap:
    """
    Subtract a zero-diagonal Gaussian matrix matched to the group's mu / sigma.
    The noise carries no gradient; the map is not renormalised afterwards.
    """
    A = group_map.A_hat
    tokens = A.shape[-1]
    if tokens < 2:
        logging.warning(
            "PGQA skipped for a single-token map (layer {}, group {})".format(
                noise.layer, noise.group
            )
        )
        return group_map
    mu, sigma = group_map.mu, group_map.sigma

    for attempt in range(_NOISE_RETRIES):
        R = noise.sample(A.shape, A.dtype, attempt)
        r_std = R.std(unbiased=False)
        if r_std > 0:
            break
    else:
        raise ContractError("could not draw a non-degenerate noise matrix")

    gaussian = sigma * (R - R.mean()) / r_std + mu
    diagonal = torch.eye(tokens, dtype=torch.bool)
    gaussian = gaussian.masked_fill(diagonal, 0.0)
    perturbed = ops.add(A, -gaussian)
    return GroupAttentionMap(
        perturbed, group_map.group, group_map.heads, mu=mu, sigma=sigma, noise=gaussian
    )


def _attend(q, k, v, alloc, cfg, step, layer, perturb, stats_override):
    if q.dim() != 4 or k.shape != v.shape or k.dim() != 4:
        raise ContractError(
            "expected q [B, T, H, d_k] and k, v [B, T, G, d_k], got {}, {}, {}".format(
                tuple(q.shape), tuple(k.shape), tuple(v.shape)
            )
        )
    B, T, H, d_k = q.shape
    G = k.shape[2]
    if k.shape[:2] != q.shape[:2] or k.shape[3] != d_k:
        raise ContractError(
            "q {} and k {} disagree on batch, tokens or head dim".format(
                tuple(q.shape), tuple(k.shape)
            )
        )
    if cfg.variant == KDGQA:
        alloc = kdgqa_allocate(k, H)
    elif alloc is None:
        alloc = AllocationVector.uniform(H, G)
    if alloc.G != G or alloc.n_q != H:
        raise ContractError(
            "allocation {} does not cover {} query heads over {} key heads".format(
                alloc.q, H, G
            )
        )

    scale = 1.0 / math.sqrt(d_k)
    outputs, maps = [], []
    for g, (start, end) in enumerate(group_boundaries(alloc)):
        q_g = ops.permute(ops.slice_dim(q, 2, start, end), (0, 2, 1, 3))
        k_g = ops.permute(ops.slice_dim(k, 2, g, g + 1), (0, 2, 3, 1))
        v_g = ops.permute(ops.slice_dim(v, 2, g, g + 1), (0, 2, 1, 3))
        # [B, h_g, T, d_k] x [B, 1, d_k, T]: the shared key head broadcasts over the group
        probs = ops.softmax_lastdim(ops.scale(ops.matmul(q_g, k_g), scale))
        mu, sigma = stats_override if stats_override is not None else (None, None)
        group_map = GroupAttentionMap(probs, g, (start, end), mu=mu, sigma=sigma)
        if perturb:
            group_map = pgqa_perturb(group_map, NoiseSpec(cfg.seed, step, layer, g))
        maps.append(group_map)
        outputs.append(ops.matmul(group_map.A_hat, v_g))
    return ops.concat(outputs, dim=1), maps, alloc


def head_outputs(q, k, v, alloc, cfg, step=0, layer=0, perturb=None, stats_override=None):
    """Per-head attention outputs [batch, H, tokens, d_k] before concatenation."""
    if perturb is None:
        perturb = cfg.variant == PGQA
    heads, _, _ = _attend(q, k, v, alloc, cfg, step, layer, perturb, stats_override)
    return heads


def grouped_attention_forward(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    alloc: Optional[AllocationVector],
    cfg: AttentionVariantConfig,
    step: int = 0,
    layer: int = 0,
    perturb: Optional[bool] = None,
    stats_override: Optional[Tuple[float, float]] = None,
):
    """
    Scaled dot-product attention with left-to-right query groups.

    :param q: [batch, tokens, H, d_k]
    :param k: [batch, tokens, G, d_k], v likewise
    :param alloc: query heads per key head; ignored for kdgqa (recomputed from k)
    :return: output [batch, tokens, H * d_k] and one GroupAttentionMap per group
    """
    if perturb is None:
        perturb = cfg.variant == PGQA
    heads, maps, _ = _attend(q, k, v, alloc, cfg, step, layer, perturb, stats_override)
    B, H, T, d_k = heads.shape
    out = ops.reshape(ops.permute(heads, (0, 2, 1, 3)), (B, T, H * d_k))
    return out, maps


class Linear(nn.Module):
    """y = x W + b, W stored as [in_features, out_features] (heads are column blocks)."""

    def __init__(self, in_features, out_features):
        super(Linear, self).__init__()
        self.weight = nn.Parameter(torch.empty(in_features, out_features))
        self.bias = nn.Parameter(torch.zeros(out_features))
        nn.init.normal_(self.weight, mean=0.0, std=0.02)

    def forward(self, x):
        return ops.add(ops.matmul(x, self.weight), self.bias)


class LayerNorm(nn.Module):
    def __init__(self, hidden_size, eps=1e-6):
        super(LayerNorm, self).__init__()
        self.weight = nn.Parameter(torch.ones(hidden_size))
        self.bias = nn.Parameter(torch.zeros(hidden_size))
        self.eps = eps

    def forward(self, x):
        return ops.layernorm(x, self.weight, self.bias, self.eps)


class GroupedQueryAttention(nn.Module):
    """
    Self-attention over H query heads sharing G key-value heads.

    The variant decides how query heads are grouped each pass: uniform (mha, mqa,
    gqa, pgqa), from the current key norms (kdgqa), or from the window scheduler
    (dgqa_*; frozen outside training). pgqa additionally perturbs the maps.
    """

    def __init__(self, hidden_size: int, config: AttentionVariantConfig, layer_index: int = 0):
        super(GroupedQueryAttention, self).__init__()
        if config.n_heads * config.head_dim != hidden_size:
            raise ValidationError(
                "The hidden size ({}) is not heads ({}) x head dim ({})".format(
                    hidden_size, config.n_heads, config.head_dim
                )
            )
        self.layer_index = layer_index
        self.num_attention_heads = config.n_heads
        self.num_kv_heads = config.n_kv_heads
        self.attention_head_size = config.head_dim
        self.all_head_size = config.n_heads * config.head_dim
        self.kv_size = config.n_kv_heads * config.head_dim

        self.query_layer = Linear(hidden_size, self.all_head_size)
        self.key_layer = Linear(hidden_size, self.kv_size)
        self.value_layer = Linear(hidden_size, self.kv_size)
        self.dense = Linear(self.all_head_size, hidden_size)

        self.stats_override = None  # (mu, sigma) replacing the PGQA group statistics
        self.record_heads = False
        self.recorded_heads = None
        self.pending_events = list()
        self.set_variant(config)

    def set_variant(self, config: AttentionVariantConfig):
        if (config.n_heads, config.n_kv_heads) != (self.num_attention_heads, self.num_kv_heads):
            raise ValidationError(
                "variant config for H={} G={} does not fit a layer built for H={} G={}".format(
                    config.n_heads, config.n_kv_heads, self.num_attention_heads, self.num_kv_heads
                )
            )
        self.config = config
        self.scheduler = None
        if config.dynamic:
            self.scheduler = WindowScheduler(
                config.n_heads,
                config.n_kv_heads,
                window=config.window,
                alpha=config.alpha,
                mode=config.cache_mode,
                layer=self.layer_index,
            )
        self.last_alloc = AllocationVector.uniform(config.n_heads, config.n_kv_heads)

    def transpose_for_scores(self, x, n_heads):
        B, T, _ = x.shape
        return ops.reshape(x, (B, T, n_heads, self.attention_head_size))

    def current_allocation(self, keys, step) -> Optional[AllocationVector]:
        if self.config.variant == KDGQA:
            return None
        if self.scheduler is None:
            return self.last_alloc
        if not self.training:
            return self.scheduler.allocation
        alloc, event = self.scheduler.observe(step, keys)
        if event is not None:
            self.pending_events.append(event)
        return alloc

    def forward(self, input_tensor, step=0):
        query = self.transpose_for_scores(self.query_layer(input_tensor), self.num_attention_heads)
        key = self.transpose_for_scores(self.key_layer(input_tensor), self.num_kv_heads)
        value = self.transpose_for_scores(self.value_layer(input_tensor), self.num_kv_heads)

        perturb = self.config.variant == PGQA and (
            self.training or self.config.noise_at_inference
        )
        alloc = self.current_allocation(key, step)
        heads, _, alloc = _attend(
            query, key, value, alloc, self.config, step, self.layer_index, perturb, self.stats_override
        )
        self.last_alloc = alloc
        if self.record_heads:
            self.recorded_heads = heads.detach().clone()

        B, H, T, d_k = heads.shape
        context_layer = ops.reshape(ops.permute(heads, (0, 2, 1, 3)), (B, T, H * d_k))
        return self.dense(context_layer)

    def allocation_state(self) -> dict:
        state = {"alloc": self.last_alloc.to_list()}
        if self.scheduler is not None:
            state["scheduler"] = self.scheduler.state_dict()
        return state

    def load_allocation_state(self, state: dict):
        self.last_alloc = AllocationVector(tuple(state["alloc"]))
        if self.scheduler is not None and "scheduler" in state:
            self.scheduler.load_state_dict(state["scheduler"])


class FeedForward(nn.Module):
    """
    Point-wise feed-forward layer is implemented by two dense layers with a tanh-GELU.
    """

    def __init__(self, hidden_size, inner_size):
        super(FeedForward, self).__init__()
        self.dense_1 = Linear(hidden_size, inner_size)
        self.dense_2 = Linear(inner_size, hidden_size)

    def forward(self, input_tensor):
        return self.dense_2(ops.gelu(self.dense_1(input_tensor)))


class TransformerLayer(nn.Module):
    """
    Pre-norm encoder block: x + attn(LN(x)), then h + ffn(LN(h)).
    """

    def __init__(self, hidden_size, intermediate_size, config, layer_index=0, layer_norm_eps=1e-6):
        super(TransformerLayer, self).__init__()
        self.attention_norm = LayerNorm(hidden_size, eps=layer_norm_eps)
        self.multi_head_attention = GroupedQueryAttention(hidden_size, config, layer_index)
        self.feed_forward_norm = LayerNorm(hidden_size, eps=layer_norm_eps)
        self.feed_forward = FeedForward(hidden_size, intermediate_size)

    def forward(self, hidden_states, step=0):
        attention_output = self.multi_head_attention(self.attention_norm(hidden_states), step)
        hidden_states = ops.add(hidden_states, attention_output)
        feedforward_output = self.feed_forward(self.feed_forward_norm(hidden_states))
        return ops.add(hidden_states, feedforward_output)


class TransformerEncoder(nn.Module):
    r"""One TransformerEncoder consists of several TransformerLayers.

    Args:
        n_layers(num): num of transformer layers in transformer encoder.
        hidden_size(num): the input and output hidden size.
        inner_size(num): the dimensionality in feed-forward layer.
        config(AttentionVariantConfig): attention variant shared by every layer.
        layer_norm_eps(float): a value added to the denominator for numerical stability.
    """

    def __init__(self, n_layers, hidden_size, inner_size, config, layer_norm_eps=1e-6):
        super(TransformerEncoder, self).__init__()
        self.layer = nn.ModuleList(
            [
                TransformerLayer(hidden_size, inner_size, config, i, layer_norm_eps)
                for i in range(n_layers)
            ]
        )

    def forward(self, hidden_states, step=0):
        for layer_module in self.layer:
            hidden_states = layer_module(hidden_states, step)
        return hidden_states

    def attentions(self) -> List[GroupedQueryAttention]:
        return [layer_module.multi_head_attention for layer_module in self.layer]

    def drain_events(self) -> List[dict]:
        events = []
        for attention in self.attentions():
            events.extend(attention.pending_events)
            attention.pending_events = list()
        return events
