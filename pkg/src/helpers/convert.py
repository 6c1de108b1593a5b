# -*- coding: UTF-8 -*-

"""
Checkpoint conversion to fewer key-value heads by mean-pooling contiguous head blocks.
"""

import logging
from dataclasses import replace
from typing import Dict, List

import torch

from models.ViT import ViT, parameter_count
from utils.constants import *
from utils.exceptions import ConversionError, ValidationError

_POOLED = ("key_layer.weight", "key_layer.bias", "value_layer.weight", "value_layer.bias")


def pool_heads(tensor: torch.Tensor, n_heads: int, target_G: int, head_dim: int) -> torch.Tensor:
    """
    Average contiguous blocks of heads along the last axis.
    :param tensor: [..., n_heads * head_dim] (weight columns or a bias vector)
    :return: [..., target_G * head_dim]
    """
    lead = tuple(tensor.shape[:-1])
    blocks = tensor.reshape(lead + (target_G, n_heads // target_G, head_dim))
    return blocks.mean(dim=-2).reshape(lead + (target_G * head_dim,))


def mha_to_grouped(model: ViT, target_G: int, variant: str = GQA) -> ViT:
    """
    Build a grouped model whose key / value head g is the mean of source heads
    [g * H/G, (g + 1) * H/G). Query, output, MLP and embedding weights are copied.
    A grouped source is accepted when target_G divides its kv-head count.
    """
    cfg = model.config
    source_G = cfg.n_kv_heads
    if target_G < 1 or source_G % target_G != 0:
        raise ConversionError(
            "cannot pool {} key-value heads into {} groups (heads must divide evenly)".format(
                source_G, target_G
            )
        )
    if cfg.n_heads % target_G != 0:
        raise ConversionError("H={} is not divisible by G={}".format(cfg.n_heads, target_G))
    if target_G == source_G:
        variant = cfg.attention.variant
    try:
        attention = replace(cfg.attention, variant=variant, n_kv_heads=target_G)
        new_cfg = replace(cfg, n_kv_heads=target_G, attention=attention)
    except ValidationError as e:
        raise ConversionError(str(e))

    source_state = model.state_dict()
    dtype = next(iter(source_state.values())).dtype
    converted = ViT(new_cfg).to(dtype)
    state = dict()
    for name, tensor in source_state.items():
        if name.endswith(_POOLED):
            state[name] = pool_heads(tensor, source_G, target_G, cfg.head_dim)
        else:
            state[name] = tensor.clone()
    converted.load_state_dict(state, strict=True)
    logging.info(
        "Converted {} kv heads -> {} ({} -> {} parameters)".format(
            source_G, target_G, model.count_variables(), converted.count_variables()
        )
    )
    return converted


def conversion_report(src: ViT, dst: ViT) -> Dict:
    """Parameter delta and, per layer, the L2 distance of every source head to its pooled replacement."""
    s_cfg, d_cfg = src.config, dst.config
    per_group = s_cfg.n_kv_heads // d_cfg.n_kv_heads
    d_k = s_cfg.head_dim
    layers_report: List[dict] = []
    for index, (s_att, d_att) in enumerate(zip(src.attentions(), dst.attentions())):
        entry = {"layer": index}
        for kind in ("key_layer", "value_layer"):
            s_lin, d_lin = getattr(s_att, kind), getattr(d_att, kind)
            with torch.no_grad():
                s_full = torch.cat([s_lin.weight, s_lin.bias.unsqueeze(0)], dim=0)
                d_full = torch.cat([d_lin.weight, d_lin.bias.unsqueeze(0)], dim=0)
                distances = []
                for h in range(s_cfg.n_kv_heads):
                    g = h // per_group
                    original = s_full[:, h * d_k:(h + 1) * d_k]
                    pooled = d_full[:, g * d_k:(g + 1) * d_k]
                    distances.append(float(torch.linalg.vector_norm(original - pooled)))
            entry[kind.split("_")[0]] = distances
        layers_report.append(entry)
    return {
        "source_kv_heads": s_cfg.n_kv_heads,
        "target_kv_heads": d_cfg.n_kv_heads,
        "source_parameters": parameter_count(s_cfg),
        "target_parameters": parameter_count(d_cfg),
        "parameter_delta": parameter_count(s_cfg) - parameter_count(d_cfg),
        "variant": d_cfg.attention.variant,
        "layers": layers_report,
    }
