# -*- coding: UTF-8 -*-

"""
Tiny Vision Transformer whose encoder uses the grouped attention variants.

Reference:
    patch embedding + class token + learned positions, pre-norm encoder blocks,
    final LayerNorm and a linear head on the class token.
"""

import logging
from dataclasses import asdict, dataclass, replace
from typing import List, Optional

import torch
import torch.nn as nn

from models.BaseModel import BaseModel
from utils import layers
from utils import tensor_ops as ops
from utils.constants import *
from utils.exceptions import ContractError, ValidationError

PRESETS = {
    "vit-micro": dict(d_model=64, depth=4, n_heads=8),
    "vit-mini": dict(d_model=128, depth=6, n_heads=8),
}


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    d_model: int = 64
    depth: int = 4
    n_heads: int = 8
    n_kv_heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 10
    attention: Optional[layers.AttentionVariantConfig] = None

    def __post_init__(self):
        if self.patch_size < 1 or self.image_size % self.patch_size != 0:
            raise ValidationError(
                "image size {} is not a multiple of patch size {}".format(
                    self.image_size, self.patch_size
                )
            )
        if self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ValidationError(
                "d_model {} is not divisible by {} heads".format(self.d_model, self.n_heads)
            )
        if self.depth < 0 or self.channels < 1 or self.num_classes < 2 or self.mlp_ratio < 1:
            raise ValidationError("invalid ViT sizes: {}".format(self))
        if self.attention is None:
            self.attention = layers.AttentionVariantConfig(
                variant=GQA if self.n_kv_heads < self.n_heads else MHA,
                n_heads=self.n_heads,
                n_kv_heads=self.n_kv_heads,
                head_dim=self.head_dim,
            )
        elif isinstance(self.attention, dict):
            self.attention = layers.AttentionVariantConfig(**self.attention)
        att = self.attention
        if (att.n_heads, att.n_kv_heads, att.head_dim) != (self.n_heads, self.n_kv_heads, self.head_dim):
            raise ValidationError(
                "attention config (H={}, G={}, d_k={}) disagrees with the model (H={}, G={}, d_k={})".format(
                    att.n_heads, att.n_kv_heads, att.head_dim,
                    self.n_heads, self.n_kv_heads, self.head_dim,
                )
            )

    @property
    def H(self) -> int:
        return self.n_heads

    @property
    def G(self) -> int:
        return self.n_kv_heads

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def mlp_size(self) -> int:
        return self.mlp_ratio * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        return cls(**d)

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "ViTConfig":
        if name not in PRESETS:
            raise ValidationError("unknown preset {}, choose from {}".format(name, list(PRESETS)))
        return cls(**{**PRESETS[name], **overrides})


def parameter_count(cfg: ViTConfig) -> int:
    """
    Closed form, per component:
      patch projection   C*P^2*d + d
      class token        d
      positions          (N + 1) * d
      per block          4d (two LNs) + (d*H*d_k + H*d_k) + 2 * (d*G*d_k + G*d_k)
                         + (H*d_k*d + d) + (2*d*m + m + d)
      final LN           2d
      head               d*C + C
    """
    d, C, P = cfg.d_model, cfg.channels, cfg.patch_size
    H, G, d_k, m = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim, cfg.mlp_size
    patch = C * P * P * d + d
    tokens = d + (cfg.n_patches + 1) * d
    block = (
        4 * d
        + (d * H * d_k + H * d_k)
        + 2 * (d * G * d_k + G * d_k)
        + (H * d_k * d + d)
        + (2 * d * m + m + d)
    )
    return patch + tokens + cfg.depth * block + 2 * d + d * cfg.num_classes + cfg.num_classes


class ViT(BaseModel):
    no_decay_names = ("cls_token", "position_embedding")

    @staticmethod
    def parse_model_args(parser):
        parser.add_argument(
            "--preset", type=str, default="vit-micro", choices=sorted(PRESETS),
            help="Model size preset.",
        )
        parser.add_argument("--image-size", type=int, default=None, help="Input image side (defaults to the dataset's).")
        parser.add_argument("--patch-size", type=int, default=4, help="Patch side.")
        parser.add_argument("--d-model", type=int, default=None, help="Hidden size (overrides the preset).")
        parser.add_argument("--depth", type=int, default=None, help="Number of encoder blocks (overrides the preset).")
        parser.add_argument("--heads", type=int, default=None, help="Query heads H (overrides the preset).")
        parser.add_argument("--mlp-ratio", type=int, default=4, help="MLP hidden size / d_model.")
        return BaseModel.parse_model_args(parser)

    @classmethod
    def config_from_args(cls, args, attention: layers.AttentionVariantConfig, corpus) -> ViTConfig:
        overrides = {
            k: v
            for k, v in dict(d_model=args.d_model, depth=args.depth, n_heads=args.heads).items()
            if v is not None
        }
        return ViTConfig.from_preset(
            args.preset,
            image_size=args.image_size or corpus.image_size,
            patch_size=args.patch_size,
            channels=corpus.channels,
            n_kv_heads=attention.n_kv_heads,
            mlp_ratio=args.mlp_ratio,
            num_classes=corpus.num_classes,
            attention=attention,
            **overrides,
        )

    def __init__(self, config: ViTConfig):
        super(ViT, self).__init__()
        self.config = config
        self._define_params()
        self.apply(self.init_weights)

    @classmethod
    def from_checkpoint(cls, ckpt) -> "ViT":
        from helpers import Checkpoint

        model = cls(ViTConfig.from_dict(ckpt.metadata["vit"]))
        dtype = next(iter(ckpt.model_tensors().values())).dtype
        model.to(dtype)
        Checkpoint.restore_model(model, ckpt)
        return model

    def _define_params(self):
        cfg = self.config
        d = cfg.d_model
        self.patch_embedding = layers.Linear(cfg.channels * cfg.patch_size ** 2, d)
        self.cls_token = nn.Parameter(torch.empty(1, 1, d))
        self.position_embedding = nn.Parameter(torch.empty(1, cfg.n_patches + 1, d))
        nn.init.normal_(self.cls_token, mean=0.0, std=0.02)
        nn.init.normal_(self.position_embedding, mean=0.0, std=0.02)
        self.encoder = layers.TransformerEncoder(
            n_layers=cfg.depth,
            hidden_size=d,
            inner_size=cfg.mlp_size,
            config=cfg.attention,
        )
        self.final_norm = layers.LayerNorm(d)
        self.head = layers.Linear(d, cfg.num_classes)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """[B, C, S, S] -> [B, N, C*P*P], patches in row-major order."""
        cfg = self.config
        if images.dim() != 4 or tuple(images.shape[1:]) != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ContractError(
                "images {} do not match [batch, {}, {}, {}]".format(
                    tuple(images.shape), cfg.channels, cfg.image_size, cfg.image_size
                )
            )
        B, P, n = images.shape[0], cfg.patch_size, cfg.image_size // cfg.patch_size
        x = ops.reshape(images, (B, cfg.channels, n, P, n, P))
        x = ops.permute(x, (0, 2, 4, 1, 3, 5))
        return ops.reshape(x, (B, n * n, cfg.channels * P * P))

    def forward(self, images: torch.Tensor, step: int = 0) -> torch.Tensor:
        images = images.to(self.cls_token.dtype)
        tokens = self.patch_embedding(self.patchify(images))
        B, d = tokens.shape[0], self.config.d_model
        hidden = ops.concat([self.cls_token.expand(B, 1, d), tokens], dim=1)
        hidden = ops.add(hidden, self.position_embedding)
        hidden = self.final_norm(self.encoder(hidden, step))
        cls_state = ops.reshape(ops.slice_dim(hidden, 1, 0, 1), (B, d))
        return self.head(cls_state)

    def loss(self, logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        return ops.cross_entropy_logits(logits, labels)

    """
	Variant handling
	"""

    def attentions(self) -> List[layers.GroupedQueryAttention]:
        return self.encoder.attentions()

    def set_variant(self, variant: str, **changes) -> layers.AttentionVariantConfig:
        """Swap the attention variant in place; parameters are shared by all variants."""
        attention = replace(self.config.attention, variant=variant, **changes)
        for module in self.attentions():
            module.set_variant(attention)
        self.config.attention = attention
        logging.info("Attention variant set to {}".format(attention.variant))
        return attention

    def set_stats_override(self, stats):
        for module in self.attentions():
            module.stats_override = stats

    def allocation_state(self) -> List[dict]:
        return [module.allocation_state() for module in self.attentions()]

    def load_allocation_state(self, states: List[dict]):
        if len(states) != len(self.attentions()):
            raise ContractError(
                "{} allocation states for {} layers".format(len(states), len(self.attentions()))
            )
        for module, state in zip(self.attentions(), states):
            module.load_allocation_state(state)

    def drain_events(self) -> List[dict]:
        return self.encoder.drain_events()

    def head_outputs(self, images: torch.Tensor, layer: int = -1, step: int = 0) -> torch.Tensor:
        """Per-head outputs [batch, H, tokens, d_k] of one encoder layer (default: last)."""
        if self.config.depth == 0:
            raise ContractError("a depth-0 model has no attention heads")
        module = self.attentions()[layer]
        module.record_heads = True
        try:
            with torch.no_grad():
                self.forward(images, step)
            return module.recorded_heads
        finally:
            module.record_heads = False
            module.recorded_heads = None
