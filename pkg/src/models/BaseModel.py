# -*- coding: UTF-8 -*-

import logging
from typing import List

import torch
import torch.nn as nn

from utils import utils


class BaseModel(nn.Module):
    """Image classifier contract shared by the runner, the converter and the checkpoint codec."""

    no_decay_names = ()  # leaf names excluded from weight decay on top of biases and vectors

    @staticmethod
    def parse_model_args(parser):
        parser.add_argument("--out", type=str, default="", help="Checkpoint (.gqac) save path.")
        parser.add_argument("--in", dest="in_path", type=str, default="", help="Checkpoint to load.")
        return parser

    @staticmethod
    def init_weights(m):
        if isinstance(m, nn.Linear) or type(m).__name__ == "Linear":
            nn.init.normal_(m.weight, mean=0.0, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm) or type(m).__name__ == "LayerNorm":
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

    """
	Key Methods
	"""

    def forward(self, images: torch.Tensor, step: int = 0) -> torch.Tensor:
        """
        :param images: [batch_size, channels, size, size]
        :param step: global training step, drives DGQA windows and PGQA noise
        :return: logits [batch_size, num_classes]
        """
        raise NotImplementedError

    def loss(self, logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    """
	Auxiliary Methods
	"""

    def _decays(self, name: str, p: torch.Tensor) -> bool:
        leaf = name.rsplit(".", 1)[-1]
        return p.dim() >= 2 and leaf != "bias" and leaf not in self.no_decay_names

    def customize_parameters(self) -> list:
        """Two AdamW groups: matrices with the configured decay, everything else with none."""
        trainable = [(n, p) for n, p in self.named_parameters() if p.requires_grad]
        return [
            {"params": [p for n, p in trainable if self._decays(n, p)]},
            {"params": [p for n, p in trainable if not self._decays(n, p)], "weight_decay": 0},
        ]

    def save_model(self, model_path: str, optimizer=None, **metadata):
        from helpers import Checkpoint

        utils.check_dir(model_path)
        container = Checkpoint.build_checkpoint(self, optimizer=optimizer, **metadata)
        Checkpoint.save(container, model_path)
        logging.info("Save model to " + model_path)
        return container

    def count_variables(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    # attention state hooks; models without dynamic grouping keep none

    def allocation_state(self) -> List[dict]:
        return []

    def load_allocation_state(self, states: List[dict]):
        pass

    def drain_events(self) -> List[dict]:
        return []
