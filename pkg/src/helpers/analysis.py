# -*- coding: UTF-8 -*-

"""
Post-hoc diagnostics: head-output similarity, allocation statistics and the
short comparative sweeps (key-value heads, model shape, learning rate).
"""

import os
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from helpers.BaseReader import Dataset
from helpers.BaseRunner import BaseRunner, TrainConfig
from models.ViT import ViT, ViTConfig, parameter_count
from utils import utils
from utils.allocation import AllocationVector
from utils.constants import *
from utils.exceptions import AllocationError, ContractError, ValidationError


@dataclass
class SimilarityMatrix:
    m: np.ndarray
    variant: str = ""
    layer: int = -1
    zero_heads: List[int] = field(default_factory=list)

    @property
    def H(self) -> int:
        return self.m.shape[0]

    def to_frame(self) -> pd.DataFrame:
        names = ["head_{}".format(i) for i in range(self.H)]
        return pd.DataFrame(self.m, index=names, columns=names)

    def to_csv(self, path: str):
        utils.check_dir(path)
        self.to_frame().to_csv(path)

    def intra_inter_means(self, alloc: AllocationVector) -> Tuple[float, float]:
        """Mean off-diagonal similarity inside query groups and across them."""
        group = np.repeat(np.arange(alloc.G), alloc.q)
        same = group[:, None] == group[None, :]
        off_diag = ~np.eye(self.H, dtype=bool)
        intra = self.m[same & off_diag]
        inter = self.m[~same]
        return (
            float(intra.mean()) if intra.size else float("nan"),
            float(inter.mean()) if inter.size else float("nan"),
        )


def head_similarity(per_head_outputs: torch.Tensor, variant: str = "", layer: int = -1) -> SimilarityMatrix:
    """
    :param per_head_outputs: [batch, H, tokens, d_k]
    :return: cosine similarity of the flattened head outputs; zero-norm heads get 0 entries and are flagged
    """
    if per_head_outputs.dim() != 4 or per_head_outputs.shape[1] < 2:
        raise ContractError(
            "need [batch, H >= 2, tokens, d_k] head outputs, got {}".format(tuple(per_head_outputs.shape))
        )
    H = per_head_outputs.shape[1]
    flat = per_head_outputs.detach().to(torch.float64).transpose(0, 1).reshape(H, -1)
    norms = torch.linalg.vector_norm(flat, dim=1)
    zero = norms == 0
    unit = flat / torch.where(zero, torch.ones_like(norms), norms)[:, None]
    m = (unit @ unit.T).clamp(-1.0, 1.0)
    m = 0.5 * (m + m.T)
    m.fill_diagonal_(1.0)
    zero_heads = torch.nonzero(zero).flatten().tolist()
    if zero_heads:
        logging.warning("Heads {} produced all-zero outputs; their similarities are set to 0".format(zero_heads))
        m[zero, :] = 0.0
        m[:, zero] = 0.0
    return SimilarityMatrix(m.numpy(), variant=variant, layer=layer, zero_heads=zero_heads)


"""
Allocation history
"""


class AllocationHistory(object):
    """Ordered allocation events (step, layer, alloc, norms, importance) of one run."""

    COLUMNS = ["step", "layer", "alloc", "norms", "importance"]

    def __init__(self, events: pd.DataFrame):
        for col in self.COLUMNS:
            if col not in events.columns:
                events[col] = pd.Series([None] * len(events), dtype=object)
        self.events = events[self.COLUMNS].reset_index(drop=True)
        for layer, group in self.events.groupby("layer"):
            steps = group["step"].tolist()
            if any(b <= a for a, b in zip(steps, steps[1:])):
                raise ContractError("layer {} allocation steps are not strictly increasing".format(layer))
        try:
            self.vectors = [AllocationVector(tuple(a)) for a in self.events["alloc"]]
        except AllocationError as e:
            raise ContractError("invalid allocation in history: {}".format(e))

    @classmethod
    def from_events(cls, events: Sequence[dict]) -> "AllocationHistory":
        return cls(pd.DataFrame(list(events), columns=cls.COLUMNS))

    @classmethod
    def from_jsonl(cls, path: str) -> "AllocationHistory":
        if os.path.getsize(path) == 0:
            return cls.from_events([])
        return cls(pd.read_json(path, lines=True))

    def __len__(self):
        return len(self.events)


def _check_nonempty(hist: AllocationHistory):
    if len(hist) == 0:
        raise ContractError("allocation history is empty")


def _is_nonuniform(alloc: AllocationVector, H: int, G: int) -> bool:
    if alloc.G != G or alloc.n_q != H:
        raise ContractError("allocation {} does not split {} heads over {} groups".format(alloc.q, H, G))
    return alloc != AllocationVector.uniform(H, G)


def nonuniform_fraction(hist: AllocationHistory, H: int, G: int) -> float:
    """Share of events whose allocation differs from the remainder-adjusted uniform split."""
    _check_nonempty(hist)
    return sum(_is_nonuniform(a, H, G) for a in hist.vectors) / len(hist)


def nonuniform_by_layer(hist: AllocationHistory, H: int, G: int) -> pd.DataFrame:
    _check_nonempty(hist)
    df = hist.events[["layer"]].copy()
    df["nonuniform"] = [_is_nonuniform(a, H, G) for a in hist.vectors]
    out = df.groupby("layer")["nonuniform"].agg(["count", "mean"]).reset_index()
    return out.rename(columns={"count": "events", "mean": "nonuniform_fraction"})


def allocation_counts(hist: AllocationHistory) -> pd.DataFrame:
    """How often each group size occurs across all events."""
    _check_nonempty(hist)
    sizes = pd.Series([q for a in hist.vectors for q in a.q], name="group_size")
    counts = sizes.value_counts().sort_index()
    return pd.DataFrame({"group_size": counts.index, "count": counts.values})


def importance_spread(hist: AllocationHistory) -> pd.DataFrame:
    """Population std of the logged importance vector per event."""
    _check_nonempty(hist)
    spread = [float(np.std(d)) if d is not None else float("nan") for d in hist.events["importance"]]
    return pd.DataFrame({"step": hist.events["step"], "layer": hist.events["layer"], "spread": spread})


def similarity_blend_residual(
    dgqa_m: SimilarityMatrix, gqa_m: SimilarityMatrix, mha_m: SimilarityMatrix
) -> Tuple[float, float]:
    """
    Least-squares λ in [0, 1] for dgqa ≈ λ·mha + (1 − λ)·gqa.
    :return: λ and the residual ‖dgqa − blend‖_F / ‖dgqa‖_F
    """
    D, G, M = (np.asarray(s.m, dtype=np.float64) for s in (dgqa_m, gqa_m, mha_m))
    if not D.shape == G.shape == M.shape:
        raise ContractError("similarity matrices differ in shape: {}, {}, {}".format(D.shape, G.shape, M.shape))
    direction = M - G
    denom = float(np.sum(direction * direction))
    lam = 0.0 if denom == 0.0 else float(np.sum((D - G) * direction)) / denom
    lam = min(1.0, max(0.0, lam))
    error = float(np.linalg.norm(D - (lam * M + (1.0 - lam) * G)))
    scale = float(np.linalg.norm(D))
    return lam, (error / scale if scale > 0 else error)


"""
Sweeps
"""


def _train_and_eval(cfg: ViTConfig, train_cfg: TrainConfig, train_set: Dataset, eval_set: Optional[Dataset]):
    utils.init_seed(train_cfg.seed)
    model = ViT(cfg)
    runner = BaseRunner(train_cfg)
    metrics, _ = runner.train(model, train_set)
    result = runner.evaluate(model, eval_set if eval_set is not None else train_set, step=metrics.end_step)
    final_loss = metrics.losses[-1] if metrics.losses else float("nan")
    return metrics, final_loss, result


def kv_sweep(
    base_cfg: ViTConfig,
    gs: Sequence[int],
    train_cfg: TrainConfig,
    train_set: Dataset,
    eval_set: Optional[Dataset] = None,
) -> pd.DataFrame:
    """Identical budgets per key-value head count; one row per distinct G, ascending."""
    variant = base_cfg.attention.variant
    if variant in (MHA, MQA):
        variant = GQA
    H = base_cfg.n_heads
    rows = []
    for G in sorted(set(int(g) for g in gs)):
        if not 1 <= G <= H or (variant not in DYNAMIC_VARIANTS + (KDGQA,) and H % G != 0):
            raise ValidationError("G={} is not a valid key-value head count for H={} ({})".format(G, H, variant))
        attention = replace(base_cfg.attention, variant=variant, n_kv_heads=G)
        cfg = replace(base_cfg, n_kv_heads=G, attention=attention)
        logging.info("kv sweep: G={}".format(G))
        metrics, final_loss, result = _train_and_eval(cfg, train_cfg, train_set, eval_set)
        rows.append(
            {
                "G": G,
                "variant": variant,
                "final_loss": final_loss,
                "accuracy": result["accuracy"],
                "eval_loss": result["loss"],
                "parameters": parameter_count(cfg),
                "steps": metrics.steps,
                "mha_ceiling": G == H,
            }
        )
    return pd.DataFrame(rows)


def nonuniform_sweep(
    base_cfg: ViTConfig,
    field_name: str,
    values: Sequence[int],
    train_cfg: TrainConfig,
    train_set: Dataset,
) -> pd.DataFrame:
    """Non-uniform allocation share of a DGQA run while varying depth or d_model."""
    if field_name not in ("depth", "d_model"):
        raise ValidationError("nonuniform sweep varies depth or d_model, got {}".format(field_name))
    if base_cfg.attention.variant not in DYNAMIC_VARIANTS:
        raise ValidationError("nonuniform sweep needs a dgqa variant, got {}".format(base_cfg.attention.variant))
    rows = []
    for value in values:
        changes = {field_name: int(value)}
        if field_name == "d_model":
            changes["attention"] = replace(base_cfg.attention, head_dim=int(value) // base_cfg.n_heads)
        cfg = replace(base_cfg, **changes)
        metrics, final_loss, _ = _train_and_eval(cfg, train_cfg, train_set, None)
        hist = AllocationHistory.from_events(metrics.events)
        fraction = nonuniform_fraction(hist, cfg.n_heads, cfg.n_kv_heads) if len(hist) else float("nan")
        rows.append(
            {
                field_name: int(value),
                "nonuniform_fraction": fraction,
                "events": len(hist),
                "final_loss": final_loss,
                "parameters": parameter_count(cfg),
            }
        )
    return pd.DataFrame(rows)


def lr_sweep(
    base_cfg: ViTConfig,
    lrs: Sequence[float],
    train_cfg: TrainConfig,
    train_set: Dataset,
    eval_set: Optional[Dataset] = None,
) -> pd.DataFrame:
    rows = []
    for lr in lrs:
        metrics, final_loss, result = _train_and_eval(base_cfg, replace(train_cfg, lr=float(lr)), train_set, eval_set)
        rows.append(
            {
                "lr": float(lr),
                "final_loss": final_loss,
                "accuracy": result["accuracy"],
                "loss_reduction": metrics.loss_reduction(),
            }
        )
    return pd.DataFrame(rows)
