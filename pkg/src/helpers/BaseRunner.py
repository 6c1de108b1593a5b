# -*- coding: UTF-8 -*-

import os
import copy
import math
import logging
from dataclasses import asdict, dataclass, field
from time import perf_counter, time
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader
from tqdm import tqdm

from helpers.BaseReader import Dataset, augment_batch
from models.BaseModel import BaseModel
from utils import utils
from utils.constants import *
from utils.exceptions import ContractError, TrainingDivergedError, ValidationError
from utils.metrics import ACCURACY
from utils.optimizer import AdamW


@dataclass
class TrainConfig:
    lr: float = UPTRAIN_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 64
    steps: int = 500
    epochs: int = 0  # > 0 replaces the step budget by whole passes over the data
    seed: int = 0
    phase: str = UPTRAIN
    window: int = DEFAULT_WINDOW
    alpha: float = DEFAULT_ALPHA
    augment: bool = False
    eval_batch_size: int = 256

    def __post_init__(self):
        if not self.lr > 0:
            raise ValidationError("lr must be positive, got {}".format(self.lr))
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValidationError("betas must lie in (0, 1), got {}, {}".format(self.beta1, self.beta2))
        if not self.eps > 0:
            raise ValidationError("eps must be positive, got {}".format(self.eps))
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValidationError("batch sizes must be positive")
        if self.steps < 0 or self.epochs < 0:
            raise ValidationError("step / epoch budgets must be nonnegative")
        if self.phase not in (UPTRAIN, FINETUNE):
            raise ValidationError("phase must be {} or {}, got {}".format(UPTRAIN, FINETUNE, self.phase))

    def budget(self, n_examples: int) -> int:
        if self.epochs > 0:
            return self.epochs * math.ceil(n_examples / self.batch_size)
        return self.steps

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunMetrics:
    phase: str = UPTRAIN
    variant: str = GQA
    start_step: int = 0
    steps: int = 0
    losses: List[float] = field(default_factory=list)
    step_seconds: List[float] = field(default_factory=list)
    epoch_accuracy: List[float] = field(default_factory=list)
    events: List[dict] = field(default_factory=list)
    allocation_log: Optional[str] = None

    @property
    def allocation_events(self) -> int:
        return len(self.events)

    @property
    def end_step(self) -> int:
        return self.start_step + self.steps

    def loss_reduction(self) -> float:
        """Relative drop of the loss between the first and the last step."""
        if len(self.losses) < 2 or self.losses[0] == 0:
            return 0.0
        return 1.0 - self.losses[-1] / self.losses[0]

    def to_dict(self) -> dict:
        return asdict(self)


def assert_step_parity(runs: Dict[str, Sequence[RunMetrics]]) -> int:
    """All variants of a comparative run must train for the same number of steps per phase."""
    budgets = {
        variant: tuple((m.phase, m.steps) for m in metrics) for variant, metrics in runs.items()
    }
    if len(set(budgets.values())) > 1:
        raise ContractError("step budgets differ across variants: {}".format(budgets))
    return sum(steps for _, steps in next(iter(budgets.values()), ()))


class BaseRunner(object):
    """
    Trains and evaluates image classifiers with AdamW; drives the DGQA window
    schedulers through the global step and streams metrics / allocation events.
    """

    @staticmethod
    def parse_runner_args(parser):
        """
        Parse command-line arguments for the runner.
        """
        parser.add_argument("--lr", type=float, default=None, help="Learning rate (default by phase: 1e-4 uptrain, 1e-5 finetune).")
        parser.add_argument("--beta1", type=float, default=0.9, help="AdamW beta1.")
        parser.add_argument("--beta2", type=float, default=0.999, help="AdamW beta2.")
        parser.add_argument("--eps", type=float, default=1e-8, help="AdamW epsilon.")
        parser.add_argument("--weight-decay", type=float, default=0.01, help="Decoupled weight decay.")
        parser.add_argument("--batch-size", type=int, default=64, help="Batch size during training.")
        parser.add_argument("--eval-batch-size", type=int, default=256, help="Batch size during evaluation.")
        parser.add_argument("--steps", type=int, default=500, help="Training steps.")
        parser.add_argument("--epoch", type=int, default=0, help="Number of epochs (overrides --steps when > 0).")
        parser.add_argument("--augment", action="store_true", help="Random flip + pad-and-crop.")
        return parser

    @staticmethod
    def config_from_args(args, phase: str) -> TrainConfig:
        default_lr = UPTRAIN_LR if phase == UPTRAIN else FINETUNE_LR
        return TrainConfig(
            lr=args.lr if args.lr is not None else default_lr,
            beta1=args.beta1,
            beta2=args.beta2,
            eps=args.eps,
            weight_decay=args.weight_decay,
            batch_size=args.batch_size,
            steps=args.steps,
            epochs=args.epoch,
            seed=args.seed,
            phase=phase,
            window=args.window,
            alpha=args.alpha,
            augment=args.augment,
            eval_batch_size=args.eval_batch_size,
        )

    def __init__(self, config: TrainConfig, run_dir: Optional[str] = None):
        self.config = config
        self.run_dir = run_dir
        self.time = None  # will store [start_time, last_step_time]

    def _check_time(self, start=False):
        if self.time is None or start:
            self.time = [time()] * 2
            return self.time[0]
        tmp_time = self.time[1]
        self.time[1] = time()
        return self.time[1] - tmp_time

    def _log_path(self, name: str) -> Optional[str]:
        return None if self.run_dir is None else os.path.join(self.run_dir, name)

    def build_optimizer(self, model: BaseModel) -> AdamW:
        cfg = self.config
        logging.info("Optimizer: AdamW (lr={}, wd={})".format(cfg.lr, cfg.weight_decay))
        optimizer = AdamW(
            model.customize_parameters(),
            lr=cfg.lr,
            betas=(cfg.beta1, cfg.beta2),
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
        )
        return optimizer

    @staticmethod
    def _snapshot(model: BaseModel, optimizer) -> dict:
        """
        Parameter clones plus shallow copies of the optimizer state.
        adamw_step replaces exp_avg / exp_avg_sq instead of writing into them, so references suffice there.
        """
        return {
            "params": [p.detach().clone() for p in model.parameters()],
            "optimizer": {p: dict(state) for p, state in optimizer.state.items()},
            "allocation": copy.deepcopy(model.allocation_state()),
        }

    @staticmethod
    def _restore(model: BaseModel, optimizer, snapshot: dict):
        with torch.no_grad():
            for p, saved in zip(model.parameters(), snapshot["params"]):
                p.copy_(saved)
        optimizer.state.clear()
        for p, state in snapshot["optimizer"].items():
            optimizer.state[p] = dict(state)
        model.load_allocation_state(snapshot["allocation"])

    def train(
        self, model: BaseModel, dataset: Dataset, optimizer=None, start_step: int = 0
    ) -> Tuple[RunMetrics, AdamW]:
        """
        Run the step budget from global step `start_step`.
        On a non-finite loss the model and optimizer go back to the last step whose
        loss was finite and TrainingDivergedError is raised.
        """
        cfg = self.config
        if len(dataset) == 0:
            raise ContractError("cannot train on an empty dataset")
        if optimizer is None:
            optimizer = self.build_optimizer(model)
        else:
            optimizer.set_lr(cfg.lr)
        total = cfg.budget(len(dataset))
        generator = utils.make_generator(cfg.seed + start_step)
        metrics = RunMetrics(
            phase=cfg.phase,
            variant=model.config.attention.variant,
            start_step=start_step,
            allocation_log=self._log_path(ALLOCATION_LOG),
        )
        metrics_log = self._log_path(METRICS_LOG)

        model.train()
        step = start_step
        epoch = 0
        self._check_time(start=True)
        with tqdm(total=total, leave=False, desc=cfg.phase, ncols=100, mininterval=1) as bar:
            while metrics.steps < total:
                epoch += 1
                correct, seen, epoch_losses = 0, 0, []
                dl = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True, generator=generator)
                for batch in dl:
                    if metrics.steps >= total:
                        break
                    images, labels = batch[IMAGES], batch[LABELS]
                    if cfg.augment:
                        images = augment_batch(images, generator)
                    start = perf_counter()
                    optimizer.zero_grad()
                    logits = model(images, step=step)
                    loss = model.loss(logits, labels)
                    if not torch.isfinite(loss).item():
                        logging.info("Loss is non-finite at step {}; restoring the last good state".format(step))
                        if metrics.steps > 0:
                            self._restore(model, optimizer, snapshot)
                        raise TrainingDivergedError(step, metrics)
                    snapshot = self._snapshot(model, optimizer)
                    loss.backward()
                    optimizer.step()
                    seconds = perf_counter() - start

                    loss_value = loss.item()
                    metrics.losses.append(loss_value)
                    metrics.step_seconds.append(seconds)
                    metrics.steps += 1
                    events = model.drain_events()
                    if metrics.allocation_log is not None:
                        utils.append_jsonl(metrics.allocation_log, events)
                    metrics.events.extend(events)
                    if metrics_log is not None:
                        utils.append_jsonl(
                            metrics_log,
                            [{"step": step, "loss": loss_value, "seconds": seconds, "phase": cfg.phase}],
                        )
                    correct += (logits.detach().argmax(dim=1) == labels).sum().item()
                    seen += len(labels)
                    epoch_losses.append(loss_value)
                    step += 1
                    bar.update(1)
                if seen == 0:
                    break
                metrics.epoch_accuracy.append(correct / seen)
                logging.info(
                    "Epoch {:<5} loss={:<.4f} [{:<3.1f} s]\ttrain=({})".format(
                        epoch,
                        float(np.mean(epoch_losses)),
                        self._check_time(),
                        utils.format_metric({"accuracy": correct / seen, "step": step}),
                    )
                )
        return metrics, optimizer

    def evaluate(self, model: BaseModel, dataset: Dataset, step: int = 0) -> Dict[str, float]:
        """
        Accuracy and mean loss without gradient recording; DGQA allocations stay frozen.
        :return: result dict (accuracy, loss, n)
        """
        if dataset is None or len(dataset) == 0:
            raise ContractError("cannot evaluate on an empty dataset")
        was_training = model.training
        model.eval()
        predictions, targets, loss_sum = list(), list(), 0.0
        dl = DataLoader(dataset, batch_size=self.config.eval_batch_size, shuffle=False)
        try:
            with torch.no_grad():
                for batch in tqdm(dl, leave=False, ncols=100, mininterval=1, desc="Evaluate"):
                    logits = model(batch[IMAGES], step=step)
                    loss_sum += model.loss(logits, batch[LABELS]).item() * len(batch[LABELS])
                    predictions.append(logits.detach().cpu().numpy())
                    targets.append(batch[LABELS].numpy())
        finally:
            model.train(was_training)
        accuracy = ACCURACY(np.concatenate(predictions), np.concatenate(targets))
        return {"accuracy": accuracy, "loss": loss_sum / len(dataset), "n": len(dataset)}

    def print_res(self, model: BaseModel, dataset: Dataset, step: int = 0) -> str:
        return "(" + utils.format_metric(self.evaluate(model, dataset, step)) + ")"


def bench_inference(
    model: BaseModel,
    variants: Sequence[str],
    images: torch.Tensor,
    repeats: int = 20,
    warmup: int = 3,
    training: bool = False,
) -> pd.DataFrame:
    """
    Mean / std forward latency per variant on identical weights and inputs.
    Variants are timed round-robin; warmup passes are not measured.
    By default the clones run in eval mode: DGQA allocations are frozen and PGQA adds no noise
    unless noise_at_inference is set, so their per-step cost is not in the figures.
    With training=True the clones run in train mode and pass k uses step k, so DGQA windows
    fire and PGQA noise is drawn; gradients are still not recorded.
    delta_pct is relative to the first gqa row (the first row when gqa is absent).
    """
    if repeats < 1 or not variants:
        raise ValidationError("need at least one variant and one timed repeat")
    models = []
    for name in variants:
        clone = copy.deepcopy(model)
        clone.set_variant(name)
        clone.train(training)
        models.append(clone)
    timings = [[] for _ in models]
    with torch.no_grad():
        for step in range(warmup):
            for clone in models:
                clone(images, step=step)
        for k in range(repeats):
            for i, clone in enumerate(models):
                start = perf_counter()
                clone(images, step=warmup + k)
                timings[i].append((perf_counter() - start) * 1000.0)

    df = pd.DataFrame(
        {
            "variant": [m.config.attention.variant for m in models],
            "mean_ms": [float(np.mean(t)) for t in timings],
            "std_ms": [float(np.std(t)) for t in timings],
            "repeats": repeats,
            "batch": len(images),
            "mode": "train" if training else "eval",
        }
    )
    baseline_rows = df.index[df["variant"] == GQA]
    baseline = df.loc[baseline_rows[0] if len(baseline_rows) else 0, "mean_ms"]
    df["delta_pct"] = (df["mean_ms"] - baseline) / baseline * 100.0
    return df
