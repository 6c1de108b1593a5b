# -*- coding: UTF-8 -*-

"""
Dense tensor ops used by the ViT and the attention variants.

Every op is an explicit torch composite so that its forward contract (stability
shifts, tanh GELU, biased layernorm variance) is fixed here, while reverse-mode
gradients come from autograd. Ops executed inside a ``GradTape`` block are recorded.
"""

import math
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch

from utils.exceptions import ContractError, DimensionError

_PRECISIONS = {32: torch.float32, 64: torch.float64}
_ACTIVE_TAPES: List["GradTape"] = []
_GELU_COEF = math.sqrt(2.0 / math.pi)


def set_precision(bits: int) -> torch.dtype:
    """Switch the global floating point precision (32 or 64 bit)."""
    if bits not in _PRECISIONS:
        raise ValueError("precision must be 32 or 64 bits, got {}".format(bits))
    torch.set_default_dtype(_PRECISIONS[bits])
    return _PRECISIONS[bits]


def get_precision() -> int:
    return 64 if torch.get_default_dtype() == torch.float64 else 32


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[torch.Tensor, ...]
    output: torch.Tensor


class GradTape(object):
    """
    Ordered record of the ops executed while the tape is active.

    Each recorded output that takes part in differentiation gets a hook; after
    ``backward`` the tape holds the gradient of every recorded tensor and the order
    in which those gradients arrived (the reverse of execution order).
    Single writer: do not share one tape between concurrent steps.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self.grads: Dict[int, torch.Tensor] = dict()
        self.visit_order: List[int] = list()

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        _ACTIVE_TAPES.remove(self)
        return False

    def record(self, op: str, inputs: Sequence[torch.Tensor], output: torch.Tensor):
        index = len(self.entries)
        self.entries.append(TapeEntry(op, tuple(inputs), output))
        if output.requires_grad:
            output.register_hook(self._make_hook(index))

    def _make_hook(self, index: int) -> Callable:
        def hook(grad):
            self.grads[index] = grad
            self.visit_order.append(index)

        return hook

    def backward(self, loss: torch.Tensor) -> "GradTape":
        if loss.numel() != 1:
            raise ContractError(
                "backward needs a scalar loss, got shape {}".format(tuple(loss.shape))
            )
        self.grads.clear()
        self.visit_order.clear()
        loss.backward()
        return self

    def grad_of(self, tensor: torch.Tensor) -> Optional[torch.Tensor]:
        for index, entry in enumerate(self.entries):
            if entry.output is tensor:
                return self.grads.get(index)
        return None

    def ops(self) -> List[str]:
        return [entry.op for entry in self.entries]


def _record(op: str, inputs: Sequence[torch.Tensor], output: torch.Tensor):
    for tape in _ACTIVE_TAPES:
        tape.record(op, inputs, output)
    return output


def _shape_str(shape) -> str:
    return str(tuple(shape))


def _broadcast(op: str, *shapes) -> torch.Size:
    try:
        return torch.broadcast_shapes(*shapes)
    except RuntimeError:
        raise DimensionError(
            "{}: shapes {} are not broadcastable".format(
                op, " and ".join(_shape_str(s) for s in shapes)
            )
        )


"""
Linear algebra
"""


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2:
        raise DimensionError(
            "matmul: operands need rank >= 2, got {} and {}".format(
                _shape_str(a.shape), _shape_str(b.shape)
            )
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            "matmul: inner dimensions differ for {} and {}".format(
                _shape_str(a.shape), _shape_str(b.shape)
            )
        )
    _broadcast("matmul", a.shape[:-2], b.shape[:-2])
    return _record("matmul", (a, b), torch.matmul(a, b))


def softmax_lastdim(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 0 or x.shape[-1] < 1:
        raise DimensionError("softmax_lastdim: empty last dimension")
    # the shift cancels in the normalisation, so it carries no gradient
    shifted = x - x.amax(dim=-1, keepdim=True).detach()
    exps = torch.exp(shifted)
    return _record("softmax_lastdim", (x,), exps / exps.sum(dim=-1, keepdim=True))


def layernorm(
    x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5
) -> torch.Tensor:
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(
            "layernorm: gain {} / bias {} must match last dim of {}".format(
                _shape_str(gain.shape), _shape_str(bias.shape), _shape_str(x.shape)
            )
        )
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    out = centered / torch.sqrt(var + eps) * gain + bias
    return _record("layernorm", (x, gain, bias), out)


"""
Elementwise suite
"""


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast("add", a.shape, b.shape)
    return _record("add", (a, b), a + b)


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast("mul", a.shape, b.shape)
    return _record("mul", (a, b), a * b)


def scale(x: torch.Tensor, factor: float) -> torch.Tensor:
    return _record("scale", (x,), x * factor)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """tanh approximation: 0.5 * x * (1 + tanh(sqrt(2 / pi) * (x + 0.044715 * x^3)))"""
    inner = _GELU_COEF * (x + 0.044715 * x * x * x)
    return _record("gelu", (x,), 0.5 * x * (1.0 + torch.tanh(inner)))


def reshape(x: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    try:
        out = x.reshape(tuple(shape))
    except RuntimeError:
        raise DimensionError(
            "reshape: cannot view {} as {}".format(_shape_str(x.shape), tuple(shape))
        )
    return _record("reshape", (x,), out)


def transpose(x: torch.Tensor, dim0: int = -2, dim1: int = -1) -> torch.Tensor:
    if x.dim() < 2:
        raise DimensionError("transpose: rank-{} tensor".format(x.dim()))
    return _record("transpose", (x,), x.transpose(dim0, dim1).clone())


def permute(x: torch.Tensor, dims: Sequence[int]) -> torch.Tensor:
    if sorted(d % max(x.dim(), 1) for d in dims) != list(range(x.dim())):
        raise DimensionError(
            "permute: {} is not a permutation of the axes of {}".format(
                tuple(dims), _shape_str(x.shape)
            )
        )
    return _record("permute", (x,), x.permute(*dims).clone())


def slice_dim(x: torch.Tensor, dim: int, start: int, end: int) -> torch.Tensor:
    size = x.shape[dim]
    if not 0 <= start < end <= size:
        raise DimensionError(
            "slice: [{}, {}) out of range for dim {} of {}".format(
                start, end, dim, _shape_str(x.shape)
            )
        )
    return _record("slice", (x,), x.narrow(dim, start, end - start).clone())


def concat(tensors: Sequence[torch.Tensor], dim: int = 0) -> torch.Tensor:
    if len(tensors) == 0:
        raise DimensionError("concat: nothing to concatenate")
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(
            i != dim % len(ref) and a != b for i, (a, b) in enumerate(zip(ref, other))
        ):
            raise DimensionError(
                "concat: {} and {} differ outside dim {}".format(
                    _shape_str(ref), _shape_str(other), dim
                )
            )
    return _record("concat", tuple(tensors), torch.cat(list(tensors), dim=dim))


def reduce_mean(x: torch.Tensor, dim=None, keepdim: bool = False) -> torch.Tensor:
    out = x.mean() if dim is None else x.mean(dim=dim, keepdim=keepdim)
    return _record("reduce_mean", (x,), out)


def reduce_sum(x: torch.Tensor, dim=None, keepdim: bool = False) -> torch.Tensor:
    out = x.sum() if dim is None else x.sum(dim=dim, keepdim=keepdim)
    return _record("reduce_sum", (x,), out)


def l2norm_lastdim(x: torch.Tensor) -> torch.Tensor:
    # vector_norm backward is 0 at the zero vector
    return _record("l2norm_lastdim", (x,), torch.linalg.vector_norm(x, dim=-1))


def cross_entropy_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    if logits.dim() != 2 or labels.shape != logits.shape[:1]:
        raise DimensionError(
            "cross_entropy_logits: logits {} and labels {} do not pair up".format(
                _shape_str(logits.shape), _shape_str(labels.shape)
            )
        )
    labels = labels.long()
    if labels.numel() > 0 and (
        labels.min().item() < 0 or labels.max().item() >= logits.shape[1]
    ):
        raise ContractError(
            "cross_entropy_logits: labels outside [0, {})".format(logits.shape[1])
        )
    shifted = logits - logits.amax(dim=-1, keepdim=True).detach()
    log_norm = torch.log(torch.exp(shifted).sum(dim=-1))
    picked = shifted.gather(1, labels.unsqueeze(1)).squeeze(1)
    return _record("cross_entropy_logits", (logits,), (log_norm - picked).mean())


"""
Verification
"""


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = 1e-5
) -> float:
    """
    Compare autograd against central differences.
    :return: max over coordinates of |analytic - numeric| / (|analytic| + |numeric| + 1e-12)
    """
    if x.dtype != torch.float64:
        raise ContractError("grad_check needs 64-bit inputs, got {}".format(x.dtype))
    if not 1e-6 <= h <= 1e-3:
        raise ContractError("grad_check step h={} outside [1e-6, 1e-3]".format(h))

    point = x.detach().clone().requires_grad_(True)
    out = f(point)
    if out.numel() != 1:
        raise ContractError(
            "grad_check needs a scalar-valued function, got output shape {}".format(
                _shape_str(out.shape)
            )
        )
    (analytic,) = torch.autograd.grad(out.reshape(()), point, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(point)

    numeric = torch.zeros(point.numel(), dtype=torch.float64)
    probe = point.detach().clone().reshape(-1)
    with torch.no_grad():
        for i in range(probe.numel()):
            origin = probe[i].item()
            probe[i] = origin + h
            f_plus = f(probe.view_as(point)).item()
            probe[i] = origin - h
            f_minus = f(probe.view_as(point)).item()
            probe[i] = origin
            numeric[i] = (f_plus - f_minus) / (2.0 * h)
    numeric = numeric.view_as(point)

    err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
    worst = err.max().item()
    logging.debug("grad_check: max relative error {:.3e}".format(worst))
    return worst
