# -*- coding: UTF-8 -*-

"""
The .gqac checkpoint container.

    magic      4 bytes  b"GQAC"
    version    uint32 little-endian
    header_len uint64 little-endian
    header     UTF-8 JSON: {"metadata": {...}, "manifest": [{"name", "shape", "dtype"}, ...]}
    payload    raw little-endian scalars of every manifest tensor, in manifest order
"""

import json
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from utils.constants import CKPT_MAGIC, CKPT_VERSION
from utils.exceptions import CheckpointFormatError, ContractError

_DTYPES = {
    "float32": (torch.float32, np.dtype("<f4")),
    "float64": (torch.float64, np.dtype("<f8")),
    "int64": (torch.int64, np.dtype("<i8")),
    "uint8": (torch.uint8, np.dtype("<u1")),
}
_TORCH_NAMES = {torch_dtype: name for name, (torch_dtype, _) in _DTYPES.items()}

OPTIM_PREFIX = "optim."
RNG_TENSOR = "rng.torch"


@dataclass
class CheckpointContainer:
    metadata: dict = field(default_factory=dict)
    tensors: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    version: int = CKPT_VERSION

    def manifest(self) -> list:
        out = []
        for name, tensor in self.tensors.items():
            if tensor.dtype not in _TORCH_NAMES:
                raise ContractError("cannot store {} with dtype {}".format(name, tensor.dtype))
            out.append({"name": name, "shape": list(tensor.shape), "dtype": _TORCH_NAMES[tensor.dtype]})
        return out

    def model_tensors(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict(
            (k, v) for k, v in self.tensors.items()
            if not k.startswith(OPTIM_PREFIX) and k != RNG_TENSOR
        )


def to_bytes(ckpt: CheckpointContainer) -> bytes:
    manifest = ckpt.manifest()
    header = json.dumps(
        {"metadata": ckpt.metadata, "manifest": manifest}, sort_keys=True
    ).encode("utf-8")
    chunks = [
        CKPT_MAGIC,
        np.array([ckpt.version], dtype="<u4").tobytes(),
        np.array([len(header)], dtype="<u8").tobytes(),
        header,
    ]
    for entry in manifest:
        np_dtype = _DTYPES[entry["dtype"]][1]
        array = ckpt.tensors[entry["name"]].detach().cpu().contiguous().numpy()
        chunks.append(array.astype(np_dtype, copy=False).tobytes())
    return b"".join(chunks)


def from_bytes(buf: bytes) -> CheckpointContainer:
    if len(buf) < 16 or buf[:4] != CKPT_MAGIC:
        raise CheckpointFormatError("bad magic {!r}, expected {!r}".format(bytes(buf[:4]), CKPT_MAGIC))
    version = int(np.frombuffer(buf, dtype="<u4", count=1, offset=4)[0])
    if version != CKPT_VERSION:
        raise CheckpointFormatError(
            "unsupported checkpoint version {} (this build reads version {})".format(version, CKPT_VERSION)
        )
    header_len = int(np.frombuffer(buf, dtype="<u8", count=1, offset=8)[0])
    if 16 + header_len > len(buf):
        raise CheckpointFormatError(
            "header length mismatch: expected {} bytes, found {}".format(header_len, len(buf) - 16)
        )
    try:
        header = json.loads(buf[16:16 + header_len].decode("utf-8"))
        metadata, manifest = header["metadata"], header["manifest"]
    except (UnicodeDecodeError, ValueError, KeyError) as e:
        raise CheckpointFormatError("unreadable checkpoint header: {}".format(e))

    offset = 16 + header_len
    sizes = []
    for entry in manifest:
        if entry.get("dtype") not in _DTYPES:
            raise CheckpointFormatError("unknown dtype {} for {}".format(entry.get("dtype"), entry.get("name")))
        count = int(np.prod(entry["shape"], dtype=np.int64))
        sizes.append(count)
    expected = sum(n * _DTYPES[e["dtype"]][1].itemsize for n, e in zip(sizes, manifest))
    actual = len(buf) - offset
    if expected != actual:
        raise CheckpointFormatError(
            "payload length mismatch: expected {} bytes, found {}".format(expected, actual)
        )

    tensors = OrderedDict()
    for count, entry in zip(sizes, manifest):
        torch_dtype, np_dtype = _DTYPES[entry["dtype"]]
        array = np.frombuffer(buf, dtype=np_dtype, count=count, offset=offset)
        offset += count * np_dtype.itemsize
        array = array.astype(np_dtype.newbyteorder("="), copy=True).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(array).to(torch_dtype)
    return CheckpointContainer(metadata=metadata, tensors=tensors, version=version)


def save(ckpt: CheckpointContainer, path: str):
    dir_path = os.path.dirname(path)
    if dir_path:
        os.makedirs(dir_path, exist_ok=True)
    with open(path, "wb") as f:
        f.write(to_bytes(ckpt))


def load(path: str) -> CheckpointContainer:
    with open(path, "rb") as f:
        return from_bytes(f.read())


"""
Model / optimizer <-> container
"""


def build_checkpoint(
    model,
    optimizer=None,
    train_config: Optional[dict] = None,
    step: int = 0,
    seed: int = 0,
    cli_config: Optional[dict] = None,
    extra: Optional[dict] = None,
) -> CheckpointContainer:
    tensors = OrderedDict((name, p.detach().clone()) for name, p in model.state_dict().items())
    metadata = {
        "vit": model.config.to_dict(),
        "train": train_config or {},
        "allocation": model.allocation_state(),
        "step": int(step),
        "seed": int(seed),
        "cli": cli_config or {},
    }
    if optimizer is not None:
        metadata["optimizer"] = _export_optimizer(optimizer, model, tensors)
    tensors[RNG_TENSOR] = torch.get_rng_state()
    if extra:
        metadata.update(extra)
    return CheckpointContainer(metadata=metadata, tensors=tensors)


def _export_optimizer(optimizer, model, tensors) -> dict:
    steps = dict()
    for name, p in model.named_parameters():
        state = optimizer.state.get(p, {})
        if not state:
            continue
        steps[name] = int(state["step"])
        tensors[OPTIM_PREFIX + name + ".exp_avg"] = state["exp_avg"].detach().clone()
        tensors[OPTIM_PREFIX + name + ".exp_avg_sq"] = state["exp_avg_sq"].detach().clone()
    lrs = [group["lr"] for group in optimizer.param_groups]
    return {"steps": steps, "lr": lrs}


def restore_model(model, ckpt: CheckpointContainer):
    state = ckpt.model_tensors()
    model.load_state_dict(state, strict=True)
    model.load_allocation_state(ckpt.metadata.get("allocation", []))


def restore_optimizer(optimizer, model, ckpt: CheckpointContainer):
    info = ckpt.metadata.get("optimizer")
    if info is None:
        logging.warning("Checkpoint carries no optimizer state; starting fresh moments")
        return
    for name, p in model.named_parameters():
        if name not in info["steps"]:
            continue
        optimizer.state[p] = {
            "step": info["steps"][name],
            "exp_avg": ckpt.tensors[OPTIM_PREFIX + name + ".exp_avg"].to(p.dtype).clone(),
            "exp_avg_sq": ckpt.tensors[OPTIM_PREFIX + name + ".exp_avg_sq"].to(p.dtype).clone(),
        }


def restore_rng(ckpt: CheckpointContainer):
    if RNG_TENSOR in ckpt.tensors:
        torch.set_rng_state(ckpt.tensors[RNG_TENSOR].clone())


def tensors_equal(a: CheckpointContainer, b: CheckpointContainer) -> bool:
    """Bitwise comparison of two containers (metadata and every tensor)."""
    if a.metadata != b.metadata or list(a.tensors) != list(b.tensors):
        return False
    for name in a.tensors:
        x, y = a.tensors[name], b.tensors[name]
        if x.dtype != y.dtype or x.shape != y.shape:
            return False
        if x.contiguous().numpy().tobytes() != y.contiguous().numpy().tobytes():
            return False
    return True
