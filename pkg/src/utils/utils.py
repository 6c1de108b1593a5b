# -*- coding: UTF-8 -*-

import json
import os
import random
import logging
import datetime
from dataclasses import asdict, is_dataclass
from typing import Any, Dict, Iterable, NoReturn

import numpy as np
import torch


def init_seed(seed: int):
    """Seeds python, numpy and torch."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def make_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return "{:<.4f}".format(value)
    return str(value)


def format_metric(result_dict: Dict[str, Any]) -> str:
    if not isinstance(result_dict, dict):
        raise TypeError("expected a dict of metrics, got {}".format(type(result_dict).__name__))
    return "    ".join("{} : {}".format(k, _fmt(v)) for k, v in result_dict.items())


def format_arg_str(args, exclude_lst: list, max_len=20) -> str:
    """Two-column table of the effective run configuration; nested dataclasses are flattened."""
    rows = []
    for key, value in sorted(vars(args).items()):
        if key in exclude_lst or value is None or callable(value):
            continue
        if is_dataclass(value):
            rows.extend(("{}.{}".format(key, k), v) for k, v in asdict(value).items())
        else:
            rows.append((key, value))
    cells = []
    for key, value in rows:
        text = str(value).replace("\t", "\\t")
        cells.append((str(key), text[: max_len - 3] + "..." if len(text) > max_len else text))
    key_width = max([len("Arguments")] + [len(k) for k, _ in cells])
    value_width = max([len("Values")] + [len(v) for _, v in cells])
    rule = "=" * (key_width + value_width + 5)
    lines = ["", rule, " {} | {} ".format("Arguments".ljust(key_width), "Values".ljust(value_width)), rule]
    lines += [" {} | {}".format(k.ljust(key_width), v.ljust(value_width)) for k, v in cells]
    lines.append(rule)
    return os.linesep.join(lines)


def check_dir(file_name: str) -> NoReturn:
    dir_path = os.path.dirname(file_name)
    if dir_path and not os.path.exists(dir_path):
        logging.info("make dirs: " + dir_path)
        os.makedirs(dir_path, exist_ok=True)


def append_jsonl(file_name: str, records: Iterable[dict]) -> int:
    """Append records as JSON lines; returns how many were written."""
    records = list(records)
    if not records:
        return 0
    check_dir(file_name)
    with open(file_name, "a") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return len(records)


def get_time() -> str:
    return datetime.datetime.now().strftime("%Y-%m-%d %H:%M:%S")
