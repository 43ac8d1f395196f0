"""Single-file ``.npz`` checkpoints.

Layout: one ``__meta__`` entry holding UTF-8 JSON (format tag, version,
stage, step, run config, model hash and the declared shape of every array)
plus named arrays under ``backbone/``, ``blocks/`` and ``opt/`` prefixes.
"""

from __future__ import annotations

import io
import json
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .errors import ChainError, ContractViolation, DataError

FORMAT = "egocrash-ckpt"
VERSION = 1


def module_arrays(module: nn.Module, prefix: str) -> dict:
    return {f"{prefix}/{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def save_checkpoint(path, meta: dict, arrays: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(meta)
    meta.update(format=FORMAT, version=VERSION, shapes={k: list(v.shape) for k, v in arrays.items()})
    payload = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    payload.update(arrays)
    tmp = path.with_suffix(".tmp.npz")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    tmp.replace(path)
    return path


class Checkpoint:
    def __init__(self, meta: dict, arrays: dict):
        self.meta = meta
        self.arrays = arrays

    @property
    def stage(self) -> int:
        return int(self.meta["stage"])

    def prefixed(self, prefix: str) -> dict:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}

    def load_into(self, module: nn.Module, prefix: str, strict: bool = True):
        """Copy ``prefix/*`` arrays into ``module`` after checking names and shapes."""
        arrays = self.prefixed(prefix)
        own = module.state_dict()
        missing = set(own) - set(arrays)
        extra = set(arrays) - set(own)
        if strict and (missing or extra):
            raise ContractViolation(
                f"checkpoint/{prefix} mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}"
            )
        state = {}
        for k, v in own.items():
            if k not in arrays:
                continue
            if tuple(arrays[k].shape) != tuple(v.shape):
                raise ContractViolation(f"{prefix}/{k}: checkpoint shape {arrays[k].shape} != model shape {tuple(v.shape)}")
            state[k] = torch.from_numpy(arrays[k].copy()).to(v.dtype)
        module.load_state_dict(state, strict=strict)

    def without(self, prefix: str) -> "Checkpoint":
        p = prefix + "/"
        return Checkpoint(dict(self.meta), {k: v for k, v in self.arrays.items() if not k.startswith(p)})


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise ChainError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if "__meta__" not in arrays:
        raise DataError(f"{path} has no metadata entry")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
    if meta.get("format") != FORMAT or meta.get("version") != VERSION:
        raise DataError(f"{path}: unsupported checkpoint format {meta.get('format')} v{meta.get('version')}")
    for k, shape in meta.get("shapes", {}).items():
        if k not in arrays or list(arrays[k].shape) != shape:
            raise DataError(f"{path}: array {k} disagrees with its declared shape {shape}")
    return Checkpoint(meta, arrays)
