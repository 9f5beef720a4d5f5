"""Checkpoint directories: named-tensor safetensors files plus ``meta.json``.

Layout::

    <dir>/encoder.safetensors     encoder parameters
    <dir>/<part>.safetensors      any other module (heads, optimizer state)
    <dir>/meta.json               {config, stage, step, rng_state, lineage, ...}

Writes go to a sibling temp directory that is renamed into place, so a
reader never sees a half-written checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path
from typing import Mapping

import torch
from safetensors.torch import load_file, save_file

META = "meta.json"


def state_hash(tensors: Mapping[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()[:16]


def _flatten_optimizer(opt_state: dict) -> tuple[dict, dict]:
    """Split an optimizer state_dict into tensors and a JSON-able remainder."""
    tensors, scalars = {}, {}
    for pid, st in opt_state["state"].items():
        for k, v in st.items():
            key = f"{pid}.{k}"
            if torch.is_tensor(v):
                tensors[key] = v.detach().clone().contiguous()
            else:
                scalars[key] = v
    return tensors, {"scalars": scalars, "param_groups": opt_state["param_groups"]}


def _unflatten_optimizer(tensors: dict, extra: dict) -> dict:
    state: dict = {}
    for key, v in tensors.items():
        pid, k = key.split(".", 1)
        state.setdefault(int(pid), {})[k] = v
    for key, v in extra["scalars"].items():
        pid, k = key.split(".", 1)
        state.setdefault(int(pid), {})[k] = v
    return {"state": state, "param_groups": extra["param_groups"]}


def save_checkpoint(path, parts: Mapping[str, Mapping[str, torch.Tensor]], meta: dict,
                    optimizer_state: dict | None = None) -> str:
    """Atomically write a checkpoint; returns its id (hash of encoder tensors)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        for name, sd in parts.items():
            save_file({k: v.detach().cpu().contiguous() for k, v in sd.items()}, str(tmp / f"{name}.safetensors"))
        meta = dict(meta)
        if optimizer_state is not None:
            tensors, extra = _flatten_optimizer(optimizer_state)
            save_file(tensors, str(tmp / "optimizer.safetensors"))
            meta["optimizer"] = extra
        ckpt_id = state_hash(parts["encoder"]) if "encoder" in parts else state_hash(next(iter(parts.values())))
        meta["checkpoint_id"] = ckpt_id
        meta["parts"] = sorted(parts)
        (tmp / META).write_text(json.dumps(meta, indent=1, sort_keys=True))
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return ckpt_id


def load_meta(path) -> dict:
    path = Path(path)
    f = path / META
    if not f.exists():
        raise FileNotFoundError(f"not a checkpoint directory: {path}")
    return json.loads(f.read_text())


def load_checkpoint(path) -> tuple[dict, dict, dict | None]:
    """Returns ``(parts, meta, optimizer_state)``."""
    path = Path(path)
    meta = load_meta(path)
    parts = {name: load_file(str(path / f"{name}.safetensors")) for name in meta["parts"]}
    opt = None
    if (path / "optimizer.safetensors").exists():
        opt = _unflatten_optimizer(load_file(str(path / "optimizer.safetensors")), meta["optimizer"])
    return parts, meta, opt
