"""Single-file checkpoints: named tensor blocks plus a JSON metadata header.

The container is safetensors (8-byte header length, JSON header, raw
blocks). Our metadata lives under the header's ``__metadata__`` map:

- ``format``: ``"posefree3d-checkpoint"``
- ``format_version``: integer as string
- ``payload``: JSON document with config, counters, optimizer hyper-params
  and numpy/torch random state descriptors.

Tensor blocks are named ``<module>.<parameter>`` (``G.``, ``G_ema.``, ``D.``)
and ``opt_g.<param index>.<slot>`` / ``opt_d.<...>`` for optimizer moments;
``rng.torch`` holds the trainer's torch generator state.
"""
from __future__ import annotations

import json

import torch
from safetensors.torch import load_file, safe_open, save_file

FORMAT = "posefree3d-checkpoint"
FORMAT_VERSION = 1


def _optimizer_blocks(prefix: str, opt: torch.optim.Optimizer):
    sd = opt.state_dict()
    blocks = {}
    for idx, slots in sd["state"].items():
        for slot, value in slots.items():
            blocks[f"{prefix}.{idx}.{slot}"] = torch.as_tensor(value).clone().contiguous()
    return blocks, sd["param_groups"]


def _restore_optimizer(prefix: str, opt: torch.optim.Optimizer, tensors: dict, groups: list):
    state: dict = {}
    for name, value in tensors.items():
        if not name.startswith(prefix + "."):
            continue
        _, idx, slot = name.split(".", 2)
        state.setdefault(int(idx), {})[slot] = value
    opt.load_state_dict({"state": state, "param_groups": groups})


def save_checkpoint(path, modules: dict, optimizers: dict, rng: torch.Generator, payload: dict):
    tensors = {}
    for name, module in modules.items():
        for key, value in module.state_dict().items():
            tensors[f"{name}.{key}"] = value.detach().clone().contiguous()
    opt_groups = {}
    for name, opt in optimizers.items():
        blocks, groups = _optimizer_blocks(name, opt)
        tensors.update(blocks)
        opt_groups[name] = groups
    tensors["rng.torch"] = rng.get_state().clone()
    meta = dict(payload)
    meta["optimizer_groups"] = opt_groups
    save_file(tensors, str(path), metadata={
        "format": FORMAT,
        "format_version": str(FORMAT_VERSION),
        "payload": json.dumps(meta),
    })


def read_metadata(path) -> dict:
    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata() or {}
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} file")
    if int(meta.get("format_version", -1)) != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    return json.loads(meta["payload"])


def load_checkpoint(path, modules: dict, optimizers: dict | None = None, rng: torch.Generator | None = None) -> dict:
    payload = read_metadata(path)
    tensors = load_file(str(path))
    for name, module in modules.items():
        prefix = name + "."
        sd = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        module.load_state_dict(sd)
    for name, opt in (optimizers or {}).items():
        _restore_optimizer(name, opt, tensors, payload["optimizer_groups"][name])
    if rng is not None:
        rng.set_state(tensors["rng.torch"])
    return payload
