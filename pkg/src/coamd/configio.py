"""Dataclass configs <-> flat string metadata (checkpoints, run logs)."""
from __future__ import annotations

import ast
import dataclasses


def to_meta(cfg, prefix: str = "cfg.") -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            continue
        out[prefix + f.name] = repr(v)
    return out


def from_meta(cls, meta: dict, prefix: str = "cfg.", **overrides):
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        if key in meta:
            kwargs[f.name] = ast.literal_eval(meta[key])
    kwargs.update(overrides)
    return cls(**kwargs)
