"""Deterministic binary checkpoints.

Layout (all integers little-endian):

    bytes 0..3   magic "SHD4"
    bytes 4..7   format version (uint32, currently 1)
    bytes 8..15  header length in bytes (uint64)
    header       UTF-8 JSON, sorted keys:
                   {"step": int, "config": {...}, "meta": {...},
                    "records": [{"name", "dtype", "shape", "kind"}, ...]}
    payload      raw C-order little-endian array bytes, concatenated in
                 record order

kind is "param" for trainable tensors and "buffer" for fixed ones. Saving the
same model twice yields byte-identical files; names follow attribute paths
(e.g. "diffusion.tokenizer.proj.w").
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import nn
from .autodiff import Tensor

MAGIC = b"SHD4"
VERSION = 1


def state_dict(model) -> dict:
    """name -> (array, kind) for every tensor reachable from the model."""
    out = {}
    for name, t in nn.named_tensors(model):
        if name in out:
            raise ValueError(f"duplicate tensor name {name!r}")
        out[name] = (t.data, "param" if t.requires_grad else "buffer")
    if not out:
        raise ValueError("state_dict: no tensors found")
    return out


def save_checkpoint(path, model, step: int = 0, config: dict | None = None,
                    meta: dict | None = None) -> None:
    states = state_dict(model)
    records = []
    payload = []
    for name in states:  # insertion order = deterministic traversal order
        arr, kind = states[name]
        arr = np.asarray(arr, order="C")  # keeps 0-d shapes, unlike ascontiguousarray
        records.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "kind": kind,
            }
        )
        payload.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    header = json.dumps(
        {
            "step": step,
            "config": config or {},
            "meta": meta or {},
            "records": records,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path):
    """Returns (header dict, {name: (array, kind)})."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    states = {}
    for rec in header["records"]:
        dtype = np.dtype(rec["dtype"]).newbyteorder("<")
        shape = tuple(rec["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
        states[rec["name"]] = (
            arr.reshape(shape).astype(dtype.newbyteorder("=")),
            rec["kind"],
        )
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after last record")
    return header, states


def restore_model(model, states: dict) -> None:
    """Copy checkpoint arrays into the model's tensors, by name.

    Missing or unexpected names, or shape mismatches, raise with the
    offending names spelled out.
    """
    current = dict(nn.named_tensors(model))
    missing = sorted(set(current) - set(states))
    unexpected = sorted(set(states) - set(current))
    if missing or unexpected:
        raise ValueError(
            f"checkpoint does not match model; missing={missing} "
            f"unexpected={unexpected}"
        )
    for name, tensor in current.items():
        arr, _ = states[name]
        if arr.shape != tensor.shape:
            raise ValueError(
                f"checkpoint tensor {name!r} has shape {arr.shape}, "
                f"model expects {tensor.shape}"
            )
        tensor.data = arr.astype(tensor.dtype, copy=True)


def model_from_checkpoint(path):
    """Rebuild a model purely from a checkpoint's embedded config."""
    from .config import train_config_from_dict
    from .model import build_model

    header, states = load_checkpoint(path)
    if not header.get("config"):
        raise ValueError(f"{path}: checkpoint carries no config; cannot rebuild")
    cfg = train_config_from_dict(header["config"])
    model = build_model(cfg.model, seed=cfg.seed)
    model.no_deformation = cfg.no_deformation
    model.no_diffusion = cfg.no_diffusion
    model.refined_render = cfg.refined_render
    model.inference_sampling = cfg.inference_sampling
    model.ddim_steps = cfg.ddim_steps
    model.eval_seed = cfg.seed
    restore_model(model, states)
    return model, header
