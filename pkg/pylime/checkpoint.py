# -*- coding: utf-8 -*-
'''
Checkpoint submodule: the LIMECKPT container.

Layout (little-endian):
    8-byte magic "LIMECKPT", u32 version (1), u32 tensor count;
    per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims[rank], f32 payload;
    then a UTF-8 JSON trailer up to the end of the file.
'''

import os
import json
import struct
import logging
import numpy as np
from .config import LimeConfig
from .model import LimeModel
from .optim import AdamWState
from .exceptions import CheckpointError

__all__ = ["MAGIC", "VERSION", "write_container", "read_container", "save_checkpoint", "load_checkpoint", "Checkpoint"]

MAGIC = b"LIMECKPT"
VERSION = 1
_MOMENT_PREFIXES = ("adam.m.", "adam.v.")


def write_container(path:str, tensors:dict, trailer:dict) -> None:
    '''
    Write tensors and a JSON trailer, replacing the target atomically.

    Args:
        path (str): destination
        tensors (dict[str, np.ndarray]): arrays in write order
        trailer (dict): JSON-serializable metadata
    '''
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, array in tensors.items():
        encoded = name.encode("utf-8")
        array = np.asarray(array)
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack("<{}I".format(array.ndim), *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    chunks.append(json.dumps(trailer, sort_keys=True, separators=(",", ":")).encode("utf-8"))
    tmp = "{}.tmp".format(path)
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)


def read_container(path:str) -> 'tuple[dict, dict]':
    '''
    Read a LIMECKPT file.

    Args:
        path (str): source

    Returns:
        tuple[dict, dict]: float32 arrays by name (file order), JSON trailer

    Raises:
        CheckpointError: on wrong magic or version, truncation, or a bad trailer.
    '''
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise CheckpointError("{} is not a LIMECKPT file (bad magic).".format(path))
    offset = 8

    def take(n:int) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise CheckpointError("{} is truncated.".format(path))
        chunk = blob[offset:offset + n]
        offset += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError("Unsupported checkpoint version {} (expected {}).".format(version, VERSION))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack("<{}I".format(rank), take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    try:
        trailer = json.loads(blob[offset:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("{} has a corrupted or missing trailer.".format(path))
    return tensors, trailer


class Checkpoint(object):
    '''
    Content of a loaded checkpoint.

    Attributes:
        model (LimeModel): restored model
        optimizer_state (AdamWState or None): restored moments
        trailer (dict): metadata (config, train config, step, train state)
    '''
    def __init__(self, model:LimeModel, optimizer_state:AdamWState|None, trailer:dict):
        self.model = model
        self.optimizer_state = optimizer_state
        self.trailer = trailer

    @property
    def step(self) -> int:
        return int(self.trailer.get("step", 0))


def save_checkpoint(path:str, model:LimeModel, optimizer_state:AdamWState|None=None, extra:dict|None=None) -> None:
    '''
    Save model weights, optimizer moments and metadata.

    Args:
        path (str): destination
        model (LimeModel): model to save
        optimizer_state (AdamWState or None): optimizer moments
        extra (dict or None): additional trailer entries (train config, train state)
    '''
    tensors = {name: p.data for name, p in model.named_parameters().items()}
    trailer = {"config": model.cfg.to_dict(), "step": 0}
    if optimizer_state is not None:
        for name in model.named_parameters():
            if name in optimizer_state.m:
                tensors["adam.m." + name] = optimizer_state.m[name]
                tensors["adam.v." + name] = optimizer_state.v[name]
        trailer["optimizer_step"] = optimizer_state.step
    trailer.update(extra or {})
    write_container(path, tensors, trailer)
    logging.info("Saved checkpoint %s (%d tensors)", path, len(tensors))


def load_checkpoint(path:str) -> Checkpoint:
    '''
    Load a checkpoint written by save_checkpoint.

    Returns:
        Checkpoint: model, optimizer state (None if absent) and trailer

    Raises:
        CheckpointError: if the file is invalid or tensors do not match the stored config.
    '''
    tensors, trailer = read_container(path)
    if "config" not in trailer:
        raise CheckpointError("{} has no model configuration.".format(path))
    cfg = LimeConfig.from_dict(trailer["config"])
    model = LimeModel(cfg, seed=0)
    named = model.named_parameters()
    for name, p in named.items():
        if name not in tensors:
            raise CheckpointError("{} lacks tensor '{}'.".format(path, name))
        if tensors[name].shape != p.shape:
            raise CheckpointError("Tensor '{}' has shape {}, expected {}.".format(name, tensors[name].shape, p.shape))
        p.data = tensors[name].copy()
    optimizer_state = None
    if "optimizer_step" in trailer:
        optimizer_state = AdamWState(step=int(trailer["optimizer_step"]))
        for name, array in tensors.items():
            if name.startswith(_MOMENT_PREFIXES[0]):
                optimizer_state.m[name[len(_MOMENT_PREFIXES[0]):]] = array.copy()
            elif name.startswith(_MOMENT_PREFIXES[1]):
                optimizer_state.v[name[len(_MOMENT_PREFIXES[1]):]] = array.copy()
    unknown = [n for n in tensors if n not in named and not n.startswith(_MOMENT_PREFIXES)]
    if unknown:
        raise CheckpointError("{} holds unexpected tensors: {}.".format(path, ", ".join(unknown)))
    logging.info("Loaded checkpoint %s (step %s)", path, trailer.get("step", 0))
    return Checkpoint(model, optimizer_state, trailer)
