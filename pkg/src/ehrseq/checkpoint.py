"""Binary checkpoint: magic 'EHRM', versioned, metadata + f32 tensor table.

Layout (little endian):
  'EHRM' | u32 version | u32 meta_len | meta (UTF-8 key=value lines)
  | u32 n_tensors | per tensor: u16 name_len, name, u32 ndim, u32*ndim dims,
  f32 payload | u64 byte count of everything before the trailer.
Compute stays float64; storage is float32 at this boundary. Writes are
atomic (temp file + rename).
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np

from .errors import CheckpointFormatError
from .model import Model, ModelConfig, init_model

MAGIC = b"EHRM"
VERSION = 1


def _model_tensors(model: Model) -> dict:
    return {name: p for name, p in model.named_parameters().items()}


def config_metadata(cfg: ModelConfig, extra: dict | None = None) -> dict:
    meta = {f"model.{k}": v for k, v in vars(cfg).items()}
    if extra:
        meta.update(extra)
    return meta


def save_checkpoint(model: Model, path, extra_metadata: dict | None = None) -> None:
    meta = config_metadata(model.config, extra_metadata)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    meta_bytes = "".join(f"{k}={v}\n" for k, v in sorted(meta.items())).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    tensors = _model_tensors(model)
    buf.write(struct.pack("<I", len(tensors)))
    for name, p in sorted(tensors.items()):
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        arr = np.asarray(p.data, dtype="<f4")
        buf.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(body)
        f.write(struct.pack("<Q", len(body)))
    os.replace(tmp, path)


def read_metadata(path) -> dict:
    with open(path, "rb") as f:
        raw = f.read()
    _check_frame(raw)
    meta_len = struct.unpack_from("<I", raw, 8)[0]
    meta = raw[12 : 12 + meta_len].decode("utf-8")
    out = {}
    for line in meta.splitlines():
        k, _, v = line.partition("=")
        out[k] = v
    return out


def _check_frame(raw: bytes):
    if len(raw) < 24 or raw[:4] != MAGIC:
        raise CheckpointFormatError("bad magic: not a checkpoint file")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    trailer = struct.unpack_from("<Q", raw, len(raw) - 8)[0]
    if trailer != len(raw) - 8:
        raise CheckpointFormatError("truncated or corrupt checkpoint (length check failed)")


def _parse_tensors(raw: bytes):
    meta_len = struct.unpack_from("<I", raw, 8)[0]
    off = 12 + meta_len
    (n_tensors,) = struct.unpack_from("<I", raw, off)
    off += 4
    out = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        out[name] = arr
    return out


def metadata_model_config(meta: dict) -> ModelConfig:
    cfg = ModelConfig()
    for k, v in meta.items():
        if not k.startswith("model."):
            continue
        field = k[6:]
        if hasattr(cfg, field):
            cur = getattr(cfg, field)
            setattr(cfg, field, type(cur)(float(v)) if isinstance(cur, (int, float)) else v)
    return cfg


def load_checkpoint(path, cfg: ModelConfig | None = None) -> Model:
    with open(path, "rb") as f:
        raw = f.read()
    _check_frame(raw)
    meta = read_metadata(path)
    if cfg is None:
        cfg = metadata_model_config(meta)
    model = init_model(cfg)
    stored = _parse_tensors(raw)
    params = model.named_parameters()
    for name, p in params.items():
        if name not in stored:
            raise CheckpointFormatError(f"checkpoint missing tensor {name!r}")
        if stored[name].shape != p.data.shape:
            raise CheckpointFormatError(
                f"shape mismatch for tensor {name!r}: "
                f"checkpoint {stored[name].shape} vs config {p.data.shape}"
            )
        p.data = stored[name].astype(np.float64)
    return model
