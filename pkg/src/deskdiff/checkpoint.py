"""Binary checkpoint container.

Layout: b"ASDM", u32 LE version, u64 LE header length, a UTF-8 JSON header
(config, tensor index, freeze mask, free-form metadata), then the payload of
little-endian float32 tensors at the offsets listed in the index.
"""

import json
import struct
from pathlib import Path

import numpy as np

from . import unet as U
from .kernels import Tensor

MAGIC = b"ASDM"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _encode(tensors, header_extra):
    index, offset, chunks = [], 0, []
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype=_LE_F32)
        index.append({"name": name, "shape": list(data.shape), "offset": offset, "nbytes": data.nbytes})
        chunks.append(data.tobytes())
        offset += data.nbytes
    header = dict(header_extra, tensors=index)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)


def _decode(raw):
    if len(raw) < _PREFIX.size:
        raise CheckpointError("truncated: file shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    start = _PREFIX.size + hlen
    if start > len(raw):
        raise CheckpointError("truncated: header runs past end of file")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt header: {e}") from None
    payload = memoryview(raw)[start:]
    tensors = {}
    spans = []
    for entry in header.get("tensors", []):
        try:
            name, shape, off, nb = entry["name"], tuple(entry["shape"]), entry["offset"], entry["nbytes"]
        except (KeyError, TypeError):
            raise CheckpointError(f"malformed tensor index entry {entry!r}") from None
        if nb != int(np.prod(shape, dtype=np.int64)) * 4 or off < 0:
            raise CheckpointError(f"{name}: index size does not match shape {shape}")
        if off + nb > len(payload):
            raise CheckpointError(f"truncated: {name} needs bytes {off}..{off + nb}, payload has {len(payload)}")
        spans.append((off, off + nb, name))
        tensors[name] = np.frombuffer(payload[off:off + nb], dtype=_LE_F32).reshape(shape).astype(np.float32)
    spans.sort()
    for (_, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CheckpointError(f"overlapping tensors {n0} and {n1}")
    if spans and spans[-1][1] != len(payload):
        raise CheckpointError("payload has trailing bytes beyond the tensor index")
    return header, tensors


def save_model(path, unet, metadata=None):
    if unet.dtype_name() != "float32":
        raise CheckpointError("checkpoints store float32 models only")
    extra = {"kind": "unet", "config": unet.config.to_dict(),
             "freeze_mask": sorted(unet.freeze_mask), "metadata": metadata or {}}
    Path(path).write_bytes(_encode({n: p.data for n, p in unet.params.items()}, extra))


def load_model(path):
    header, tensors = _decode(_read(path))
    if header.get("kind") != "unet":
        raise CheckpointError(f"{path}: not a model checkpoint (kind={header.get('kind')!r})")
    try:
        config = U.UNetConfig.from_dict(header["config"])
        unet = U.UNet(config, {n: Tensor(a) for n, a in tensors.items()}, header.get("freeze_mask", []))
    except (KeyError, TypeError, U.ConfigError) as e:
        raise CheckpointError(f"{path}: {e}") from None
    unet.metadata = header.get("metadata", {})
    return unet


def save_arrays(path, arrays, metadata=None):
    Path(path).write_bytes(_encode(arrays, {"kind": "arrays", "metadata": metadata or {}}))


def load_arrays(path):
    header, tensors = _decode(_read(path))
    return tensors, header.get("metadata", {})


def _read(path):
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e.strerror}") from None
