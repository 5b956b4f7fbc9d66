"""Binary checkpoint format shared by LM and relay checkpoints.

Layout, all integers little-endian uint32::

    b"RDCKPT"  version  len(config)  config (canonical JSON, UTF-8)
    n_tensors
    per tensor: len(name)  name (UTF-8)  rank  dims...  float32 payload
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import DataError

MAGIC = b"RDCKPT"
VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def save_checkpoint(path: str | Path, config: Mapping, tensors: Mapping[str, torch.Tensor]) -> None:
    cfg = canonical_json(config).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().to(torch.float32).contiguous().numpy()
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f4", copy=False).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such checkpoint: {path}")
    buf = path.read_bytes()
    if buf[:6] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, n_cfg = struct.unpack_from("<II", buf, 6)
        if version != VERSION:
            raise DataError(f"{path}: checkpoint format version {version}, expected {VERSION}")
        pos = 14
        config = json.loads(buf[pos:pos + n_cfg].decode("utf-8"))
        pos += n_cfg
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (n_name,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n_name].decode("utf-8")
            pos += n_name
            (rank,) = struct.unpack_from("<I", buf, pos)
            dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            tensors[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: corrupt checkpoint ({e})") from None
    if pos != len(buf):
        raise DataError(f"{path}: {len(buf) - pos} trailing bytes")
    return config, tensors
