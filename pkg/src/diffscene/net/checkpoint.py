"""Self-describing checkpoint files.

Layout: ``b"GDIT"``, ``u32`` version, ``u32`` length of a UTF-8 JSON block
holding the :class:`ModelConfig`, then every tensor until end of file as
``[u16 name length][name][u8 rank][u32 dims...][f32 little-endian data]``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Union

import numpy as np

from diffscene.core.errors import ConfigurationError, FormatError
from diffscene.core.logging import get_logger
from diffscene.net.model import ModelConfig, Params, parameter_shapes

logger = get_logger(__name__)

PathLike = Union[str, Path]

MAGIC = b"GDIT"
VERSION = 1
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U8 = struct.Struct("<B")


def _config_block(config: ModelConfig) -> bytes:
    return json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_size(config: ModelConfig) -> int:
    """Exact size in bytes of a checkpoint for *config*."""
    size = len(MAGIC) + _U32.size * 2 + len(_config_block(config))
    for name, shape in parameter_shapes(config).items():
        size += _U16.size + len(name.encode("utf-8")) + _U8.size + _U32.size * len(shape)
        size += 4 * int(np.prod(shape, dtype=np.int64))
    return size


def save_checkpoint(params: Params, config: ModelConfig | None, path: PathLike) -> Path:
    """Write *params* (and its config) to *path* atomically."""
    path = Path(path)
    config = config or params.config
    chunks = [MAGIC, _U32.pack(VERSION)]
    block = _config_block(config)
    chunks += [_U32.pack(len(block)), block]
    for name, tensor in params.items():
        raw = name.encode("utf-8")
        chunks += [_U16.pack(len(raw)), raw, _U8.pack(tensor.ndim)]
        chunks += [_U32.pack(dim) for dim in tensor.shape]
        chunks.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)
    logger.debug("Saved checkpoint %s", path)
    return path


def _take(data: bytes, pos: int, n: int, what: str) -> tuple[bytes, int]:
    if pos + n > len(data):
        raise FormatError(f"Truncated checkpoint while reading {what}", pos)
    return data[pos : pos + n], pos + n


def load_checkpoint(path: PathLike) -> Params:
    """Read a checkpoint; the returned :class:`Params` carries its config.

    Raises:
        FormatError: On a bad magic, unknown version, truncation or a tensor
            set that does not match the stored config.
    """
    data = Path(path).read_bytes()
    magic, pos = _take(data, 0, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"Bad magic {magic!r}, expected {MAGIC!r}", 0)
    raw, pos = _take(data, pos, 4, "version")
    (version,) = _U32.unpack(raw)
    if version != VERSION:
        raise FormatError(f"Unsupported checkpoint version {version}", pos - 4)
    raw, pos = _take(data, pos, 4, "config length")
    (n,) = _U32.unpack(raw)
    block, pos = _take(data, pos, n, "config")
    try:
        config = ModelConfig.from_dict(json.loads(block.decode("utf-8")))
    except (ValueError, TypeError, ConfigurationError) as exc:
        raise FormatError(f"Unreadable config block: {exc}", pos - n) from exc

    expected = parameter_shapes(config)
    tensors: dict[str, np.ndarray] = {}
    while pos < len(data):
        start = pos
        raw, pos = _take(data, pos, 2, "tensor name length")
        (name_len,) = _U16.unpack(raw)
        raw, pos = _take(data, pos, name_len, "tensor name")
        name = raw.decode("utf-8")
        raw, pos = _take(data, pos, 1, "tensor rank")
        (rank,) = _U8.unpack(raw)
        raw, pos = _take(data, pos, 4 * rank, "tensor dims")
        shape = struct.unpack(f"<{rank}I", raw)
        if expected.get(name) != shape:
            raise FormatError(f"Unexpected tensor {name} with shape {shape}", start)
        count = int(np.prod(shape, dtype=np.int64))
        raw, pos = _take(data, pos, 4 * count, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    missing = [name for name in expected if name not in tensors]
    if missing:
        raise FormatError(f"Checkpoint is missing tensor(s): {', '.join(missing)}", len(data))
    return Params(config, tensors)
