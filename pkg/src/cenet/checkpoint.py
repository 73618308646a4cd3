"""Binary checkpoint container.

Layout (little endian)::

    b"CENETCKP"  u32 version  u32 header_len  header (UTF-8 JSON, sorted keys)
    u32 block_count
    per block: u16 name_len, name, u8 ndim, u64 * ndim shape, float64 values (row-major)

The header carries ``d``, ``num_entities``, ``num_relations``, the
hyperparameters and run metadata. Loading checks every model block's shape
against the header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import CLASSIFIER_NAMES, STAGE1_NAMES, HyperParams, ModelParams

MAGIC = b"CENETCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(header: dict, blocks: dict[str, np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(head))
    out += head
    out += struct.pack("<I", len(blocks))
    for name, array in blocks.items():
        array = np.ascontiguousarray(array, dtype="<f8")
        raw_name = name.encode("utf-8")
        out += struct.pack("<H", len(raw_name)) + raw_name
        out += struct.pack("<B", array.ndim)
        out += struct.pack(f"<{array.ndim}Q", *array.shape)
        out += array.tobytes()
    return bytes(out)


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    version, head_len = struct.unpack_from("<II", data, pos)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += 8
    header = json.loads(data[pos:pos + head_len].decode("utf-8"))
    pos += head_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    blocks = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        blocks[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(data):
        raise CheckpointError("trailing bytes after last block")
    return header, blocks


def save_checkpoint(path, params: ModelParams, hp: HyperParams, meta: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    header = {
        "d": params.d,
        "num_entities": params.num_entities,
        "num_relations": params.num_relations,
        "hyperparams": hp.to_dict(),
        "has_classifier": params.has_classifier,
        "meta": meta or {},
    }
    blocks = dict(params.arrays(include_classifier=params.has_classifier))
    if extra:
        blocks.update(extra)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(encode(header, blocks))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[ModelParams, HyperParams, dict, dict[str, np.ndarray]]:
    """Returns ``(params, hyperparams, header, extra_blocks)``."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    header, blocks = decode(path.read_bytes())
    num_e, num_r, d = header["num_entities"], header["num_relations"], header["d"]
    shapes = ModelParams.expected_shapes(num_e, num_r, d)
    has_clf = bool(header.get("has_classifier"))
    required = STAGE1_NAMES + (CLASSIFIER_NAMES if has_clf else ())
    for name in required:
        if name not in blocks:
            raise CheckpointError(f"checkpoint lacks block {name!r}")
        if blocks[name].shape != shapes[name]:
            raise CheckpointError(f"block {name!r} has shape {blocks[name].shape}, header implies {shapes[name]}")
    arrays = {n: blocks[n] for n in required}
    if not has_clf:
        arrays.update({n: np.zeros(shapes[n]) for n in CLASSIFIER_NAMES})
    params = ModelParams(num_e, num_r, d, arrays, has_classifier=has_clf)
    extra = {k: v for k, v in blocks.items() if k not in shapes}
    return params, HyperParams.from_dict(header["hyperparams"]), header, extra
