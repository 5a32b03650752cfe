"""E2V1 checkpoint container.

Byte layout (all little-endian):

    magic   4 bytes  "E2V1"
    config  u32 length + JSON (network hyperparameters)
    params  u32 count, then per entry:
              u16 key length + UTF-8 key
              u8 ndim + ndim x u32 dims
              f32 data, C order
    opt     u8 flag; if 1: u64 step count + a params-style table of
            Adam moment buffers keyed "m/<param>" and "v/<param>"
    crc     u32 CRC32 of everything above

Loading onto a mismatched NetworkConfig is an error naming the field.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .network import NetworkConfig
from .optim import Adam

CKPT_MAGIC = b"E2V1"


class CheckpointError(ValueError):
    pass


def _pack_table(arrays: dict[str, np.ndarray]) -> bytes:
    chunks = [struct.pack("<I", len(arrays))]
    for key, arr in arrays.items():
        kb = key.encode()
        data = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(kb)) + kb)
        chunks.append(struct.pack("<B", data.ndim)
                      + struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    return b"".join(chunks)


def _unpack_table(buf: bytes, off: int) -> tuple[dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    out = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", buf, off)
        off += 2
        key = buf[off:off + klen].decode()
        off += klen
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[key] = np.frombuffer(buf, "<f4", count=n, offset=off).reshape(shape).copy()
        off += 4 * n
    return out, off


def save_checkpoint(weights: dict[str, np.ndarray], config: NetworkConfig,
                    optimizer: Adam | None = None) -> bytes:
    cfg = json.dumps(config.to_dict()).encode()
    body = [CKPT_MAGIC, struct.pack("<I", len(cfg)), cfg, _pack_table(weights)]
    if optimizer is not None:
        body.append(struct.pack("<BQ", 1, optimizer.step_count))
        body.append(_pack_table(optimizer.state_arrays()))
    else:
        body.append(struct.pack("<B", 0))
    payload = b"".join(body)
    return payload + struct.pack("<I", zlib.crc32(payload))


def load_checkpoint(data: bytes, expected_config: NetworkConfig | None = None,
                    ) -> tuple[dict[str, np.ndarray], NetworkConfig, Adam | None]:
    if len(data) < 12 or data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic, expected {CKPT_MAGIC!r}")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checksum mismatch: checkpoint truncated or corrupt")
    (cfg_len,) = struct.unpack_from("<I", data, 4)
    config = NetworkConfig.from_dict(json.loads(data[8:8 + cfg_len].decode()))
    off = 8 + cfg_len
    weights, off = _unpack_table(data, off)
    (flag,) = struct.unpack_from("<B", data, off)
    off += 1
    optimizer = None
    if flag:
        (step,) = struct.unpack_from("<Q", data, off)
        off += 8
        arrays, off = _unpack_table(data, off)
        optimizer = Adam.from_state(step, arrays)
    if expected_config is not None:
        for field, want in expected_config.to_dict().items():
            got = config.to_dict()[field]
            if field != "unroll_len" and got != want:
                raise CheckpointError(
                    f"config mismatch on {field!r}: checkpoint has {got}, expected {want}")
    return weights, config, optimizer
