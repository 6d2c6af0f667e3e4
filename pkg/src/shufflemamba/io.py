"""Raw tensor files and named-tensor checkpoints.

Single tensor (``SMT1``)::

    b"SMT1" | u32 rank | rank x u32 dims | float32 LE payload, row-major

Checkpoint container (``SMTC``): ``b"SMTC" | u32 count`` followed by
``count`` entries of ``u32 name_len | utf-8 name | SMT1 record``.
"""

import struct

import numpy as np

MAGIC = b"SMT1"
CONTAINER_MAGIC = b"SMTC"


def encode_tensor(arr):
    arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def decode_tensor(buf, offset=0):
    """Parse one SMT1 record; returns ``(array, next_offset)``."""
    if buf[offset:offset + 4] != MAGIC:
        raise ValueError("not an SMT1 tensor record")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    dims = struct.unpack_from(f"<{rank}I", buf, offset + 8)
    start = offset + 8 + 4 * rank
    n = int(np.prod(dims, dtype=np.int64))
    end = start + 4 * n
    if end > len(buf):
        raise ValueError("truncated SMT1 payload")
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=start).reshape(dims)
    return arr.astype(np.float32), end


def save_tensor(path, arr):
    with open(path, "wb") as fh:
        fh.write(encode_tensor(arr))


def load_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise ValueError(f"{path}: trailing bytes after tensor")
    return arr


def save_checkpoint(path, named):
    """Write ``{name: array}`` in insertion order."""
    parts = [CONTAINER_MAGIC, struct.pack("<I", len(named))]
    for name, arr in named.items():
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(encode_tensor(arr))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CONTAINER_MAGIC:
        raise ValueError(f"{path}: not a checkpoint container")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos, out = 8, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        name = buf[pos + 4:pos + 4 + nlen].decode()
        out[name], pos = decode_tensor(buf, pos + 4 + nlen)
    return out


def format_permutation(forward):
    return "\n".join(str(int(i)) for i in forward) + "\n"


def parse_permutation(text):
    return np.array([int(line) for line in text.split()], dtype=np.int64)
