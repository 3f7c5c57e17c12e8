"""Self-contained NIfTI-1 single-file I/O, just enough for the tile protocol.

Reads uint8/int16/float32 little- or big-endian volumes; writes int16
little-endian label volumes. No dependency on the host package: the file
format is the interface.
"""

from __future__ import annotations

import gzip
import struct

import numpy as np

HEADER_SIZE = 348
MAGIC = b"n+1\x00"
DTYPES = {2: np.dtype("uint8"), 4: np.dtype("int16"), 16: np.dtype("float32")}


class NiftiError(Exception):
    pass


def read_volume(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Return (data indexed [x, y, z], spacing). Geometry beyond spacing is
    ignored: the manifest pins tile placement."""
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < HEADER_SIZE:
        raise NiftiError("file shorter than a NIfTI-1 header")
    if blob[344:348] != MAGIC:
        raise NiftiError(f"bad magic {blob[344:348]!r}")
    endian = "<"
    if struct.unpack_from("<i", blob, 0)[0] != HEADER_SIZE:
        if struct.unpack_from(">i", blob, 0)[0] != HEADER_SIZE:
            raise NiftiError("sizeof_hdr is not 348")
        endian = ">"
    dim = struct.unpack_from(endian + "8h", blob, 40)
    if dim[0] < 1 or dim[0] > 4 or (dim[0] == 4 and dim[4] > 1):
        raise NiftiError(f"not a 3D volume: dim={dim[:5]}")
    dims = tuple(max(int(dim[i + 1]), 1) for i in range(3))
    code = struct.unpack_from(endian + "h", blob, 70)[0]
    if code not in DTYPES:
        raise NiftiError(f"unsupported datatype code {code}")
    dtype = DTYPES[code].newbyteorder(endian)
    pixdim = struct.unpack_from(endian + "8f", blob, 76)
    offset = int(round(struct.unpack_from(endian + "f", blob, 108)[0]))
    n = int(np.prod(dims))
    if len(blob) < offset + n * dtype.itemsize:
        raise NiftiError("file truncated")
    data = np.frombuffer(blob, dtype=dtype, count=n, offset=offset)
    data = data.reshape(dims, order="F").astype(dtype.newbyteorder("="))
    slope = struct.unpack_from(endian + "f", blob, 112)[0]
    inter = struct.unpack_from(endian + "f", blob, 116)[0]
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data.astype(np.float32) * np.float32(slope) + np.float32(inter)
    spacing = tuple(float(pixdim[i + 1]) for i in range(3))
    return data, spacing


def write_labels(path, labels: np.ndarray, spacing, label_count: int) -> None:
    """Write an int16 label volume with a diagonal sform."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= label_count:
        raise NiftiError("labels outside [0, label_count)")
    data = labels.astype(np.int16)
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<f", hdr, 56, float(label_count))  # intent_p1
    struct.pack_into("<h", hdr, 68, 1002)                # label intent
    struct.pack_into("<h", hdr, 70, 4)                   # int16
    struct.pack_into("<h", hdr, 72, 16)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<B", hdr, 123, 2)
    struct.pack_into("<h", hdr, 254, 2)
    struct.pack_into("<4f", hdr, 280, spacing[0], 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, spacing[1], 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, spacing[2], 0.0)
    struct.pack_into("<4s", hdr, 344, MAGIC)
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00" * 4)
        fh.write(data.tobytes(order="F"))
