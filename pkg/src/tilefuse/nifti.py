"""NIfTI-1 single-file reader/writer for the pipeline's I/O subset.

Supported: .nii and gzipped .nii.gz, datatypes uint8/int16/float32, 3D only.
Geometry precedence on load: sform if sform_code > 0, else qform if
qform_code > 0, else diagonal(spacing). scl_slope/scl_inter are applied when
they encode an actual rescale. Writing always emits little-endian files with
the sform set and, for label volumes, the NIfTI label intent so kind survives
a round trip. Gzip members are written with mtime pinned to 0 so identical
volumes produce identical bytes.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import (
    CorruptFileError,
    FormatError,
    UnsupportedDatatypeError,
    WriteError,
)
from .registration import AffineTransform
from .volume import LabelVolume, Volume

_HEADER_SIZE = 348
_MAGIC_SINGLE = b"n+1\x00"
_INTENT_LABEL = 1002

_DTYPES = {2: np.dtype("uint8"), 4: np.dtype("int16"), 16: np.dtype("float32")}
_DTYPE_CODES = {np.dtype("uint8"): (2, 8), np.dtype("int16"): (4, 16),
                np.dtype("float32"): (16, 32)}

# (name, struct format, offset) for every field we read or write
_FIELDS = [
    ("sizeof_hdr", "i", 0),
    ("dim", "8h", 40),
    ("intent_p1", "f", 56),
    ("intent_code", "h", 68),
    ("datatype", "h", 70),
    ("bitpix", "h", 72),
    ("pixdim", "8f", 76),
    ("vox_offset", "f", 108),
    ("scl_slope", "f", 112),
    ("scl_inter", "f", 116),
    ("xyzt_units", "B", 123),
    ("qform_code", "h", 252),
    ("sform_code", "h", 254),
    ("quatern_b", "f", 256),
    ("quatern_c", "f", 260),
    ("quatern_d", "f", 264),
    ("qoffset_x", "f", 268),
    ("qoffset_y", "f", 272),
    ("qoffset_z", "f", 276),
    ("srow_x", "4f", 280),
    ("srow_y", "4f", 296),
    ("srow_z", "4f", 312),
    ("magic", "4s", 344),
]


def _open_read(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _write_bytes(path: Path, chunks) -> None:
    # gzip members carry mtime and name; pin both so identical volumes
    # produce identical bytes
    with open(path, "wb") as raw:
        if str(path).endswith(".gz"):
            with gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as gz:
                for chunk in chunks:
                    gz.write(chunk)
        else:
            for chunk in chunks:
                raw.write(chunk)


def _parse_header(blob: bytes) -> dict:
    if len(blob) < _HEADER_SIZE:
        raise FormatError(f"file shorter than the {_HEADER_SIZE}-byte header")
    magic = blob[344:348]
    if magic == b"ni1\x00":
        raise FormatError("two-file NIfTI (ni1) is not supported")
    if magic != _MAGIC_SINGLE:
        raise FormatError(f"bad magic {magic!r}, expected {_MAGIC_SINGLE!r}")
    endian = "<"
    (size,) = struct.unpack_from("<i", blob, 0)
    if size != _HEADER_SIZE:
        (size_be,) = struct.unpack_from(">i", blob, 0)
        if size_be != _HEADER_SIZE:
            raise FormatError(f"sizeof_hdr is {size}, expected {_HEADER_SIZE}")
        endian = ">"
    hdr = {}
    for name, fmt, offset in _FIELDS:
        values = struct.unpack_from(endian + fmt, blob, offset)
        hdr[name] = values[0] if len(values) == 1 else values
    hdr["endian"] = endian
    return hdr


def _qform_affine(hdr: dict) -> np.ndarray:
    b, c, d = hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"]
    w2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(w2) if w2 > 0 else 0.0
    r = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    pixdim = hdr["pixdim"]
    qfac = -1.0 if pixdim[0] == -1.0 else 1.0
    scale = np.diag([pixdim[1], pixdim[2], pixdim[3] * qfac])
    m = np.eye(4)
    m[:3, :3] = r @ scale
    m[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return m


def load_nifti(path, as_labels: bool | None = None,
               label_count: int | None = None) -> Volume | LabelVolume:
    """Load a NIfTI-1 volume.

    Returns a LabelVolume when the file carries the label intent (as written
    by store_nifti) or when `as_labels=True` is forced for third-party label
    maps; otherwise a Volume. `label_count` overrides the recorded/inferred
    count.
    """
    path = Path(path)
    with _open_read(path) as fh:
        blob = fh.read()
    hdr = _parse_header(blob)

    dim = hdr["dim"]
    ndim = dim[0]
    if ndim < 1 or ndim > 4 or (ndim == 4 and dim[4] > 1):
        raise FormatError(f"only 3D volumes are supported, dim={dim[:5]}")
    dims = tuple(max(int(dim[i + 1]), 1) for i in range(3))

    code = hdr["datatype"]
    if code not in _DTYPES:
        raise UnsupportedDatatypeError(
            f"datatype code {code} unsupported (need uint8=2, int16=4, float32=16)"
        )
    dtype = _DTYPES[code].newbyteorder(hdr["endian"])

    n_vox = int(np.prod(dims))
    offset = int(round(hdr["vox_offset"]))
    need = offset + n_vox * dtype.itemsize
    if len(blob) < need:
        raise CorruptFileError(
            f"{path}: need {need} bytes for {dims} voxels, file has {len(blob)}"
        )
    data = np.frombuffer(blob, dtype=dtype, count=n_vox, offset=offset)
    data = data.reshape(dims, order="F").astype(dtype.newbyteorder("="))

    spacing = tuple(float(hdr["pixdim"][i + 1]) for i in range(3))
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise FormatError(f"non-positive pixdim {spacing}")

    if hdr["sform_code"] > 0:
        m = np.eye(4)
        m[0] = hdr["srow_x"]
        m[1] = hdr["srow_y"]
        m[2] = hdr["srow_z"]
    elif hdr["qform_code"] > 0:
        m = _qform_affine(hdr)
    else:
        m = np.diag([spacing[0], spacing[1], spacing[2], 1.0])
    affine = AffineTransform(m)

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    scaled = slope != 0.0 and (slope != 1.0 or inter != 0.0)

    if as_labels is None:
        as_labels = hdr["intent_code"] == _INTENT_LABEL
    if as_labels:
        if scaled:
            raise FormatError("label volume with intensity rescaling is not supported")
        if not np.issubdtype(data.dtype, np.integer):
            rounded = np.rint(data)
            if not np.array_equal(rounded, data):
                raise FormatError("label volume contains non-integer values")
            data = rounded.astype(np.int32)
        if label_count is None:
            recorded = int(round(hdr["intent_p1"]))
            label_count = recorded if recorded > 0 else int(data.max()) + 1
        return LabelVolume(data, spacing, affine, label_count)

    if scaled:
        data = (data.astype(np.float32) * np.float32(slope)) + np.float32(inter)
    return Volume(data, spacing, affine)


def store_nifti(v: Volume | LabelVolume, path) -> None:
    """Write a volume as little-endian single-file NIfTI-1.

    Volumes are stored float32; label volumes int16 with the label intent and
    label_count recorded in intent_p1.
    """
    is_labels = isinstance(v, LabelVolume)
    if is_labels:
        if v.label_count > 32768:
            raise UnsupportedDatatypeError("label_count exceeds int16 storage")
        data = v.data.astype(np.int16)
        intent_code, intent_p1 = _INTENT_LABEL, float(v.label_count)
    else:
        data = v.data.astype(np.float32)
        intent_code, intent_p1 = 0, 0.0
    code, bitpix = _DTYPE_CODES[data.dtype.newbyteorder("=")]

    hdr = bytearray(_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, _HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *v.dims, 1, 1, 1, 1)
    struct.pack_into("<f", hdr, 56, intent_p1)
    struct.pack_into("<h", hdr, 68, intent_code)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *v.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<f", hdr, 112, 0.0)  # scl_slope 0: no rescale
    struct.pack_into("<f", hdr, 116, 0.0)
    struct.pack_into("<B", hdr, 123, 2)    # spatial units mm
    struct.pack_into("<h", hdr, 254, 2)    # sform: aligned
    m = v.voxel_to_world.matrix.astype(np.float32)
    struct.pack_into("<4f", hdr, 280, *m[0])
    struct.pack_into("<4f", hdr, 296, *m[1])
    struct.pack_into("<4f", hdr, 312, *m[2])
    struct.pack_into("<4s", hdr, 344, _MAGIC_SINGLE)

    chunks = (
        bytes(hdr),
        b"\x00" * 4,  # pad to vox_offset 352, no extensions
        data.tobytes(order="F"),
    )
    try:
        _write_bytes(Path(path), chunks)
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc
