"""File formats: the DBGT tensor container, camera text files and ASCII PLY.

DBGT layout (all little-endian)::

    magic   4 bytes  b"DBGT"
    version u16      currently 1
    dtype   u8       0=f32, 1=i32, 2=u16, 3=u8
    rank    u8
    dims    rank x u64
    payload row-major, product(dims) * itemsize bytes
"""

import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"DBGT"
VERSION = 1

_CODE_TO_DTYPE = {
    0: np.dtype("<f4"),
    1: np.dtype("<i4"),
    2: np.dtype("<u2"),
    3: np.dtype("u1"),
}
_KIND_TO_CODE = {
    np.dtype("float32"): 0,
    np.dtype("int32"): 1,
    np.dtype("uint16"): 2,
    np.dtype("uint8"): 3,
}
_HEADER = struct.Struct("<4sHBB")


def encode_dbgt(array):
    array = np.asarray(array)
    code = _KIND_TO_CODE.get(array.dtype.newbyteorder("="))
    if code is None:
        raise TypeError(f"unsupported dtype for DBGT: {array.dtype}")
    dtype = _CODE_TO_DTYPE[code]
    header = _HEADER.pack(MAGIC, VERSION, code, array.ndim)
    dims = struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array, dtype=dtype).tobytes(order="C")
    return header + dims + payload


def decode_dbgt(buf, path="<bytes>"):
    if len(buf) < _HEADER.size:
        raise ParseError(path, "truncated header", offset=len(buf))
    magic, version, code, rank = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ParseError(path, f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise ParseError(path, f"unsupported version {version}", offset=4)
    if code not in _CODE_TO_DTYPE:
        raise ParseError(path, f"unknown dtype code {code}", offset=6)
    off = _HEADER.size
    if len(buf) < off + 8 * rank:
        raise ParseError(path, "truncated dims", offset=len(buf))
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    dtype = _CODE_TO_DTYPE[code]
    expected = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize
    got = len(buf) - off
    if got != expected:
        raise ParseError(path, f"payload is {got} bytes, header implies {expected}", offset=off)
    arr = np.frombuffer(buf, dtype=dtype, offset=off).reshape(dims)
    # native byte order, writable copy
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_dbgt(path, array):
    Path(path).write_bytes(encode_dbgt(array))


def read_dbgt(path, dtype=None, rank=None):
    """Read a DBGT file, optionally checking its dtype and rank."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ParseError(path, f"cannot read: {exc.strerror}") from exc
    arr = decode_dbgt(buf, path)
    if dtype is not None and arr.dtype != np.dtype(dtype):
        raise ParseError(path, f"expected dtype {np.dtype(dtype)}, found {arr.dtype}")
    if rank is not None and arr.ndim != rank:
        raise ParseError(path, f"expected rank {rank}, found {arr.ndim}")
    return arr


def read_matrix_txt(path, shape):
    """Read a whitespace-separated row-major matrix (camera files)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(path, f"cannot read: {exc.strerror}") from exc
    try:
        values = [float(tok) for tok in text.split()]
    except ValueError as exc:
        raise ParseError(path, f"non-numeric token ({exc})") from exc
    n = shape[0] * shape[1]
    if len(values) != n:
        raise ParseError(path, f"expected {n} floats, found {len(values)}")
    return np.array(values, dtype=np.float64).reshape(shape)


def write_matrix_txt(path, matrix):
    matrix = np.asarray(matrix, dtype=np.float64)
    lines = [" ".join(repr(float(v)) for v in row) for row in matrix]
    Path(path).write_text("\n".join(lines) + "\n")


def write_ply(path, xyz, rgb):
    """Write an ASCII PLY with float xyz and uchar rgb per vertex."""
    xyz = np.asarray(xyz, dtype=np.float64)
    rgb = np.asarray(rgb, dtype=np.uint8)
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(xyz)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    # repr() round-trips doubles exactly
    rows = [
        f"{x!r} {y!r} {z!r} {r} {g} {b}"
        for (x, y, z), (r, g, b) in zip(xyz.tolist(), rgb.tolist())
    ]
    Path(path).write_text("\n".join(header + rows) + "\n")


def read_ply(path):
    """Read an ASCII PLY vertex list; returns (xyz float64, rgb uint8).

    Only the vertex element and the x/y/z/red/green/blue properties are
    interpreted; binary PLY is rejected.
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ParseError(path, f"cannot read: {exc.strerror}") from exc
    if not lines or lines[0].strip() != "ply":
        raise ParseError(path, "missing 'ply' magic line")
    n_vertex = None
    props = []
    elements = []
    i = 1
    while i < len(lines) and lines[i].strip() != "end_header":
        tok = lines[i].split()
        if tok and tok[0] == "format" and tok[1] != "ascii":
            raise ParseError(path, f"unsupported PLY format {tok[1]}")
        if tok and tok[0] == "element":
            elements.append(tok[1])
            if tok[1] == "vertex":
                n_vertex = int(tok[2])
        if tok and tok[0] == "property" and elements and elements[-1] == "vertex":
            props.append(tok[-1])
        i += 1
    if i == len(lines):
        raise ParseError(path, "missing end_header")
    if n_vertex is None:
        raise ParseError(path, "no vertex element")
    body = lines[i + 1:i + 1 + n_vertex]
    if len(body) != n_vertex:
        raise ParseError(path, f"expected {n_vertex} vertex rows, found {len(body)}")
    try:
        table = np.array([[float(v) for v in row.split()] for row in body], dtype=np.float64)
    except ValueError as exc:
        raise ParseError(path, f"bad vertex row ({exc})") from exc
    table = table.reshape(n_vertex, len(props))
    col = {name: k for k, name in enumerate(props)}
    try:
        xyz = table[:, [col["x"], col["y"], col["z"]]]
    except KeyError as exc:
        raise ParseError(path, f"missing vertex property {exc}") from exc
    if all(c in col for c in ("red", "green", "blue")):
        rgb = table[:, [col["red"], col["green"], col["blue"]]].astype(np.uint8)
    else:
        rgb = np.zeros((n_vertex, 3), dtype=np.uint8)
    return xyz, rgb


UNLABELED_RGB = (128, 128, 128)


def label_colors(labels):
    """Stable per-id colours from a multiplicative hash; negative ids are gray."""
    labels = np.asarray(labels, dtype=np.int64)
    h = (labels.astype(np.uint64) * np.uint64(2654435761)) & np.uint64(0xFFFFFFFF)
    rgb = np.stack([(h >> np.uint64(s)) & np.uint64(0xFF) for s in (0, 8, 16)], axis=1)
    # lift into [64, 255] so no label renders near-black
    rgb = (64 + (rgb.astype(np.int64) * 191) // 255).astype(np.uint8)
    rgb[labels < 0] = UNLABELED_RGB
    return rgb


def export_ply(path, cloud, labels):
    """Write ``cloud`` coloured by a per-point instance or class labeling."""
    labels = np.asarray(labels)
    if len(labels) != len(cloud.xyz):
        raise ValueError(f"labeling has {len(labels)} entries for {len(cloud.xyz)} points")
    write_ply(path, cloud.xyz, label_colors(labels))
