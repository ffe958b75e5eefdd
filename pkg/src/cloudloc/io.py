"""Point-cloud file I/O: PLY (ASCII / binary little-endian) and the
native "GPC1" binary cloud format.

Native layout: magic ``GPC1``, u32 point count, u32 feature dim (0 if
none), count*3 little-endian f32 coordinates, count*dim f32 features.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import PointCloud
from .errors import ParseError

_MAGIC = b"GPC1"

_PLY_TYPES = {
    "char": ("i1", 1), "uchar": ("u1", 1), "short": ("i2", 2),
    "ushort": ("u2", 2), "int": ("i4", 4), "uint": ("u4", 4),
    "float": ("f4", 4), "double": ("f8", 8),
    "int8": ("i1", 1), "uint8": ("u1", 1), "int16": ("i2", 2),
    "uint16": ("u2", 2), "int32": ("i4", 4), "uint32": ("u4", 4),
    "float32": ("f4", 4), "float64": ("f8", 8),
}


def save_cloud(cloud: PointCloud, path) -> None:
    """Write a cloud; `.ply` extension selects PLY, anything else native."""
    path = Path(path)
    if path.suffix.lower() == ".ply":
        save_ply(cloud, path)
    else:
        save_native(cloud, path)


def load_cloud(path, frame: str = "world") -> PointCloud:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return load_ply(path, frame=frame)
    return load_native(path, frame=frame)


def save_native(cloud: PointCloud, path) -> None:
    dim = cloud.feature_dim
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", len(cloud), dim))
        f.write(cloud.points.astype("<f4").tobytes())
        if dim:
            f.write(cloud.features.astype("<f4").tobytes())


def load_native(path, frame: str = "world") -> PointCloud:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ParseError(f"bad magic {data[:4]!r}, expected {_MAGIC!r}", byte_offset=0)
    if len(data) < 12:
        raise ParseError("truncated header", byte_offset=len(data))
    count, dim = struct.unpack_from("<II", data, 4)
    need = 12 + count * 3 * 4 + count * dim * 4
    if len(data) < need:
        raise ParseError(
            f"truncated payload: need {need} bytes, have {len(data)}",
            byte_offset=len(data),
        )
    pts = np.frombuffer(data, dtype="<f4", count=count * 3, offset=12)
    pts = pts.reshape(count, 3).astype(np.float64)
    feats = None
    if dim:
        feats = np.frombuffer(
            data, dtype="<f4", count=count * dim, offset=12 + count * 12
        ).reshape(count, dim).astype(np.float64)
    return PointCloud(pts, feats, frame)


def save_ply(cloud: PointCloud, path, binary: bool = True) -> None:
    """x/y/z as float32; features are not written (PLY is geometry-only here)."""
    n = len(cloud)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        pts = cloud.points.astype("<f4")
        if binary:
            f.write(pts.tobytes())
        else:
            for p in pts:
                f.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n".encode("ascii"))


def load_ply(path, frame: str = "world") -> PointCloud:
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n")
    if not lines or lines[0].strip() != b"ply":
        raise ParseError("not a PLY file (missing 'ply' magic)", line=1)
    fmt = None
    vertex_count = None
    props = []  # (name, numpy dtype code, byte size), vertex element only
    in_vertex = False
    header_end = None
    offset = 0
    for lineno, line in enumerate(lines, start=1):
        offset += len(line) + 1
        text = line.strip().decode("ascii", errors="replace")
        if lineno == 1:
            continue
        if text.startswith("comment"):
            continue
        if text.startswith("format"):
            parts = text.split()
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unsupported format line: {text!r}", line=lineno)
            fmt = parts[1]
        elif text.startswith("element"):
            parts = text.split()
            if len(parts) != 3:
                raise ParseError(f"malformed element line: {text!r}", line=lineno)
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                try:
                    vertex_count = int(parts[2])
                except ValueError:
                    raise ParseError(f"bad vertex count: {parts[2]!r}", line=lineno)
        elif text.startswith("property"):
            if not in_vertex:
                continue
            parts = text.split()
            if parts[1] == "list":
                raise ParseError("list properties unsupported on vertices", line=lineno)
            if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                raise ParseError(f"malformed property line: {text!r}", line=lineno)
            props.append((parts[2], *_PLY_TYPES[parts[1]]))
        elif text == "end_header":
            header_end = offset
            header_lines = lineno
            break
    else:
        raise ParseError("missing end_header", line=len(lines))
    if fmt is None or vertex_count is None:
        raise ParseError("header lacks format/vertex element", line=header_lines)
    names = [p[0] for p in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise ParseError(f"vertex element lacks property {axis!r}", line=header_lines)

    if fmt == "binary_little_endian":
        dtype = np.dtype([(name, "<" + code) for name, code, _ in props])
        need = header_end + vertex_count * dtype.itemsize
        if len(raw) < need:
            raise ParseError(
                f"truncated vertex data: need {need} bytes, have {len(raw)}",
                byte_offset=len(raw),
            )
        rec = np.frombuffer(raw, dtype=dtype, count=vertex_count, offset=header_end)
        pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    else:
        body = raw[header_end:].split(b"\n")
        pts = np.empty((vertex_count, 3))
        ix, iy, iz = names.index("x"), names.index("y"), names.index("z")
        for i in range(vertex_count):
            lineno = header_lines + 1 + i
            if i >= len(body):
                raise ParseError("truncated vertex rows", line=lineno)
            fields = body[i].split()
            if len(fields) != len(props):
                raise ParseError(
                    f"expected {len(props)} fields, got {len(fields)}", line=lineno
                )
            try:
                pts[i] = (float(fields[ix]), float(fields[iy]), float(fields[iz]))
            except ValueError:
                raise ParseError(f"non-numeric vertex row: {body[i]!r}", line=lineno)
    return PointCloud(pts, None, frame)
