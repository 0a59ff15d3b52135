"""PLY point-cloud reader/writer (ASCII and binary little-endian).

Supported vertex properties: x, y, z as float32 or float64; optional
red, green, blue as uint8 (mapped to [0, 1] by /255); optional nx, ny, nz
as float32.  Unknown scalar properties are preserved on read and returned
separately; they are dropped on write with a warning.  Binary writes are
canonical, so write -> read -> write is byte-identical.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np

from .geometry import PointCloud

_PLY_TO_NUMPY = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2",
    "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4",
    "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
}

_COLOR_NAMES = ("red", "green", "blue")
_NORMAL_NAMES = ("nx", "ny", "nz")


class PlyError(ValueError):
    """Malformed or unsupported PLY content."""


def _parse_header(stream) -> tuple[str, list[tuple[str, int, list[tuple[str, str]]]]]:
    magic = stream.readline().strip()
    if magic != b"ply":
        raise PlyError("not a PLY file (missing 'ply' magic)")
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    while True:
        raw = stream.readline()
        if not raw:
            raise PlyError("unexpected end of file inside header")
        line = raw.decode("ascii", errors="replace").strip()
        if not line or line.startswith("comment") or line.startswith("obj_info"):
            continue
        if line == "end_header":
            break
        fields = line.split()
        if fields[0] == "format":
            if fields[1] == "ascii":
                fmt = "ascii"
            elif fields[1] == "binary_little_endian":
                fmt = "binary"
            else:
                raise PlyError(f"unsupported PLY format {fields[1]!r}")
        elif fields[0] == "element":
            elements.append((fields[1], int(fields[2]), []))
        elif fields[0] == "property":
            if not elements:
                raise PlyError("property before any element")
            if fields[1] == "list":
                elements[-1][2].append((fields[-1], "list"))
            else:
                elements[-1][2].append((fields[2], fields[1]))
    if fmt is None:
        raise PlyError("missing format line")
    return fmt, elements


def _read_element_ascii(stream, count: int, props: list[tuple[str, str]]) -> dict[str, np.ndarray]:
    rows = np.empty((count, len(props)), dtype=np.float64)
    for i in range(count):
        parts = stream.readline().split()
        if len(parts) < len(props):
            raise PlyError(f"truncated ASCII element (row {i})")
        rows[i] = [float(x) for x in parts[: len(props)]]
    return {name: rows[:, j].astype(_PLY_TO_NUMPY[t]) for j, (name, t) in enumerate(props)}


def _read_element_binary(stream, count: int, props: list[tuple[str, str]]) -> dict[str, np.ndarray]:
    dtype = np.dtype([(name, _PLY_TO_NUMPY[t]) for name, t in props])
    buf = stream.read(dtype.itemsize * count)
    if len(buf) < dtype.itemsize * count:
        raise PlyError("truncated binary element")
    rec = np.frombuffer(buf, dtype=dtype, count=count)
    return {name: rec[name] for name, _ in props}


def read_ply(path: str | Path) -> tuple[PointCloud, dict[str, np.ndarray]]:
    """Read a PLY point cloud.

    Returns the cloud plus a dict of unknown vertex properties (possibly
    empty).  Elements after the vertex element are ignored.
    """
    path = Path(path)
    with open(path, "rb") as stream:
        fmt, elements = _parse_header(stream)
        columns = None
        for name, count, props in elements:
            if name != "vertex":
                if any(t == "list" for _, t in props):
                    raise PlyError(f"cannot skip list-typed element {name!r} before vertex data")
                # Fixed-size non-vertex element: skip its payload.
                if fmt == "binary":
                    size = sum(np.dtype(_PLY_TO_NUMPY[t]).itemsize for _, t in props)
                    stream.read(size * count)
                else:
                    for _ in range(count):
                        stream.readline()
                continue
            if any(t == "list" for _, t in props):
                raise PlyError("list properties on the vertex element are unsupported")
            reader = _read_element_ascii if fmt == "ascii" else _read_element_binary
            columns = reader(stream, count, props)
            for prop_name, ply_type in props:
                if prop_name in ("x", "y", "z") and ply_type not in ("float", "float32", "double", "float64"):
                    raise PlyError(f"coordinate {prop_name!r} must be float32 or float64")
            break
    if columns is None:
        raise PlyError("no vertex element found")
    for coord in ("x", "y", "z"):
        if coord not in columns:
            raise PlyError(f"vertex element is missing property {coord!r}")

    positions = np.column_stack([columns.pop("x"), columns.pop("y"), columns.pop("z")]).astype(np.float64)

    colors = None
    if all(name in columns for name in _COLOR_NAMES):
        raw = [columns.pop(name) for name in _COLOR_NAMES]
        colors = np.column_stack(raw).astype(np.float64) / 255.0

    normals = None
    if all(name in columns for name in _NORMAL_NAMES):
        normals = np.column_stack([columns.pop(name) for name in _NORMAL_NAMES]).astype(np.float64)

    cloud = PointCloud(positions=positions, colors=colors, normals=normals)
    return cloud, columns


def _format_float(value: float, double: bool) -> str:
    return f"{value:.17g}" if double else f"{np.float32(value):.9g}"


def write_ply(
    path: str | Path,
    cloud: PointCloud,
    binary: bool = True,
    position_dtype: str = "float32",
    extras: dict[str, np.ndarray] | None = None,
) -> None:
    """Write a PLY point cloud.

    Positions are written as float32 by default (pass position_dtype
    "float64" to keep full precision), colors as uint8, normals as float32.
    Extra properties are not written; passing them warns.
    """
    if position_dtype not in ("float32", "float64"):
        raise ValueError("position_dtype must be 'float32' or 'float64'")
    if extras:
        warnings.warn(
            f"dropping unknown properties on write: {sorted(extras)}", stacklevel=2
        )

    coord_ply = "float" if position_dtype == "float32" else "double"
    coord_np = _PLY_TO_NUMPY[coord_ply]
    n = len(cloud)

    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {n}")
    header += [f"property {coord_ply} {c}" for c in ("x", "y", "z")]
    fields = [("x", coord_np), ("y", coord_np), ("z", coord_np)]
    if cloud.colors is not None:
        header += [f"property uchar {c}" for c in _COLOR_NAMES]
        fields += [(c, "u1") for c in _COLOR_NAMES]
    if cloud.normals is not None:
        header += [f"property float {c}" for c in _NORMAL_NAMES]
        fields += [(c, "<f4") for c in _NORMAL_NAMES]
    header.append("end_header")

    rec = np.empty(n, dtype=np.dtype(fields))
    for j, c in enumerate(("x", "y", "z")):
        rec[c] = cloud.positions[:, j].astype(coord_np)
    if cloud.colors is not None:
        quantized = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.uint8)
        for j, c in enumerate(_COLOR_NAMES):
            rec[c] = quantized[:, j]
    if cloud.normals is not None:
        for j, c in enumerate(_NORMAL_NAMES):
            rec[c] = cloud.normals[:, j].astype("<f4")

    path = Path(path)
    with open(path, "wb") as stream:
        stream.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            rec.tofile(stream)
        else:
            double = position_dtype == "float64"
            for row in rec:
                parts = []
                for name, np_type in fields:
                    if np_type == "u1":
                        parts.append(str(int(row[name])))
                    elif name in ("x", "y", "z"):
                        parts.append(_format_float(float(row[name]), double))
                    else:
                        parts.append(_format_float(float(row[name]), False))
                stream.write((" ".join(parts) + "\n").encode("ascii"))
