"""Minimal NRRD reader/writer for 3D volumes with detached raw data.

Only what the pipeline needs: ``dimension: 3``, ``encoding: raw``,
``endian: little``, per-axis ``spacings`` and free-form ``key:=value``
pairs. Arrays are indexed ``[x, y, z]`` with x the fastest axis on disk.
"""
from pathlib import Path

import numpy as np

NRRD_TYPES = {
    "uint8": np.uint8,
    "uint16": np.uint16,
    "int16": np.int16,
    "uint32": np.uint32,
    "int32": np.int32,
    "float": np.float32,
    "float32": np.float32,
    "double": np.float64,
    "float64": np.float64,
}
_TYPE_NAMES = {np.dtype(np.uint8): "uint8", np.dtype(np.uint16): "uint16",
               np.dtype(np.int16): "int16", np.dtype(np.uint32): "uint32",
               np.dtype(np.int32): "int32", np.dtype(np.float32): "float",
               np.dtype(np.float64): "double"}


class NrrdError(ValueError):
    pass


def _fmt(v):
    return repr(float(v))


def write_volume(data, path, spacing=(1.0, 1.0, 1.0), meta=None):
    """Write ``data`` to ``path`` (header) plus ``path.with_suffix('.raw')``."""
    path = Path(path)
    data = np.asarray(data)
    if data.ndim != 3:
        raise NrrdError(f"{path}: expected a 3D array, got {data.ndim}D")
    if data.dtype not in _TYPE_NAMES:
        raise NrrdError(f"{path}: unsupported dtype {data.dtype}")
    raw_path = path.with_suffix(".raw")
    lines = [
        "NRRD0004",
        f"type: {_TYPE_NAMES[data.dtype]}",
        "dimension: 3",
        "sizes: " + " ".join(str(s) for s in data.shape),
        "spacings: " + " ".join(_fmt(s) for s in spacing),
        "encoding: raw",
        "endian: little",
        f"data file: {raw_path.name}",
    ]
    for k, v in (meta or {}).items():
        lines.append(f"{k}:={v}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    raw_path.write_bytes(data.astype(data.dtype.newbyteorder("<"), copy=False).tobytes(order="F"))
    return [path, raw_path]


def read_header(path):
    path = Path(path)
    text = path.read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("NRRD"):
        raise NrrdError(f"{path}: missing NRRD magic")
    fields, meta = {}, {}
    for line in text[1:]:
        if not line or line.startswith("#"):
            continue
        if ":=" in line:
            k, v = line.split(":=", 1)
            meta[k] = v
        elif ": " in line:
            k, v = line.split(": ", 1)
            fields[k.strip()] = v.strip()
        else:
            raise NrrdError(f"{path}: cannot parse header line {line!r}")
    return fields, meta


def read_volume(path):
    """Return ``(data, spacing, meta)`` for a detached-header NRRD volume."""
    path = Path(path)
    fields, meta = read_header(path)
    try:
        if fields.get("dimension") != "3":
            raise NrrdError(f"{path}: only 3D volumes are supported")
        if fields.get("encoding") != "raw":
            raise NrrdError(f"{path}: only raw encoding is supported")
        if fields.get("endian", "little") != "little":
            raise NrrdError(f"{path}: only little-endian data is supported")
        dtype = np.dtype(NRRD_TYPES[fields["type"]]).newbyteorder("<")
        sizes = tuple(int(s) for s in fields["sizes"].split())
        spacing = tuple(float(s) for s in fields.get("spacings", "1 1 1").split())
        data_file = path.parent / fields["data file"]
    except KeyError as exc:
        raise NrrdError(f"{path}: missing or unknown header field {exc}") from None
    if len(sizes) != 3 or len(spacing) != 3:
        raise NrrdError(f"{path}: sizes/spacings must have 3 entries")
    buf = data_file.read_bytes()
    expected = int(np.prod(sizes)) * dtype.itemsize
    if len(buf) != expected:
        raise NrrdError(f"{path}: header sizes {sizes} need {expected} bytes, data file has {len(buf)}")
    data = np.frombuffer(buf, dtype=dtype).reshape(sizes, order="F")
    return data.astype(dtype.newbyteorder("="), copy=True), spacing, meta
