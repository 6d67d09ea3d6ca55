"""Per-frame object tables (CSV)."""
import csv
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

TABLE_HEADER = [
    "frame", "id", "parent_id", "x", "y", "z", "vx", "vy", "vz", "radius",
    "cycle_state", "cycle_length", "video_id", "labeled_voxels", "clipped",
]
_FLOATS = ("x", "y", "z", "vx", "vy", "vz", "radius")


class TableError(ValueError):
    pass


def _g9(v):
    return format(float(v), ".9g")


@dataclass(frozen=True)
class ObjectTableRow:
    """One object at one frame.

    Floats are rounded to 9 significant digits on construction, so a row
    written and read back compares equal to the original. ``labeled_voxels``
    and ``clipped`` stay ``None`` until the frame has been rendered.
    """
    frame: int
    id: int
    parent_id: Optional[int]
    x: float
    y: float
    z: float
    vx: float
    vy: float
    vz: float
    radius: float
    cycle_state: int
    cycle_length: int
    video_id: int
    labeled_voxels: Optional[int] = None
    clipped: Optional[bool] = None

    def __post_init__(self):
        for name in _FLOATS:
            object.__setattr__(self, name, float(_g9(getattr(self, name))))

    @property
    def position(self):
        return (self.x, self.y, self.z)

    def to_csv(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                out.append("")
            elif f.name in _FLOATS:
                out.append(_g9(v))
            elif f.name == "clipped":
                out.append("1" if v else "0")
            else:
                out.append(str(int(v)))
        return out


def _opt_int(s):
    return None if s == "" else int(s)


def rows_from_objects(frame, objects, vspec, records=None):
    """Table rows for ``objects``; ``records`` (from rendering) fill the label columns."""
    by_id = {r["id"]: r for r in records} if records else {}
    rows = []
    for o in sorted(objects, key=lambda o: o.id):
        vx, vy, vz = vspec.to_voxel(o.position).tolist()
        rec = by_id.get(o.id)
        rows.append(ObjectTableRow(
            frame, o.id, o.parent_id, *o.position, vx, vy, vz, o.radius,
            o.cycle_state, o.cycle_length, o.video_id,
            rec["labeled_voxels"] if rec else None, rec["clipped"] if rec else None,
        ))
    return rows


def write_object_table(rows, path):
    path = Path(path)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TABLE_HEADER)
            for row in rows:
                w.writerow(row.to_csv())
    except OSError as exc:
        raise TableError(f"{path}: {exc}") from exc
    return path


def validate_rows(rows, source="table"):
    seen = set()
    first_frame = {}
    for r in rows:
        key = (r.frame, r.id)
        if key in seen:
            raise TableError(f"{source}: duplicate (frame, id) {key}")
        seen.add(key)
        first_frame.setdefault(r.id, r.frame)
        first_frame[r.id] = min(first_frame[r.id], r.frame)
    for r in rows:
        if r.parent_id is None:
            continue
        # ids are issued in increasing order, so a parent always has the smaller id
        if r.parent_id >= r.id:
            raise TableError(f"{source}: object {r.id} references later-born parent {r.parent_id}")
        pf = first_frame.get(r.parent_id)
        if pf is not None and pf >= first_frame[r.id]:
            raise TableError(f"{source}: object {r.id} references later-born parent {r.parent_id}")


def read_object_table(path, validate=True):
    path = Path(path)
    rows = []
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != TABLE_HEADER:
                raise TableError(f"{path}:1: unexpected header")
            for lineno, rec in enumerate(reader, start=2):
                if len(rec) != len(TABLE_HEADER):
                    raise TableError(f"{path}:{lineno}: expected {len(TABLE_HEADER)} fields")
                try:
                    rows.append(ObjectTableRow(
                        int(rec[0]), int(rec[1]), _opt_int(rec[2]),
                        *(float(v) for v in rec[3:10]),
                        int(rec[10]), int(rec[11]), int(rec[12]),
                        _opt_int(rec[13]), None if rec[14] == "" else rec[14] == "1",
                    ))
                except ValueError as exc:
                    raise TableError(f"{path}:{lineno}: {exc}") from None
    except OSError as exc:
        raise TableError(f"{path}: {exc}") from exc
    if validate:
        validate_rows(rows, str(path))
    return rows
