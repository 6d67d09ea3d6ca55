"""Guide embryo: per-frame point clouds with displacement vectors.

The guide drives the motion of simulated objects. It is either loaded from a
tracked-embryo CSV export or generated procedurally as an expanding
spherical-cap cell sheet. The module also provides the spatial index used
for nearest-neighbor and range queries over guide and simulated points.
"""
import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from . import rng as rngs

GUIDE_HEADER = ["frame", "id", "x", "y", "z", "dx", "dy", "dz"]


class GuideFormatError(ValueError):
    """Malformed guide file (bad row, bad header)."""


class GuideValidationError(ValueError):
    """Guide data that parses but violates a sequence invariant."""


@dataclass(frozen=True)
class GuideCell:
    id: int
    position: tuple
    displacement: tuple


class GuideFrame:
    """One time point of the guide: ids, positions and forward displacements.

    Stored as arrays; ``cells`` gives the per-cell view.
    """

    def __init__(self, frame_index, ids, positions, displacements):
        self.frame_index = int(frame_index)
        self.ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self.displacements = np.asarray(displacements, dtype=np.float64).reshape(-1, 3)
        if not (len(self.ids) == len(self.positions) == len(self.displacements)):
            raise GuideValidationError(f"frame {frame_index}: array lengths differ")

    def __len__(self):
        return len(self.ids)

    @property
    def cells(self):
        return [
            GuideCell(int(i), tuple(p), tuple(d))
            for i, p, d in zip(self.ids, self.positions.tolist(), self.displacements.tolist())
        ]

    def __eq__(self, other):
        if not isinstance(other, GuideFrame):
            return NotImplemented
        return (
            self.frame_index == other.frame_index
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.displacements, other.displacements)
        )

    def validate(self):
        if len(self) == 0:
            raise GuideValidationError(f"frame {self.frame_index} is empty")
        if len(np.unique(self.ids)) != len(self.ids):
            raise GuideValidationError(f"frame {self.frame_index}: duplicate cell ids")
        if not (np.isfinite(self.positions).all() and np.isfinite(self.displacements).all()):
            raise GuideValidationError(f"frame {self.frame_index}: non-finite coordinates")


@dataclass(frozen=True)
class Bounds:
    lo: tuple
    hi: tuple

    @property
    def extent(self):
        return np.asarray(self.hi) - np.asarray(self.lo)

    def clamp(self, points):
        return np.clip(points, self.lo, self.hi)

    def contains(self, points):
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return bool(np.all((p >= self.lo) & (p <= self.hi)))


@dataclass(eq=False)
class GuideSequence:
    frames: list
    bounds: Bounds

    def __len__(self):
        return len(self.frames)

    def __eq__(self, other):
        if not isinstance(other, GuideSequence):
            return NotImplemented
        return self.bounds == other.bounds and self.frames == other.frames

    def counts(self):
        return [len(f) for f in self.frames]

    def validate(self):
        if not self.frames:
            raise GuideValidationError("guide has no frames")
        for k, frame in enumerate(self.frames):
            if frame.frame_index != k:
                raise GuideValidationError(f"missing frame {k}")
            frame.validate()
            if not self.bounds.contains(frame.positions):
                raise GuideValidationError(f"frame {k}: positions outside bounds")


def padded_bounds(frames, pad):
    pts = np.concatenate([f.positions for f in frames])
    lo = pts.min(axis=0) - pad
    hi = pts.max(axis=0) + pad
    return Bounds(tuple(lo.tolist()), tuple(hi.tolist()))


def load_guide(path, pad=10.0):
    """Read a guide CSV (``frame,id,x,y,z,dx,dy,dz``).

    Bounds are the tight box over all positions expanded by ``pad`` (r_max)
    on each side.
    """
    path = Path(path)
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != GUIDE_HEADER:
            raise GuideFormatError(f"{path}:1: expected header {','.join(GUIDE_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 8:
                raise GuideFormatError(f"{path}:{lineno}: expected 8 fields, got {len(row)}")
            try:
                frame, cid = int(row[0]), int(row[1])
                vals = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise GuideFormatError(f"{path}:{lineno}: {exc}") from None
            if frame < 0:
                raise GuideFormatError(f"{path}:{lineno}: negative frame index")
            if not all(math.isfinite(v) for v in vals):
                raise GuideFormatError(f"{path}:{lineno}: non-finite value")
            rows.setdefault(frame, []).append((cid, vals))

    if not rows:
        raise GuideValidationError(f"{path}: no data rows")
    frames = []
    for k in range(max(rows) + 1):
        if k not in rows:
            raise GuideValidationError(f"missing frame {k}")
        entries = rows[k]
        ids = [e[0] for e in entries]
        vals = np.array([e[1] for e in entries], dtype=np.float64)
        frames.append(GuideFrame(k, ids, vals[:, :3], vals[:, 3:]))
    for f in frames:
        f.validate()
    seq = GuideSequence(frames, padded_bounds(frames, pad))
    seq.validate()
    return seq


def write_guide(seq, path):
    """Write ``seq`` in the guide CSV format; floats use round-trip repr."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(GUIDE_HEADER)
        for frame in seq.frames:
            for cid, p, d in zip(frame.ids.tolist(), frame.positions.tolist(),
                                 frame.displacements.tolist()):
                writer.writerow([frame.frame_index, cid, *map(repr, p), *map(repr, d)])


@dataclass(frozen=True)
class GuideSpec:
    """Parameters of the procedural spherical-cap guide (lengths in µm)."""
    frames: int = 10
    initial_cells: int = 50
    growth: float = 1.05
    shell_radius: float = 100.0
    shell_thickness: float = 20.0
    jitter: float = 1.0
    cap_start_deg: float = 40.0
    cap_end_deg: float = 80.0
    min_spacing: float = 12.0

    def validate(self):
        if self.frames < 2:
            raise GuideValidationError("guide generator needs frames >= 2")
        if self.initial_cells < 8:
            raise GuideValidationError("guide generator needs initial_cells >= 8")
        if self.growth < 1.0:
            raise GuideValidationError("guide generator needs growth >= 1")
        if self.shell_radius <= 0 or self.shell_thickness < 0:
            raise GuideValidationError("shell radius must be > 0 and thickness >= 0")
        if self.shell_thickness >= 2 * self.shell_radius:
            raise GuideValidationError("shell thickness must be below twice the shell radius")
        if self.jitter < 0 or self.min_spacing < 0:
            raise GuideValidationError("jitter and min_spacing must be >= 0")
        if not 0 < self.cap_start_deg <= self.cap_end_deg <= 180:
            raise GuideValidationError("need 0 < cap_start_deg <= cap_end_deg <= 180")


class _Shell:
    """Spherical-cap shell centered at the origin, cap around +z."""

    def __init__(self, spec):
        self.r_in = spec.shell_radius - spec.shell_thickness / 2
        self.r_out = spec.shell_radius + spec.shell_thickness / 2

    @staticmethod
    def spherical(p):
        r = np.sqrt((p ** 2).sum(axis=1))
        theta = np.arccos(np.clip(p[:, 2] / r, -1.0, 1.0))
        phi = np.arctan2(p[:, 1], p[:, 0])
        return r, theta, phi

    @staticmethod
    def cartesian(r, theta, phi):
        st = np.sin(theta)
        return np.stack([r * st * np.cos(phi), r * st * np.sin(phi), r * np.cos(theta)], axis=1)

    def constrain(self, p, cap):
        r, theta, phi = self.spherical(p)
        return self.cartesian(np.clip(r, self.r_in, self.r_out), np.minimum(theta, cap), phi)

    def sample(self, rng, n, cap):
        r3 = rng.uniform(self.r_in ** 3, self.r_out ** 3, n)
        theta = np.arccos(rng.uniform(np.cos(cap), 1.0, n))
        phi = rng.uniform(-np.pi, np.pi, n)
        return self.cartesian(np.cbrt(r3), theta, phi)


def _relax(points, spacing, shell, cap, iterations=4):
    """Push apart pairs closer than ``spacing`` (each moves half the deficit)."""
    if spacing <= 0 or len(points) < 2:
        return points
    for _ in range(iterations):
        pairs = cKDTree(points).query_pairs(spacing, output_type="ndarray")
        if len(pairs) == 0:
            break
        i, j = pairs[:, 0], pairs[:, 1]
        d = points[j] - points[i]
        dist = np.sqrt((d ** 2).sum(axis=1))
        dist = np.where(dist > 1e-9, dist, 1e-9)
        push = (0.5 * (spacing - dist) / dist)[:, None] * d
        shift = np.zeros_like(points)
        np.add.at(shift, i, -push)
        np.add.at(shift, j, push)
        points = shell.constrain(points + shift, cap)
    return points


def _dart(rng, shell, cap, existing, spacing, n, near=None, attempts=40):
    """Place ``n`` points keeping ``spacing`` from ``existing`` and each other.

    With ``near`` (one parent position per point) darts land within two
    spacings of the parent; after ``attempts`` misses the last dart is kept.
    """
    placed = []
    pts = [existing] if len(existing) else []
    tree_pts = np.concatenate(pts) if pts else np.zeros((0, 3))
    tree = cKDTree(tree_pts) if len(tree_pts) else None
    for m in range(n):
        cand = None
        for _ in range(attempts):
            if near is None:
                cand = shell.sample(rng, 1, cap)[0]
            else:
                step = rngs.unit_vector(rng) * spacing * rng.uniform(1.0, 2.0)
                cand = shell.constrain((near[m] + step)[None, :], cap)[0]
            ok = tree is None or tree.query(cand)[0] >= spacing
            if ok and placed:
                ok = np.min(np.sqrt(((np.asarray(placed) - cand) ** 2).sum(axis=1))) >= spacing
            if ok:
                break
        else:
            if near is None:
                raise GuideValidationError(
                    f"could not place {n} cells {spacing} µm apart in the shell; lower min_spacing")
        placed.append(cand)
    return np.asarray(placed).reshape(-1, 3)


def synthesize_guide(spec, seed, pad=10.0):
    """Generate a guide resembling epiboly: a cell sheet on a spherical cap.

    The cap's polar angle grows linearly over the sequence and every cell's
    polar angle is stretched with it, so the sheet spreads downward. Cells
    also random-walk with step size ``spec.jitter`` and are relaxed to keep
    ``spec.min_spacing`` from each other. Cell count follows
    ``round(n0 * growth**k)``; new cells appear next to random existing
    ones. Displacements are forward differences and positions at k+1 are
    stored as ``position(k) + displacement(k)``, so that identity is exact.
    """
    spec.validate()
    rng = rngs.stream(seed, rngs.GUIDE)
    shell = _Shell(spec)
    F = spec.frames
    caps = np.deg2rad(np.linspace(spec.cap_start_deg, spec.cap_end_deg, F))

    positions = _dart(rng, shell, caps[0], np.zeros((0, 3)), spec.min_spacing, spec.initial_cells,
                      attempts=1000)
    ids = np.arange(len(positions), dtype=np.int64)
    next_id = len(ids)
    frames = []
    for k in range(F):
        if k == F - 1:
            frames.append(GuideFrame(k, ids, positions, np.zeros_like(positions)))
            break
        r, theta, phi = shell.spherical(positions)
        target = shell.cartesian(r, theta * (caps[k + 1] / caps[k]), phi)
        target = shell.constrain(target + rng.normal(0.0, spec.jitter, target.shape), caps[k + 1])
        target = _relax(target, spec.min_spacing, shell, caps[k + 1])
        disp = target - positions
        frames.append(GuideFrame(k, ids, positions, disp))
        positions = positions + disp

        n_target = max(len(ids), int(math.floor(spec.initial_cells * spec.growth ** (k + 1) + 0.5)))
        n_new = n_target - len(ids)
        if n_new > 0:
            parents = rng.integers(0, len(ids), n_new)
            born = _dart(rng, shell, caps[k + 1], positions, spec.min_spacing, n_new, near=positions[parents])
            positions = np.concatenate([positions, born])
            ids = np.concatenate([ids, np.arange(next_id, next_id + n_new, dtype=np.int64)])
            next_id += n_new

    seq = GuideSequence(frames, padded_bounds(frames, pad))
    seq.validate()
    return seq


class Neighbor(NamedTuple):
    id: int
    position: tuple
    distance: float


def _distances(points, x):
    diff = points - x
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


class SpatialIndex:
    """k-d tree over (id, position) entries with deterministic tie handling.

    The tree only proposes candidates; final distances and orderings are
    computed here so results match a brute-force scan exactly, with ties
    broken by ascending id. ``values`` is an optional per-entry payload
    (guide displacements, radii) kept row-aligned with the ids.
    """

    def __init__(self, ids, positions, values=None):
        self.ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if len(self.ids) == 0:
            raise ValueError("cannot index an empty point set")
        if len(self.ids) != len(self.positions):
            raise ValueError("ids and positions differ in length")
        if not np.isfinite(self.positions).all():
            raise ValueError("positions must be finite")
        self.values = None if values is None else np.asarray(values)
        self._tree = cKDTree(self.positions)
        self._row = {int(i): r for r, i in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def row_of(self, id_):
        return self._row[int(id_)]

    def knn_rows(self, x, k):
        """Rows and distances of the ``k`` nearest entries to ``x``."""
        if k < 1:
            raise ValueError("K must be >= 1")
        x = np.asarray(x, dtype=np.float64)
        k = min(k, len(self.ids))
        d, _ = self._tree.query(x, k)
        kth = float(np.max(d))
        cand = np.asarray(self._tree.query_ball_point(x, kth * (1 + 1e-9) + 1e-12), dtype=np.intp)
        dist = _distances(self.positions[cand], x)
        order = np.lexsort((self.ids[cand], dist))[:k]
        return cand[order], dist[order]

    def range_rows(self, x, r, exclude_id=None):
        """Rows within distance ``r`` of ``x`` (inclusive), ascending id."""
        if r <= 0:
            raise ValueError("range radius must be > 0")
        x = np.asarray(x, dtype=np.float64)
        cand = np.asarray(self._tree.query_ball_point(x, r * (1 + 1e-9) + 1e-12), dtype=np.intp)
        if len(cand) == 0:
            return cand
        dist = _distances(self.positions[cand], x)
        keep = cand[dist <= r]
        if exclude_id is not None:
            keep = keep[self.ids[keep] != exclude_id]
        return keep[np.argsort(self.ids[keep], kind="stable")]


def build_index(ids, positions, values=None):
    return SpatialIndex(ids, positions, values)


def knn_query(index, x, K):
    rows, dist = index.knn_rows(x, K)
    return [
        Neighbor(int(index.ids[r]), tuple(index.positions[r].tolist()), float(d))
        for r, d in zip(rows, dist)
    ]


def range_count(index, x, r, exclude_id=None):
    return int(len(index.range_rows(x, r, exclude_id)))
