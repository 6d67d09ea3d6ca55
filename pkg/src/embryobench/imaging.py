"""Rendering of simulated nuclei and the microscope acquisition chain.

Objects are drawn from a library of single-nucleus videos, scaled to their
radius and cycle progress, and composited into raw and label volumes. The
raw volume is then degraded: axial attenuation, PSF blur, dark current,
shot noise and readout noise, followed by clamping and 16-bit quantization.

Volumes are numpy arrays indexed ``[x, y, z]``; z is the optical axis with
slice 0 closest to the detection objective.
"""
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.signal import fftconvolve

from . import rng as rngs
from .io import nrrd

ATTENUATION_MODES = ("none", "forward", "inverted")
_VIDEO_FILE = re.compile(r"^vid(\d+)_t(\d+)_(int|mask)\.nrrd$")


class VideoValidationError(ValueError):
    pass


# --------------------------------------------------------------------------
# object videos
# --------------------------------------------------------------------------

@dataclass(eq=False)
class ObjectVideo:
    """One dividing nucleus over a full cycle.

    ``nucleus_radius`` is the radius (in the video's physical units) that
    gets mapped onto an object's radius when rendering.
    """
    video_id: int
    frames: list
    spacing: tuple = (1.0, 1.0, 1.0)
    nucleus_radius: Optional[float] = None

    def __post_init__(self):
        self.frames = [(np.asarray(i, dtype=np.float32), np.asarray(m) > 0) for i, m in self.frames]
        if self.nucleus_radius is None:
            self.nucleus_radius = equivalent_radius(self.frames[0][1], self.spacing)
        self._anchors = {}
        self._axis = None

    def __len__(self):
        return len(self.frames)

    def validate(self):
        if len(self.frames) < 2:
            raise VideoValidationError(f"video {self.video_id}: needs at least 2 frames")
        shape = self.frames[0][0].shape
        for t, (inten, mask) in enumerate(self.frames):
            if inten.shape != mask.shape:
                raise VideoValidationError(f"video {self.video_id} frame {t}: mask/intensity dims differ")
            if inten.shape != shape:
                raise VideoValidationError(f"video {self.video_id} frame {t}: frame dims differ")
            if not mask.any():
                raise VideoValidationError(f"video {self.video_id} frame {t}: empty mask")
            if np.any(mask & ~(inten > 0)):
                raise VideoValidationError(f"video {self.video_id} frame {t}: mask extends beyond intensity support")
            if np.any(inten < 0):
                raise VideoValidationError(f"video {self.video_id} frame {t}: negative intensity")
        if not self.nucleus_radius > 0:
            raise VideoValidationError(f"video {self.video_id}: nucleus radius must be > 0")
        return self

    def anchor(self, t):
        """Mask centroid of frame ``t`` in video voxel coordinates."""
        if t not in self._anchors:
            self._anchors[t] = np.argwhere(self.frames[t][1]).mean(axis=0)
        return self._anchors[t]

    def principal_axis(self):
        """Major axis of the final-frame mask, as a unit vector in µm space."""
        if self._axis is None:
            pts = np.argwhere(self.frames[-1][1]) * np.asarray(self.spacing)
            cov = np.cov((pts - pts.mean(axis=0)).T)
            w, v = np.linalg.eigh(cov)
            axis = v[:, np.argmax(w)]
            nz = np.flatnonzero(np.abs(axis) > 1e-12)
            if axis[nz[0]] < 0:
                axis = -axis
            self._axis = axis / np.linalg.norm(axis)
        return self._axis


def equivalent_radius(mask, spacing=(1.0, 1.0, 1.0)):
    vol = np.count_nonzero(mask) * float(np.prod(spacing))
    return (3.0 * vol / (4.0 * math.pi)) ** (1.0 / 3.0)


@dataclass(frozen=True)
class VideoSpec:
    """Procedural dividing-nucleus parameters (radius in voxels)."""
    frames: int = 12
    radius: float = 8.0
    intensity: float = 1000.0
    count: int = 8

    def validate(self):
        if self.frames < 4:
            raise VideoValidationError("video generator needs frames >= 4")
        if self.radius < 2:
            raise VideoValidationError("video generator needs radius >= 2 voxels")
        if self.intensity <= 0:
            raise VideoValidationError("video intensity must be > 0")
        if self.count < 1:
            raise VideoValidationError("need at least one video")
        return self


def _nucleus_shapes(q, R):
    """Ellipsoids ``(center_along_axis, a_parallel, b_perpendicular)`` at progress ``q``.

    Newborn nucleus at 0.8 R grows to R by mid-cycle, elongates, then pinches
    into two 0.8 R daughters that separate by the end of the cycle.
    """
    rb = 0.8 * R
    if q <= 0.5:
        r = rb + (R - rb) * q / 0.5
        return [(0.0, r, r)]
    if q <= 0.75:
        e = (q - 0.5) / 0.25
        return [(0.0, R * (1 + 0.5 * e), R / math.sqrt(1 + 0.5 * e))]
    g = (q - 0.75) / 0.25
    c = R * (0.45 + 0.45 * g)
    return [(-c, rb, rb), (c, rb, rb)]


def synthesize_object_video(spec, seed, video_id=1):
    """Build a textured nucleus that elongates along a random axis and divides."""
    spec.validate()
    g = rngs.stream(seed, rngs.VIDEO, video_id)
    axis = rngs.unit_vector(g)
    R = float(spec.radius)
    half = int(math.ceil(2.2 * R)) + 2
    n = 2 * half + 1
    coords = np.indices((n, n, n), dtype=np.float64) - half
    par = np.tensordot(axis, coords, axes=1)
    perp2 = np.maximum((coords ** 2).sum(axis=0) - par ** 2, 0.0)

    noise = ndimage.gaussian_filter(g.normal(size=(n, n, n)), 1.5)
    noise /= noise.std()
    texture = np.clip(1.0 + 0.15 * noise, 0.7, 1.3)

    frames = []
    for t in range(spec.frames):
        q = t / (spec.frames - 1)
        rho2 = np.full((n, n, n), np.inf)
        for c, a, b in _nucleus_shapes(q, R):
            rho2 = np.minimum(rho2, ((par - c) / a) ** 2 + perp2 / b ** 2)
        mask = rho2 <= 1.0
        inten = np.where(mask, spec.intensity * (0.55 + 0.45 * (1.0 - rho2)) * texture, 0.0)
        frames.append((inten.astype(np.float32), mask))
    return ObjectVideo(video_id, frames, (1.0, 1.0, 1.0), R).validate()


def synthesize_library(spec, seed):
    return [synthesize_object_video(spec, seed, vid) for vid in range(1, spec.count + 1)]


def write_object_videos(library, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for video in library:
        for t, (inten, mask) in enumerate(video.frames):
            meta = {"nucleus_radius": repr(float(video.nucleus_radius))} if t == 0 else None
            written += nrrd.write_volume(inten, directory / f"vid{video.video_id}_t{t}_int.nrrd",
                                         video.spacing, meta)
            written += nrrd.write_volume(mask.astype(np.uint8), directory / f"vid{video.video_id}_t{t}_mask.nrrd",
                                         video.spacing)
    return written


def load_object_videos(path):
    """Load every ``vid<ID>_t<frame>_{int,mask}.nrrd`` pair under ``path``.

    The library is ordered by video id; an object's ``video_id`` o indexes it
    1-based.
    """
    path = Path(path)
    found = {}
    for f in sorted(path.iterdir()) if path.is_dir() else []:
        m = _VIDEO_FILE.match(f.name)
        if m:
            vid, t, kind = int(m.group(1)), int(m.group(2)), m.group(3)
            found.setdefault(vid, {}).setdefault(t, {})[kind] = f
    if not found:
        raise VideoValidationError(f"{path}: no object videos found")
    library = []
    for vid in sorted(found):
        frames_by_t = found[vid]
        frames, spacing, radius = [], None, None
        for t in range(len(frames_by_t)):
            entry = frames_by_t.get(t)
            if entry is None or set(entry) != {"int", "mask"}:
                raise VideoValidationError(f"video {vid}: frame {t} missing intensity or mask file")
            inten, sp, meta = nrrd.read_volume(entry["int"])
            mask, _, _ = nrrd.read_volume(entry["mask"])
            if inten.shape != mask.shape:
                raise VideoValidationError(f"video {vid} frame {t}: mask/intensity dims differ")
            if t == 0:
                spacing = sp
                if "nucleus_radius" in meta:
                    radius = float(meta["nucleus_radius"])
            frames.append((inten, mask))
        library.append(ObjectVideo(vid, frames, spacing, radius).validate())
    return library


# --------------------------------------------------------------------------
# rasterization
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class VolumeSpec:
    dims: tuple
    spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError("volume dims must be three positive integers")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError("volume spacing must be three positive numbers")
        return self

    def covers(self, bounds):
        hi = np.asarray(self.origin) + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)
        return bool(np.all(np.asarray(self.origin) <= bounds.lo) and np.all(hi >= bounds.hi))

    def to_voxel(self, position):
        return (np.asarray(position, dtype=np.float64) - self.origin) / self.spacing


@dataclass
class FrameProducts:
    raw: np.ndarray
    label: np.ndarray
    records: list
    final: list = field(default_factory=list)


def video_frame_index(cycle_state, cycle_length, n_frames):
    """Map cycle progress linearly onto video frames (round half up)."""
    if cycle_length <= 1:
        return n_frames - 1
    t = (cycle_state - 1) / (cycle_length - 1) * (n_frames - 1)
    return min(n_frames - 1, max(0, int(math.floor(t + 0.5))))


def _render_object(obj, library, vspec):
    """Sample one object's scaled video frame on the output grid.

    Returns ``((lo, intensity, mask), clipped)`` for the in-volume part of
    its bounding box; the first item is ``None`` if nothing lands inside.
    """
    video = library[obj.video_id - 1]
    t = video_frame_index(obj.cycle_state, obj.cycle_length, len(video))
    inten, mask = video.frames[t]
    anchor = video.anchor(t)
    scale = obj.radius / video.nucleus_radius * np.asarray(video.spacing)  # µm per video voxel
    x = np.asarray(obj.position, dtype=np.float64)
    origin = np.asarray(vspec.origin, dtype=np.float64)
    spacing = np.asarray(vspec.spacing, dtype=np.float64)
    dims = np.asarray(vspec.dims)

    shape = np.asarray(inten.shape)
    phys_lo = x + (0 - anchor) * scale
    phys_hi = x + (shape - 1 - anchor) * scale
    box_lo = np.ceil((phys_lo - origin) / spacing).astype(int)
    box_hi = np.floor((phys_hi - origin) / spacing).astype(int)
    if np.any(box_hi < box_lo):
        return None, True
    axes = [np.arange(lo, hi + 1) for lo, hi in zip(box_lo, box_hi)]
    grid = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([anchor[a] + (origin[a] + grid[a] * spacing[a] - x[a]) / scale[a] for a in range(3)])
    sampled_mask = ndimage.map_coordinates(mask.astype(np.float32), coords, order=1, cval=0.0) >= 0.5

    in_lo = np.maximum(box_lo, 0)
    in_hi = np.minimum(box_hi, dims - 1)
    if np.any(in_hi < in_lo):
        return None, bool(sampled_mask.any())
    sl = tuple(slice(a - b, c - b + 1) for a, b, c in zip(in_lo, box_lo, in_hi))
    sampled_int = ndimage.map_coordinates(inten, coords[(slice(None),) + sl], order=1, cval=0.0)
    inside_mask = sampled_mask[sl]
    clipped = int(sampled_mask.sum()) != int(inside_mask.sum())
    return (in_lo, sampled_int.astype(np.float64), inside_mask), clipped


def rasterize_frame(objects, library, vspec):
    """Composite all objects into raw (voxelwise max) and label volumes.

    A voxel's label goes to the object whose scaled mask covers it with the
    largest interpolated intensity; ties go to the lower id.
    """
    vspec.validate()
    dims = tuple(int(d) for d in vspec.dims)
    raw = np.zeros(dims, dtype=np.float64)
    label = np.zeros(dims, dtype=np.uint32)
    best = np.full(dims, -np.inf)
    clipped = {}
    for obj in sorted(objects, key=lambda o: o.id):
        part, clipped[obj.id] = _render_object(obj, library, vspec)
        if part is None:
            continue
        lo, inten, mask = part
        box = tuple(slice(l, l + s) for l, s in zip(lo, inten.shape))
        np.maximum(raw[box], inten, out=raw[box])
        win = mask & (inten > best[box])
        label[box][win] = obj.id
        best[box][win] = inten[win]

    counts = np.bincount(label.ravel())
    records = []
    for obj in sorted(objects, key=lambda o: o.id):
        n = int(counts[obj.id]) if obj.id < len(counts) else 0
        records.append({
            "id": obj.id,
            "parent_id": obj.parent_id,
            "position": tuple(obj.position),
            "voxel": tuple(vspec.to_voxel(obj.position).tolist()),
            "radius": obj.radius,
            "cycle_state": obj.cycle_state,
            "cycle_length": obj.cycle_length,
            "video_id": obj.video_id,
            "labeled_voxels": n,
            "clipped": clipped[obj.id],
        })
    return FrameProducts(raw, label, records)


# --------------------------------------------------------------------------
# acquisition chain
# --------------------------------------------------------------------------

def gaussian_psf(sigma_xy=1.5, sigma_z=4.0, truncate=4.0):
    """Unit-sum anisotropic Gaussian kernel (sigmas in voxels)."""
    def profile(sigma):
        h = int(math.ceil(truncate * sigma))
        r = np.arange(-h, h + 1, dtype=np.float64)
        return np.exp(-0.5 * (r / sigma) ** 2)
    gx = profile(sigma_xy)
    gz = profile(sigma_z)
    psf = gx[:, None, None] * gx[None, :, None] * gz[None, None, :]
    return psf / psf.sum()


def delta_psf(size=1):
    psf = np.zeros((size, size, size))
    psf[(size // 2,) * 3] = 1.0
    return psf


@dataclass(frozen=True)
class AcquisitionConfig:
    psf: np.ndarray = field(default_factory=gaussian_psf)
    dark_offset: float = 100.0
    sigma_agn: float = 5.0
    shot_noise: bool = True
    attenuation: str = "forward"
    multiview: bool = False
    bits: int = 16
    dark_image: Optional[np.ndarray] = None

    def validate(self):
        psf = np.asarray(self.psf)
        if psf.ndim != 3:
            raise ValueError("psf must be a 3D array")
        if np.any(psf < 0):
            raise ValueError("psf must be non-negative")
        if abs(psf.sum() - 1.0) > 1e-6:
            raise ValueError(f"psf must sum to 1 (got {psf.sum():.9g})")
        if self.dark_offset < 0 or self.sigma_agn < 0:
            raise ValueError("dark_offset and sigma_agn must be >= 0")
        if self.attenuation not in ATTENUATION_MODES:
            raise ValueError(f"attenuation must be one of {ATTENUATION_MODES}")
        if self.bits not in (8, 16):
            raise ValueError("bits must be 8 or 16")
        if self.dark_image is not None and np.any(np.asarray(self.dark_image) < 0):
            raise ValueError("dark image must be non-negative")
        return self


def attenuation_factors(n_slices, mode):
    if n_slices < 2:
        raise ValueError("attenuation needs at least 2 slices")
    ramp = np.arange(n_slices, dtype=np.float64) / (n_slices - 1)
    if mode == "forward":
        return 1.0 - ramp
    if mode == "inverted":
        return ramp
    if mode == "none":
        return np.ones(n_slices)
    raise ValueError(f"unknown attenuation mode {mode!r}")


def attenuate(v, mode):
    """Scale each z-slice by a linear ramp (1 nearest the objective, 0 farthest)."""
    if mode == "none":
        return np.asarray(v, dtype=np.float64).copy()
    v = np.asarray(v, dtype=np.float64)
    return v * attenuation_factors(v.shape[2], mode)[None, None, :]


def rotate_psf(psf):
    """180° rotation: index reversal along all three axes."""
    return np.ascontiguousarray(psf[::-1, ::-1, ::-1])


def convolve_psf(v, psf):
    """Linear convolution, zero boundary, output cropped to the input shape."""
    v = np.asarray(v, dtype=np.float64)
    psf = np.asarray(psf, dtype=np.float64)
    if any(p > s for p, s in zip(psf.shape, v.shape)):
        raise ValueError(f"psf {psf.shape} larger than volume {v.shape}")
    return fftconvolve(v, psf, mode="same")


def add_dark_current(v, offset):
    """Add a constant (scalar) or per-voxel (array) dark image."""
    if np.any(np.asarray(offset) < 0):
        raise ValueError("dark current must be >= 0")
    return np.asarray(v, dtype=np.float64) + offset


def apply_shot_noise(v, rng):
    """Replace every voxel by a Poisson draw with that mean."""
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0):
        raise ValueError("shot noise needs non-negative intensities")
    return rng.poisson(v).astype(np.float64)


def add_gaussian_noise(v, sigma, rng):
    """Zero-mean readout noise, clamped at 0."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    v = np.asarray(v, dtype=np.float64)
    if sigma == 0:
        return v.copy()
    return np.maximum(v + rng.normal(0.0, sigma, v.shape), 0.0)


def quantize(v, bits=16):
    top = 2 ** bits - 1
    out = np.floor(np.clip(v, 0, top) + 0.5)
    return out.astype(np.uint16 if bits > 8 else np.uint8)


def _second_view_mode(mode):
    return {"forward": "inverted", "inverted": "forward", "none": "none"}[mode]


def acquire_view(raw, cfg, psf, mode, seed, frame, view):
    v = attenuate(raw, mode)
    v = np.maximum(convolve_psf(v, psf), 0.0)  # drop FFT round-off below zero
    v = add_dark_current(v, cfg.dark_image if cfg.dark_image is not None else cfg.dark_offset)
    if cfg.shot_noise:
        v = apply_shot_noise(v, rngs.stream(seed, rngs.NOISE, frame, view, rngs.SHOT))
    v = add_gaussian_noise(v, cfg.sigma_agn, rngs.stream(seed, rngs.NOISE, frame, view, rngs.READOUT))
    return quantize(v, cfg.bits)


def acquire(raw, cfg, seed=0, frame=0):
    """Degrade ``raw`` into one view, or two opposing views if multiview.

    Stage order: attenuation, PSF convolution, dark current, shot noise,
    readout noise, clamp + quantize. The second view uses the inverted
    attenuation ramp, the 180°-rotated PSF and its own noise streams.
    """
    cfg.validate()
    views = [acquire_view(raw, cfg, cfg.psf, cfg.attenuation, seed, frame, 0)]
    if cfg.multiview:
        views.append(acquire_view(raw, cfg, rotate_psf(cfg.psf), _second_view_mode(cfg.attenuation),
                                  seed, frame, 1))
    return views
