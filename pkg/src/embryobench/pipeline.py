"""End-to-end orchestration: simulate, render, acquire, and their composition.

Output layout under the run directory::

    guide.csv                     guide actually used (procedural or copied)
    run.log                       per-frame counts and every division
    tables/objects_t0000.csv      object table per frame
    raw/raw_t0000.nrrd (+.raw)    rendered volume before degradation
    label/label_t0000.nrrd        label ground truth
    final/final_t0000.nrrd        degraded volume (final_v2_* for the second view)
    manifest.json                 resolved config and checksums

The staged commands read what the previous stage wrote; ``full`` keeps
everything in memory but goes through the same row rounding and raw
quantization, so both routes produce identical files.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dynamics, imaging
from .dynamics import SimObject
from .guide import load_guide, synthesize_guide, write_guide
from .io import nrrd
from .io.manifest import write_manifest
from .io.tables import read_object_table, rows_from_objects, write_object_table

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage, frame, cause):
        where = f"{stage}" if frame is None else f"{stage}, frame {frame}"
        super().__init__(f"{where}: {cause}")
        self.stage, self.frame = stage, frame


@dataclass
class RunContext:
    config: object
    guide: object
    library: list
    dynamics: dynamics.DynamicsConfig
    division: dynamics.DivisionModel
    volume: imaging.VolumeSpec
    acquisition: imaging.AcquisitionConfig
    frames: tuple
    out: Path

    def table_path(self, k):
        return self.out / "tables" / f"objects_t{k:04d}.csv"

    def raw_path(self, k):
        return self.out / "raw" / f"raw_t{k:04d}.nrrd"

    def label_path(self, k):
        return self.out / "label" / f"label_t{k:04d}.nrrd"

    def final_path(self, k, view=0):
        name = f"final_t{k:04d}.nrrd" if view == 0 else f"final_v{view + 1}_t{k:04d}.nrrd"
        return self.out / "final" / name

    def manifest_extra(self):
        return {
            "resolved": {
                "division_p": self.division.p,
                "n_videos": len(self.library),
                "frames": list(self.frames),
                "volume": {
                    "dims": list(self.volume.dims),
                    "spacing": list(self.volume.spacing),
                    "origin": list(self.volume.origin),
                },
            }
        }

    def write_manifest(self):
        return write_manifest(self.config.to_dict(), self.out, self.manifest_extra())


def load_guide_for(cfg):
    pad = cfg.dynamics.r_max
    if cfg.guide_path is not None:
        return load_guide(cfg.guide_path, pad=pad)
    return synthesize_guide(cfg.guide_spec, cfg.seed, pad=pad)


def load_library_for(cfg):
    if cfg.videos_path is not None:
        return imaging.load_object_videos(cfg.videos_path)
    return imaging.synthesize_library(cfg.video_spec, cfg.seed)


def volume_spec_for(cfg, bounds):
    spacing = tuple(float(s) for s in cfg.volume["spacing"])
    origin = tuple(cfg.volume["origin"]) if cfg.volume["origin"] is not None else tuple(bounds.lo)
    if cfg.volume["dims"] is not None:
        dims = tuple(int(d) for d in cfg.volume["dims"])
    else:
        ext = np.asarray(bounds.hi) - np.asarray(origin)
        dims = tuple(int(math.ceil(e / s - 1e-9)) + 1 for e, s in zip(ext, spacing))
    vspec = imaging.VolumeSpec(dims, spacing, origin).validate()
    if not vspec.covers(bounds):
        raise ValueError(
            f"volume {dims} x {spacing} µm from origin {origin} does not cover guide bounds "
            f"{bounds.lo}..{bounds.hi}")
    return vspec


def acquisition_for(cfg, vspec):
    a = cfg.acquisition
    if a["psf_path"] is not None:
        psf, _, _ = nrrd.read_volume(a["psf_path"])
        psf = np.asarray(psf, dtype=np.float64)
        if psf.sum() <= 0:
            raise ValueError(f"{a['psf_path']}: psf has no positive mass")
        psf = psf / psf.sum()
    else:
        psf = imaging.gaussian_psf(a["psf_sigma_xy"], a["psf_sigma_z"])
    dark_image = None
    if a["dark_path"] is not None:
        dark_image, _, _ = nrrd.read_volume(a["dark_path"])
        dark_image = np.asarray(dark_image, dtype=np.float64)
        if dark_image.shape != tuple(vspec.dims):
            raise ValueError(f"{a['dark_path']}: dark image shape {dark_image.shape} != volume {vspec.dims}")
    return imaging.AcquisitionConfig(
        psf=psf, dark_offset=float(a["dark_offset"]), sigma_agn=float(a["sigma_agn"]),
        shot_noise=a["shot_noise"], attenuation=a["attenuation"], multiview=a["multiview"],
        bits=int(a["bits"]), dark_image=dark_image,
    ).validate()


def prepare(cfg, out=None):
    """Resolve everything a run needs from a validated config."""
    try:
        guide = load_guide_for(cfg)
    except (OSError, ValueError) as exc:
        raise StageError("guide", None, exc) from exc
    try:
        library = load_library_for(cfg)
    except (OSError, ValueError) as exc:
        raise StageError("videos", None, exc) from exc
    try:
        dyn = replace(cfg.dynamics, n_videos=len(library))
        division = cfg.division_model(len(guide.frames[0]))
        vspec = volume_spec_for(cfg, guide.bounds)
        acq = acquisition_for(cfg, vspec)
    except (OSError, ValueError) as exc:
        raise StageError("config", None, exc) from exc
    last = len(guide.frames) - 1
    frames = tuple(cfg.frames) if cfg.frames is not None else (0, last)
    if frames[1] > last:
        raise StageError("config", None, f"frame range ends at {frames[1]} but the guide has frames 0..{last}")
    out = Path(out if out is not None else cfg.output)
    return RunContext(cfg, guide, library, dyn, division, vspec, acq, frames, out)


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def _log_lines(state):
    r = state.report
    if r is None:
        return [f"frame={state.frame_index} n_sim={len(state.objects)} initialized"]
    lines = [
        f"frame={r.frame} n_embryo={r.n_embryo} n_sim={r.n_sim} n_div_requested={r.n_div_requested} "
        f"n_div_performed={r.n_div_performed} shortfall={r.shortfall}"
    ]
    lines += [f"division frame={r.frame} mother={d.mother} daughters={d.daughters[0]},{d.daughters[1]}"
              for d in r.divisions]
    return lines


def simulate_rows(ctx):
    """Run the dynamics; yields ``(frame, rows)`` for frames in range plus log lines."""
    axis = lambda vid: ctx.library[vid - 1].principal_axis()  # noqa: E731
    lines = ["# embryobench run log"]
    a, b = ctx.frames
    kwargs = {"fraction": ctx.config.fraction} if ctx.config.fraction is not None else {"count": ctx.config.count}
    states = dynamics.run(ctx.guide, ctx.division, ctx.dynamics, last_frame=b, axis_lookup=axis, **kwargs)
    out = []
    k = -1
    try:
        for state in states:
            k = state.frame_index
            lines += _log_lines(state)
            if state.report is not None and state.report.shortfall:
                log.info("frame %d: division shortfall of %d", k, state.report.shortfall)
            if k >= a:
                out.append((k, rows_from_objects(k, state.objects, ctx.volume)))
            log.info("simulate: frame %d, %d objects", k, len(state.objects))
    except Exception as exc:
        raise StageError("simulate", k + 1, exc) from exc
    return out, lines


def objects_from_rows(rows):
    return [SimObject(r.id, r.position, r.radius, r.cycle_length, r.cycle_state, r.video_id,
                      r.parent_id, r.frame) for r in rows]


def render_rows(ctx, frame, rows):
    """Render one frame; returns (quantized raw, label, rows with label columns)."""
    try:
        products = imaging.rasterize_frame(objects_from_rows(rows), ctx.library, ctx.volume)
    except Exception as exc:
        raise StageError("render", frame, exc) from exc
    recs = {r["id"]: r for r in products.records}
    rows = [replace(r, labeled_voxels=recs[r.id]["labeled_voxels"], clipped=recs[r.id]["clipped"])
            for r in rows]
    raw = imaging.quantize(products.raw, ctx.acquisition.bits)
    label = products.label
    label = label.astype(np.uint16) if label.max(initial=0) <= np.iinfo(np.uint16).max else label
    return raw, label, rows


def acquire_frame(ctx, frame, raw):
    try:
        return imaging.acquire(raw.astype(np.float64), ctx.acquisition, seed=ctx.config.seed, frame=frame)
    except Exception as exc:
        raise StageError("acquire", frame, exc) from exc


def _write_raw_label(ctx, frame, raw, label):
    nrrd.write_volume(raw, ctx.raw_path(frame), ctx.volume.spacing)
    nrrd.write_volume(label, ctx.label_path(frame), ctx.volume.spacing)


def _write_finals(ctx, frame, views):
    for v, data in enumerate(views):
        nrrd.write_volume(data, ctx.final_path(frame, v), ctx.volume.spacing)


def _mkdirs(ctx, *names):
    for n in names:
        (ctx.out / n).mkdir(parents=True, exist_ok=True)


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(*it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda it: fn(*it), items))


def stage_simulate(ctx):
    _mkdirs(ctx, "tables")
    write_guide(ctx.guide, ctx.out / "guide.csv")
    frames, lines = simulate_rows(ctx)
    for k, rows in frames:
        write_object_table(rows, ctx.table_path(k))
    (ctx.out / "run.log").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return frames


def stage_render(ctx, threads=1):
    _mkdirs(ctx, "tables", "raw", "label")
    a, b = ctx.frames

    def work(k):
        try:
            rows = read_object_table(ctx.table_path(k))
        except (OSError, ValueError) as exc:
            raise StageError("render", k, exc) from exc
        raw, label, rows = render_rows(ctx, k, rows)
        _write_raw_label(ctx, k, raw, label)
        write_object_table(rows, ctx.table_path(k))
        log.info("render: frame %d", k)

    _map(work, [(k,) for k in range(a, b + 1)], threads)


def stage_acquire(ctx, threads=1):
    _mkdirs(ctx, "final")
    a, b = ctx.frames

    def work(k):
        try:
            raw, _, _ = nrrd.read_volume(ctx.raw_path(k))
        except (OSError, ValueError) as exc:
            raise StageError("acquire", k, exc) from exc
        _write_finals(ctx, k, acquire_frame(ctx, k, raw))
        log.info("acquire: frame %d", k)

    _map(work, [(k,) for k in range(a, b + 1)], threads)


def stage_full(ctx, threads=1):
    _mkdirs(ctx, "tables", "raw", "label", "final")
    write_guide(ctx.guide, ctx.out / "guide.csv")
    frames, lines = simulate_rows(ctx)
    (ctx.out / "run.log").write_text("\n".join(lines) + "\n", encoding="utf-8")

    def work(k, rows):
        raw, label, rows = render_rows(ctx, k, rows)
        _write_raw_label(ctx, k, raw, label)
        write_object_table(rows, ctx.table_path(k))
        _write_finals(ctx, k, acquire_frame(ctx, k, raw))
        log.info("full: frame %d written", k)

    _map(work, frames, threads)
