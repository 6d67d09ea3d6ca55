"""Agent-based dynamics of the simulated nuclei.

Objects follow the guide's local motion field (mean displacement of the K
nearest guide cells), repel each other when their nuclei come closer than
twice the summed radii, and are weakly pulled toward their nearest
simulated neighbor. Divisions are either driven by each object's cycle
clock or coupled to the guide's cell count.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import rng as rngs
from .guide import build_index

log = logging.getLogger(__name__)

FIXED_CYCLE = "fixed_cycle"
OLDEST = "count_coupled_oldest"
DENSITY = "count_coupled_density"
VARIANTS = (FIXED_CYCLE, OLDEST, DENSITY)


@dataclass(frozen=True)
class DynamicsConfig:
    w_dir: float = 1.0
    w_rep: float = 1.0
    w_nna: float = 0.1
    K: int = 10
    r_min: float = 7.0
    r_max: float = 10.0
    l_min: int = 28
    l_max: int = 48
    n_videos: int = 56
    seed: int = 0

    def validate(self):
        for name in ("w_dir", "w_rep", "w_nna"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0 < self.r_min <= self.r_max:
            raise ValueError("need 0 < r_min <= r_max")
        # l_min = 0 is accepted: it only lowers the eligibility threshold
        if not (0 <= self.l_min <= self.l_max and self.l_max >= 1):
            raise ValueError("need 0 <= l_min <= l_max and l_max >= 1")
        if self.n_videos < 1:
            raise ValueError("n_videos must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        return self


@dataclass(frozen=True)
class DivisionModel:
    variant: str = DENSITY
    p: float = 0.5
    r_rho: float = 40.0

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown division variant {self.variant!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        if self.variant == DENSITY and self.r_rho <= 0:
            raise ValueError("r_rho must be > 0 for the density variant")
        return self


@dataclass(frozen=True)
class SimObject:
    id: int
    position: tuple
    radius: float
    cycle_length: int
    cycle_state: int
    video_id: int
    parent_id: Optional[int] = None
    birth_frame: int = 0


@dataclass(frozen=True)
class Division:
    mother: int
    daughters: tuple


@dataclass(frozen=True)
class StepReport:
    frame: int
    n_embryo: int
    n_sim: int
    n_div_requested: int
    n_div_performed: int
    shortfall: int
    divisions: tuple = ()


@dataclass(frozen=True)
class PopulationState:
    frame_index: int
    objects: tuple
    next_id: int
    report: Optional[StepReport] = None

    def __len__(self):
        return len(self.objects)

    def by_id(self):
        return {o.id: o for o in self.objects}

    def positions(self):
        return np.array([o.position for o in self.objects], dtype=np.float64).reshape(-1, 3)


def _draw_attributes(cfg, obj_id, newborn):
    g = rngs.stream(cfg.seed, rngs.ATTRIBUTES, obj_id)
    radius = float(g.uniform(cfg.r_min, cfg.r_max))
    length = int(g.integers(max(1, cfg.l_min), cfg.l_max + 1))
    state = 1 if newborn else int(g.integers(1, length + 1))
    video = int(g.integers(1, cfg.n_videos + 1))
    return radius, length, state, video


def initialize_population(guide, cfg, fraction=None, count=None):
    """Seed objects on randomly chosen frame-0 guide positions.

    Exactly one of ``fraction`` (p in (0, 1]) or ``count`` must be given.
    Positions are drawn without replacement.
    """
    cfg.validate()
    frame0 = guide.frames[0]
    n0 = len(frame0)
    if (fraction is None) == (count is None):
        raise ValueError("give exactly one of fraction or count")
    if fraction is not None:
        if not 0.0 < fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")
        n = int(math.floor(fraction * n0 + 0.5))
    else:
        n = int(count)
        if n < 1:
            raise ValueError("count must be >= 1")
    if n > n0:
        raise ValueError(f"requested {n} objects but guide frame 0 has only {n0} cells")
    chosen = rngs.stream(cfg.seed, rngs.INIT).choice(n0, size=n, replace=False)
    objects = []
    for k, row in enumerate(chosen):
        oid = k + 1
        r, l, s, o = _draw_attributes(cfg, oid, newborn=False)
        pos = tuple(frame0.positions[row].tolist())
        objects.append(SimObject(oid, pos, r, l, s, o, None, 0))
    return PopulationState(0, tuple(objects), n + 1)


def directed_displacement(x, guide_index, K):
    """Mean displacement of the K nearest guide cells (fewer if the frame is small)."""
    rows, _ = guide_index.knn_rows(x, K)
    return guide_index.values[rows].mean(axis=0)


def contact_direction(seed, frame, id_a, id_b):
    """Unit push direction for two coincident objects.

    Treated as the direction from the lower id toward the higher id, so the
    two objects receive exactly opposite pushes.
    """
    lo, hi = sorted((int(id_a), int(id_b)))
    u = rngs.unit_vector(rngs.stream(seed, rngs.CONTACT, frame, lo, hi))
    return u if int(id_a) == lo else -u


def repulsive_displacement(d, r_i, r_j, contact_dir=None):
    """Repulsion felt by object i from neighbor j, with ``d = x_j - x_i``.

    Inside the summed nucleus radius R_N the push grows linearly toward
    unit magnitude at contact; between R_N and R_M = 2 R_N it decays
    quadratically to zero. For coincident centroids ``contact_dir`` stands in
    for the direction of ``d``.
    """
    d = np.asarray(d, dtype=np.float64)
    r_n = r_i + r_j
    r_m = 2.0 * r_n
    c = (1.0 - r_n / r_m) ** 2 - 1.0
    dist = math.hypot(*d)  # no underflow for tiny d
    if dist == 0.0:
        if contact_dir is None:
            contact_dir = rngs.unit_vector(np.random.default_rng(0))
        return -np.asarray(contact_dir, dtype=np.float64)
    unit = d / dist
    if dist <= r_n:
        return -(c * dist / r_n + 1.0) * unit
    if dist <= r_m:
        return -((1.0 - dist / r_m) ** 2) * unit
    return np.zeros(3)


def nna_displacement(x, sim_index, self_id):
    """Vector from ``x`` to its nearest simulated neighbor other than ``self_id``."""
    x = np.asarray(x, dtype=np.float64)
    if len(sim_index) <= 1 and self_id in sim_index._row:
        return np.zeros(3)
    rows, _ = sim_index.knn_rows(x, 2)
    for r in rows:
        if sim_index.ids[r] != self_id:
            return sim_index.positions[r] - x
    return np.zeros(3)


def nna_term(dir_vec, nna_vec, w_nna):
    """Nearest-neighbor attraction with its weight clamped by ‖dir‖/‖nna‖."""
    nna_vec = np.asarray(nna_vec, dtype=np.float64)
    n_nna = math.hypot(*nna_vec)
    if n_nna == 0.0:
        return np.zeros(3)
    return min(w_nna, math.hypot(*np.asarray(dir_vec, dtype=np.float64)) / n_nna) * nna_vec


def total_displacement(obj, guide_index, sim_index, cfg, frame=0):
    """Weighted sum of directed motion, pairwise repulsion and clamped attraction.

    ``sim_index`` must carry object radii as its payload.
    """
    x = np.asarray(obj.position, dtype=np.float64)
    d_dir = directed_displacement(x, guide_index, cfg.K)
    total = cfg.w_dir * d_dir
    if cfg.w_rep > 0:
        rep = np.zeros(3)
        for r in sim_index.range_rows(x, 4.0 * cfg.r_max, exclude_id=obj.id):
            nid = int(sim_index.ids[r])
            d = sim_index.positions[r] - x
            contact = None
            if not d.any():
                contact = contact_direction(cfg.seed, frame, obj.id, nid)
            rep = rep + repulsive_displacement(d, obj.radius, float(sim_index.values[r]), contact)
        total = total + cfg.w_rep * rep
    if cfg.w_nna > 0:
        total = total + nna_term(d_dir, nna_displacement(x, sim_index, obj.id), cfg.w_nna)
    return total


def density_difference(obj, guide_index, sim_index, r_rho):
    """Guide-minus-simulation relative neighbor density around ``obj``.

    The simulated count excludes the object itself; the guide count has
    nothing to exclude.
    """
    x = np.asarray(obj.position, dtype=np.float64)
    rho_embryo = len(guide_index.range_rows(x, r_rho))
    rho_sim = len(sim_index.range_rows(x, r_rho, exclude_id=obj.id))
    return rho_embryo / len(guide_index) - rho_sim / len(sim_index)


def required_divisions(p, n_embryo, n_sim):
    """Divisions needed to reach round-half-up(p * n_embryo) objects."""
    return max(0, int(math.floor(p * n_embryo + 0.5)) - n_sim)


def select_division_candidates(state, model, guide_index, n_div, cfg, sim_index=None):
    """Pick the objects to divide this frame.

    Returns ``(ids, shortfall)``. For the count-coupled variants, objects whose
    cycle has ended (s >= l) fill the request first; remaining slots go to
    eligible objects (s >= l_min) ranked by cycle state (oldest) or by
    density difference (density). The fixed-cycle variant ignores ``n_div``.
    """
    objs = state.objects
    if model.variant == FIXED_CYCLE:
        return sorted(o.id for o in objs if o.cycle_state >= o.cycle_length), 0
    if n_div <= 0:
        return [], 0

    due = sorted((o for o in objs if o.cycle_state >= o.cycle_length),
                 key=lambda o: (-o.cycle_state, o.id))
    chosen = [o.id for o in due[:n_div]]
    remaining = n_div - len(chosen)
    if remaining > 0:
        taken = set(chosen)
        eligible = [o for o in objs if o.cycle_state >= cfg.l_min and o.id not in taken]
        if model.variant == OLDEST:
            eligible.sort(key=lambda o: (-o.cycle_state, o.id))
        else:
            if sim_index is None:
                sim_index = build_index([o.id for o in objs], state.positions())
            scores = {o.id: density_difference(o, guide_index, sim_index, model.r_rho) for o in eligible}
            eligible.sort(key=lambda o: (-scores[o.id], -o.cycle_state, o.id))
        chosen += [o.id for o in eligible[:remaining]]
    shortfall = n_div - len(chosen)
    if shortfall > 0:
        log.info("frame %d: %d divisions requested, only %d eligible",
                 state.frame_index, n_div, len(chosen))
    return sorted(chosen), shortfall


def perform_division(state, obj_id, division_axis, cfg, bounds=None):
    """Replace object ``obj_id`` by two daughters at ``x ± (r/2)·axis``."""
    objs = state.by_id()
    if obj_id not in objs:
        raise KeyError(f"no object with id {obj_id}")
    mother = objs[obj_id]
    axis = np.asarray(division_axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x = np.asarray(mother.position, dtype=np.float64)
    offset = 0.5 * mother.radius * axis
    daughters = []
    for k, sign in enumerate((-1.0, 1.0)):
        did = state.next_id + k
        pos = x + sign * offset
        if bounds is not None:
            pos = bounds.clamp(pos)
        r, l, s, o = _draw_attributes(cfg, did, newborn=True)
        daughters.append(SimObject(did, tuple(pos.tolist()), r, l, s, o, mother.id, state.frame_index))
    rest = tuple(o for o in state.objects if o.id != obj_id)
    return replace(state, objects=rest + tuple(daughters), next_id=state.next_id + 2)


def fallback_axis(seed, obj_id):
    return rngs.unit_vector(rngs.stream(seed, rngs.AXIS, obj_id))


def step(state, guide, model, cfg, axis_lookup: Optional[Callable] = None):
    """Advance the population from frame k to k+1.

    All displacements are computed from the frame-k snapshot and applied
    together. ``axis_lookup(video_id)`` supplies division axes; without it
    each mother gets a seeded random axis.
    """
    k = state.frame_index
    if k + 1 >= len(guide.frames):
        raise IndexError(f"cannot step past the last guide frame ({len(guide.frames) - 1})")
    gframe = guide.frames[k]
    guide_index = build_index(gframe.ids, gframe.positions, gframe.displacements)
    objs = state.objects
    sim_index = build_index([o.id for o in objs], state.positions(), [o.radius for o in objs])

    moves = [total_displacement(o, guide_index, sim_index, cfg, frame=k) for o in objs]
    new_pos = guide.bounds.clamp(state.positions() + np.array(moves).reshape(-1, 3))
    moved = tuple(
        replace(o, position=tuple(p), cycle_state=min(o.cycle_state + 1, o.cycle_length))
        for o, p in zip(objs, new_pos.tolist())
    )
    nxt = PopulationState(k + 1, moved, state.next_id)

    next_frame = guide.frames[k + 1]
    n_embryo = len(next_frame)
    n_div = 0
    if model.variant != FIXED_CYCLE:
        n_div = required_divisions(model.p, n_embryo, len(moved))
    next_guide_index = build_index(next_frame.ids, next_frame.positions)
    chosen, shortfall = select_division_candidates(nxt, model, next_guide_index, n_div, cfg)

    divisions = []
    by_id = nxt.by_id()
    for oid in chosen:
        mother = by_id[oid]
        if axis_lookup is not None:
            axis = axis_lookup(mother.video_id)
        else:
            axis = fallback_axis(cfg.seed, oid)
        d1 = nxt.next_id
        nxt = perform_division(nxt, oid, axis, cfg, guide.bounds)
        divisions.append(Division(oid, (d1, d1 + 1)))

    report = StepReport(k + 1, n_embryo, len(nxt.objects), n_div, len(divisions),
                        shortfall, tuple(divisions))
    return replace(nxt, report=report)


def run(guide, model, cfg, fraction=None, count=None, last_frame=None, axis_lookup=None):
    """Initialize and step through the guide; yields the state at every frame."""
    state = initialize_population(guide, cfg, fraction=fraction, count=count)
    yield state
    last = len(guide.frames) - 1 if last_frame is None else last_frame
    while state.frame_index < last:
        state = step(state, guide, model, cfg, axis_lookup)
        yield state
