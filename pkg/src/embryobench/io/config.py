"""Run configuration: JSON parsing, defaults, dotted-key overrides."""
import copy
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from ..dynamics import DivisionModel, DynamicsConfig, VARIANTS
from ..guide import GuideSpec
from ..imaging import ATTENUATION_MODES, VideoSpec


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "output": "out",
    "frames": None,
    "guide": {"path": None, "generator": None},
    "population": {"fraction": None, "count": None},
    "dynamics": {
        "w_dir": 1.0, "w_rep": 1.0, "w_nna": 0.1, "K": 10,
        "r_min": 7.0, "r_max": 10.0, "l_min": 28, "l_max": 48,
    },
    "division": {"variant": "count_coupled_density", "p": None, "r_rho": 40.0},
    "volume": {"dims": None, "spacing": [1.0, 1.0, 2.0], "origin": None},
    "acquisition": {
        "psf_path": None, "psf_sigma_xy": 1.5, "psf_sigma_z": 4.0,
        "dark_offset": 100.0, "dark_path": None, "sigma_agn": 5.0,
        "shot_noise": True, "attenuation": "forward", "multiview": False, "bits": 16,
    },
    "videos": {"path": None, "generator": None},
}
# sub-objects whose keys come from a dataclass rather than DEFAULTS
_GENERATORS = {("guide", "generator"): GuideSpec, ("videos", "generator"): VideoSpec}
DEFAULT_VIDEO_COUNT = 56


def _merge(base, user, prefix=()):
    if not isinstance(user, dict):
        raise ConfigError(f"{'.'.join(prefix) or 'config'}: expected an object")
    out = copy.deepcopy(base)
    for key, value in user.items():
        path = prefix + (key,)
        dotted = ".".join(path)
        if path in _GENERATORS:
            if value is None:
                out[key] = None
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"{dotted}: expected an object")
            allowed = {f.name for f in fields(_GENERATORS[path])}
            for k in value:
                if k not in allowed:
                    raise ConfigError(f"unknown config key {dotted}.{k}")
            out[key] = dict(value)
        elif key not in base:
            raise ConfigError(f"unknown config key {dotted}")
        elif isinstance(base[key], dict):
            out[key] = _merge(base[key], value, path)
        else:
            out[key] = value
    return out


def parse_frames(value):
    """``None``, ``[a, b]`` or ``"a..b"`` (inclusive)."""
    if value is None:
        return None
    if isinstance(value, str):
        try:
            a, b = value.split("..")
            value = [int(a), int(b)]
        except ValueError:
            raise ConfigError(f"frames: expected 'a..b', got {value!r}") from None
    if len(value) != 2 or int(value[0]) < 0 or int(value[1]) < int(value[0]):
        raise ConfigError("frames: need 0 <= a <= b")
    return [int(value[0]), int(value[1])]


@dataclass(frozen=True)
class SimulationConfig:
    seed: int
    output: str
    frames: Optional[list]
    guide_path: Optional[str]
    guide_spec: Optional[GuideSpec]
    fraction: Optional[float]
    count: Optional[int]
    dynamics: DynamicsConfig
    division: dict
    volume: dict
    acquisition: dict
    videos_path: Optional[str]
    video_spec: Optional[VideoSpec]

    def to_dict(self):
        """Resolved config with every default materialized (JSON-ready)."""
        dyn = asdict(self.dynamics)
        for k in ("n_videos", "seed"):
            dyn.pop(k)
        return {
            "seed": self.seed,
            "output": self.output,
            "frames": self.frames,
            "guide": {"path": self.guide_path,
                      "generator": asdict(self.guide_spec) if self.guide_spec else None},
            "population": {"fraction": self.fraction, "count": self.count},
            "dynamics": dyn,
            "division": dict(self.division),
            "volume": copy.deepcopy(self.volume),
            "acquisition": dict(self.acquisition),
            "videos": {"path": self.videos_path,
                       "generator": asdict(self.video_spec) if self.video_spec else None},
        }

    def division_model(self, n_embryo0):
        """Division model; p defaults to the initial fraction (or count / N_embryo_0)."""
        p = self.division["p"]
        if p is None:
            p = self.fraction if self.fraction is not None else self.count / n_embryo0
        return DivisionModel(self.division["variant"], float(min(p, 1.0)), float(self.division["r_rho"])).validate()


def _need(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _triple(value, name, positive=True):
    _need(isinstance(value, (list, tuple)) and len(value) == 3, f"{name}: expected three numbers")
    try:
        out = [float(v) for v in value]
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected three numbers") from None
    if positive:
        _need(all(v > 0 for v in out), f"{name}: entries must be > 0")
    return out


def build_config(raw):
    """Validate a (partial) config dict and fill defaults."""
    d = _merge(DEFAULTS, raw)

    seed = d["seed"]
    _need(isinstance(seed, int) and not isinstance(seed, bool) and seed >= 0, "seed: must be an integer >= 0")

    g = d["guide"]
    _need((g["path"] is None) != (g["generator"] is None), "guide: set exactly one of path or generator")
    guide_spec = None
    if g["generator"] is not None:
        try:
            guide_spec = GuideSpec(**g["generator"])
            guide_spec.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"guide.generator: {exc}") from None

    pop = d["population"]
    fraction, count = pop["fraction"], pop["count"]
    _need(fraction is None or count is None, "population: set at most one of fraction or count")
    if fraction is None and count is None:
        fraction = 0.5
    if fraction is not None:
        _need(isinstance(fraction, (int, float)) and 0 < fraction <= 1, "population.fraction: must lie in (0, 1]")
        fraction = float(fraction)
    if count is not None:
        _need(isinstance(count, int) and count >= 1, "population.count: must be an integer >= 1")

    dyn = d["dynamics"]
    try:
        dcfg = DynamicsConfig(
            w_dir=float(dyn["w_dir"]), w_rep=float(dyn["w_rep"]), w_nna=float(dyn["w_nna"]),
            K=int(dyn["K"]), r_min=float(dyn["r_min"]), r_max=float(dyn["r_max"]),
            l_min=int(dyn["l_min"]), l_max=int(dyn["l_max"]), seed=seed,
        ).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"dynamics: {exc}") from None

    div = d["division"]
    _need(div["variant"] in VARIANTS, f"division.variant: must be one of {VARIANTS}")
    _need(div["p"] is None or (isinstance(div["p"], (int, float)) and 0 <= div["p"] <= 1),
          "division.p: must lie in [0, 1]")
    _need(isinstance(div["r_rho"], (int, float)) and div["r_rho"] > 0, "division.r_rho: must be > 0")

    vol = d["volume"]
    vol["spacing"] = _triple(vol["spacing"], "volume.spacing")
    if vol["dims"] is not None:
        _need(isinstance(vol["dims"], list) and len(vol["dims"]) == 3
              and all(isinstance(v, int) and v >= 1 for v in vol["dims"]),
              "volume.dims: expected three positive integers")
    if vol["origin"] is not None:
        vol["origin"] = _triple(vol["origin"], "volume.origin", positive=False)

    acq = d["acquisition"]
    _need(acq["attenuation"] in ATTENUATION_MODES, f"acquisition.attenuation: must be one of {ATTENUATION_MODES}")
    for key in ("dark_offset", "sigma_agn"):
        _need(isinstance(acq[key], (int, float)) and acq[key] >= 0, f"acquisition.{key}: must be >= 0")
    for key in ("psf_sigma_xy", "psf_sigma_z"):
        _need(isinstance(acq[key], (int, float)) and acq[key] > 0, f"acquisition.{key}: must be > 0")
    _need(isinstance(acq["shot_noise"], bool), "acquisition.shot_noise: must be true or false")
    _need(isinstance(acq["multiview"], bool), "acquisition.multiview: must be true or false")
    _need(acq["bits"] in (8, 16), "acquisition.bits: must be 8 or 16")

    v = d["videos"]
    _need(v["path"] is None or v["generator"] is None, "videos: set at most one of path or generator")
    video_spec = None
    if v["path"] is None:
        try:
            video_spec = VideoSpec(**{"count": DEFAULT_VIDEO_COUNT, **(v["generator"] or {})}).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"videos.generator: {exc}") from None

    return SimulationConfig(
        seed=seed, output=str(d["output"]), frames=parse_frames(d["frames"]),
        guide_path=g["path"], guide_spec=guide_spec, fraction=fraction, count=count,
        dynamics=dcfg, division=div, volume=vol, acquisition=acq,
        videos_path=v["path"], video_spec=video_spec,
    )


def _coerce(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw, overrides):
    """Apply ``key.path=value`` overrides to a raw config dict (copy)."""
    out = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for part in parts[:-1]:
            if not isinstance(node.get(part, {}), dict):
                raise ConfigError(f"override {key}: {part} is not an object")
            node = node.setdefault(part, {})
            if node is None:
                raise ConfigError(f"override {key}: {part} is not set")
        node[parts[-1]] = _coerce(value)
    return out


def load_raw(path):
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return raw


def parse_config(path, overrides=None):
    return build_config(apply_overrides(load_raw(path), overrides))
