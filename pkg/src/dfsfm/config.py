"""Pipeline configuration and its ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Optional

from .bundle import BAConfig
from .errors import InputMissingError
from .geo_refine import RefineConfig
from .mapper import MapperConfig
from .matching import DEFAULT_GRID_SIZE
from .track_refine import RefinerConfig

DEFAULT_REFINE_ITERATIONS = 2


@dataclass
class PipelineConfig:
    r: int = DEFAULT_GRID_SIZE
    refine_iterations: int = DEFAULT_REFINE_ITERATIONS
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    mapper: MapperConfig = field(default_factory=MapperConfig)
    # None selects 4 px, or 8 px above 1500 px image edge
    ransac_threshold_px: Optional[float] = None
    min_pair_inliers: int = 20
    intrinsics_known: bool = False
    seed: int = 0
    threads: int = 1
    match_file: Optional[str] = None
    image_dir: Optional[str] = None
    intrinsics_file: Optional[str] = None
    output_dir: Optional[str] = None
    export_coarse: bool = False

    def __post_init__(self):
        if self.refine_iterations < 0:
            raise ValueError("refine_iterations must be >= 0")
        if self.r < 1:
            raise ValueError("grid size must be >= 1")


# file key -> (attribute path, type)
_KEYS = {
    "grid_size_r": ("r", int),
    "patch_size_p": ("refiner.p", int),
    "ref_grid_w": ("refiner.w", int),
    "epsilon_px": ("refine.epsilon_px", float),
    "max_views": ("refiner.max_views", int),
    "ba_ta_rounds": ("refine.ba_ta_rounds", int),
    "refine_iterations": ("refine_iterations", int),
    "ransac_threshold_px": ("ransac_threshold_px", float),
    "min_tri_angle_deg": ("mapper.min_triangulation_angle_deg", float),
    "intrinsics_known": ("intrinsics_known", bool),
    # extras beyond the core key set
    "softmax_tau": ("refiner.tau", float),
    "merge_threshold_px": ("refine.merge_threshold_px", float),
    "completion_threshold_px": ("refine.completion_threshold_px", float),
    "min_registration_inliers": ("mapper.min_registration_inliers", int),
    "min_pair_inliers": ("min_pair_inliers", int),
    "seed": ("seed", int),
    "threads": ("threads", int),
    "match_file": ("match_file", str),
    "image_dir": ("image_dir", str),
    "intrinsics_file": ("intrinsics_file", str),
    "output_dir": ("output_dir", str),
    "export_coarse": ("export_coarse", bool),
}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _set(cfg, path: str, value):
    *parents, leaf = path.split(".")
    obj = cfg
    for p in parents:
        obj = getattr(obj, p)
    setattr(obj, leaf, value)


def _get(cfg, path: str):
    obj = cfg
    for p in path.split("."):
        obj = getattr(obj, p)
    return obj


def apply_overrides(cfg: PipelineConfig, values: dict[str, str]) -> PipelineConfig:
    for key, raw in values.items():
        if key not in _KEYS:
            raise ValueError(f"unknown configuration key {key!r}")
        path, typ = _KEYS[key]
        if typ is bool:
            val = _parse_bool(raw)
        elif raw.strip().lower() in ("none", "auto") and typ is not str:
            val = None
        else:
            val = typ(raw.strip())
        _set(cfg, path, val)
    # re-run validation of the nested dataclasses
    cfg.refiner = dataclasses.replace(cfg.refiner)
    cfg.mapper = dataclasses.replace(cfg.mapper)
    cfg.__post_init__()
    return cfg


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = val
    return out


def load_config(path, base: Optional[PipelineConfig] = None) -> PipelineConfig:
    if not os.path.exists(path):
        raise InputMissingError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        values = parse_config_text(f.read())
    return apply_overrides(base or PipelineConfig(), values)


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for key, (path, typ) in _KEYS.items():
        val = _get(cfg, path)
        if val is None:
            continue
        if typ is bool:
            val = "true" if val else "false"
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


def save_config(cfg: PipelineConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dump_config(cfg))
