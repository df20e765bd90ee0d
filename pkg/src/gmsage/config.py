"""Scenario/run configuration documents (YAML).

A scene document looks like::

    room: {width: 6.5, height: 6.5}
    walls:
      - {label: left, start: [0, 0], end: [0, 6]}
    obstacle: {vertices: [[2.9, 4.8], [3.0, 4.8], [3.0, 4.9], [2.9, 4.9]]}   # or null
    tx: {reference_point: [2.1, 4.1], count: 16, spacing_wavelengths: 0.5, orientation: [1, 0]}
    rx: {reference_point: [3.3, 1.0], count: 121, spacing_m: 0.005}
    rf: {carrier_frequency: 30.0e+9, sub_bandwidth: 10.0e+6, sub_band_count: 101,
         bandwidth: 1.0e+9, snr_db: 20, literal_index: false}
    synthesis: {include_los: true, amplitude: free_space, sns_profile: identity}
    estimator: {grid1: 0.1, grid2: 0.2, ...}
    evaluation: {exempt: [left->right], floor_db: -40}
    seed: 1

All lengths in meters, frequencies in Hz. Array spacing is given either in
wavelengths of the carrier (``spacing_wavelengths``) or in meters
(``spacing_m``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .channel import RfConfig
from .geometry import ArrayGeometry, GeometryError, Obstacle, Scene, Wall
from .sage import EstimatorOptions

PRESETS = ("blocked", "unblocked")


class ConfigError(ValueError):
    """Invalid or incomplete configuration; the message names the field."""


@dataclass
class SynthesisOptions:
    include_los: bool = True
    amplitude: str = "free_space"
    sns_profile: str = "identity"


@dataclass
class RunConfig:
    scene: Scene
    rf: RfConfig
    estimator: EstimatorOptions = field(default_factory=EstimatorOptions)
    synthesis: SynthesisOptions = field(default_factory=SynthesisOptions)
    seed: Optional[int] = None
    exempt: tuple = ("left->right",)
    floor_db: Optional[float] = -40.0
    source: str = ""
    raw: dict = field(default_factory=dict, repr=False)

    def echo(self) -> dict:
        """Plain-data copy of the effective configuration."""
        est = dataclasses.asdict(self.estimator)
        est["reference_channel"] = list(est["reference_channel"])
        return {
            "source": self.source,
            "seed": self.seed,
            "rf": dataclasses.asdict(self.rf),
            "estimator": est,
            "synthesis": dataclasses.asdict(self.synthesis),
            "obstacle": None if self.scene.obstacle is None
            else np.asarray(self.scene.obstacle.vertices).tolist(),
        }


def _float(section: dict, key: str, where: str, default=None) -> float:
    if key not in section:
        if default is None:
            raise ConfigError(f"{where}.{key} is required")
        return float(default)
    try:
        return float(section[key])
    except (TypeError, ValueError):
        raise ConfigError(f"{where}.{key} must be a number, got {section[key]!r}") from None


def _point(value, where: str) -> np.ndarray:
    try:
        p = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{where} must be an [x, y] pair, got {value!r}") from None
    if p.shape != (2,) or not np.all(np.isfinite(p)):
        raise ConfigError(f"{where} must be a finite [x, y] pair, got {value!r}")
    return p


def _section(doc: dict, key: str, required: bool = True) -> dict:
    value = doc.get(key)
    if value is None:
        if required:
            raise ConfigError(f"section '{key}' is required")
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"section '{key}' must be a mapping")
    return value


def _array(section: dict, where: str, wavelength: float) -> ArrayGeometry:
    ref = _point(section.get("reference_point"), f"{where}.reference_point")
    count = section.get("count")
    if not isinstance(count, int) or count < 1:
        raise ConfigError(f"{where}.count must be a positive integer, got {count!r}")
    if "spacing_m" in section:
        spacing = _float(section, "spacing_m", where)
    else:
        spacing = _float(section, "spacing_wavelengths", where, 0.5) * wavelength
    if spacing <= 0:
        raise ConfigError(f"{where} spacing must be positive")
    orientation = _point(section.get("orientation", [1.0, 0.0]), f"{where}.orientation")
    try:
        return ArrayGeometry(ref, count, spacing, orientation)
    except (GeometryError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_rf(section: dict) -> RfConfig:
    defaults = RfConfig()
    kwargs = {}
    for key in ("carrier_frequency", "sub_bandwidth", "bandwidth", "snr_db"):
        kwargs[key] = _float(section, key, "rf", getattr(defaults, key))
    count = section.get("sub_band_count", defaults.sub_band_count)
    if not isinstance(count, int):
        raise ConfigError(f"rf.sub_band_count must be an integer, got {count!r}")
    kwargs["sub_band_count"] = count
    kwargs["literal_index"] = bool(section.get("literal_index", False))
    try:
        return RfConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"rf: {exc}") from None


def parse_scene(doc: dict, rf: RfConfig) -> Scene:
    room = _section(doc, "room")
    bounds = (_float(room, "width", "room"), _float(room, "height", "room"))
    walls = []
    for i, w in enumerate(doc.get("walls") or []):
        where = f"walls[{i}]"
        if not isinstance(w, dict) or "label" not in w:
            raise ConfigError(f"{where} needs label, start and end")
        try:
            walls.append(Wall(_point(w.get("start"), f"{where}.start"),
                              _point(w.get("end"), f"{where}.end"), str(w["label"])))
        except GeometryError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    obstacle = None
    obs = doc.get("obstacle")
    if obs is not None:
        if not isinstance(obs, dict) or "vertices" not in obs:
            raise ConfigError("obstacle must be null or a mapping with 'vertices'")
        verts = [_point(v, f"obstacle.vertices[{k}]") for k, v in enumerate(obs["vertices"])]
        try:
            obstacle = Obstacle(np.array(verts))
        except (GeometryError, ValueError) as exc:
            raise ConfigError(f"obstacle: {exc}") from None
    tx = _array(_section(doc, "tx"), "tx", rf.wavelength)
    rx = _array(_section(doc, "rx"), "rx", rf.wavelength)
    try:
        return Scene(tuple(walls), tx, rx, bounds, obstacle)
    except (GeometryError, ValueError) as exc:
        raise ConfigError(f"scene: {exc}") from None


def parse_estimator(section: dict) -> EstimatorOptions:
    known = {f.name for f in dataclasses.fields(EstimatorOptions)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"estimator: unknown keys {sorted(unknown)}")
    kwargs = dict(section)
    for key in ("grid1", "grid2", "delay_tolerance_bins", "convergence_tol",
                "detection_factor_db", "threshold_factor", "high_bounce_factor"):
        if key in kwargs:
            kwargs[key] = _float(section, key, "estimator")
    try:
        return EstimatorOptions(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"estimator: {exc}") from None


def parse_config(doc, source: str = "") -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration document must be a mapping")
    rf = parse_rf(_section(doc, "rf", required=False))
    scene = parse_scene(doc, rf)
    syn = _section(doc, "synthesis", required=False)
    known = {f.name for f in dataclasses.fields(SynthesisOptions)}
    if set(syn) - known:
        raise ConfigError(f"synthesis: unknown keys {sorted(set(syn) - known)}")
    synthesis = SynthesisOptions(**syn)
    if synthesis.amplitude not in ("free_space", "unit"):
        raise ConfigError(f"synthesis.amplitude must be free_space or unit, got {synthesis.amplitude!r}")
    evaluation = _section(doc, "evaluation", required=False)
    seed = doc.get("seed")
    if seed is not None and not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    floor = evaluation.get("floor_db", -40.0)
    return RunConfig(
        scene=scene,
        rf=rf,
        estimator=parse_estimator(_section(doc, "estimator", required=False)),
        synthesis=synthesis,
        seed=seed,
        exempt=tuple(evaluation.get("exempt", ("left->right",))),
        floor_db=None if floor is None else float(floor),
        source=source,
        raw=doc,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return parse_config(doc, str(path))


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("gmsage.presets").joinpath(f"{name}.scene").read_text()


def load_preset(name: str) -> RunConfig:
    return parse_config(yaml.safe_load(preset_text(name)), f"preset:{name}")
