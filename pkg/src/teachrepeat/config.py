"""Scenario configuration: an INI file whose values are JSON literals, or the same schema as JSON.

Every section maps onto a frozen dataclass; unknown sections or keys, malformed
literals and type mismatches raise ``ConfigError`` carrying the file line.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import json
import re
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .doppler import RansacConfig
from .finetune import FinetuneParams
from .registration import IcpConfig, OracleConfig
from .repeat import RepeatParams
from .teach import TeachParams
from .world import DESK_LIDAR_SPEC, DESK_RADAR_SPEC, NEVER, RenderConfig, SensorSpec, SmokeRegion


class ConfigError(ValueError):
    """Schema violation; ``line`` is 1-based or ``None`` when not attributable."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = f"{path or '<config>'}:{line}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.line = line


@dataclass(frozen=True)
class SystemParams:
    """System-wide tuning values; all defaults are the reference settings."""

    theta_mask: float = 135.0  # deg, LiDAR crop wedge
    v_i: float = 1.2  # m/s
    w_rot: float = 1.15
    w_pos: float = 1.0
    alpha: float = 0.03  # 1/km
    delta: float = 0.12  # m, node switch
    tau: float = 0.25  # m, registration quality threshold
    eps_seg: float = 0.04  # m
    eps: float = 0.16  # m
    M: int = 3
    p: float = 0.99
    eta: float = 0.7
    N_iter: int = 120
    gamma_doppler: float = 0.10  # m/s
    a: float = 0.3
    b: float = 0.245
    r_a: float = 3.0
    tau_mu: float = 0.25  # m
    L_min: float = 400.0  # m


@dataclass(frozen=True)
class ScenarioSection:
    preset: str = "loop"
    world_file: str = ""
    seed: int = 0
    backend: str = "oracle"
    repeat_epochs: tuple = (0,)
    runs: int = 1


@dataclass(frozen=True)
class OracleSection:
    noise_sigma_t: float = 0.02  # m
    noise_sigma_yaw: float = 0.5  # deg
    min_overlap: float = 0.2
    max_change: float = 0.4
    basin_t: float = 2.0
    basin_yaw: float = 20.0  # deg
    change_bias: tuple = (0.0, 0.2, 0.0)
    change_bias_min: float = 0.05
    overlap_penalty: float = 0.6


@dataclass(frozen=True)
class IcpSection:
    window: int = 8
    max_iters: int = 50
    gate: float = 0.6
    intensity_gate: float = 0.15
    w_I: float = -1.0  # negative: use the correction model's weight
    max_rms: float = 0.2
    min_inliers: int = 25


@dataclass(frozen=True)
class SensorSection:
    azimuth_fov: float
    elevation_fov: float
    max_range: float
    azimuth_res: float
    elevation_res: float
    rate: float
    points_per_second: float = 0.0  # 0: sensor has no point budget


def _sensor_section(spec: SensorSpec) -> SensorSection:
    return SensorSection(spec.azimuth_fov, spec.elevation_fov, spec.max_range, spec.azimuth_res,
                         spec.elevation_res, spec.rate, spec.points_per_second or 0.0)


@dataclass(frozen=True)
class TeachSection:
    drift_sigma_t: float = 0.0
    drift_sigma_yaw: float = 0.0


@dataclass(frozen=True)
class RepeatSection:
    variant: str = "cross_modal"
    omega_max: float = 1.5
    max_failures: int = 10
    abort_radius: float = 2.0
    lookahead: float = 1.0
    keep_frames: bool = True


@dataclass(frozen=True)
class FinetuneSection:
    window: int = 50
    stride: int = 25
    lam: float = 0.5
    epochs: int = 30
    classifier_orientation: str = "as_written"
    pairs_per_node: int = 24
    match_gate: float = 0.3
    min_frames: int = 8
    use_change_labels: bool = False  # add windows inside the world's recorded change span as negatives


@dataclass(frozen=True)
class SmokeSection:
    regions: tuple = ()  # each: {"lo": [x,y,z], "hi": [x,y,z], "attenuation": k, "dropout": p, "epochs": [e0, e1]}


SECTIONS = {
    "scenario": ("scenario", ScenarioSection),
    "params": ("params", SystemParams),
    "oracle": ("oracle", OracleSection),
    "icp": ("icp", IcpSection),
    "radar": ("radar", SensorSection),
    "lidar": ("lidar", SensorSection),
    "teach": ("teach", TeachSection),
    "repeat": ("repeat", RepeatSection),
    "finetune": ("finetune", FinetuneSection),
    "smoke": ("smoke", SmokeSection),
}


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: ScenarioSection = ScenarioSection()
    params: SystemParams = SystemParams()
    oracle: OracleSection = OracleSection()
    icp: IcpSection = IcpSection()
    radar: SensorSection = field(default_factory=lambda: _sensor_section(DESK_RADAR_SPEC))
    lidar: SensorSection = field(default_factory=lambda: _sensor_section(DESK_LIDAR_SPEC))
    teach: TeachSection = TeachSection()
    repeat: RepeatSection = RepeatSection()
    finetune: FinetuneSection = FinetuneSection()
    smoke: SmokeSection = SmokeSection()

    # ---- builders for the runtime parameter objects
    def ransac(self) -> RansacConfig:
        p = self.params
        return RansacConfig(p.M, p.p, p.eta, p.N_iter, p.gamma_doppler)

    def teach_params(self) -> TeachParams:
        p = self.params
        return TeachParams(p.v_i, p.w_pos, p.w_rot, p.tau, p.eps, p.eps_seg, self.lidar.rate,
                           self.teach.drift_sigma_t, self.teach.drift_sigma_yaw)

    def repeat_params(self, epoch: int | None = None) -> RepeatParams:
        p, r = self.params, self.repeat
        ep = self.scenario.repeat_epochs[0] if epoch is None else epoch
        return RepeatParams(delta=p.delta, v_i=p.v_i, rate=self.radar.rate, omega_max=r.omega_max,
                            max_failures=r.max_failures, abort_radius=r.abort_radius, variant=r.variant,
                            epoch=int(ep), lookahead=r.lookahead, ransac=self.ransac())

    def oracle_config(self) -> OracleConfig:
        o = self.oracle
        return OracleConfig(o.noise_sigma_t, np.deg2rad(o.noise_sigma_yaw), o.min_overlap, o.max_change, o.basin_t,
                            np.deg2rad(o.basin_yaw), tuple(o.change_bias), o.change_bias_min,
                            overlap_penalty=o.overlap_penalty)

    def icp_config(self) -> IcpConfig:
        c = self.icp
        return IcpConfig(window=c.window, max_iters=c.max_iters, gate=c.gate, intensity_gate=c.intensity_gate,
                         w_I=None if c.w_I < 0 else c.w_I, min_inliers=c.min_inliers, max_rms=c.max_rms,
                         mask_deg=self.params.theta_mask, alpha=self.params.alpha)

    def finetune_params(self) -> FinetuneParams:
        f, p = self.finetune, self.params
        return FinetuneParams(window=f.window, stride=f.stride, a=p.a, b=p.b,
                              classifier_orientation=f.classifier_orientation, r_a=p.r_a, tau_mu=p.tau_mu,
                              L_min=p.L_min, lam=f.lam, epochs=f.epochs, pairs_per_node=f.pairs_per_node,
                              match_gate=f.match_gate, min_frames=f.min_frames)

    def render_config(self) -> RenderConfig:
        return RenderConfig(alpha=self.params.alpha)

    def radar_spec(self) -> SensorSpec:
        return _spec("radar4d", self.radar)

    def lidar_spec(self) -> SensorSpec:
        return _spec("lidar", self.lidar)

    def smoke_regions(self) -> list[SmokeRegion]:
        out = []
        for r in self.smoke.regions:
            ep = r.get("epochs", [1, NEVER])
            out.append(SmokeRegion(tuple(r["lo"]), tuple(r["hi"]), float(r.get("attenuation", 60.0)),
                                   float(r.get("dropout", 0.9)), (int(ep[0]), int(ep[1]))))
        return out

    def with_overrides(self, **scenario) -> "ScenarioConfig":
        return dataclasses.replace(self, scenario=dataclasses.replace(self.scenario, **scenario))

    # ---- serialization
    def to_dict(self) -> dict:
        return {name: _section_dict(getattr(self, name)) for name in SECTIONS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=False)

    def to_ini(self) -> str:
        buf = io.StringIO()
        for name in SECTIONS:
            buf.write(f"[{name}]\n")
            for k, v in _section_dict(getattr(self, name)).items():
                buf.write(f"{k} = {json.dumps(v)}\n")
            buf.write("\n")
        return buf.getvalue()

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(self.to_json() if path.suffix == ".json" else self.to_ini())


def _spec(modality: str, s: SensorSection) -> SensorSpec:
    return SensorSpec(modality, s.azimuth_fov, s.elevation_fov, s.max_range, s.azimuth_res, s.elevation_res,
                      s.rate, s.points_per_second or None)


def _section_dict(obj) -> dict:
    return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def _frozen(v):
    if isinstance(v, list):
        return tuple(_frozen(x) for x in v)
    if isinstance(v, dict):
        return {k: _frozen(x) if not isinstance(x, list) else list(x) for k, x in v.items()}
    return v


def _coerce(value, hint, key: str, line, path):
    def bad(expected):
        raise ConfigError(f"{key}: expected {expected}, got {json.dumps(value)}", line, path)

    if hint is bool:
        if not isinstance(value, bool):
            bad("true/false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            bad("an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            bad("a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            bad("a string")
        return value
    if hint is tuple:
        if not isinstance(value, list):
            bad("a list")
        return tuple(_frozen(x) if isinstance(x, list) else x for x in value)
    return value


def _build_section(cls, values: dict, lines: dict, path, section: str, base=None):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {} if base is None else {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}
    for k, v in values.items():
        if k not in names:
            raise ConfigError(f"unknown key {k!r} in section [{section}]", lines.get(k), path)
        kwargs[k] = _coerce(v, hints[k], k, lines.get(k), path)
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"section [{section}]: {e}", lines.get("__section__"), path) from None
    except ValueError as e:
        raise ConfigError(f"section [{section}]: {e}", lines.get("__section__"), path) from None


def from_dict(d: dict, path: str | None = None, lines: dict | None = None) -> ScenarioConfig:
    lines = lines or {}
    if not isinstance(d, dict):
        raise ConfigError("top level must be an object", 1, path)
    default = ScenarioConfig()
    sections = {}
    for name, values in d.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]", lines.get(name, {}).get("__section__"), path)
        if not isinstance(values, dict):
            raise ConfigError(f"section [{name}] must be a table", lines.get(name, {}).get("__section__"), path)
        _, cls = SECTIONS[name]
        sections[name] = _build_section(cls, values, lines.get(name, {}), path, name, getattr(default, name))
    try:
        cfg = dataclasses.replace(default, **sections)
        cfg.repeat_params()
        cfg.radar_spec()
        cfg.lidar_spec()
        cfg.finetune_params()
        cfg.smoke_regions()
    except (ValueError, KeyError, TypeError, IndexError) as e:
        raise ConfigError(str(e), None, path) from None
    if cfg.scenario.backend not in ("oracle", "icp"):
        raise ConfigError(f"backend must be 'oracle' or 'icp', got {cfg.scenario.backend!r}",
                          lines.get("scenario", {}).get("backend"), path)
    return cfg


_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]\s*$")
_KEY_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*[=:]")


def parse_ini(text: str, path: str | None = None) -> ScenarioConfig:
    # line numbers of sections and keys, for error messages
    lines: dict = {}
    current = None
    for i, raw in enumerate(text.splitlines(), 1):
        m = _SECTION_RE.match(raw)
        if m:
            current = m.group(1).strip()
            lines.setdefault(current, {})["__section__"] = i
            continue
        m = _KEY_RE.match(raw)
        if m and current is not None:
            lines[current][m.group(1)] = i
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e).splitlines()[0], getattr(e, "lineno", None), path) from None
    d = {}
    for name in cp.sections():
        d[name] = {}
        for k, raw in cp.items(name):
            try:
                d[name][k] = json.loads(raw)
            except json.JSONDecodeError:
                raise ConfigError(f"{k}: value is not a JSON literal: {raw!r}", lines.get(name, {}).get(k),
                                  path) from None
    return from_dict(d, path, lines)


def parse_json(text: str, path: str | None = None) -> ScenarioConfig:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg}", e.lineno, path) from None
    return from_dict(d, path)


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", None, str(path)) from None
    if path.suffix == ".json" or text.lstrip().startswith("{"):
        return parse_json(text, str(path))
    return parse_ini(text, str(path))
