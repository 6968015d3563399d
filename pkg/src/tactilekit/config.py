"""Run configuration loaded from TOML.

Sections mirror the workflows: ``[paths]``, ``[surface]``,
``[calibration]``, ``[reconstruct]``, ``[controller]``, ``[rolling]``,
``[stream]`` and ``[bench]``.  Unknown sections or keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    bundle: str = "bundle.tkb"
    output_dir: str = "out"


@dataclass
class SurfaceConfig:
    cylinder_radius: float = 10.0
    cylinder_length: float = 15.0
    n_u: int = 6
    n_v: int = 4
    resolution: list = field(default_factory=lambda: [640, 480])


@dataclass
class CalibrationConfig:
    probe_radius: float = 2.0
    depth: float = 0.8
    gradient_depths: list = field(default_factory=lambda: [0.4, 0.8, 1.2, 1.6])
    per_quad: int = 5
    noise_sigma: float = 1.0
    threshold: int = 6
    quantization_bits: int = 5
    seed: int = 0


@dataclass
class ReconstructConfig:
    source: str = ""  # frame directory or stream URL
    downsample: int = 1
    max_frames: int = 0  # 0 means all (or 100 from a stream)


@dataclass
class ControllerConfig:
    setpoint: float = 0.8
    k_f: float = 2.0
    speed: float = 10.0
    max_normal_speed: float = 5.0


@dataclass
class RollingConfig:
    objects: list = field(default_factory=lambda: ["all"])
    trials: int = 10
    seed: int = 7
    timeout: float = 3.0
    region: list = field(default_factory=lambda: [0.50, 0.65, 0.30, 0.70])


@dataclass
class StreamSection:
    host: str = "127.0.0.1"
    port: int = 8090
    resolution: list = field(default_factory=lambda: [640, 480])
    target_fps: float = 90.0
    jpeg_quality: int = 80
    duration: float = 0.0  # seconds to serve; 0 runs until interrupted


@dataclass
class BenchConfig:
    repeats: int = 20
    seed: int = 0


SECTIONS = {
    "paths": PathsConfig, "surface": SurfaceConfig, "calibration": CalibrationConfig,
    "reconstruct": ReconstructConfig, "controller": ControllerConfig, "rolling": RollingConfig,
    "stream": StreamSection, "bench": BenchConfig,
}


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    paths: PathsConfig = field(default_factory=PathsConfig)
    surface: SurfaceConfig = field(default_factory=SurfaceConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    reconstruct: ReconstructConfig = field(default_factory=ReconstructConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    rolling: RollingConfig = field(default_factory=RollingConfig)
    stream: StreamSection = field(default_factory=StreamSection)
    bench: BenchConfig = field(default_factory=BenchConfig)
    base_dir: Path = field(default_factory=Path.cwd, repr=False)

    def resolve(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d


def _coerce(cls, name: str, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    out = cls()
    for k, v in values.items():
        default = getattr(out, k)
        if isinstance(default, bool):
            ok = isinstance(v, bool)
        elif isinstance(default, int):
            ok = isinstance(v, int) and not isinstance(v, bool)
        elif isinstance(default, float):
            ok = isinstance(v, (int, float)) and not isinstance(v, bool)
            v = float(v) if ok else v
        elif isinstance(default, list):
            ok = isinstance(v, list)
        else:
            ok = isinstance(v, str)
        if not ok:
            raise ConfigError(f"[{name}] {k}: expected {type(default).__name__}, got {type(v).__name__}")
        setattr(out, k, v)
    return out


def config_from_dict(data: dict, base_dir: Path | None = None) -> RunConfig:
    data = dict(data)
    version = data.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    cfg = RunConfig(base_dir=base_dir or Path.cwd())
    for name, cls in SECTIONS.items():
        if name in data:
            setattr(cfg, name, _coerce(cls, name, data[name]))
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    s, c = cfg.surface, cfg.calibration
    if s.cylinder_radius <= 0 or s.cylinder_length < 0:
        raise ConfigError("surface dimensions must be positive")
    if s.n_u < 1 or s.n_v < 1:
        raise ConfigError("tessellation needs at least one quad each way")
    for name, res in (("surface", s.resolution), ("stream", cfg.stream.resolution)):
        if len(res) != 2 or min(res) <= 0:
            raise ConfigError(f"[{name}] resolution must be [width, height]")
    if c.per_quad < 1 or c.probe_radius <= 0 or c.depth <= 0:
        raise ConfigError("calibration probing parameters must be positive")
    if cfg.rolling.trials < 1:
        raise ConfigError("[rolling] trials must be positive")
    if len(cfg.rolling.region) != 4:
        raise ConfigError("[rolling] region is [u_min, u_max, v_min, v_max]")
    if cfg.reconstruct.downsample < 1:
        raise ConfigError("[reconstruct] downsample must be >= 1")
    if cfg.stream.target_fps <= 0:
        raise ConfigError("[stream] target_fps must be positive")


def load_config(path: str | Path | None) -> RunConfig:
    """Read a TOML run config; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text())
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data, path.parent.resolve())


def calibration_settings(cfg: RunConfig):
    from .calibration import CalibrationSettings

    s, c = cfg.surface, cfg.calibration
    return CalibrationSettings(
        cylinder_radius=s.cylinder_radius, cylinder_length=s.cylinder_length, n_u=s.n_u, n_v=s.n_v,
        resolution=tuple(s.resolution), probe_radius=c.probe_radius, depth=c.depth,
        gradient_depths=tuple(c.gradient_depths), per_quad=c.per_quad, noise_sigma=c.noise_sigma,
        threshold=c.threshold, quantization_bits=c.quantization_bits, seed=c.seed)
