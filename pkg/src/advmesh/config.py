"""Run configuration: four sections loaded from TOML or JSON, flags override, unknown keys rejected."""

from __future__ import annotations

import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .attack import AttackConfig
from .detector import BevGrid, DetectorConfig
from .evaluation import ASR_THRESHOLDS


class ConfigError(ValueError):
    pass


@dataclass
class SceneSection:
    n_cameras: int = 6
    camera_height: float = 1.6
    fov_deg: float = 70.0
    image_size: tuple[int, int] = (64, 176)
    n_vehicles: int = 3
    n_other: int = 2


@dataclass
class DetectorSection:
    x_range: tuple[float, float] = (-20.0, 20.0)
    y_range: tuple[float, float] = (-20.0, 20.0)
    resolution: float = 2.0
    channels: int = 32
    heights: tuple[float, ...] = (0.0, 0.5, 1.0, 1.5)
    enc_channels: int = 16
    img_kernel: int = 5
    bev_kernel: int = 3
    bev_dilation: int = 3
    lift: str = "concat"
    epochs: int = 20
    lr: float = 2e-3
    batch_size: int = 4
    seed: int = 0

    def grid(self) -> BevGrid:
        return BevGrid(tuple(self.x_range), tuple(self.y_range), self.resolution, self.channels)

    def model(self) -> DetectorConfig:
        return DetectorConfig(self.grid(), tuple(self.heights), self.enc_channels, self.img_kernel,
                              self.bev_kernel, self.bev_dilation, self.lift)


@dataclass
class AttackSection:
    shape: str = "cylinder"
    lr: float = 0.02
    displacement_cap: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    epochs: int = 10
    meshes_per_frame: int = 4
    distance: float = 0.1
    corner: int = 0
    occlusion: bool = True
    seed: int = 0

    def model(self) -> AttackConfig:
        d = asdict(self)
        d.pop("shape")
        return AttackConfig(**d)


@dataclass
class EvalSection:
    thresholds: tuple[float, ...] = ASR_THRESHOLDS
    score_threshold: float = 0.3
    nms_radius: int = 2
    distances: tuple[float, ...] = (0.1, 0.5, 1.0, 2.0, 3.0)
    counts: tuple[int, ...] = (1, 2, 4, 8)
    seed: int = 0


SECTIONS = {"scene": SceneSection, "detector": DetectorSection, "attack": AttackSection, "eval": EvalSection}


@dataclass
class RunConfig:
    scene: SceneSection = field(default_factory=SceneSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return {name: _plain(asdict(getattr(self, name))) for name in SECTIONS}

    @classmethod
    def from_dict(cls, d: dict, source: str = "<config>") -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError(f"{source}: top level must be a table")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"{source}: unknown section(s) {sorted(unknown)}")
        out = cls()
        for name, klass in SECTIONS.items():
            sec = d.get(name, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"{source}: section [{name}] must be a table")
            setattr(out, name, _section(klass, sec, f"{source}:[{name}]"))
        out.validate()
        return out

    def override(self, section: str, **values) -> None:
        """Apply non-None flag values to a section."""
        vals = {k: v for k, v in values.items() if v is not None}
        if not vals:
            return
        cur = asdict(getattr(self, section))
        cur.update(vals)
        setattr(self, section, _section(SECTIONS[section], cur, f"--{section} flags"))
        self.validate()

    def validate(self) -> None:
        try:
            self.detector.model()
            self.attack.model()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        if self.attack.shape not in ("cylinder", "cube", "sphere"):
            raise ConfigError(f"unknown mesh shape {self.attack.shape!r}")
        for t in self.eval.thresholds:
            if not 0.0 < t < 1.0:
                raise ConfigError(f"IoU threshold {t} outside (0, 1)")
        if not 0.0 < self.eval.score_threshold < 1.0:
            raise ConfigError("score_threshold must lie in (0, 1)")
        if len(self.scene.image_size) != 2 or min(self.scene.image_size) < 8:
            raise ConfigError(f"bad image size {self.scene.image_size}")

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _section(klass, values: dict, where: str):
    names = {f.name: f for f in fields(klass)}
    unknown = set(values) - set(names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    kw = {}
    default = klass()
    for k, v in values.items():
        ref = getattr(default, k)
        try:
            if isinstance(ref, bool):
                if not isinstance(v, bool):
                    raise TypeError
                kw[k] = v
            elif isinstance(ref, tuple):
                kw[k] = tuple(type(ref[0])(x) for x in v) if ref else tuple(v)
            elif isinstance(ref, (int, float)):
                if isinstance(v, bool):
                    raise TypeError
                if isinstance(ref, int) and float(v) != int(v):
                    raise TypeError
                kw[k] = type(ref)(v)
            else:
                kw[k] = str(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: bad value for {k!r}: {v!r}") from None
    return klass(**kw)


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = os.fspath(path)
    try:
        with open(p, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"{p}: {exc.strerror}") from None
    try:
        if p.endswith(".toml"):
            data = tomllib.loads(raw.decode())
        else:
            data = json.loads(raw)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{p}: parse error: {exc}") from None
    return RunConfig.from_dict(data, p)
