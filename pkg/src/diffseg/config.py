"""One INI document holding every stage's settings, with strict key checking."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticSpec
from .densecrf import CrfParams
from .diffusion import TrainConfig
from .errors import ConfigError, DiffSegError
from .refine import RefineConfig
from .segmentation import DEFAULT_TIMESTEPS


def parse_timesteps(text: str) -> tuple[int, ...]:
    """``start:stop:step`` (stop inclusive) or a comma list."""
    text = str(text).strip()
    try:
        if ":" in text:
            parts = [int(p) for p in text.split(":")]
            if len(parts) not in (2, 3):
                raise ValueError
            start, stop = parts[0], parts[1]
            step = parts[2] if len(parts) == 3 else 1
            if step <= 0:
                raise ValueError
            return tuple(range(start, stop + 1, step))
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"segment.timesteps: cannot parse {text!r}; use start:stop:step") from None


@dataclass
class DataConfig:
    spec: SyntheticSpec = field(default_factory=SyntheticSpec)
    train_count: int = 200
    val_count: int = 0
    test_count: int = 50
    # test images are rendered from this index on, disjoint from training
    test_offset: int = 100_000

    def __post_init__(self):
        for name in ("train_count", "val_count", "test_count"):
            if getattr(self, name) < 0:
                raise ConfigError(f"data.{name} must be >= 0")


@dataclass
class SegmentConfig:
    timesteps: tuple[int, ...] = DEFAULT_TIMESTEPS
    delta: str = "0.5"
    smooth_sigma: float = 2.0

    def __post_init__(self):
        if isinstance(self.timesteps, str):
            self.timesteps = parse_timesteps(self.timesteps)
        self.timesteps = tuple(int(t) for t in self.timesteps)
        if not self.timesteps:
            raise ConfigError("segment.timesteps is empty")
        if self.smooth_sigma < 0:
            raise ConfigError("segment.smooth_sigma must be >= 0")
        self.delta = str(self.delta)

    def delta_policy(self):
        try:
            return float(self.delta)
        except ValueError:
            return self.delta


def _acceptance_train() -> TrainConfig:
    return TrainConfig(channels=(16, 32, 64, 64), blocks_per_level=1, epochs=30)


@dataclass
class PipelineConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=_acceptance_train)
    segment: SegmentConfig = field(default_factory=SegmentConfig)
    crf: CrfParams = field(default_factory=CrfParams)
    refine: RefineConfig = field(default_factory=RefineConfig)

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Copy with the master seed pushed into every stage that draws random numbers."""
        seed = int(seed)
        spec = dataclasses.replace(self.data.spec, seed=seed)
        return dataclasses.replace(
            self,
            seed=seed,
            data=dataclasses.replace(self.data, spec=spec),
            train=dataclasses.replace(self.train, seed=seed),
            refine=dataclasses.replace(self.refine, seed=seed),
        )

    def validate(self) -> None:
        T = self.train.T
        bad = [t for t in self.segment.timesteps if not 1 <= t <= T]
        if bad:
            raise ConfigError(f"segment.timesteps: {bad} exceed the schedule length train.T = {T}")
        if self.refine.m > len(self.segment.timesteps):
            raise ConfigError(
                f"refine.m = {self.refine.m} exceeds the ensemble size {len(self.segment.timesteps)}"
            )
        if self.data.spec.size != self.train.image_size:
            raise ConfigError(
                f"data.size = {self.data.spec.size} differs from train.image_size = {self.train.image_size}"
            )

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_ini(self) -> str:
        cp = _parser()
        cp["run"] = {"seed": str(self.seed)}
        for section, obj in _sections(self).items():
            cp[section] = {
                f.name: _format(getattr(obj, f.name))
                for f in dataclasses.fields(obj)
                if f.name != "seed" and not dataclasses.is_dataclass(getattr(obj, f.name))
            }
        lines = []
        for name in cp.sections():
            lines.append(f"[{name}]")
            lines += [f"{k} = {v}" for k, v in cp[name].items()]
            lines.append("")
        return "\n".join(lines)


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case-sensitive (train.T, refine.K)
    return cp


def _sections(cfg: PipelineConfig) -> dict:
    return {
        "data": cfg.data,
        "synth": cfg.data.spec,
        "train": cfg.train,
        "segment": cfg.segment,
        "crf": cfg.crf,
        "refine": cfg.refine,
    }


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _format(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if key.endswith("timesteps"):
                return parse_timesteps(raw)
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {type(default).__name__}") from None


def _rebuild(obj, updates: dict, section: str):
    """New instance of ``obj``'s dataclass with string ``updates`` applied."""
    names = {f.name for f in dataclasses.fields(obj) if not dataclasses.is_dataclass(getattr(obj, f.name))}
    values = {}
    for key, raw in updates.items():
        if key == "seed":
            raise ConfigError(f"{section}.seed is derived; set seed under [run]")
        if key not in names:
            raise ConfigError(f"unknown key {section}.{key}")
        values[key] = _coerce(f"{section}.{key}", raw, getattr(obj, key))
    try:
        return dataclasses.replace(obj, **values)
    except DiffSegError as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith(f"{section}.") else f"{section}: {msg}") from None


def load_config(path=None, text: str | None = None) -> PipelineConfig:
    """Read an INI file (or string); absent keys keep their defaults."""
    cfg = PipelineConfig()
    if path is None and text is None:
        return cfg
    cp = _parser()
    try:
        if text is None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            text = p.read_text()
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}".splitlines()[0]) from None
    known = {"run", *_sections(cfg)}
    for section in cp.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")
    if cp.has_section("run"):
        run = dict(cp["run"])
        if set(run) - {"seed"}:
            raise ConfigError(f"unknown key run.{sorted(set(run) - {'seed'})[0]}")
        if "seed" in run:
            cfg.seed = _coerce("run.seed", run["seed"], 0)
    get = lambda s: dict(cp[s]) if cp.has_section(s) else {}  # noqa: E731
    spec = _rebuild(cfg.data.spec, get("synth"), "synth")
    data = _rebuild(dataclasses.replace(cfg.data, spec=spec), get("data"), "data")
    cfg = dataclasses.replace(
        cfg,
        data=data,
        train=_rebuild(cfg.train, get("train"), "train"),
        segment=_rebuild(cfg.segment, get("segment"), "segment"),
        crf=_rebuild(cfg.crf, get("crf"), "crf"),
        refine=_rebuild(cfg.refine, get("refine"), "refine"),
    )
    cfg = cfg.with_seed(cfg.seed)
    cfg.validate()
    return cfg
