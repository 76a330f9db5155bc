"""Run configuration: an INI file with one section per pipeline stage.

Keys are checked against the dataclass each section maps onto, so a typo is
a configuration error rather than a silently ignored setting.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

from canopysr.autoencoder import PatchAutoencoder
from canopysr.dataset import DataConfig
from canopysr.errors import CanopySRError, ConfigError
from canopysr.flow import FlowTrainConfig
from canopysr.metrics import MetricsConfig
from canopysr.ode import IntegratorConfig
from canopysr.scene import N_BANDS
from canopysr.uvit import UViTConfig


@dataclass
class AutoencoderSettings:
    source_patch: int = 2
    source_latent: int = 4
    source_hidden: int = 128
    source_depth: int = 2
    source_steps: int = 3000
    source_batch: int = 256
    source_lr: float = 1e-3
    target_patch: int = 16
    target_latent: int = 4
    target_hidden: int = 256
    target_depth: int = 2
    target_steps: int = 3000
    target_batch: int = 256
    target_lr: float = 1e-3
    target_rmse_threshold: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name != "seed" and v <= 0:
                raise ConfigError(f"autoencoders.{f.name} must be positive, got {v}")

    def source(self) -> PatchAutoencoder:
        return PatchAutoencoder(in_channels=N_BANDS, patch=self.source_patch,
                                latent_channels=self.source_latent, hidden=self.source_hidden,
                                depth=self.source_depth, steps=self.source_steps,
                                batch_size=self.source_batch, lr=self.source_lr, seed=self.seed)

    def target(self) -> PatchAutoencoder:
        return PatchAutoencoder(in_channels=1, patch=self.target_patch,
                                latent_channels=self.target_latent, hidden=self.target_hidden,
                                depth=self.target_depth, steps=self.target_steps,
                                batch_size=self.target_batch, lr=self.target_lr, seed=self.seed + 1)


# section name -> (dataclass, keys that are derived elsewhere and not settable)
SECTIONS = {
    "data": (DataConfig, set()),
    "autoencoders": (AutoencoderSettings, set()),
    "uvit": (UViTConfig, {"state_channels", "grid"}),
    "flow": (FlowTrainConfig, set()),
    "integrator": (IntegratorConfig, set()),
    "metrics": (MetricsConfig, set()),
}


def _default(f):
    if f.default is not MISSING:
        return f.default
    return f.default_factory()


def _parse(text: str, like, where: str):
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            kind = type(like[0]) if like else float
            return tuple(kind(p) for p in text.split(",") if p.strip())
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(like).__name__}") from None


def _format(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    autoencoders: AutoencoderSettings = field(default_factory=AutoencoderSettings)
    uvit: UViTConfig = field(default_factory=UViTConfig)
    flow: FlowTrainConfig = field(default_factory=FlowTrainConfig)
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def __post_init__(self):
        ae, data = self.autoencoders, self.data
        if data.coarse_size % ae.source_patch or data.fine_size % ae.target_patch:
            raise ConfigError("tile sizes must be divisible by the autoencoder patch sizes")
        src = data.coarse_size // ae.source_patch
        tgt = data.fine_size // ae.target_patch
        if src != tgt:
            raise ConfigError(f"source latent grid {src}x{src} differs from target grid {tgt}x{tgt}")

    @classmethod
    def from_mapping(cls, raw: dict[str, dict[str, str]]) -> "RunConfig":
        built = {}
        for section, values in raw.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
        for section, (kind, fixed) in SECTIONS.items():
            known = {f.name: f for f in fields(kind) if f.name not in fixed}
            kwargs = {}
            for key, text in raw.get(section, {}).items():
                if key not in known:
                    raise ConfigError(f"unknown key {section}.{key}")
                kwargs[key] = _parse(text, _default(known[key]), f"{section}.{key}")
            try:
                built[section] = kind(**kwargs)
            except ConfigError:
                raise
            except (CanopySRError, ValueError, TypeError) as exc:
                raise ConfigError(f"[{section}]: {exc}") from exc
        return cls(**built)

    @classmethod
    def from_text(cls, text: str, overrides=()) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        raw = {s: dict(parser[s]) for s in parser.sections()}
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {item!r} is not section.key=value")
            raw.setdefault(section, {})[name] = value
        return cls.from_mapping(raw)

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        if path is None:
            return cls.from_text("", overrides)
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        return cls.from_text(p.read_text(encoding="utf-8"), overrides)

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for section, (_, fixed) in SECTIONS.items():
            values = asdict(getattr(self, section))
            parser[section] = {k: _format(v) for k, v in values.items() if k not in fixed}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()
