"""Run configuration: an INI-style file with [run], [network], [data], [aug]
and [trainer] sections. Any key can be overridden with ``section.key=value``.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from fractions import Fraction

from ccdc.data import AugConfig
from ccdc.network import NetworkSpec, SCALES, preset
from ccdc.train import DataConfig, TrainerConfig


class ConfigError(ValueError):
    pass


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_scalar(text: str, like, where: str):
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(Fraction(text)) if "/" in text else float(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(like).__name__}") from None


def _parse_value(text: str, default, where: str):
    if isinstance(default, tuple):
        items = [t for t in text.replace(";", ",").split(",") if t.strip()]
        like = default[0] if default else ""
        return tuple(_parse_scalar(t, like, where) for t in items)
    return _parse_scalar(text, default, where)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


@dataclass
class RunConfig:
    network: NetworkSpec = field(default_factory=lambda: preset("dc-cdn", "tiny"))
    data: DataConfig = field(default_factory=DataConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    seed: int = 0
    out_dir: str = ""

    def to_dict(self) -> dict:
        return {
            "run": {"seed": self.seed, "out_dir": self.out_dir},
            "network": self.network.to_dict(),
            "data": dataclasses.asdict(self.data),
            "aug": dataclasses.asdict(self.aug),
            "trainer": dataclasses.asdict(self.trainer),
        }

    def to_ini(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            for k, v in values.items():
                lines.append(f"{k} = {_fmt(tuple(v) if isinstance(v, list) else v)}")
            lines.append("")
        return "\n".join(lines)


SECTIONS = {"network": NetworkSpec, "data": DataConfig, "aug": AugConfig, "trainer": TrainerConfig}


def _apply(obj, section: str, values: dict):
    known = {f.name: f for f in fields(obj)}
    updates = {}
    for key, text in values.items():
        if key not in known:
            raise ConfigError(f"{section}.{key}: unknown key (valid: {', '.join(known)})")
        updates[key] = _parse_value(text, getattr(obj, key), f"{section}.{key}")
    try:
        return dataclasses.replace(obj, **updates)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def build_config(sections: dict[str, dict[str, str]]) -> RunConfig:
    """Build a RunConfig from raw ``{section: {key: text}}`` values."""
    unknown = set(sections) - set(SECTIONS) - {"run", "DEFAULT"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    cfg = RunConfig()
    run = dict(sections.get("run", {}))
    if "seed" in run:
        cfg.seed = _parse_scalar(run.pop("seed"), 0, "run.seed")
    if "out_dir" in run:
        cfg.out_dir = run.pop("out_dir").strip()
    if run:
        raise ConfigError(f"run.{next(iter(run))}: unknown key (valid: seed, out_dir)")

    net = dict(sections.get("network", {}))
    arch, scale = net.pop("preset", None), net.pop("scale", None)
    if arch or scale:
        if scale and scale.strip() not in SCALES:
            raise ConfigError(f"network.scale: unknown scale {scale!r} (valid: {', '.join(SCALES)})")
        try:
            cfg.network = preset((arch or "dc-cdn").strip(), (scale or "tiny").strip())
        except ValueError as exc:
            raise ConfigError(f"network.preset: {exc}") from None
    cfg.network = _apply(cfg.network, "network", net)
    for name in ("data", "aug", "trainer"):
        setattr(cfg, name, _apply(getattr(cfg, name), name, sections.get(name, {})))
    if cfg.network.input_size != cfg.data.image_size:
        raise ConfigError(
            f"network.input_size ({cfg.network.input_size}) must equal data.image_size ({cfg.data.image_size})"
        )
    return cfg


def parse_overrides(items) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        out.setdefault(section, {})[name] = value
    return out


def load_config(path=None, overrides=None) -> RunConfig:
    sections: dict[str, dict[str, str]] = {}
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as f:
                parser.read_file(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        sections = {s: dict(parser.items(s)) for s in parser.sections()}
    for section, values in parse_overrides(overrides).items():
        sections.setdefault(section, {}).update(values)
    return build_config(sections)
