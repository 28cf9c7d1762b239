"""INI-style experiment configuration: parsing with line diagnostics, canonical snapshots."""

from __future__ import annotations

import configparser
import dataclasses
import re
import typing
from pathlib import Path

from .errors import ConfigError
from .federated import ExperimentConfig

SECTIONS: dict[str, tuple[str, ...]] = {
    "data": ("dataset", "num_classes", "samples_per_class", "feature_dim", "class_separation", "noise_std",
             "csv_path", "image_shape", "val_frac", "test_frac", "imbalance_rho"),
    "model": ("model", "hidden"),
    "federation": ("strategy", "weighting", "num_clients", "join_ratio", "alpha", "rounds", "seed", "threads"),
    "training": ("local_epochs", "batch_size", "lr", "momentum"),
    "fedvg": ("norm", "granularity", "epsilon", "delta_inner"),
    "hyper": ("server_momentum", "mu", "feddyn_alpha", "max_grad_norm", "global_lr"),
}
REQUIRED = {("federation", "strategy")}

_FIELD_TYPES = typing.get_type_hints(ExperimentConfig)
_KEY_RE = re.compile(r"^\s*([^=:\s][^=:]*?)\s*[=:]")
_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")


def _line_index(text: str) -> dict[tuple[str | None, str | None], int]:
    """1-based line of each section header and each key."""
    where: dict[tuple[str | None, str | None], int] = {}
    section = None
    for n, line in enumerate(text.splitlines(), start=1):
        if line.lstrip().startswith(("#", ";")):
            continue
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            where.setdefault((section, None), n)
            continue
        m = _KEY_RE.match(line)
        if m:
            where.setdefault((section, m.group(1).strip().lower()), n)
    return where


def _convert(name: str, raw: str):
    tp = _FIELD_TYPES[name]
    args = typing.get_args(tp)
    optional = type(None) in args
    if optional:
        if raw == "":
            return None
        tp = next(a for a in args if a is not type(None))
    origin = typing.get_origin(tp)
    if origin is tuple:
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if tp is bool:
        return raw.lower() in ("1", "true", "yes", "on")
    if tp in (int, float, str):
        return tp(raw)
    raise TypeError(f"unsupported field type {tp}")


def parse_config(text: str) -> ExperimentConfig:
    lines = _line_index(text)
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc.message if hasattr(exc, 'message') else exc}",
                          line=getattr(exc, "lineno", None)) from exc

    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", line=lines.get((section, None)))
        for key, raw in parser.items(section):
            line = lines.get((section, key))
            if key not in SECTIONS[section]:
                raise ConfigError("unknown key", field=f"{section}.{key}", line=line)
            try:
                values[key] = _convert(key, raw.strip())
            except ValueError as exc:
                raise ConfigError(f"cannot parse {raw.strip()!r}: {exc}", field=f"{section}.{key}",
                                  line=line) from exc
    for section, key in sorted(REQUIRED):
        if key not in values:
            raise ConfigError("missing required field", field=f"{section}.{key}",
                              line=lines.get((section, None)))

    config = ExperimentConfig(**values)
    try:
        config.validate()
    except ConfigError as exc:
        section = next(s for s, keys in SECTIONS.items() if exc.field in keys)
        raise ConfigError(str(exc).rsplit(" (", 1)[0], field=f"{section}.{exc.field}",
                          line=lines.get((section, exc.field))) from exc
    return config


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    return parse_config(text)


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(config: ExperimentConfig) -> str:
    """Every field in canonical order; None-valued fields are omitted."""
    values = dataclasses.asdict(config)
    out = []
    for section, keys in SECTIONS.items():
        out.append(f"[{section}]")
        for key in keys:
            if values[key] is not None:
                value = values[key]
                if isinstance(value, list):
                    value = tuple(value)
                out.append(f"{key} = {_format(value)}")
        out.append("")
    return "\n".join(out)
