"""Plain-text ``key = value`` run configuration merged with command-line overrides."""

from __future__ import annotations

import dataclasses
import datetime as dt
import os
from dataclasses import dataclass, field
from importlib import resources

from .model import ConfigError, SmtConfig
from .solar import SiteConfig
from .training import TrainConfig

BUILTIN_CONFIGS = ("desk", "full")

_SITE_KEYS = {"latitude": float, "longitude": float, "altitude_m": float, "utc_offset_min": int}
_TUPLE_KEYS = {"image_hwc", "patch_size", "betas"}
_DATE_KEYS = {"train_end", "val_end", "holdout_start", "holdout_end"}


@dataclass
class PipelineConfig:
    horizon_min: int = 120
    window_len: int = 144
    normalization: str = "daily_max"
    max_gap: int = 3
    train_end: dt.date | None = None
    val_end: dt.date | None = None
    holdout_start: dt.date | None = None
    holdout_end: dt.date | None = None
    checkpoint_precision: int = 4


@dataclass
class RunConfig:
    smt: SmtConfig = field(default_factory=SmtConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    site: SiteConfig | None = None

    @property
    def holdout(self):
        p = self.pipeline
        if p.holdout_start is None and p.holdout_end is None:
            return None
        if p.holdout_start is None or p.holdout_end is None:
            raise ConfigError("holdout_start and holdout_end must be given together")
        return (p.holdout_start, p.holdout_end)


def _field_types(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls)}


def _parse_value(key: str, text: str, default):
    text = text.strip()
    if text.lower() in ("none", ""):
        return None
    if key in _DATE_KEYS:
        return dt.date.fromisoformat(text)
    if key in _TUPLE_KEYS:
        parts = [p.strip() for p in text.split(",") if p.strip()]
        conv = float if key == "betas" else int
        return tuple(conv(p) for p in parts)
    if isinstance(default, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(default, int) or key in ("early_stop_patience",):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def read_kv(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def resolve_config_path(name_or_path: str) -> str:
    if name_or_path in BUILTIN_CONFIGS:
        return str(resources.files("solarsmt").joinpath("configs", f"{name_or_path}.cfg"))
    return name_or_path


def build_run_config(values: dict[str, str]) -> RunConfig:
    """Validate every key and construct the merged configuration."""
    smt_f, train_f, pipe_f = _field_types(SmtConfig), _field_types(TrainConfig), _field_types(PipelineConfig)
    smt_kw, train_kw, pipe_kw, site_kw = {}, {}, {}, {}
    smt_defaults, train_defaults, pipe_defaults = SmtConfig(), TrainConfig(), PipelineConfig()
    for key, text in values.items():
        try:
            if key in _SITE_KEYS:
                site_kw[key] = _SITE_KEYS[key](text)
            elif key == "ts_len":
                raise ConfigError("use window_len (ts_len follows it)")
            elif key in smt_f:
                smt_kw[key] = _parse_value(key, text, getattr(smt_defaults, key))
            elif key in train_f:
                train_kw[key] = _parse_value(key, text, getattr(train_defaults, key))
            elif key in pipe_f:
                pipe_kw[key] = _parse_value(key, text, getattr(pipe_defaults, key))
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{key}: {exc}") from None
    pipeline = PipelineConfig(**pipe_kw)
    if pipeline.normalization not in ("daily_max", "none"):
        raise ConfigError("normalization must be daily_max or none")
    if pipeline.checkpoint_precision not in (4, 8):
        raise ConfigError("checkpoint_precision must be 4 or 8")
    smt_kw["ts_len"] = pipeline.window_len
    smt = SmtConfig(**smt_kw)
    train = TrainConfig(**train_kw)
    site = None
    if site_kw:
        missing = {"latitude", "longitude"} - set(site_kw)
        if missing:
            raise ConfigError(f"site config incomplete, missing {sorted(missing)}")
        site = SiteConfig(
            site_kw["latitude"],
            site_kw["longitude"],
            site_kw.get("altitude_m", 0.0),
            site_kw.get("utc_offset_min", 0),
        )
    return RunConfig(smt, train, pipeline, site)


def load_run_config(path: str | None, overrides: dict[str, str] | None = None) -> RunConfig:
    values = read_kv(resolve_config_path(path)) if path else {}
    values.update(overrides or {})
    return build_run_config(values)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, dt.date):
        return v.isoformat()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_config_text(cfg: RunConfig) -> str:
    """Render the effective configuration; the text is itself a loadable config."""
    lines = ["# effective configuration"]
    for f in dataclasses.fields(SmtConfig):
        if f.name != "ts_len":
            lines.append(f"{f.name} = {_fmt(getattr(cfg.smt, f.name))}")
    for f in dataclasses.fields(TrainConfig):
        lines.append(f"{f.name} = {_fmt(getattr(cfg.train, f.name))}")
    for f in dataclasses.fields(PipelineConfig):
        lines.append(f"{f.name} = {_fmt(getattr(cfg.pipeline, f.name))}")
    if cfg.site is not None:
        lines.append(f"latitude = {_fmt(float(cfg.site.latitude))}")
        lines.append(f"longitude = {_fmt(float(cfg.site.longitude))}")
        lines.append(f"altitude_m = {_fmt(float(cfg.site.altitude))}")
        lines.append(f"utc_offset_min = {cfg.site.utc_offset}")
    return "\n".join(lines) + "\n"


def site_for_manifest(cfg: RunConfig, manifest: str) -> SiteConfig:
    if cfg.site is not None:
        return cfg.site
    candidate = os.path.join(os.path.dirname(os.path.abspath(manifest)), "site.cfg")
    if os.path.exists(candidate):
        return SiteConfig.from_file(candidate)
    raise ConfigError("no site configured: give latitude/longitude in --config or place site.cfg next to the manifest")
