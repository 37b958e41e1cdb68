"""Solar position, Haurwitz clear-sky GHI, daily-max normalization and smart persistence.

Solar position uses Spencer's Fourier series for declination and the
equation of time (about 0.5 degree accuracy). All functions accept either a
single timezone-aware :class:`datetime` or a numpy array of ``datetime64``
values interpreted as UTC.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

HAURWITZ_SCALE = 1098.0
HAURWITZ_EXTINCTION = 0.059
DEGENERATE_CLEAR_SKY = 1.0  # W/m^2; below this the clear-sky ratio is meaningless

__all__ = [
    "PolarNightError",
    "SiteConfig",
    "SolarContext",
    "PersistenceForecast",
    "clear_sky_ghi",
    "day_max_clear_sky",
    "denormalize_ghi",
    "haurwitz_ghi",
    "local_date",
    "normalize_ghi",
    "smart_persistence",
    "solar_azimuth",
    "solar_context",
    "solar_zenith",
]


class PolarNightError(ValueError):
    """The clear-sky maximum of a day is zero, so the day cannot be normalized."""


@dataclass(frozen=True)
class SiteConfig:
    latitude: float
    longitude: float
    altitude: float = 0.0
    utc_offset: int = 0  # minutes east of UTC

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude {self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"longitude {self.longitude} outside [-180, 180]")

    @property
    def tz(self) -> dt.timezone:
        return dt.timezone(dt.timedelta(minutes=self.utc_offset))

    @classmethod
    def from_file(cls, path) -> "SiteConfig":
        """Read ``key = value`` lines: latitude, longitude, altitude_m, utc_offset_min."""
        kv = {}
        with open(path) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key = value")
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        try:
            return cls(
                latitude=float(kv["latitude"]),
                longitude=float(kv["longitude"]),
                altitude=float(kv.get("altitude_m", 0.0)),
                utc_offset=int(kv.get("utc_offset_min", 0)),
            )
        except KeyError as exc:
            raise ValueError(f"{path}: missing key {exc.args[0]}") from None

    def to_text(self) -> str:
        return (
            f"latitude = {self.latitude!r}\n"
            f"longitude = {self.longitude!r}\n"
            f"altitude_m = {self.altitude!r}\n"
            f"utc_offset_min = {self.utc_offset}\n"
        )


def _unix_seconds(t) -> np.ndarray | float:
    if isinstance(t, dt.datetime):
        if t.tzinfo is None:
            raise ValueError("naive datetime; attach a timezone")
        return t.timestamp()
    arr = np.asarray(t)
    if np.issubdtype(arr.dtype, np.datetime64):
        return arr.astype("datetime64[s]").astype(np.int64).astype(np.float64)
    return arr.astype(np.float64)


def _position(lat: float, lon: float, seconds):
    """Return (cos zenith, declination, hour angle) in radians."""
    seconds = np.asarray(seconds, dtype=np.float64)
    days = seconds / 86400.0
    # day of year (1-based) and UTC hour
    d64 = (seconds // 86400).astype("int64").astype("datetime64[D]")
    year_start = d64.astype("datetime64[Y]").astype("datetime64[D]")
    doy = (d64 - year_start).astype(np.float64) + 1.0
    hour = (days - np.floor(days)) * 24.0
    gamma = 2.0 * np.pi / 365.0 * (doy - 1.0 + (hour - 12.0) / 24.0)
    decl = (
        0.006918
        - 0.399912 * np.cos(gamma)
        + 0.070257 * np.sin(gamma)
        - 0.006758 * np.cos(2 * gamma)
        + 0.000907 * np.sin(2 * gamma)
        - 0.002697 * np.cos(3 * gamma)
        + 0.00148 * np.sin(3 * gamma)
    )
    eot = 229.18 * (
        0.000075
        + 0.001868 * np.cos(gamma)
        - 0.032077 * np.sin(gamma)
        - 0.014615 * np.cos(2 * gamma)
        - 0.040849 * np.sin(2 * gamma)
    )
    solar_minutes = hour * 60.0 + eot + 4.0 * lon
    hour_angle = np.radians(solar_minutes / 4.0 - 180.0)
    phi = math.radians(lat)
    cosz = math.sin(phi) * np.sin(decl) + math.cos(phi) * np.cos(decl) * np.cos(hour_angle)
    return np.clip(cosz, -1.0, 1.0), decl, hour_angle


def solar_zenith(site: SiteConfig, t):
    """Solar zenith angle in degrees, in [0, 180]."""
    cosz, _, _ = _position(site.latitude, site.longitude, _unix_seconds(t))
    z = np.degrees(np.arccos(cosz))
    return float(z) if np.ndim(z) == 0 else z


def solar_azimuth(site: SiteConfig, t):
    """Solar azimuth in degrees clockwise from north, in [0, 360)."""
    cosz, decl, ha = _position(site.latitude, site.longitude, _unix_seconds(t))
    phi = math.radians(site.latitude)
    sinz = np.sqrt(np.maximum(1.0 - cosz * cosz, 0.0))
    # azimuth measured from south, positive westward, then rotated to north-based
    y = np.sin(ha) * np.cos(decl)
    x = np.cos(ha) * np.cos(decl) * math.sin(phi) - np.sin(decl) * math.cos(phi)
    az = (np.degrees(np.arctan2(y, x)) + 180.0) % 360.0
    az = np.where(sinz < 1e-12, 180.0, az)
    return float(az) if np.ndim(az) == 0 else az


def haurwitz_ghi(zenith):
    """Haurwitz clear-sky GHI (W/m^2) from zenith angle in degrees; 0 at or below the horizon."""
    z = np.asarray(zenith, dtype=np.float64)
    cosz = np.cos(np.radians(z))
    day = z < 90.0
    safe = np.where(day & (cosz > 0), cosz, 1.0)
    ghi = np.where(day & (cosz > 0), HAURWITZ_SCALE * safe * np.exp(-HAURWITZ_EXTINCTION / safe), 0.0)
    return float(ghi) if ghi.ndim == 0 else ghi


def clear_sky_ghi(site: SiteConfig, t):
    return haurwitz_ghi(solar_zenith(site, t))


def local_date(site: SiteConfig, t: dt.datetime) -> dt.date:
    return t.astimezone(site.tz).date()


def _day_minutes(site: SiteConfig, day: dt.date, step_s: float) -> np.ndarray:
    start = dt.datetime(day.year, day.month, day.day, tzinfo=site.tz).timestamp()
    return start + np.arange(0.0, 86400.0, step_s)


@lru_cache(maxsize=4096)
def _day_max_cached(site: SiteConfig, day: dt.date, step_s: float) -> float:
    ghi = haurwitz_ghi(solar_zenith(site, _day_minutes(site, day, step_s)))
    return float(np.max(ghi))


def day_max_clear_sky(site: SiteConfig, day: dt.date, step_s: float = 60.0) -> float:
    """Maximum clear-sky GHI over the local civil day, scanned at ``step_s`` seconds.

    Raises :class:`PolarNightError` when the sun never rises.
    """
    peak = _day_max_cached(site, day, float(step_s))
    if peak <= 0.0:
        raise PolarNightError(f"no clear-sky irradiance on {day} at latitude {site.latitude}")
    return peak


def normalize_ghi(y, day_max):
    """Divide by the day's clear-sky maximum. Values above 1 are kept."""
    if np.any(np.asarray(day_max) <= 0):
        raise ValueError("day_max must be positive")
    return np.asarray(y, dtype=np.float64) / day_max if np.ndim(y) else float(y) / float(day_max)


def denormalize_ghi(y_star, day_max):
    if np.any(np.asarray(day_max) <= 0):
        raise ValueError("day_max must be positive")
    return np.asarray(y_star, dtype=np.float64) * day_max if np.ndim(y_star) else float(y_star) * float(day_max)


@dataclass(frozen=True)
class SolarContext:
    timestamp: dt.datetime
    zenith: float
    clear_sky_ghi: float
    day_max_clear_sky: float


def solar_context(site: SiteConfig, t: dt.datetime) -> SolarContext:
    z = solar_zenith(site, t)
    return SolarContext(t, z, haurwitz_ghi(z), day_max_clear_sky(site, local_date(site, t)))


class PersistenceForecast(NamedTuple):
    value: float
    degenerate: bool


def smart_persistence(y_t, ctx_t: SolarContext, ctx_h: SolarContext, eps: float = DEGENERATE_CLEAR_SKY):
    """Carry the clear-sky index at ``t`` forward to ``t + h``.

    When the clear-sky GHI at ``t`` is at or below ``eps`` the ratio is
    undefined; ``y_t`` is returned unchanged and the forecast is marked
    degenerate.
    """
    c_t = ctx_t.clear_sky_ghi
    if c_t <= eps:
        return PersistenceForecast(float(y_t), True)
    return PersistenceForecast(max(ctx_h.clear_sky_ghi * float(y_t) / c_t, 0.0), False)
