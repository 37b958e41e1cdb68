"""Deterministic synthetic panoramas + GHI series on a 10-minute grid.

GHI(t) = k(t) * clear_sky(t). The cloud regime decides k:

* ``clear``: k = 1, no clouds drawn.
* ``persistent``: k is a constant ratio, the sky is drawn with a uniform veil.
* ``advecting``: elliptical clouds drift horizontally at a fixed speed plus a
  seeded random walk; k = 1 - CLOUD_ATTENUATION * (fraction of the sun disk
  covered). Clouds upwind of the sun show up in the image well before they
  reach it, so the image carries information about GHI hours ahead that the
  GHI history does not.
"""

from __future__ import annotations

import csv
import datetime as dt
import os
from dataclasses import dataclass

import numpy as np

from .data import ManifestRow, format_timestamp, write_manifest
from .pnm import write_ppm
from .solar import DEGENERATE_CLEAR_SKY, SiteConfig, haurwitz_ghi, solar_azimuth, solar_zenith

REGIMES = ("clear", "persistent", "advecting")
CLOUD_ATTENUATION = 0.75
HORIZON_FRACTION = 0.75  # share of image height above the horizon line
SLOTS_PER_DAY = 144


@dataclass(frozen=True)
class SynthConfig:
    site: SiteConfig
    start: dt.date
    days: int = 5
    seed: int = 0
    cloud_regime: str = "clear"
    k: float = 0.8  # persistent regime ratio
    speed: float = 1.0  # px per 10-minute step, advecting regime
    direction: int = -1  # +1 moves clouds toward larger azimuth
    image_size: tuple[int, int] = (64, 112)  # (H, W)
    max_clouds: int = 6

    def __post_init__(self):
        if self.days < 1:
            raise ValueError("days must be >= 1")
        if not 0.0 <= self.k <= 1.0:
            raise ValueError("k must lie in [0, 1]")
        if self.cloud_regime not in REGIMES:
            raise ValueError(f"cloud_regime must be one of {REGIMES}")
        if self.direction not in (-1, 1):
            raise ValueError("direction must be +1 or -1")


@dataclass
class Cloud:
    x0: float
    y: float
    rx: float
    ry: float
    walk: np.ndarray  # (SLOTS_PER_DAY, 2) cumulative offsets


def sun_pixel(site: SiteConfig, zenith, azimuth, size: tuple[int, int]):
    """Map solar angles to panorama pixel coordinates (x, y).

    x is affine in azimuth (the panorama spans 360 degrees, centred on south in
    the northern hemisphere); y is affine in elevation above the horizon line.
    """
    h, w = size
    ref = 0.0 if site.latitude >= 0 else 180.0
    x = ((np.asarray(azimuth) - ref) % 360.0) / 360.0 * w
    horizon = HORIZON_FRACTION * h
    elev = 90.0 - np.asarray(zenith)
    y = horizon - elev / 90.0 * horizon
    return x, y


def _disk_offsets(radius: float) -> np.ndarray:
    g = np.linspace(-radius, radius, 11)
    xx, yy = np.meshgrid(g, g)
    inside = xx**2 + yy**2 <= radius**2
    return np.stack([xx[inside], yy[inside]], axis=1)


def _cloud_mask(xs, ys, cloud: Cloud, cx: float, cy: float, width: int):
    dx = (xs - cx + width / 2) % width - width / 2  # periodic panorama
    return (dx / cloud.rx) ** 2 + ((ys - cy) / cloud.ry) ** 2 <= 1.0


class _Renderer:
    def __init__(self, cfg: SynthConfig):
        h, w = cfg.image_size
        self.h, self.w = h, w
        self.horizon = HORIZON_FRACTION * h
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        self.xs, self.ys = xx + 0.5, yy + 0.5
        frac = np.clip(self.ys / self.horizon, 0, 1)[..., None]
        top = np.array([40.0, 90.0, 190.0])
        low = np.array([150.0, 190.0, 235.0])
        self.sky = top * (1 - frac) + low * frac
        self.ground = self.ys >= self.horizon
        # static scenery: darker band of "buildings" with a fixed skyline
        skyline = self.horizon - (np.sin(np.arange(w) * 0.7) > 0.3) * (h * 0.06)
        self.scenery = self.ys >= skyline[None, :]
        self.sun_radius = max(1.5, 0.03 * w)
        self.sun_offsets = _disk_offsets(self.sun_radius)

    def render(self, daylight: float, sun_xy, clouds_xy, clouds: list[Cloud], veil: float) -> np.ndarray:
        img = self.sky * (0.35 + 0.65 * daylight)
        sx, sy = sun_xy
        dx = (self.xs - sx + self.w / 2) % self.w - self.w / 2
        disk = dx**2 + (self.ys - sy) ** 2 <= self.sun_radius**2
        img = np.where(disk[..., None], np.array([255.0, 250.0, 210.0]), img)
        for cloud, (cx, cy) in zip(clouds, clouds_xy):
            m = _cloud_mask(self.xs, self.ys, cloud, cx, cy, self.w)
            img = np.where(m[..., None], np.array([235.0, 235.0, 240.0]) * (0.4 + 0.6 * daylight), img)
        if veil > 0:
            img = img * (1 - veil) + 200.0 * veil
        ground_col = np.array([60.0, 85.0, 45.0]) * (0.3 + 0.7 * daylight)
        img = np.where(self.ground[..., None], ground_col, img)
        img = np.where((self.scenery & ~self.ground)[..., None], np.array([70.0, 60.0, 60.0]) * (0.3 + 0.7 * daylight), img)
        return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _day_clouds(rng: np.random.Generator, cfg: SynthConfig) -> list[Cloud]:
    h, w = cfg.image_size
    horizon = HORIZON_FRACTION * h
    lam = rng.uniform(0.0, cfg.max_clouds)
    n = min(int(rng.poisson(lam)), cfg.max_clouds)
    clouds = []
    for _ in range(n):
        walk = np.cumsum(rng.normal(0.0, 0.15, size=(SLOTS_PER_DAY, 2)), axis=0)
        clouds.append(
            Cloud(
                x0=rng.uniform(0, w),
                y=rng.uniform(0.15 * horizon, 0.85 * horizon),
                rx=rng.uniform(0.04, 0.12) * w,
                ry=rng.uniform(0.2, 0.45) * horizon,
                walk=walk,
            )
        )
    return clouds


def generate(cfg: SynthConfig, out_dir) -> dict:
    """Write ``manifest.csv``, ``truth.csv``, ``site.cfg`` and ``images/*.ppm`` under ``out_dir``.

    Returns a summary dict. Output is byte-identical for identical configs.
    """
    try:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc.strerror}") from exc
    site = cfg.site
    rng = np.random.default_rng(cfg.seed)
    renderer = _Renderer(cfg)
    rows: list[ManifestRow] = []
    truth: list[tuple[str, float, float]] = []
    n_images = 0
    for d in range(cfg.days):
        day = cfg.start + dt.timedelta(days=d)
        start = dt.datetime(day.year, day.month, day.day, tzinfo=site.tz)
        times = [start + dt.timedelta(minutes=10 * i) for i in range(SLOTS_PER_DAY)]
        secs = np.array([t.timestamp() for t in times])
        zen = solar_zenith(site, secs)
        azi = solar_azimuth(site, secs)
        clear = haurwitz_ghi(zen)
        peak = max(float(clear.max()), 1.0)
        sun_x, sun_y = sun_pixel(site, zen, azi, cfg.image_size)
        clouds = _day_clouds(rng, cfg) if cfg.cloud_regime == "advecting" else []
        for i, t in enumerate(times):
            k = cfg.k if cfg.cloud_regime == "persistent" else 1.0
            cxy = []
            for c in clouds:
                cx = (c.x0 + cfg.direction * cfg.speed * i + c.walk[i, 0]) % renderer.w
                cxy.append((cx, c.y + c.walk[i, 1]))
            if clouds:
                pts = renderer.sun_offsets + np.array([sun_x[i], sun_y[i]])
                covered = np.zeros(len(pts), dtype=bool)
                for c, (cx, cy) in zip(clouds, cxy):
                    covered |= _cloud_mask(pts[:, 0], pts[:, 1], c, cx, cy, renderer.w)
                k = 1.0 - CLOUD_ATTENUATION * float(covered.mean())
            ghi = k * float(clear[i])
            image_path = ""
            if clear[i] > DEGENERATE_CLEAR_SKY:
                veil = (1.0 - cfg.k) if cfg.cloud_regime == "persistent" else 0.0
                img = renderer.render(float(clear[i]) / peak, (sun_x[i], sun_y[i]), cxy, clouds, veil)
                image_path = f"images/{t.strftime('%Y%m%dT%H%M')}.ppm"
                write_ppm(os.path.join(out_dir, image_path), img)
                n_images += 1
            rows.append(ManifestRow(t, image_path, ghi))
            truth.append((format_timestamp(t), k, float(clear[i])))
    write_manifest(os.path.join(out_dir, "manifest.csv"), rows)
    with open(os.path.join(out_dir, "truth.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "k", "clear_sky_ghi"])
        for ts, k, c in truth:
            w.writerow([ts, repr(k), repr(c)])
    with open(os.path.join(out_dir, "site.cfg"), "w") as fh:
        fh.write(site.to_text())
    return {"rows": len(rows), "images": n_images, "days": cfg.days}
