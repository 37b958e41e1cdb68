"""Manifest ingestion, 24-hour window assembly, normalization and chronological splits."""

from __future__ import annotations

import csv
import datetime as dt
import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .pnm import load_image
from .solar import DEGENERATE_CLEAR_SKY, PolarNightError, SiteConfig, day_max_clear_sky, haurwitz_ghi, solar_zenith

SLOT_SECONDS = 600
MANIFEST_HEADER = ["timestamp", "image_path", "ghi"]
# fixed divisor used when daily-max normalization is switched off
RAW_GHI_SCALE = 1000.0
NORMALIZATIONS = ("daily_max", "none")


class ManifestError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRow:
    timestamp: dt.datetime
    image_path: str  # empty when no image
    ghi: float | None  # None when missing

    @property
    def slot(self) -> int:
        return int(self.timestamp.timestamp()) // SLOT_SECONDS


def parse_timestamp(text: str) -> dt.datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    t = dt.datetime.fromisoformat(text)
    if t.tzinfo is None:
        raise ValueError("timestamp lacks a UTC offset")
    return t


def format_timestamp(t: dt.datetime) -> str:
    return t.isoformat(timespec="seconds")


def parse_manifest(path) -> list[ManifestRow]:
    """Read ``timestamp,image_path,ghi`` rows, validating order and 10-minute grid alignment."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc.strerror}") from exc
    rows: list[ManifestRow] = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ManifestError(f"{path}: empty file (no header)")
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(f"{path}:1: header must be {','.join(MANIFEST_HEADER)}")
        prev = None
        for lineno, rec in enumerate(reader, 2):
            if not rec:
                continue
            if len(rec) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 3 columns, got {len(rec)}")
            try:
                t = parse_timestamp(rec[0])
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}:1: bad timestamp {rec[0]!r} ({exc})") from None
            ts = t.timestamp()
            if ts % SLOT_SECONDS:
                raise ManifestError(f"{path}:{lineno}:1: {rec[0]} is not on the 10-minute grid")
            if prev is not None and ts <= prev:
                raise ManifestError(f"{path}:{lineno}:1: timestamp {rec[0]} not after previous row")
            prev = ts
            ghi_txt = rec[2].strip()
            ghi = None
            if ghi_txt:
                try:
                    ghi = float(ghi_txt)
                except ValueError:
                    raise ManifestError(f"{path}:{lineno}:3: bad ghi {ghi_txt!r}") from None
                if not math.isfinite(ghi) or ghi < 0:
                    raise ManifestError(f"{path}:{lineno}:3: ghi must be finite and >= 0")
            rows.append(ManifestRow(t, rec[1].strip(), ghi))
    return rows


def write_manifest(path, rows: Sequence[ManifestRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in rows:
            w.writerow([format_timestamp(r.timestamp), r.image_path, "" if r.ghi is None else repr(float(r.ghi))])


# ---------------------------------------------------------------------------


@dataclass
class SampleRecord:
    t: dt.datetime
    local_date: dt.date
    image: np.ndarray | None  # (F, H, W, C) in [0, 1]
    ghi_window: np.ndarray  # (S,) normalized, oldest first
    window_day_max: np.ndarray  # (S,) divisor used for each window value
    target: float  # normalized GHI at t + h
    day_max_t: float
    day_max_target: float
    ghi_t: float  # W/m^2
    target_ghi: float  # W/m^2
    clear_sky_t: float
    clear_sky_target: float
    horizon_min: int = 120


@dataclass
class BuildReport:
    candidates: int = 0
    kept: int = 0
    dropped: dict = field(default_factory=dict)

    def drop(self, reason: str) -> None:
        self.dropped[reason] = self.dropped.get(reason, 0) + 1


def _fill_short_gaps(values: np.ndarray, max_gap: int) -> tuple[np.ndarray, np.ndarray]:
    """Linearly fill NaN runs of at most ``max_gap`` bounded on both sides.

    Returns (filled values, mask of slots that remain unusable).
    """
    out = values.copy()
    bad = np.isnan(values)
    n = len(values)
    i = 0
    while i < n:
        if not bad[i]:
            i += 1
            continue
        j = i
        while j < n and bad[j]:
            j += 1
        if i > 0 and j < n and j - i <= max_gap:
            left, right = values[i - 1], values[j]
            steps = np.arange(1, j - i + 1) / (j - i + 1)
            out[i:j] = left + (right - left) * steps
            bad[i:j] = False
        i = j
    return out, bad


def build_samples(
    rows: Sequence[ManifestRow],
    site: SiteConfig,
    horizon_min: int = 120,
    window_len: int = 144,
    *,
    image_size: tuple[int, int] = (224, 224),
    frames: int = 1,
    max_gap: int = 3,
    normalization: str = "daily_max",
    base_dir=None,
    load_images: bool = True,
    report: BuildReport | None = None,
) -> list[SampleRecord]:
    """Assemble model samples from grid-aligned manifest rows.

    Each sample pairs the image at ``t`` (plus ``frames - 1`` earlier frames)
    with the wall-clock GHI window of ``window_len`` slots ending at ``t`` and
    the GHI at ``t + horizon_min``. Night slots are zero; daytime gaps of at
    most ``max_gap`` slots are interpolated, longer ones drop the sample.
    """
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
    if horizon_min % 10 or horizon_min <= 0:
        raise ValueError("horizon_min must be a positive multiple of 10")
    report = report if report is not None else BuildReport()
    if not rows:
        return []
    h_slots = horizon_min // 10
    first, last = rows[0].slot, rows[-1].slot
    origin = first - window_len  # one anchor slot before the earliest possible window
    n = last - origin + 1
    slots = origin + np.arange(n)
    secs = slots.astype(np.float64) * SLOT_SECONDS
    clear = haurwitz_ghi(solar_zenith(site, secs))
    day_idx = (slots * SLOT_SECONDS + site.utc_offset * 60) // 86400
    divisor = np.full(n, RAW_GHI_SCALE)
    if normalization == "daily_max":
        for d in np.unique(day_idx):
            date = dt.date(1970, 1, 1) + dt.timedelta(days=int(d))
            try:
                divisor[day_idx == d] = day_max_clear_sky(site, date)
            except PolarNightError:
                pass  # every slot of such a day is night
    night = clear <= DEGENERATE_CLEAR_SKY

    raw = np.full(n, np.nan)
    by_slot: dict[int, ManifestRow] = {}
    for r in rows:
        k = r.slot - origin
        by_slot[r.slot] = r
        if r.ghi is not None:
            raw[k] = r.ghi
    norm = raw / divisor
    norm[night] = 0.0
    filled, unusable = _fill_short_gaps(norm, max_gap)

    base_dir = base_dir or "."
    cache: dict[str, np.ndarray] = {}

    def image_at(slot: int):
        row = by_slot.get(slot)
        if row is None or not row.image_path:
            return None
        if row.image_path not in cache:
            cache[row.image_path] = load_image(os.path.join(base_dir, row.image_path), image_size).astype(np.float32)
        return cache[row.image_path]

    samples: list[SampleRecord] = []
    for r in rows:
        k = r.slot - origin
        if night[k]:
            continue
        report.candidates += 1
        kt = k + h_slots
        if kt >= n or night[kt]:
            report.drop("target_not_daytime_or_out_of_range")
            continue
        target_row = by_slot.get(r.slot + h_slots)
        if target_row is None or target_row.ghi is None:
            report.drop("missing_target")
            continue
        if r.ghi is None:
            report.drop("missing_ghi_at_t")
            continue
        lo = k - window_len + 1
        if unusable[lo : k + 1].any():
            report.drop("window_gap")
            continue
        if load_images:
            imgs = [image_at(r.slot - f) for f in range(frames - 1, -1, -1)]
            if any(im is None for im in imgs):
                report.drop("missing_image")
                continue
            image = np.stack(imgs)
        else:
            if not r.image_path:
                report.drop("missing_image")
                continue
            image = None
        t = r.timestamp.astimezone(dt.timezone.utc)
        samples.append(
            SampleRecord(
                t=t,
                local_date=r.timestamp.astimezone(site.tz).date(),
                image=image,
                ghi_window=filled[lo : k + 1].copy(),
                window_day_max=divisor[lo : k + 1].copy(),
                target=float(target_row.ghi / divisor[kt]),
                day_max_t=float(divisor[k]),
                day_max_target=float(divisor[kt]),
                ghi_t=float(r.ghi),
                target_ghi=float(target_row.ghi),
                clear_sky_t=float(clear[k]),
                clear_sky_target=float(clear[kt]),
                horizon_min=horizon_min,
            )
        )
        report.kept += 1
    return samples


class Splits(NamedTuple):
    train: list
    val: list
    test: list
    held_out: list


def split_chronological(
    samples: Sequence[SampleRecord],
    train_end: dt.date,
    val_end: dt.date,
    holdout: tuple[dt.date, dt.date] | None = None,
) -> Splits:
    """Split by local date: train < train_end <= val < val_end <= test.

    Samples whose date falls inside the inclusive ``holdout`` range are removed
    from the training split and returned separately.
    """
    if train_end >= val_end:
        raise SplitError(f"train_end {train_end} must precede val_end {val_end}")
    if samples:
        first = min(s.local_date for s in samples)
        if train_end <= first:
            raise SplitError(f"train_end {train_end} leaves no training data (data starts {first})")
    train, val, test, held = [], [], [], []
    for s in sorted(samples, key=lambda s: s.t):
        d = s.local_date
        if d < train_end:
            if holdout is not None and holdout[0] <= d <= holdout[1]:
                held.append(s)
            else:
                train.append(s)
        elif d < val_end:
            val.append(s)
        else:
            test.append(s)
    return Splits(train, val, test, held)


def stack_samples(samples: Sequence[SampleRecord]) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Return (images (B,F,H,W,C) or None, windows (B,1,S), targets (B,))."""
    windows = np.stack([s.ghi_window for s in samples])[:, None, :]
    targets = np.array([s.target for s in samples])
    images = None
    if samples and samples[0].image is not None:
        images = np.stack([s.image for s in samples])
    return images, windows, targets
