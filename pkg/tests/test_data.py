import datetime as dt

import numpy as np
import pytest

from solarsmt import data as D
from solarsmt.pnm import ImageFormatError, load_image, read_ppm, resize_bilinear, write_pgm, write_ppm
from solarsmt.solar import SiteConfig, haurwitz_ghi, solar_zenith
from solarsmt.synthetic import SynthConfig, generate

SITE = SiteConfig(46.52, 6.57, 400.0, 60)
HEADER = "timestamp,image_path,ghi\n"


@pytest.fixture(scope="module")
def clear30(tmp_path_factory):
    out = tmp_path_factory.mktemp("clear30")
    generate(SynthConfig(SITE, dt.date(2023, 3, 1), days=30, image_size=(4, 8)), out)
    return out


def write(tmp_path, body, name="m.csv"):
    p = tmp_path / name
    p.write_text(HEADER + body)
    return p


# --- manifest -------------------------------------------------------------


def test_empty_manifest(tmp_path):
    assert D.parse_manifest(write(tmp_path, "")) == []


def test_manifest_round_trip(tmp_path):
    body = "2023-03-01T10:00:00+01:00,images/a.ppm,512.5\n2023-03-01T10:10:00+01:00,,\n2023-03-01T10:20:00Z,,0.0\n"
    rows = D.parse_manifest(write(tmp_path, body))
    assert rows[0].ghi == 512.5 and rows[1].ghi is None and rows[1].image_path == ""
    assert rows[2].timestamp.utcoffset() == dt.timedelta(0)
    D.write_manifest(tmp_path / "b.csv", rows)
    assert D.parse_manifest(tmp_path / "b.csv") == rows


@pytest.mark.parametrize(
    "body, pattern",
    [
        ("2023-03-01T10:10:00+01:00,,1\n2023-03-01T10:00:00+01:00,,1\n", r":3:1: .*not after"),
        ("2023-03-01T10:05:00+01:00,,1\n", r":2:1: .*10-minute grid"),
        ("2023-03-01T10:00:00+01:00,,abc\n", r":2:3: bad ghi"),
        ("2023-03-01T10:00:00+01:00,,-4\n", r":2:3: "),
        ("2023-03-01T10:00:00,,1\n", r":2:1: bad timestamp"),
        ("2023-03-01T10:00:00+01:00,1\n", r":2: expected 3 columns"),
    ],
)
def test_manifest_errors_name_line_and_column(tmp_path, body, pattern):
    with pytest.raises(D.ManifestError, match=pattern):
        D.parse_manifest(write(tmp_path, body))


def test_manifest_bad_header(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("time,img,ghi\n")
    with pytest.raises(D.ManifestError, match=":1:"):
        D.parse_manifest(p)


def test_manifest_unreadable(tmp_path):
    with pytest.raises(OSError):
        D.parse_manifest(tmp_path / "missing.csv")


def test_twelve_day_row_count(tmp_path):
    generate(SynthConfig(SITE, dt.date(2023, 3, 28), days=12, image_size=(4, 8)), tmp_path)
    rows = D.parse_manifest(tmp_path / "manifest.csv")
    assert len(rows) == 12 * 144
    secs = np.array([r.timestamp.timestamp() for r in rows])
    daytime = int(np.sum(haurwitz_ghi(solar_zenith(SITE, secs)) > 1.0))
    assert sum(1 for r in rows if r.image_path) == daytime


# --- images ---------------------------------------------------------------


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)


def test_ppm_header_comments(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# made by hand\n2 1\n# depth\n255\n" + bytes([1, 2, 3, 4, 5, 6]))
    assert read_ppm(p).tolist() == [[[1, 2, 3], [4, 5, 6]]]


def test_ppm_errors(tmp_path):
    p = tmp_path / "bad.ppm"
    p.write_bytes(b"P5\n1 1\n255\n\0")
    with pytest.raises(ImageFormatError, match="magic"):
        read_ppm(p)
    p.write_bytes(b"P6\n4 4\n255\n" + bytes(10))
    with pytest.raises(ImageFormatError, match="truncated"):
        read_ppm(p)
    p.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
    with pytest.raises(ImageFormatError):
        read_ppm(p)


def test_load_same_size_is_identity(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, (224, 224, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(load_image(tmp_path / "a.ppm"), img / 255.0)


def test_resize_constant(tmp_path):
    img = np.full((37, 91, 3), 77, dtype=np.uint8)
    write_ppm(tmp_path / "k.ppm", img)
    out = load_image(tmp_path / "k.ppm", (224, 224))
    assert out.shape == (224, 224, 3) and np.all(out == 77 / 255.0)


def test_resize_half_is_block_mean():
    rng = np.random.default_rng(2)
    checker = (np.indices((448, 448)).sum(axis=0) % 2 * 255).astype(float)
    img = np.stack([checker, rng.integers(0, 256, (448, 448)), 255 - checker], axis=-1)
    out = resize_bilinear(img, 224, 224)
    blocks = img.reshape(224, 2, 224, 2, 3).mean(axis=(1, 3))
    assert np.abs(out - blocks).max() <= 1.0


def test_pgm_writer(tmp_path):
    write_pgm(tmp_path / "g.pgm", np.array([[0, 255]], dtype=np.uint8))
    assert (tmp_path / "g.pgm").read_bytes() == b"P5\n2 1\n255\n\x00\xff"


# --- samples --------------------------------------------------------------


def brute_force_count(rows, site, horizon_slots=12, window=144):
    present = {r.slot: r for r in rows}
    night = lambda s: haurwitz_ghi(solar_zenith(site, s * 600.0)) <= 1.0
    count = 0
    for r in rows:
        s = r.slot
        if night(s) or not r.image_path or r.ghi is None:
            continue
        tgt = present.get(s + horizon_slots)
        if tgt is None or tgt.ghi is None or night(s + horizon_slots):
            continue
        if all(night(u) or u in present for u in range(s - window + 1, s + 1)):
            count += 1
    return count


def test_sample_count_matches_closed_form(clear30):
    rows = D.parse_manifest(clear30 / "manifest.csv")
    report = D.BuildReport()
    samples = D.build_samples(rows, SITE, load_images=False, report=report)
    assert len(samples) == brute_force_count(rows, SITE)
    assert report.kept == len(samples)
    assert report.candidates == report.kept + sum(report.dropped.values())


def test_clear_day_window_profile(clear30):
    rows = D.parse_manifest(clear30 / "manifest.csv")
    samples = D.build_samples(rows, SITE, load_images=False)
    s = [x for x in samples if x.local_date == dt.date(2023, 3, 10)][-1]
    assert s.ghi_window.shape == (144,)
    assert abs(s.ghi_window.max() - 1.0) < 2e-3  # the daily peak falls within 10 minutes of a slot
    t0 = s.t.timestamp() - 143 * 600
    clear = haurwitz_ghi(solar_zenith(SITE, t0 + 600.0 * np.arange(144)))
    expected = np.where(clear > 1.0, clear / s.window_day_max, 0.0)
    assert np.allclose(s.ghi_window, expected, rtol=0, atol=1e-12)


def test_window_invariants(clear30):
    rows = D.parse_manifest(clear30 / "manifest.csv")
    by_slot = {r.slot: r for r in rows}
    samples = D.build_samples(rows, SITE, load_images=False)
    for s in samples[::37]:
        assert s.ghi_window.shape == (144,)
        assert np.all(np.isfinite(s.ghi_window)) and s.ghi_window.min() >= 0 and s.ghi_window.max() <= 1.2
        end = int(s.t.timestamp()) // 600
        for j, slot in enumerate(range(end - 143, end + 1)):
            r = by_slot.get(slot)
            if r is not None and s.ghi_window[j] > 0:
                assert abs(s.ghi_window[j] * s.window_day_max[j] - r.ghi) < 1e-6
        assert s.clear_sky_target > 1.0
        assert abs(s.target * s.day_max_target - s.target_ghi) < 1e-9


def test_window_crossing_midnight_uses_each_days_max(clear30):
    rows = D.parse_manifest(clear30 / "manifest.csv")
    samples = D.build_samples(rows, SITE, load_images=False)
    s = [x for x in samples if x.local_date == dt.date(2023, 3, 20)][0]
    assert len(set(s.window_day_max.tolist())) == 2
    assert s.window_day_max[-1] == s.day_max_t


def gappy_rows(gap_len):
    start = dt.datetime(2023, 6, 1, tzinfo=SITE.tz)
    out = []
    for i in range(2 * 144):
        t = start + dt.timedelta(minutes=10 * i)
        c = haurwitz_ghi(solar_zenith(SITE, t.timestamp()))
        out.append(D.ManifestRow(t, "x.ppm" if c > 1 else "", 0.5 * c))
    # knock out a daytime run on day 2, from 10:00 local
    k0 = 144 + 60
    for k in range(k0, k0 + gap_len):
        out[k] = D.ManifestRow(out[k].timestamp, out[k].image_path, None)
    return out, out[k0 + 10].timestamp


def test_short_gap_is_interpolated():
    rows, probe = gappy_rows(3)
    samples = D.build_samples(rows, SITE, load_images=False)
    s = next(x for x in samples if x.t == probe.astimezone(dt.timezone.utc))
    w = s.ghi_window[-11:-8]  # the gap starts 10 slots before the probe
    left, right = s.ghi_window[-12], s.ghi_window[-8]
    assert np.allclose(w, left + (right - left) * np.array([1, 2, 3]) / 4, atol=1e-15)


def test_long_gap_drops_sample():
    rows, probe = gappy_rows(4)
    report = D.BuildReport()
    samples = D.build_samples(rows, SITE, load_images=False, report=report)
    assert all(x.t != probe.astimezone(dt.timezone.utc) for x in samples)
    assert report.dropped.get("window_gap", 0) > 0


def test_unnormalized_scale(clear30):
    rows = D.parse_manifest(clear30 / "manifest.csv")
    s = D.build_samples(rows, SITE, load_images=False, normalization="none")[100]
    assert np.all(s.window_day_max == D.RAW_GHI_SCALE) and s.day_max_target == D.RAW_GHI_SCALE


def test_images_loaded_and_frames(clear30):
    rows = D.parse_manifest(clear30 / "manifest.csv")[: 3 * 144]
    by_slot = {r.slot: r for r in rows}
    report = D.BuildReport()
    samples = D.build_samples(rows, SITE, image_size=(8, 16), frames=3, base_dir=clear30, report=report)
    s = samples[5]
    assert s.image.shape == (3, 8, 16, 3) and s.image.dtype == np.float32
    assert 0.0 <= s.image.min() and s.image.max() <= 1.0
    for x in samples:
        slot = int(x.t.timestamp()) // 600
        assert by_slot[slot - 1].image_path and by_slot[slot - 2].image_path
    # the first two daytime slots of each day lack earlier frames
    assert report.dropped["missing_image"] >= 2
    oldest = load_image(clear30 / by_slot[int(s.t.timestamp()) // 600 - 2].image_path, (8, 16))
    assert np.array_equal(s.image[0], oldest.astype(np.float32))


# --- splits ---------------------------------------------------------------


def fake(day, hour=12):
    t = dt.datetime(day.year, day.month, day.day, hour, tzinfo=SITE.tz).astimezone(dt.timezone.utc)
    return D.SampleRecord(t, day, None, np.zeros(144), np.ones(144), 0.0, 1.0, 1.0, 0.0, 0.0, 2.0, 2.0)


def days(start, n):
    return [start + dt.timedelta(days=i) for i in range(n)]


def test_split_partition_and_order():
    samples = [fake(d, h) for d in days(dt.date(2023, 3, 1), 30) for h in (9, 12, 15)]
    sp = D.split_chronological(samples, dt.date(2023, 3, 20), dt.date(2023, 3, 25))
    assert len(sp.train) + len(sp.val) + len(sp.test) == len(samples)
    assert max(s.t for s in sp.train) < min(s.t for s in sp.val)
    assert max(s.t for s in sp.val) < min(s.t for s in sp.test)
    assert len(sp.val) == 15


def test_split_all_before_train_end():
    samples = [fake(d) for d in days(dt.date(2023, 3, 1), 5)]
    sp = D.split_chronological(samples, dt.date(2023, 4, 1), dt.date(2023, 4, 5))
    assert len(sp.train) == 5 and sp.val == [] and sp.test == []


def test_split_holdout_removes_exact_dates():
    samples = [fake(d) for d in days(dt.date(2023, 3, 1), 60)]
    hold = (dt.date(2023, 3, 28), dt.date(2023, 4, 11))
    sp = D.split_chronological(samples, dt.date(2023, 4, 20), dt.date(2023, 4, 25), hold)
    assert sorted({s.local_date for s in sp.held_out}) == days(dt.date(2023, 3, 28), 15)
    assert not any(hold[0] <= s.local_date <= hold[1] for s in sp.train)
    assert len(sp.train) + len(sp.held_out) == len(days(dt.date(2023, 3, 1), 50))


def test_split_errors():
    samples = [fake(d) for d in days(dt.date(2023, 3, 1), 10)]
    with pytest.raises(D.SplitError):
        D.split_chronological(samples, dt.date(2023, 3, 5), dt.date(2023, 3, 5))
    with pytest.raises(D.SplitError):
        D.split_chronological(samples, dt.date(2023, 2, 1), dt.date(2023, 3, 5))


def test_stack_samples():
    samples = [fake(d) for d in days(dt.date(2023, 3, 1), 4)]
    images, windows, targets = D.stack_samples(samples)
    assert images is None and windows.shape == (4, 1, 144) and targets.shape == (4,)
