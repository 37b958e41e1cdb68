"""Export rollout heatmaps for clear and occluded frames of a synthetic advecting run.

Usage: python3 docs/make_artifacts.py [workdir]

Generates data, trains a desk-scale model through the CLI, then runs ``attn``
on a few midday samples of the test days. Heatmaps and a summary table land
in docs/artifacts/.
"""

import csv
import os
import shutil
import sys

import numpy as np

from solarsmt import cli
from solarsmt.data import parse_timestamp
from solarsmt.model import SmtConfig, patch_regions
from solarsmt.solar import SiteConfig, solar_azimuth, solar_zenith
from solarsmt.synthetic import sun_pixel

HERE = os.path.dirname(os.path.abspath(__file__))
OUT = os.path.join(HERE, "artifacts")
SIZE = (32, 56)


def run(*argv):
    code = cli.main([str(a) for a in argv])
    if code:
        sys.exit(code)


def pick(truth_rows, days, want_clear, n=3):
    """Midday slots (11:00-14:00 local) on ``days`` whose cloud index is clearly high or low."""
    out = []
    for r in truth_rows:
        ts = parse_timestamp(r["timestamp"])
        if ts.date() not in days or not 11 <= ts.hour < 14 or ts.minute % 30:
            continue
        k = float(r["k"])
        if (want_clear and k >= 0.999) or (not want_clear and k <= 0.5):
            out.append((r["timestamp"], k))
    step = max(1, len(out) // n)
    return out[::step][:n]


def sun_patches(site, when, cfg):
    """Indices of the 3x3 block of patches centred on the patch holding the sun."""
    secs = when.timestamp()
    x, y = sun_pixel(site, solar_zenith(site, secs), solar_azimuth(site, secs), SIZE)
    regions = patch_regions(cfg)
    hit = next(i for i, (rs, cs) in enumerate(regions) if rs.start <= y < rs.stop and cs.start <= x < cs.stop)
    rs0, cs0 = regions[hit]
    ph, pw = rs0.stop - rs0.start, cs0.stop - cs0.start
    return [
        i
        for i, (rs, cs) in enumerate(regions)
        if abs(rs.start - rs0.start) <= ph and abs(cs.start - cs0.start) <= pw
    ]


def main(workdir="/tmp/solarsmt_artifacts"):
    os.makedirs(workdir, exist_ok=True)
    cfg_path = os.path.join(workdir, "synth.cfg")
    with open(cfg_path, "w") as fh:
        fh.write("latitude = 46.52\nlongitude = 6.57\naltitude_m = 400\nutc_offset_min = 60\n")
        fh.write(f"image_size = {SIZE[0]},{SIZE[1]}\nmax_clouds = 4\n")
    data = os.path.join(workdir, "data")
    run("synth", "--config", cfg_path, "--out", data, "--days", 60, "--seed", 1, "--regime", "advecting", "--start", "2023-03-01")
    ckpt_dir = os.path.join(workdir, "run")
    run("train", "--config", "desk", "--epochs", 40, "--manifest", os.path.join(data, "manifest.csv"), "--out", ckpt_dir)

    site = SiteConfig.from_file(os.path.join(data, "site.cfg"))
    with open(os.path.join(data, "truth.csv")) as fh:
        truth = list(csv.DictReader(fh))
    all_days = sorted({parse_timestamp(r["timestamp"]).date() for r in truth})
    test_days = set(all_days[-8:])
    cfg = SmtConfig(image_hwc=(*SIZE, 3), patch_size=(8, 8), embed_dim=32, layers=2, heads=2)

    shutil.rmtree(OUT, ignore_errors=True)
    os.makedirs(OUT)
    summary = []
    for condition, chosen in (("clear", pick(truth, test_days, True)), ("occluded", pick(truth, test_days, False))):
        for stamp, k in chosen:
            name = f"{condition}_{stamp[:16].replace(':', '').replace('-', '')}"
            dest = os.path.join(OUT, name)
            run("attn", "--ckpt", os.path.join(ckpt_dir, "checkpoint.smt"), "--manifest", os.path.join(data, "manifest.csv"),
                "--timestamp", stamp, "--out", dest)
            frame = parse_timestamp(stamp).strftime("%Y%m%dT%H%M")
            src = next(f for f in os.listdir(os.path.join(data, "images")) if frame in f)
            shutil.copy(os.path.join(data, "images", src), os.path.join(dest, "frame.ppm"))
            with open(os.path.join(dest, "rollout.csv")) as fh:
                w = np.array([float(r["weight"]) for r in csv.DictReader(fh)])
            near = sun_patches(site, parse_timestamp(stamp), cfg)
            image_mass = w[: cfg.n_image_tokens].sum()
            summary.append({
                "sample": name,
                "condition": condition,
                "k": k,
                "ts_weight": round(float(w[-1]), 4),
                "sun_block_share_of_image_mass": round(float(w[near].sum() / image_mass), 4),
                "sun_block_area_share": round(len(near) / cfg.n_image_tokens, 4),
            })
    with open(os.path.join(OUT, "summary.csv"), "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(summary[0]), lineterminator="\n")
        wr.writeheader()
        wr.writerows(summary)
    for row in summary:
        print(row)


if __name__ == "__main__":
    main(*sys.argv[1:])
