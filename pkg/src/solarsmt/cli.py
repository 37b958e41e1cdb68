"""Command-line entry point: synth, train, eval, baseline, predict, attn.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import logging
import os
import sys

import numpy as np

from . import attention, data, metrics, synthetic
from .config import (
    RunConfig,
    load_run_config,
    read_kv,
    resolve_config_path,
    run_config_text,
    site_for_manifest,
)
from .model import SmtModel, model_inputs
from .solar import (
    DEGENERATE_CLEAR_SKY,
    SiteConfig,
    day_max_clear_sky,
    denormalize_ghi,
    haurwitz_ghi,
    local_date,
    smart_persistence,
    solar_context,
    solar_zenith,
)
from .training import (
    load_checkpoint,
    make_dataset,
    predict_dataset,
    evaluate_mse,
    save_checkpoint,
    train,
)

log = logging.getLogger("solarsmt")

CHECKPOINT_NAME = "checkpoint.smt"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared helpers


def _overrides(args) -> dict[str, str]:
    out = {}
    for flag, key in (
        ("seed", "seed"),
        ("pillars", "pillars"),
        ("patch_shape", "patch_shape"),
        ("frames", "frames"),
        ("window_len", "window_len"),
        ("horizon_min", "horizon_min"),
        ("epochs", "epochs"),
        ("normalization", "normalization"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = str(v)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for k, v in out.items():
        log.info("override %s = %s", k, v)
    return out


def _require_file(path: str | None, what: str) -> str:
    if not path:
        raise UsageError(f"{what} is required")
    if not os.path.exists(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _default_bounds(samples) -> tuple[dt.date, dt.date]:
    days = sorted({s.local_date for s in samples})
    if len(days) < 3:
        raise ValueError(f"need at least 3 days of samples for a train/val/test split, got {len(days)}")
    n_train = max(1, int(round(len(days) * 0.7)))
    n_val = max(1, int(round(len(days) * 0.15)))
    n_train = min(n_train, len(days) - 2)
    n_val = min(n_val, len(days) - n_train - 1)
    return days[n_train], days[n_train + n_val]


def _samples(manifest: str, site: SiteConfig, run: RunConfig, load_images=True, rows=None):
    rows = rows if rows is not None else data.parse_manifest(manifest)
    report = data.BuildReport()
    p = run.pipeline
    samples = data.build_samples(
        rows,
        site,
        p.horizon_min,
        p.window_len,
        image_size=run.smt.image_hwc[:2],
        frames=run.smt.frames if run.smt.uses_image else 1,
        max_gap=p.max_gap,
        normalization=p.normalization,
        base_dir=os.path.dirname(os.path.abspath(manifest)),
        load_images=load_images and run.smt.uses_image,
        report=report,
    )
    log.info("samples kept %d of %d candidates; dropped %s", report.kept, report.candidates, dict(report.dropped))
    return samples


def _split(samples, run: RunConfig):
    p = run.pipeline
    train_end, val_end = p.train_end, p.val_end
    if train_end is None or val_end is None:
        dflt = _default_bounds(samples)
        train_end = train_end or dflt[0]
        val_end = val_end or dflt[1]
    return data.split_chronological(samples, train_end, val_end, run.holdout), train_end, val_end


def _run_from_checkpoint(ckpt) -> tuple[RunConfig, SiteConfig]:
    meta = ckpt.meta
    values = {k: str(v) for k, v in meta.get("pipeline", {}).items()}
    run = load_run_config(None, values)
    run.smt = ckpt.smt_config
    run.train = ckpt.train_config
    s = meta.get("site")
    if not s:
        raise ValueError("checkpoint lacks site metadata")
    site = SiteConfig(s["latitude"], s["longitude"], s["altitude"], s["utc_offset"])
    return run, site


def _pipeline_meta(run: RunConfig, site: SiteConfig, train_end, val_end) -> dict:
    p = run.pipeline
    fmt = lambda d: None if d is None else d.isoformat()
    return {
        "pipeline": {
            "horizon_min": p.horizon_min,
            "window_len": p.window_len,
            "normalization": p.normalization,
            "max_gap": p.max_gap,
            "train_end": fmt(train_end),
            "val_end": fmt(val_end),
            "holdout_start": fmt(p.holdout_start),
            "holdout_end": fmt(p.holdout_end),
        },
        "site": {"latitude": site.latitude, "longitude": site.longitude, "altitude": site.altitude, "utc_offset": site.utc_offset},
    }


def _denorm_targets(samples):
    y = np.array([s.target_ghi for s in samples])
    day_max = np.array([s.day_max_target for s in samples])
    return y, day_max


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    values = read_kv(args.config) if args.config else {}
    if args.seed is not None:
        values["seed"] = str(args.seed)
    for k in ("days", "start", "regime"):
        v = getattr(args, k)
        if v is not None:
            values["cloud_regime" if k == "regime" else k] = str(v)
    site = SiteConfig(
        float(values.pop("latitude", 46.52)),
        float(values.pop("longitude", 6.57)),
        float(values.pop("altitude_m", 400.0)),
        int(values.pop("utc_offset_min", 60)),
    )
    kw = {}
    conv = {"days": int, "seed": int, "k": float, "speed": float, "direction": int, "max_clouds": int, "cloud_regime": str}
    for key, text in values.items():
        if key == "start":
            kw["start"] = dt.date.fromisoformat(text)
        elif key == "image_size":
            kw["image_size"] = tuple(int(x) for x in text.split(","))
        elif key in conv:
            kw[key] = conv[key](text)
        else:
            raise UsageError(f"unknown synth key {key!r}")
    kw.setdefault("start", dt.date(2023, 3, 1))
    cfg = synthetic.SynthConfig(site=site, **kw)
    summary = synthetic.generate(cfg, args.out)
    print(f"wrote {summary['rows']} rows and {summary['images']} images to {args.out}")
    return 0


def cmd_train(args) -> int:
    manifest = _require_file(args.manifest, "--manifest")
    if not args.out:
        raise UsageError("--out is required")
    run = load_run_config(args.config, _overrides(args))
    site = site_for_manifest(run, manifest)
    run.site = site
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "effective.cfg"), "w") as fh:
        fh.write(run_config_text(run))
    samples = _samples(manifest, site, run)
    splits, train_end, val_end = _split(samples, run)
    log.info("split sizes train=%d val=%d test=%d held_out=%d", len(splits.train), len(splits.val), len(splits.test), len(splits.held_out))
    model = SmtModel(run.smt, seed=run.train.seed)
    to_ds = lambda ss: make_dataset(model, *data.stack_samples(ss))
    meta = _pipeline_meta(run, site, train_end, val_end)
    result = train(
        model,
        to_ds(splits.train),
        to_ds(splits.val),
        run.train,
        meta=meta,
        log=lambda r: log.info("epoch %(epoch)d lr %(lr).3g train %(train_loss).6f val %(val_loss).6f", r),
    )
    save_checkpoint(os.path.join(args.out, CHECKPOINT_NAME), result.best, run.pipeline.checkpoint_precision)
    with open(os.path.join(args.out, "history.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "val_loss"])
        for r in result.history:
            w.writerow([r["epoch"], repr(r["lr"]), repr(r["train_loss"]), repr(r["val_loss"])])
    print(f"best epoch {result.best.epoch} val_loss {result.best.best_val_loss:.6g}; wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    ckpt_path = _require_file(args.ckpt, "--ckpt")
    manifest = _require_file(args.manifest, "--manifest")
    if not args.out:
        raise UsageError("--out is required")
    ckpt = load_checkpoint(ckpt_path)
    run, site = _run_from_checkpoint(ckpt)
    samples = _samples(manifest, site, run)
    if samples and run.smt.uses_image:
        got = samples[0].image.shape[1:]
        if tuple(got) != tuple(run.smt.image_hwc):
            raise ValueError(f"manifest images resize to {got}, checkpoint expects {run.smt.image_hwc}")
    splits, _, _ = _split(samples, run)
    model = ckpt.model()
    chosen = samples if args.split == "all" else getattr(splits, args.split)
    if len(chosen) < 2:
        raise ValueError(f"split {args.split!r} has {len(chosen)} samples; need at least 2")
    if splits.val:
        val_mse = evaluate_mse(model, make_dataset(model, *data.stack_samples(splits.val)))
        print(f"sanity: stored best val loss {ckpt.best_val_loss:.6g} (epoch {ckpt.epoch}); recomputed val loss {val_mse:.6g}")
    pred = predict_dataset(model, make_dataset(model, *data.stack_samples(chosen)))
    y, day_max = _denorm_targets(chosen)
    y_hat = denormalize_ghi(pred, day_max)
    if args.normalized:
        y, y_hat = np.array([s.target for s in chosen]), pred
    report = metrics.compute_metrics(y, y_hat, horizon=run.pipeline.horizon_min)
    daily = metrics.daily_rmse([s.local_date for s in chosen], y, y_hat)
    metrics.write_report(args.out, report, daily)
    print(f"n={report.n} rmse={report.rmse:.4f} rse={report.rse} corr={report.corr}")
    return 0


def cmd_baseline(args) -> int:
    manifest = _require_file(args.manifest, "--manifest")
    if not args.out:
        raise UsageError("--out is required")
    run = load_run_config(args.config, _overrides(args))
    site = site_for_manifest(run, manifest)
    samples = _samples(manifest, site, run, load_images=False)
    if args.split != "all":
        splits, _, _ = _split(samples, run)
        samples = getattr(splits, args.split)
    if len(samples) < 2:
        raise ValueError(f"only {len(samples)} samples available; need at least 2")
    y = np.array([s.target_ghi for s in samples])
    h = dt.timedelta(minutes=run.pipeline.horizon_min)
    forecasts = [smart_persistence(s.ghi_t, solar_context(site, s.t), solar_context(site, s.t + h)) for s in samples]
    y_hat = np.array([f.value for f in forecasts])
    degenerate = sum(f.degenerate for f in forecasts)
    report = metrics.compute_metrics(y, y_hat, horizon=run.pipeline.horizon_min)
    metrics.write_report(args.out, report, metrics.daily_rmse([s.local_date for s in samples], y, y_hat))
    print(f"n={report.n} rmse={report.rmse:.6g} rse={report.rse} corr={report.corr} degenerate={degenerate}")
    return 0


def _read_window(path, run: RunConfig, site: SiteConfig):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["timestamp", "ghi"]:
            raise ValueError(f"{path}: header must be timestamp,ghi")
        rows = [r for r in reader if r]
    s = run.pipeline.window_len
    if len(rows) != s:
        raise ValueError(f"{path}: window has {len(rows)} values, the model expects exactly {s}")
    times = [data.parse_timestamp(r[0]) for r in rows]
    ghi = np.array([float(r[1]) for r in rows])
    secs = np.array([t.timestamp() for t in times])
    night = haurwitz_ghi(solar_zenith(site, secs)) <= DEGENERATE_CLEAR_SKY
    if run.pipeline.normalization == "daily_max":
        divisor = np.array([day_max_clear_sky(site, local_date(site, t)) if not n else 1.0 for t, n in zip(times, night)])
    else:
        divisor = np.full(s, data.RAW_GHI_SCALE)
    window = np.where(night, 0.0, ghi / divisor)
    return times[-1], window


def cmd_predict(args) -> int:
    ckpt_path = _require_file(args.ckpt, "--ckpt")
    ckpt = load_checkpoint(ckpt_path)
    run, site = _run_from_checkpoint(ckpt)
    cfg = run.smt
    images = None
    if cfg.uses_image:
        paths = args.image or []
        if len(paths) != cfg.frames:
            raise UsageError(f"checkpoint expects {cfg.frames} --image frame(s), got {len(paths)}")
        from .pnm import load_image

        images = np.stack([load_image(_require_file(p, "--image"), cfg.image_hwc[:2]) for p in paths])[None]
    t, window = _read_window(_require_file(args.window, "--window"), run, site)
    model = ckpt.model()
    patches, series = model_inputs(model, images, window[None, None, :])
    y_star = float(model.predict(patches, series)[0])
    target_t = t + dt.timedelta(minutes=run.pipeline.horizon_min)
    if run.pipeline.normalization == "daily_max":
        scale = day_max_clear_sky(site, local_date(site, target_t))
    else:
        scale = data.RAW_GHI_SCALE
    print(f"target_time={data.format_timestamp(target_t.astimezone(site.tz))} ghi_w_m2={denormalize_ghi(y_star, scale):.6f} y_star={y_star:.9f}")
    return 0


def cmd_attn(args) -> int:
    ckpt_path = _require_file(args.ckpt, "--ckpt")
    manifest = _require_file(args.manifest, "--manifest")
    if not args.timestamp or not args.out:
        raise UsageError("--timestamp and --out are required")
    ckpt = load_checkpoint(ckpt_path)
    run, site = _run_from_checkpoint(ckpt)
    when = data.parse_timestamp(args.timestamp)
    rows = data.parse_manifest(manifest)
    lo = when - dt.timedelta(minutes=10 * (run.pipeline.window_len + run.smt.frames + 1))
    hi = when + dt.timedelta(minutes=run.pipeline.horizon_min)
    near = [r for r in rows if lo <= r.timestamp <= hi]
    samples = _samples(manifest, site, run, rows=near)
    match = [s for s in samples if s.t == when]
    if not match:
        everything = _samples(manifest, site, run, load_images=False, rows=rows)
        if not everything:
            raise ValueError("manifest yields no samples")
        best = min(everything, key=lambda s: abs((s.t - when).total_seconds()))
        raise ValueError(f"no sample at {args.timestamp}; nearest available is {data.format_timestamp(best.t.astimezone(site.tz))}")
    sample = match[0]
    model = ckpt.model()
    images = sample.image[None] if run.smt.uses_image else None
    patches, series = model_inputs(model, images, sample.ghi_window[None, None, :])
    pred, trace = model.trace(None if patches is None else patches[0], None if series is None else series[0])
    os.makedirs(args.out, exist_ok=True)
    for name, attr in (("rollout", attention.weighted_rollout(trace)), ("last_layer", attention.last_layer_attention(trace))):
        if attr.degenerate:
            log.warning("%s attribution is degenerate (no mass outside the prediction token)", name)
        attention.export_heatmap(attr.weights, run.smt, os.path.join(args.out, name))
    print(f"prediction y_star={pred:.6f}; wrote rollout and last_layer heatmaps to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="solarsmt", description="Solar multimodal transformer pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, config=True):
        if config:
            p.add_argument("--config", help="key=value config file or builtin name (desk, full)")
        p.add_argument("--seed", type=int)

    def model_flags(p):
        p.add_argument("--pillars", choices=["both", "image_only", "ts_only"])
        p.add_argument("--patch-shape", dest="patch_shape", choices=["square", "row", "column"])
        p.add_argument("--frames", type=int, choices=[1, 2, 3])
        p.add_argument("--window-len", dest="window_len", type=int)
        p.add_argument("--horizon-min", dest="horizon_min", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--normalization", choices=["daily_max", "none"])
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--days", type=int)
    p.add_argument("--start", help="first local date, YYYY-MM-DD")
    p.add_argument("--regime", choices=list(synthetic.REGIMES))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a manifest")
    common(p)
    model_flags(p)
    p.add_argument("--manifest")
    p.add_argument("--out", help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--ckpt")
    p.add_argument("--manifest")
    p.add_argument("--out", help="report CSV path")
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    p.add_argument("--normalized", action="store_true", help="report metrics on the y* scale instead of W/m^2 (debugging)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="smart persistence on a manifest")
    common(p)
    model_flags(p)
    p.add_argument("--manifest")
    p.add_argument("--out", help="report CSV path")
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="all")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("predict", help="forecast from one image and a GHI window")
    p.add_argument("--ckpt")
    p.add_argument("--image", action="append", help="P6 image; repeat for multi-frame models (oldest first)")
    p.add_argument("--window", help="CSV with header timestamp,ghi and exactly window_len rows")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("attn", help="export attention heatmaps for one sample")
    p.add_argument("--ckpt")
    p.add_argument("--manifest")
    p.add_argument("--timestamp")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_attn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "config", None):
        args.config = resolve_config_path(args.config)
        if not os.path.exists(args.config):
            print(f"error: config not found: {args.config}", file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"usage hint: solarsmt {args.command} --help", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
