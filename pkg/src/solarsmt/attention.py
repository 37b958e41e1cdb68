"""Last-layer attention and gradient-weighted attention rollout, with heatmap export.

Gradient-weighted rollout: for every layer take ``relu(grad * attn)``,
average over heads, add the identity, row-normalize, and multiply the layers
together (last layer on the left). The attribution of the prediction token
is its row of the product restricted to the other tokens.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import AttentionTrace, SmtConfig, patch_regions
from .pnm import write_pgm


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class Attribution:
    weights: np.ndarray  # (T - 1,), sums to 1 unless degenerate
    degenerate: bool = False  # no mass left on non-prediction tokens


def _require(trace: AttentionTrace | None, gradients: bool = False) -> None:
    if trace is None or not trace.attentions:
        raise TraceError("attention trace missing")
    if gradients and len(trace.gradients) != len(trace.attentions):
        raise TraceError("attention trace lacks gradients")


def _renormalized(row: np.ndarray) -> Attribution:
    total = row.sum()
    if total <= 0:
        return Attribution(np.zeros_like(row), degenerate=True)
    return Attribution(row / total)


def last_layer_attention(trace: AttentionTrace) -> Attribution:
    """Head-averaged attention of the prediction token in the final layer."""
    _require(trace)
    row = trace.attentions[-1].mean(axis=0)[0, 1:]
    return _renormalized(row)


def rollout_stages(trace: AttentionTrace) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-layer relevance matrices and the running products, first layer first."""
    _require(trace, gradients=True)
    t = trace.seq_len
    eye = np.eye(t)
    stages, products = [], []
    running = eye
    for a, g in zip(trace.attentions, trace.gradients):
        cam = np.maximum(g * a, 0.0).mean(axis=0)
        m = eye + cam
        m = m / m.sum(axis=-1, keepdims=True)
        running = m @ running
        stages.append(m)
        products.append(running)
    return stages, products


def weighted_rollout(trace: AttentionTrace) -> Attribution:
    _, products = rollout_stages(trace)
    return _renormalized(products[-1][0, 1:])


# ---------------------------------------------------------------------------


def token_layout(config: SmtConfig) -> list[tuple[str, int]]:
    """(kind, index-within-kind) for every non-prediction token, in sequence order."""
    out = [("image", i) for i in range(config.n_image_tokens)]
    out += [("ts", i) for i in range(config.n_ts_tokens)]
    return out


def strip_width(config: SmtConfig) -> int:
    return config.patch_dims[1] if config.patch_shape == "square" else 1


def token_region(index: int, config: SmtConfig) -> tuple[slice, slice]:
    """Pixel region of a non-prediction token in the exported heatmap.

    Frames are laid out left to right; series tokens occupy an extra strip of
    columns on the right, split vertically when there are several.
    """
    h, w, _ = config.image_hwc
    n = config.n_patches
    n_img = config.n_image_tokens
    if index < n_img:
        frame, p = divmod(index, n)
        rows, cols = patch_regions(config)[p]
        off = frame * w
        return rows, slice(cols.start + off, cols.stop + off)
    j = index - n_img
    m = config.n_ts_tokens
    if not 0 <= j < m:
        raise IndexError(f"token index {index} out of range")
    x0 = (config.frames if config.uses_image else 0) * w
    bounds = np.linspace(0, h, m + 1).round().astype(int)
    return slice(bounds[j], bounds[j + 1]), slice(x0, x0 + strip_width(config))


def render_heatmap(weights: np.ndarray, config: SmtConfig) -> np.ndarray:
    """Min-max scale attributions to 8-bit gray on the image geometry plus series strip."""
    weights = np.asarray(weights, dtype=np.float64)
    expected = config.n_image_tokens + config.n_ts_tokens
    if weights.shape != (expected,):
        raise ValueError(f"expected {expected} token weights, got shape {weights.shape}")
    h, w, _ = config.image_hwc
    width = (config.frames if config.uses_image else 0) * w + (strip_width(config) if config.n_ts_tokens else 0)
    lo, hi = weights.min(), weights.max()
    if hi > lo:
        levels = np.rint((weights - lo) / (hi - lo) * 255.0)
    else:
        levels = np.full_like(weights, 128.0)
    img = np.zeros((h, width), dtype=np.uint8)
    for i, v in enumerate(levels):
        rows, cols = token_region(i, config)
        img[rows, cols] = int(v)
    return img


def export_heatmap(weights: np.ndarray, config: SmtConfig, out_path) -> tuple[str, str]:
    """Write ``<out_path>.pgm`` (P5) and ``<out_path>.csv`` (token_index,kind,weight)."""
    out_path = str(out_path)
    base = out_path[:-4] if out_path.endswith((".pgm", ".csv")) else out_path
    pgm, csv_path = base + ".pgm", base + ".csv"
    img = render_heatmap(weights, config)
    try:
        write_pgm(pgm, img)
        with open(csv_path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["token_index", "kind", "weight"])
            for i, ((kind, _), wt) in enumerate(zip(token_layout(config), weights)):
                wr.writerow([i + 1, kind, repr(float(wt))])
    except OSError as exc:
        raise OSError(f"cannot write heatmap to {base}: {exc.strerror}") from exc
    return pgm, csv_path
