import csv

import numpy as np
import pytest

from solarsmt import attention as A
from solarsmt.model import AttentionTrace, SmtConfig, SmtModel, patch_regions
from solarsmt.pnm import read_pgm


def trace_of(attn, grads=None):
    attn = [np.asarray(a, dtype=float) for a in attn]
    if grads is None:
        grads = [np.ones_like(a) for a in attn]
    return AttentionTrace(attn, [np.asarray(g, dtype=float) for g in grads])


def test_last_layer_uniform():
    a = np.full((2, 4, 4), 0.25)
    out = A.last_layer_attention(trace_of([a]))
    assert np.allclose(out.weights, 1 / 3) and not out.degenerate


def test_last_layer_hand_example():
    a = np.array([[[0.2, 0.5, 0.3], [0.1, 0.1, 0.8], [0.3, 0.3, 0.4]]])
    out = A.last_layer_attention(trace_of([np.eye(3)[None], a]))
    assert np.allclose(out.weights, [0.5 / 0.8, 0.3 / 0.8], atol=1e-15)
    assert abs(out.weights.sum() - 1) < 1e-9


def test_missing_trace():
    with pytest.raises(A.TraceError):
        A.last_layer_attention(None)
    with pytest.raises(A.TraceError):
        A.weighted_rollout(AttentionTrace([np.eye(3)[None]], []))


def test_rollout_zero_gradients_is_degenerate():
    a = np.full((1, 3, 3), 1 / 3)
    out = A.weighted_rollout(trace_of([a], [np.zeros_like(a)]))
    assert out.degenerate and np.all(out.weights == 0)


def test_rollout_identity_layers():
    eye = np.eye(4)[None]
    stages, products = A.rollout_stages(trace_of([eye, eye]))
    assert np.allclose(products[-1], np.eye(4))


def test_rollout_uniform_is_uniform():
    a = np.full((2, 5, 5), 0.2)
    out = A.weighted_rollout(trace_of([a, a, a]))
    assert np.allclose(out.weights, 0.25, atol=1e-12)


def test_rollout_two_layer_hand_example():
    a1 = np.array([[0.6, 0.2, 0.2], [0.3, 0.4, 0.3], [0.1, 0.1, 0.8]])
    g1 = np.array([[1.0, -1.0, 2.0], [0.5, 1.0, -2.0], [1.0, 1.0, 1.0]])
    a2 = np.array([[0.2, 0.5, 0.3], [0.3, 0.3, 0.4], [0.5, 0.25, 0.25]])
    g2 = np.array([[2.0, 1.0, -1.0], [1.0, 1.0, 1.0], [-1.0, 3.0, 0.0]])

    def stage(a, g):
        m = np.eye(3) + np.maximum(a * g, 0)
        return m / m.sum(axis=1, keepdims=True)

    r = stage(a2, g2) @ stage(a1, g1)
    expected = r[0, 1:] / r[0, 1:].sum()
    out = A.weighted_rollout(trace_of([a1[None], a2[None]], [g1[None], g2[None]]))
    assert np.abs(out.weights - expected).max() < 1e-12


def test_rollout_averages_heads_after_relu():
    a = np.full((2, 2, 2), 0.5)
    g = np.stack([np.full((2, 2), 2.0), np.full((2, 2), -2.0)])
    stages, _ = A.rollout_stages(trace_of([a], [g]))
    # head 0 contributes relu(1) = 1, head 1 contributes 0; mean 0.5, +I -> [[1.5, .5], [.5, 1.5]] / 2
    assert np.allclose(stages[0], [[0.75, 0.25], [0.25, 0.75]])


def test_stages_row_stochastic_on_model_trace():
    cfg = SmtConfig(image_hwc=(16, 16, 3), patch_size=(4, 4), ts_len=8, embed_dim=16, layers=3, heads=2)
    m = SmtModel(cfg, seed=1)
    rng = np.random.default_rng(0)
    _, trace = m.trace(rng.random((cfg.n_image_tokens, cfg.patch_dim)), rng.random((1, 8)))
    stages, products = A.rollout_stages(trace)
    for s, p in zip(stages, products):
        assert np.abs(s.sum(1) - 1).max() < 1e-9
        assert np.abs(p.sum(1) - 1).max() < 1e-9
    out = A.weighted_rollout(trace)
    assert abs(out.weights.sum() - 1) < 1e-9 and np.all(out.weights >= 0)


# --- heatmaps -------------------------------------------------------------


SQUARE = SmtConfig(image_hwc=(8, 12, 3), patch_size=(4, 4), ts_len=8, embed_dim=8, layers=1, heads=2)


@pytest.mark.parametrize(
    "cfg",
    [
        SQUARE,
        SmtConfig(image_hwc=(8, 12, 3), patch_shape="row", ts_len=8, embed_dim=8, layers=1, heads=2),
        SmtConfig(image_hwc=(8, 12, 3), patch_shape="column", ts_len=8, embed_dim=8, layers=1, heads=2, frames=2),
    ],
)
def test_token_regions_match_patchify(cfg):
    regions = patch_regions(cfg)
    h, w, _ = cfg.image_hwc
    covered = np.zeros((h, cfg.frames * w), dtype=int)
    for i in range(cfg.n_image_tokens):
        rows, cols = A.token_region(i, cfg)
        frame, p = divmod(i, cfg.n_patches)
        pr, pc = regions[p]
        assert rows == pr and cols.start == pc.start + frame * w
        covered[rows, cols] += 1
    assert np.all(covered == 1)


def test_constant_vector_gives_uniform_gray():
    img = A.render_heatmap(np.full(7, 1 / 7), SQUARE)
    assert img.shape == (8, 12 + 4)
    assert np.all(img == 128)


def test_one_hot_lights_single_patch():
    w = np.zeros(7)
    w[4] = 1.0  # second row, second column of the 2x3 grid
    img = A.render_heatmap(w, SQUARE)
    bright = np.argwhere(img == 255)
    assert bright[:, 0].min() == 4 and bright[:, 0].max() == 7
    assert bright[:, 1].min() == 4 and bright[:, 1].max() == 7


def test_series_strip_on_the_right():
    w = np.zeros(7)
    w[6] = 1.0
    img = A.render_heatmap(w, SQUARE)
    assert np.all(img[:, 12:] == 255) and np.all(img[:, :12] == 0)


def test_render_length_check():
    with pytest.raises(ValueError):
        A.render_heatmap(np.zeros(5), SQUARE)


def test_export_writes_pgm_and_csv(tmp_path):
    w = np.random.default_rng(0).random(7)
    w /= w.sum()
    pgm, csv_path = A.export_heatmap(w, SQUARE, tmp_path / "roll")
    img = read_pgm(pgm)
    assert img.shape == (8, 16)
    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    assert [r["kind"] for r in rows] == ["image"] * 6 + ["ts"]
    assert [int(r["token_index"]) for r in rows] == list(range(1, 8))
    assert abs(sum(float(r["weight"]) for r in rows) - 1) < 1e-6


def test_export_unwritable(tmp_path):
    with pytest.raises(OSError):
        A.export_heatmap(np.ones(7) / 7, SQUARE, tmp_path / "missing" / "x")
