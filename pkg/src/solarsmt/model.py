"""Solar Multimodal Transformer: patch/series embedding, early fusion, pre-norm encoder, linear head."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
import numpy as np

from . import tensor as T
from .tensor import Graph, Tensor

PATCH_SHAPES = ("square", "row", "column")
PILLARS = ("both", "image_only", "ts_only")
INIT_STD = 0.02


class ConfigError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass
class SmtConfig:
    image_hwc: tuple[int, int, int] = (224, 224, 3)
    patch_shape: str = "square"
    patch_size: tuple[int, int] = (16, 16)  # only used by square patches
    ts_count: int = 1
    ts_len: int = 144
    embed_dim: int = 192
    layers: int = 3
    heads: int = 6
    mlp_ratio: int = 4
    frames: int = 1
    pillars: str = "both"
    final_norm: bool = False
    ln_eps: float = 1e-6
    dtype: str = "float64"

    def __post_init__(self):
        self.image_hwc = tuple(int(v) for v in self.image_hwc)
        self.patch_size = tuple(int(v) for v in self.patch_size)
        if self.patch_shape not in PATCH_SHAPES:
            raise ConfigError(f"patch_shape must be one of {PATCH_SHAPES}, got {self.patch_shape!r}")
        if self.pillars not in PILLARS:
            raise ConfigError(f"pillars must be one of {PILLARS}, got {self.pillars!r}")
        if self.pillars == "image_only":
            self.ts_count = 0
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        h, w, c = self.image_hwc
        a, b = self.patch_dims
        if min(h, w, c, a, b) < 1 or h % a or w % b:
            raise ConfigError(f"image {h}x{w} is not divisible into {a}x{b} patches")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not 1 <= self.frames <= 3:
            raise ConfigError("frames must be 1, 2 or 3")
        if self.ts_count < 0 or self.ts_len < 1 or self.layers < 1:
            raise ConfigError("ts_count >= 0, ts_len >= 1, layers >= 1 required")
        if self.pillars == "both" and self.ts_count == 0:
            raise ConfigError("pillars=both needs ts_count >= 1")
        if self.pillars == "ts_only" and self.ts_count == 0:
            raise ConfigError("pillars=ts_only needs ts_count >= 1")

    @property
    def patch_dims(self) -> tuple[int, int]:
        h, w, _ = self.image_hwc
        if self.patch_shape == "row":
            return 1, w
        if self.patch_shape == "column":
            return h, 1
        return self.patch_size

    @property
    def uses_image(self) -> bool:
        return self.pillars != "ts_only"

    @property
    def uses_ts(self) -> bool:
        return self.pillars != "image_only"

    @property
    def n_patches(self) -> int:
        h, w, _ = self.image_hwc
        a, b = self.patch_dims
        return (h * w) // (a * b)

    @property
    def patch_dim(self) -> int:
        a, b = self.patch_dims
        return a * b * self.image_hwc[2]

    @property
    def n_image_tokens(self) -> int:
        return self.frames * self.n_patches if self.uses_image else 0

    @property
    def n_ts_tokens(self) -> int:
        return self.ts_count if self.uses_ts else 0

    @property
    def seq_len(self) -> int:
        return 1 + self.n_image_tokens + self.n_ts_tokens

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_hwc"] = list(self.image_hwc)
        d["patch_size"] = list(self.patch_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SmtConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown SmtConfig keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# patch geometry


def patch_regions(config: SmtConfig) -> list[tuple[slice, slice]]:
    """Pixel region (rows, cols) of every patch, in token order."""
    h, w, _ = config.image_hwc
    a, b = config.patch_dims
    return [
        (slice(i, i + a), slice(j, j + b))
        for i in range(0, h, a)
        for j in range(0, w, b)
    ]


def patchify(image: np.ndarray, config: SmtConfig) -> np.ndarray:
    """Split ``image`` (H, W, C), or a batch (..., H, W, C), into row-major flattened patches.

    Returns (..., N, a*b*C) with each patch flattened channel-last.
    """
    image = np.asarray(image)
    h, w, c = config.image_hwc
    if image.shape[-3:] != (h, w, c):
        raise ConfigError(f"image shape {image.shape[-3:]} does not match config {config.image_hwc}")
    a, b = config.patch_dims
    lead = image.shape[:-3]
    x = image.reshape(lead + (h // a, a, w // b, b, c))
    nd = len(lead)
    x = np.moveaxis(x, nd + 2, nd + 1)  # (..., h/a, w/b, a, b, c)
    return x.reshape(lead + ((h // a) * (w // b), a * b * c))


def unpatchify(patches: np.ndarray, config: SmtConfig) -> np.ndarray:
    h, w, c = config.image_hwc
    a, b = config.patch_dims
    x = np.asarray(patches).reshape(h // a, w // b, a, b, c)
    return np.moveaxis(x, 2, 1).reshape(h, w, c)


# ---------------------------------------------------------------------------
# parameters


def param_shapes(config: SmtConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Canonical declaration order and shape of every learnable array."""
    d, s = config.embed_dim, config.ts_len
    hidden = d * config.mlp_ratio
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    if config.uses_image:
        shapes["patch_embed.weight"] = (config.patch_dim, d)
        shapes["patch_embed.bias"] = (d,)
        shapes["pos_img"] = (config.n_image_tokens, d)
    if config.uses_ts:
        shapes["ts_embed.weight"] = (s, d)
        shapes["ts_embed.bias"] = (d,)
        shapes["pos_ts"] = (config.n_ts_tokens, d)
    shapes["pred_token"] = (d,)
    for l in range(config.layers):
        p = f"blocks.{l}."
        shapes[p + "ln1.gamma"] = (d,)
        shapes[p + "ln1.beta"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{proj}"] = (d, d)
            shapes[p + f"attn.b{proj}"] = (d,)
        shapes[p + "ln2.gamma"] = (d,)
        shapes[p + "ln2.beta"] = (d,)
        shapes[p + "mlp.w1"] = (d, hidden)
        shapes[p + "mlp.b1"] = (hidden,)
        shapes[p + "mlp.w2"] = (hidden, d)
        shapes[p + "mlp.b2"] = (d,)
    if config.final_norm:
        shapes["final_ln.gamma"] = (d,)
        shapes["final_ln.beta"] = (d,)
    shapes["head.weight"] = (d, 1)
    shapes["head.bias"] = (1,)
    return shapes


def count_params(config: SmtConfig) -> int:
    """Closed-form learnable scalar count."""
    d, s, m = config.embed_dim, config.ts_len, config.n_ts_tokens
    hidden = d * config.mlp_ratio
    n = d  # prediction token
    if config.uses_image:
        n += config.patch_dim * d + d + config.n_image_tokens * d
    if config.uses_ts:
        n += s * d + d + m * d
    per_layer = 4 * d + 4 * (d * d + d) + 2 * d * hidden + hidden + d
    n += config.layers * per_layer
    if config.final_norm:
        n += 2 * d
    return n + d + 1


def is_bias_like(name: str) -> bool:
    """Parameters exempt from weight decay: norms, biases, positions, prediction token."""
    leaf = name.rsplit(".", 1)[-1]
    return (
        leaf in ("gamma", "beta", "bias")
        or leaf.startswith("b")
        or name.startswith("pos_")
        or name == "pred_token"
    )


def init_params(config: SmtConfig, rng: np.random.Generator) -> "OrderedDict[str, np.ndarray]":
    dtype = config.np_dtype
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            arr = np.ones(shape)
        elif len(shape) == 1 and leaf.startswith("b"):  # beta, bias, bq/bk/bv/bo, b1/b2
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, INIT_STD, size=shape)
        out[name] = arr.astype(dtype)
    return out


def type_vectors(config: SmtConfig) -> tuple[np.ndarray, np.ndarray]:
    """Fixed modality-type rows for image tokens (one per frame) and series tokens.

    Image frame k carries -k/sqrt(D) in every coordinate (frame 0 is the zero
    vector); series tokens carry +1/sqrt(D).
    """
    d = config.embed_dim
    unit = 1.0 / math.sqrt(d)
    img = np.repeat(-unit * np.arange(config.frames, dtype=np.float64), config.n_patches)
    img_rows = np.broadcast_to(img[:, None], (config.frames * config.n_patches, d))
    ts_rows = np.full((config.n_ts_tokens, d), unit)
    dtype = config.np_dtype
    return np.ascontiguousarray(img_rows, dtype=dtype), ts_rows.astype(dtype)


# ---------------------------------------------------------------------------


@dataclass
class AttentionTrace:
    """Per-layer attention probabilities (heads, T, T) and d(prediction)/d(attention)."""

    attentions: list[np.ndarray]
    gradients: list[np.ndarray] = field(default_factory=list)

    @property
    def layers(self) -> int:
        return len(self.attentions)

    @property
    def seq_len(self) -> int:
        return self.attentions[0].shape[-1]


class SmtModel:
    """Parameter container plus the forward pass."""

    def __init__(self, config: SmtConfig, params: "OrderedDict[str, np.ndarray] | None" = None, seed: int = 0):
        self.config = config
        if params is None:
            params = init_params(config, np.random.default_rng(seed))
        expected = param_shapes(config)
        if list(params) != list(expected):
            raise ConfigError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.params: OrderedDict[str, Tensor] = OrderedDict(
            (k, Tensor(np.asarray(v, dtype=config.np_dtype), requires_grad=True, name=k)) for k, v in params.items()
        )
        self._img_type, self._ts_type = type_vectors(config)

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.values) for k, t in self.params.items())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_params(self) -> int:
        return sum(t.values.size for t in self.params.values())

    # -- forward ----------------------------------------------------------

    def forward(self, patches, ts, capture: list | None = None) -> Tensor:
        """Predict normalized GHI for a batch.

        patches: (B, F*N, patch_dim) or None for ts_only; ts: (B, M, S) or None
        for image_only. Returns a (B,) tensor. When ``capture`` is a list, the
        attention probability tensors of every layer are appended to it.
        """
        cfg, p = self.config, self.params
        d, heads = cfg.embed_dim, cfg.heads
        dh = d // heads
        tokens = []
        if cfg.uses_image:
            tokens.append(self.embed_image(patches))
        if cfg.uses_ts:
            tokens.append(self.embed_ts(ts))
        if len(tokens) == 2 and tokens[0].shape[0] != tokens[1].shape[0]:
            raise T.DimensionError(f"batch sizes differ: patches {tokens[0].shape[0]}, ts {tokens[1].shape[0]}")
        batch = tokens[0].shape[0]
        cls = T.broadcast_batch(T.reshape(p["pred_token"], (1, d)), (batch,))
        z = T.concat([cls] + tokens, axis=1)
        seq = z.shape[1]
        attn_scale = 1.0 / math.sqrt(dh)

        for l in range(cfg.layers):
            pre = f"blocks.{l}."
            h = T.layer_norm(z, p[pre + "ln1.gamma"], p[pre + "ln1.beta"], cfg.ln_eps)

            def heads_view(w):
                proj = T.add(T.matmul(h, p[pre + f"attn.w{w}"]), p[pre + f"attn.b{w}"])
                return T.transpose(T.reshape(proj, (batch, seq, heads, dh)), (0, 2, 1, 3))

            q, k, v = heads_view("q"), heads_view("k"), heads_view("v")
            scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), attn_scale)
            attn = T.softmax_lastdim(scores)
            if capture is not None:
                capture.append(attn)
            ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (batch, seq, d))
            z = T.add(z, T.add(T.matmul(ctx, p[pre + "attn.wo"]), p[pre + "attn.bo"]))

            h = T.layer_norm(z, p[pre + "ln2.gamma"], p[pre + "ln2.beta"], cfg.ln_eps)
            h = T.gelu(T.add(T.matmul(h, p[pre + "mlp.w1"]), p[pre + "mlp.b1"]))
            z = T.add(z, T.add(T.matmul(h, p[pre + "mlp.w2"]), p[pre + "mlp.b2"]))
            if not np.all(np.isfinite(z.values)):
                raise NumericError(f"non-finite activations after layer {l}")

        if cfg.final_norm:
            z = T.layer_norm(z, p["final_ln.gamma"], p["final_ln.beta"], cfg.ln_eps)
        first = T.select(z, 0, axis=1)
        out = T.add(T.matmul(first, p["head.weight"]), p["head.bias"])
        return T.reshape(out, (batch,))

    def embed_image(self, patches) -> Tensor:
        """(B, F*N, patch_dim) -> (B, F*N, D): projection, positions and per-frame type rows."""
        cfg, p = self.config, self.params
        patches = self._check_input(patches, (cfg.n_image_tokens, cfg.patch_dim), "patches")
        x = T.add(T.matmul(patches, p["patch_embed.weight"]), p["patch_embed.bias"])
        x = T.add(x, p["pos_img"])
        return T.add(x, Tensor(self._img_type))

    def embed_ts(self, ts) -> Tensor:
        """(B, M, S) -> (B, M, D): one token per series."""
        cfg, p = self.config, self.params
        ts = self._check_input(ts, (cfg.n_ts_tokens, cfg.ts_len), "ts")
        y = T.add(T.matmul(ts, p["ts_embed.weight"]), p["ts_embed.bias"])
        y = T.add(y, p["pos_ts"])
        return T.add(y, Tensor(self._ts_type))

    def _check_input(self, arr, tail: tuple[int, int], what: str) -> Tensor:
        if arr is None:
            raise T.DimensionError(f"{what} required for pillars={self.config.pillars}")
        if isinstance(arr, Tensor):
            vals = arr.values
        else:
            vals = np.asarray(arr, dtype=self.config.np_dtype)
            arr = Tensor(vals)
        if vals.ndim != 3 or vals.shape[1:] != tail:
            raise T.DimensionError(f"{what} shape {vals.shape}, expected (B, {tail[0]}, {tail[1]})")
        return arr

    def predict(self, patches, ts) -> np.ndarray:
        """Graph-free forward; returns a numpy (B,) array."""
        return self.forward(patches, ts).values.copy()

    def trace(self, patches, ts) -> tuple[float, AttentionTrace]:
        """Forward one sample, capturing attention maps and d(prediction)/d(attention)."""
        cfg = self.config
        if patches is not None:
            patches = np.asarray(patches, dtype=cfg.np_dtype)[None]
        if ts is not None:
            ts = np.asarray(ts, dtype=cfg.np_dtype)[None]
        captured: list[Tensor] = []
        with Graph() as g:
            pred = self.forward(patches, ts, capture=captured)
            T.backward(T.sum_all(pred), g)
        attentions = [a.values[0].copy() for a in captured]
        grads = [(a.grad[0].copy() if a.grad is not None else np.zeros_like(a.values[0])) for a in captured]
        self.zero_grad()
        return float(pred.values[0]), AttentionTrace(attentions, grads)


def model_inputs(model: SmtModel, images: np.ndarray | None, ts: np.ndarray | None):
    """Convert raw (B, F, H, W, C) images and (B, M, S) series into forward() inputs."""
    cfg = model.config
    patches = None
    if cfg.uses_image:
        if images is None:
            raise T.DimensionError("images required")
        images = np.asarray(images)
        pt = patchify(images, cfg)  # (B, F, N, P)
        patches = pt.reshape(pt.shape[0], cfg.n_image_tokens, cfg.patch_dim).astype(cfg.np_dtype)
    series = None
    if cfg.uses_ts:
        if ts is None:
            raise T.DimensionError("ts required")
        series = np.asarray(ts, dtype=cfg.np_dtype)[:, : cfg.n_ts_tokens]
    return patches, series
