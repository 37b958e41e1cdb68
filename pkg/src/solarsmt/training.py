"""AdamW with linear warm-up and cosine annealing, early stopping, and the SMT1 checkpoint format."""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import NumericError, SmtConfig, SmtModel, is_bias_like, model_inputs

CHECKPOINT_MAGIC = b"SMT1"
CHECKPOINT_VERSION = 1


class TrainConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 100
    lr_peak: float = 5e-4
    lr_warmup_start: float = 5e-5
    warmup_epochs: float = 2.0
    cosine_final_ratio: float = 0.5
    early_stop_patience: int | None = 20  # None disables early stopping
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.batch_size < 1 or self.epochs < 1:
            raise TrainConfigError("batch_size and epochs must be >= 1")
        if min(self.lr_peak, self.lr_warmup_start, self.cosine_final_ratio, self.eps) <= 0:
            raise TrainConfigError("learning rates, cosine ratio and eps must be positive")
        if self.warmup_epochs < 0 or self.weight_decay < 0:
            raise TrainConfigError("warmup_epochs and weight_decay must be >= 0")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise TrainConfigError("early_stop_patience must be >= 1 (or None to disable)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise TrainConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(epoch: float, cfg: TrainConfig) -> float:
    """Linear warm-up from ``lr_warmup_start`` to ``lr_peak``, then cosine decay to ``lr_peak * ratio``."""
    if epoch < cfg.warmup_epochs:
        return cfg.lr_warmup_start + (cfg.lr_peak - cfg.lr_warmup_start) * (epoch / cfg.warmup_epochs)
    final = cfg.lr_peak * cfg.cosine_final_ratio
    span = cfg.epochs - cfg.warmup_epochs
    progress = 1.0 if span <= 0 else min((epoch - cfg.warmup_epochs) / span, 1.0)
    return final + (cfg.lr_peak - final) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: "OrderedDict[str, np.ndarray]"
    v: "OrderedDict[str, np.ndarray]"
    step: int = 0

    @classmethod
    def zeros_like(cls, params: "OrderedDict[str, np.ndarray]") -> "OptimizerState":
        return cls(
            OrderedDict((k, np.zeros_like(a)) for k, a in params.items()),
            OrderedDict((k, np.zeros_like(a)) for k, a in params.items()),
        )


def adamw_step(
    params: "OrderedDict[str, np.ndarray]",
    grads: "dict[str, np.ndarray]",
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
    decay: Callable[[str], bool] | None = None,
) -> None:
    """In-place AdamW update with decoupled weight decay.

    ``decay(name)`` selects the parameters that receive weight decay; by
    default every parameter does.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    b1, b2 = cfg.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if cfg.weight_decay and (decay is None or decay(name)):
            p -= lr * cfg.weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    smt_config: SmtConfig
    train_config: TrainConfig
    params: "OrderedDict[str, np.ndarray]"
    best_val_loss: float
    epoch: int
    optimizer: OptimizerState | None = None
    meta: dict = field(default_factory=dict)

    def model(self) -> SmtModel:
        return SmtModel(self.smt_config, OrderedDict((k, v.copy()) for k, v in self.params.items()))


_PRECISION = {4: "<f4", 8: "<f8"}
_PREFIX = struct.Struct("<4sHBBI")


def checkpoint_bytes(ckpt: Checkpoint, precision: int = 4) -> bytes:
    """Serialize: magic, version, precision, flags, header length, JSON header, raw arrays.

    Arrays are written in canonical parameter order as little-endian reals
    (4 bytes by default); optimizer moments follow the parameters when present.
    """
    if precision not in _PRECISION:
        raise CheckpointError("precision must be 4 or 8 bytes")
    header = {
        "smt_config": ckpt.smt_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "best_val_loss": float(ckpt.best_val_loss),
        "epoch": int(ckpt.epoch),
        "params": [[k, list(v.shape)] for k, v in ckpt.params.items()],
        "optimizer_step": ckpt.optimizer.step if ckpt.optimizer else None,
        "meta": ckpt.meta,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    flags = 1 if ckpt.optimizer is not None else 0
    dt = _PRECISION[precision]
    parts = [_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, precision, flags, len(blob)), blob]
    arrays = list(ckpt.params.values())
    if ckpt.optimizer is not None:
        arrays += [ckpt.optimizer.m[k] for k in ckpt.params] + [ckpt.optimizer.v[k] for k in ckpt.params]
    parts += [np.ascontiguousarray(a, dtype=dt).tobytes() for a in arrays]
    return b"".join(parts)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise TruncatedCheckpointError("file shorter than the checkpoint prefix")
    magic, version, precision, flags, hlen = _PREFIX.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    if precision not in _PRECISION:
        raise CheckpointError(f"unsupported precision code {precision}")
    off = _PREFIX.size
    if len(data) < off + hlen:
        raise TruncatedCheckpointError("header truncated")
    try:
        header = json.loads(data[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    off += hlen
    shapes = [(name, tuple(shape)) for name, shape in header["params"]]
    n_sets = 3 if flags & 1 else 1
    total = sum(int(np.prod(s)) for _, s in shapes) * precision * n_sets
    if len(data) - off < total:
        raise TruncatedCheckpointError(f"array data truncated ({len(data) - off} of {total} bytes)")
    if len(data) - off > total:
        raise CheckpointError("trailing bytes after array data")
    dt = np.dtype(_PRECISION[precision])

    def read_set():
        nonlocal off
        out = OrderedDict()
        for name, shape in shapes:
            n = int(np.prod(shape))
            out[name] = np.frombuffer(data, dtype=dt, count=n, offset=off).reshape(shape).astype(dt.newbyteorder("="))
            off += n * precision
        return out

    smt_config = SmtConfig.from_dict(header["smt_config"])
    params = read_set()
    optimizer = None
    if flags & 1:
        m, v = read_set(), read_set()
        optimizer = OptimizerState(m, v, int(header["optimizer_step"]))
    np_dtype = smt_config.np_dtype
    cast = lambda d: OrderedDict((k, a.astype(np_dtype)) for k, a in d.items())
    if optimizer is not None:
        optimizer = OptimizerState(cast(optimizer.m), cast(optimizer.v), optimizer.step)
    return Checkpoint(
        smt_config=smt_config,
        train_config=TrainConfig.from_dict(header["train_config"]),
        params=cast(params),
        best_val_loss=float(header["best_val_loss"]),
        epoch=int(header["epoch"]),
        optimizer=optimizer,
        meta=header.get("meta", {}),
    )


def save_checkpoint(path, ckpt: Checkpoint, precision: int = 4) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt, precision))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# training loop


@dataclass
class ArrayDataset:
    patches: np.ndarray | None  # (n, F*N, P)
    series: np.ndarray | None  # (n, M, S)
    targets: np.ndarray  # (n,)

    def __len__(self) -> int:
        return len(self.targets)

    def batch(self, idx):
        return (
            None if self.patches is None else self.patches[idx],
            None if self.series is None else self.series[idx],
            self.targets[idx],
        )


def make_dataset(model: SmtModel, images, windows, targets) -> ArrayDataset:
    patches, series = model_inputs(model, images, windows)
    return ArrayDataset(patches, series, np.asarray(targets, dtype=model.config.np_dtype))


def evaluate_mse(model: SmtModel, data: ArrayDataset, batch_size: int = 256) -> float:
    sq = 0.0
    for start in range(0, len(data), batch_size):
        idx = slice(start, start + batch_size)
        pt, ts, y = data.batch(idx)
        diff = model.predict(pt, ts) - y
        sq += float(np.dot(diff, diff))
    return sq / len(data)


def predict_dataset(model: SmtModel, data: ArrayDataset, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(data), batch_size):
        pt, ts, _ = data.batch(slice(start, start + batch_size))
        out.append(model.predict(pt, ts))
    return np.concatenate(out) if out else np.zeros(0)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list[dict]


def _snapshot(model: SmtModel, cfg: TrainConfig, best_val: float, epoch: int, state: OptimizerState | None, meta) -> Checkpoint:
    opt = None
    if state is not None:
        opt = OptimizerState(
            OrderedDict((k, a.copy()) for k, a in state.m.items()),
            OrderedDict((k, a.copy()) for k, a in state.v.items()),
            state.step,
        )
    return Checkpoint(
        smt_config=model.config,
        train_config=cfg,
        params=OrderedDict((k, t.values.copy()) for k, t in model.params.items()),
        best_val_loss=best_val,
        epoch=epoch,
        optimizer=opt,
        meta=dict(meta or {}),
    )


def train(
    model: SmtModel,
    train_data: ArrayDataset,
    val_data: ArrayDataset,
    cfg: TrainConfig,
    *,
    resume: Checkpoint | None = None,
    history: Sequence[dict] | None = None,
    meta: dict | None = None,
    log: Callable[[dict], None] | None = None,
    stop_epoch: int | None = None,
) -> TrainResult:
    """Mini-batch AdamW on normalized targets with per-epoch validation and early stopping.

    Returns the best-validation checkpoint, the final-state checkpoint (with
    optimizer state, suitable for ``resume``) and the per-epoch history.
    ``stop_epoch`` ends this call early without changing the schedule, so a
    later ``resume`` continues the same trajectory.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise TrainConfigError("training and validation splits must be non-empty")
    params = model.state()
    names = list(params)
    state = OptimizerState.zeros_like(params)
    start_epoch = 0
    best_val = math.inf
    best: Checkpoint | None = None
    hist = list(history or [])
    if resume is not None:
        for k in names:
            params[k][...] = resume.params[k]
        if resume.optimizer is not None:
            for k in names:
                state.m[k][...] = resume.optimizer.m[k]
                state.v[k][...] = resume.optimizer.v[k]
            state.step = resume.optimizer.step
        start_epoch = resume.epoch + 1
        best_val = resume.best_val_loss
    since_best = 0
    if hist:
        vals = [h["val_loss"] for h in hist]
        since_best = len(vals) - 1 - int(np.argmin(vals))

    n = len(train_data)
    epoch = start_epoch - 1
    end = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    for epoch in range(start_epoch, end):
        lr = lr_schedule(epoch, cfg)
        order = epoch_order(cfg.seed, epoch, n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            pt, ts, y = train_data.batch(idx)
            with T.Graph() as g:
                loss = T.mse_loss(model.forward(pt, ts), y)
                T.backward(loss, g)
            grads = {k: model.params[k].grad for k in names if model.params[k].grad is not None}
            adamw_step(params, grads, state, lr, cfg, decay=lambda k: not is_bias_like(k))
            model.zero_grad()
            total += float(loss.values) * len(idx)
        val = evaluate_mse(model, val_data)
        row = {"epoch": epoch, "lr": lr, "train_loss": total / n, "val_loss": val}
        hist.append(row)
        if log:
            log(row)
        if val < best_val:
            best_val = val
            since_best = 0
            best = _snapshot(model, cfg, best_val, epoch, None, meta)
        else:
            since_best += 1
        if cfg.early_stop_patience is not None and since_best >= cfg.early_stop_patience:
            break
    last = _snapshot(model, cfg, best_val, epoch, state, meta)
    if best is None:  # resumed run that never improved on the stored best
        best = last
    return TrainResult(best, last, hist)
