"""Desk-scale training: datasets, AdamW, warmup + cosine schedule,
label-smoothed cross-entropy, the training loop and checkpointing."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .model import ModelConfig, Param, SNNMLP

__all__ = [
    "Dataset",
    "TrainConfig",
    "OptimState",
    "Schedule",
    "adamw_step",
    "cosine_lr",
    "cross_entropy_ls",
    "load_cifar10",
    "synth_dataset",
    "nearest_centroid_accuracy",
    "normalize",
    "evaluate",
    "train_loop",
    "save_train_state",
    "load_train_state",
    "model_from_checkpoint",
]

log = logging.getLogger(__name__)

CIFAR_RECORD = 3073
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    smoothing: float = 0.1
    warmup_epochs: int = 2
    seed: int = 0
    hflip: bool = False
    norm_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    norm_std: tuple[float, float, float] = (0.25, 0.25, 0.25)

    def to_kv(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            out[k] = ",".join(repr(x) for x in v) if isinstance(v, (tuple, list)) else repr(v)
        return out

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        known = {f.name for f in fields(cls)}
        base = cls()
        for k, v in kv.items():
            if k not in known:
                continue
            default = getattr(base, k)
            if isinstance(default, bool):
                kwargs[k] = str(v).lower() in ("1", "true", "yes")
            elif isinstance(default, tuple):
                kwargs[k] = tuple(float(x) for x in str(v).split(","))
            elif isinstance(default, int):
                kwargs[k] = int(v)
            else:
                kwargs[k] = float(v)
        return cls(**kwargs)


@dataclass
class Schedule:
    base_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(f"need 0 <= warmup_steps <= total_steps, got {self.warmup_steps}, {self.total_steps}")


def cosine_lr(schedule: Schedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    progress = 1.0 if span == 0 else (step - schedule.warmup_steps) / span
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.05
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[Param], **hyper) -> "OptimState":
        return cls([np.zeros_like(p.value) for p in params], [np.zeros_like(p.value) for p in params], **hyper)


def adamw_step(params: list[Param], state: OptimState, lr_now: float) -> None:
    """Bias-corrected Adam with decoupled weight decay, in place.

    Parameters flagged ``decay=False`` (LIF tau/threshold, norms, biases) are
    not decayed.
    """
    if len(params) != len(state.m):
        raise ValueError(f"{len(params)} parameters but optimizer state holds {len(state.m)}")
    for p, m, v in zip(params, state.m, state.v):
        if p.grad.shape != p.value.shape or m.shape != p.value.shape:
            raise ValueError(f"shape mismatch: param {p.value.shape}, grad {p.grad.shape}, moment {m.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if p.decay and state.weight_decay:
            p.value *= 1.0 - lr_now * state.weight_decay
        p.value -= (lr_now * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.value.dtype)


def cross_entropy_ls(logits: np.ndarray, labels: np.ndarray, smoothing: float = 0.0):
    """Mean softmax cross-entropy against smoothed one-hot targets.

    The true class gets ``1 - smoothing``; the rest share ``smoothing``.
    Returns ``(loss, d_logits)``.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must be {n} integers in [0, {k})")
    if smoothing and k < 2:
        raise ValueError("label smoothing needs at least two classes")
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    target = np.full((n, k), smoothing / (k - 1) if k > 1 else 0.0)
    target[np.arange(n), labels] = 1.0 - smoothing
    loss = float(-(target * logp).sum() / n)
    grad = (np.exp(logp) - target) / n
    return loss, grad.astype(logits.dtype)


# -- data ----------------------------------------------------------------------

def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        whole = raw.size // CIFAR_RECORD
        raise ValueError(
            f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD}; "
            f"trailing partial record starts at byte offset {whole * CIFAR_RECORD}"
        )
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise ValueError(f"{path}: label {labels[bad]} out of range at byte offset {bad * CIFAR_RECORD}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(path: str | os.PathLike, split: str = "train") -> Dataset:
    """Read the CIFAR-10 binary format from a single file or the standard directory."""
    path = Path(path)
    if path.is_dir():
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
        files = [path / n for n in names if (path / n).exists()]
        if not files:
            raise FileNotFoundError(f"no CIFAR-10 {split} batches under {path}")
    elif path.exists():
        files = [path]
    else:
        raise FileNotFoundError(f"{path}: no such file or directory")
    parts = [_read_cifar_file(f) for f in files]
    return Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), 10)


def _pattern(family: int, freq: int, size: int, dy: int, dx: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size) + dy, np.arange(size) + dx, indexing="ij")
    period = size / (2 * freq)
    if family == 0:  # vertical stripes
        return 0.5 + 0.5 * np.cos(np.pi * xx / period)
    if family == 1:  # horizontal stripes
        return 0.5 + 0.5 * np.cos(np.pi * yy / period)
    if family == 2:  # centred blob
        c = (size - 1) / 2
        r2 = ((yy - c) ** 2 + (xx - c) ** 2) / (size / (3 + freq)) ** 2
        return np.exp(-r2)
    if family == 3:  # diagonal stripes
        return 0.5 + 0.5 * np.cos(np.pi * (xx + yy) / (period * 1.5))
    return 0.5 + 0.5 * np.cos(np.pi * xx / period) * np.cos(np.pi * yy / period)  # checkerboard


def synth_dataset(num_classes: int, n: int, seed: int, size: int = 32, noise: float = 0.1) -> Dataset:
    """Class-conditional oriented stripes and blobs.

    Class ``k`` uses pattern family ``k % 5`` (vertical stripes, horizontal
    stripes, blob, diagonal, checker) at frequency ``2 + k // 5``, with a
    random +-1 pixel shift, random colour tint and Gaussian pixel noise.
    """
    if num_classes < 1 or n < 1 or size < 4:
        raise ValueError("num_classes and n must be positive and size at least 4")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes).astype(np.int64)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i, k in enumerate(labels):
        dy, dx = rng.integers(-1, 2, size=2)
        pat = _pattern(int(k) % 5, 2 + int(k) // 5, size, int(dy), int(dx))
        tint = rng.uniform(0.6, 1.0, size=3)
        img = 0.15 + 0.7 * tint[:, None, None] * pat[None] + rng.normal(0.0, noise, size=(3, size, size))
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, num_classes)


def nearest_centroid_accuracy(train: Dataset, test: Dataset | None = None) -> float:
    """Raw-pixel nearest-centroid baseline (a separability check)."""
    test = test or train
    x = train.images.reshape(len(train), -1).astype(np.float64)
    cents = np.stack([x[train.labels == k].mean(axis=0) for k in range(train.num_classes)])
    t = test.images.reshape(len(test), -1).astype(np.float64)
    d = ((t[:, None, :] - cents[None]) ** 2).sum(axis=2)
    return float((d.argmin(axis=1) == test.labels).mean())


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float32)[None, :, None, None]
    s = np.asarray(std, dtype=np.float32)[None, :, None, None]
    return (images - m) / s


# -- loop ----------------------------------------------------------------------

def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def evaluate(model: SNNMLP, data: Dataset, tcfg: TrainConfig, batch_size: int | None = None) -> float:
    model.eval()
    bs = batch_size or tcfg.batch_size
    correct = 0
    for idx in _batches(len(data), bs, np.arange(len(data))):
        x = normalize(data.images[idx], tcfg.norm_mean, tcfg.norm_std)
        correct += int((model.forward(x).argmax(axis=1) == data.labels[idx]).sum())
    return correct / max(len(data), 1)


def save_train_state(path, model: SNNMLP, tcfg: TrainConfig, opt: OptimState | None = None,
                     epoch: int = 0, extra: dict | None = None) -> None:
    tensors = {name: p.value for name, p in model.named_params()}
    meta = {"dtype": model.dtype.name, "epoch": str(epoch)}
    meta.update({f"train.{k}": v for k, v in tcfg.to_kv().items()})
    if opt is not None:
        meta["optim.step"] = str(opt.step)
        for (name, _), m, v in zip(model.named_params(), opt.m, opt.v):
            tensors[f"optim.m.{name}"] = m
            tensors[f"optim.v.{name}"] = v
    meta.update(extra or {})
    save_checkpoint(path, Checkpoint(config=model.cfg.to_kv(), meta=meta, tensors=tensors))


def model_from_checkpoint(ckpt: Checkpoint, cfg: ModelConfig | None = None) -> SNNMLP:
    cfg = cfg or ModelConfig.from_kv(ckpt.config)
    model = SNNMLP(cfg, seed=0, dtype=np.dtype(ckpt.meta.get("dtype", "float32")))
    for name, p in model.named_params():
        if name not in ckpt.tensors:
            raise ValueError(f"checkpoint has no tensor {name!r}")
        arr = ckpt.tensors[name]
        if arr.shape != p.value.shape:
            raise ValueError(
                f"shape mismatch for {name}: checkpoint {arr.shape}, model config expects {p.value.shape}"
            )
        p.value[...] = arr
    return model


def load_train_state(path, cfg: ModelConfig | None = None):
    """Returns ``(model, train_config, optim_state_or_None, epoch)``."""
    ckpt = load_checkpoint(path)
    model = model_from_checkpoint(ckpt, cfg)
    tcfg = TrainConfig.from_kv({k[6:]: v for k, v in ckpt.meta.items() if k.startswith("train.")})
    opt = None
    if "optim.step" in ckpt.meta:
        names = [n for n, _ in model.named_params()]
        opt = OptimState(
            [ckpt.tensors[f"optim.m.{n}"].copy() for n in names],
            [ckpt.tensors[f"optim.v.{n}"].copy() for n in names],
            step=int(ckpt.meta["optim.step"]),
            beta1=tcfg.beta1, beta2=tcfg.beta2, weight_decay=tcfg.weight_decay, eps=tcfg.eps,
        )
    return model, tcfg, opt, int(ckpt.meta.get("epoch", 0))


@dataclass
class EpochRecord:
    epoch: int
    step: int
    loss: float
    acc: float
    lr: float

    def row(self) -> list[str]:
        return [str(self.epoch), str(self.step), repr(self.loss), repr(self.acc), repr(self.lr)]


@dataclass
class TrainResult:
    model: SNNMLP
    history: list[EpochRecord] = field(default_factory=list)
    opt: OptimState | None = None


def train_loop(cfg: ModelConfig, data: Dataset, tcfg: TrainConfig, *,
               metrics_path=None, checkpoint_path=None, resume=None,
               stop_after_epoch: int | None = None, dtype=np.float32,
               model: SNNMLP | None = None) -> TrainResult:
    """Train for ``tcfg.epochs`` epochs; one metrics row per epoch.

    Data order, augmentation and stochastic layers draw from streams keyed on
    ``(seed, epoch)`` / ``(seed, layer, step)``, so a run resumed from a
    checkpoint continues exactly as the uninterrupted one would.
    ``stop_after_epoch`` ends the run early (used to produce a mid-run
    checkpoint).
    """
    if cfg.num_classes != data.num_classes:
        raise ValueError(f"model has {cfg.num_classes} classes, dataset {data.num_classes}")
    steps_per_epoch = -(-len(data) // tcfg.batch_size)
    sched = Schedule(tcfg.lr, tcfg.warmup_epochs * steps_per_epoch, tcfg.epochs * steps_per_epoch)
    start_epoch = 0
    opt = None
    if resume is not None:
        model, _, opt, start_epoch = load_train_state(resume, cfg)
    model = model or SNNMLP(cfg, seed=tcfg.seed, dtype=dtype)
    params = model.params()
    if opt is None:
        opt = OptimState.for_params(params, beta1=tcfg.beta1, beta2=tcfg.beta2,
                                    weight_decay=tcfg.weight_decay, eps=tcfg.eps)
    result = TrainResult(model=model, opt=opt)
    writer_file = None
    if metrics_path is not None:
        writer_file = open(metrics_path, "a" if resume is not None else "w", newline="")
        if resume is None:
            writer_file.write("epoch,step,loss,acc,lr\n")
    try:
        for epoch in range(start_epoch + 1, tcfg.epochs + 1):
            model.train()
            order = np.random.default_rng([tcfg.seed, epoch]).permutation(len(data))
            flip_rng = np.random.default_rng([tcfg.seed, epoch, 1])
            loss_sum, correct, seen = 0.0, 0, 0
            lr_now = 0.0
            for idx in _batches(len(data), tcfg.batch_size, order):
                images = data.images[idx]
                if tcfg.hflip:
                    flip = flip_rng.random(len(idx)) < 0.5
                    images = np.where(flip[:, None, None, None], images[..., ::-1], images)
                x = normalize(images, tcfg.norm_mean, tcfg.norm_std)
                y = data.labels[idx]
                lr_now = cosine_lr(sched, opt.step)
                model.seed_rngs(tcfg.seed, opt.step)
                model.zero_grad()
                logits = model.forward(x)
                loss, dlogits = cross_entropy_ls(logits, y, tcfg.smoothing)
                if not math.isfinite(loss):
                    raise FloatingPointError(f"non-finite loss {loss} at step {opt.step} (epoch {epoch})")
                model.backward(dlogits)
                adamw_step(params, opt, lr_now)
                loss_sum += loss * len(idx)
                correct += int((logits.argmax(axis=1) == y).sum())
                seen += len(idx)
            rec = EpochRecord(epoch, opt.step, loss_sum / seen, correct / seen, lr_now)
            result.history.append(rec)
            log.info("epoch %d step %d loss %.4f acc %.4f lr %.2e", rec.epoch, rec.step, rec.loss, rec.acc, rec.lr)
            if writer_file is not None:
                csv.writer(writer_file, lineterminator="\n").writerow(rec.row())
                writer_file.flush()
            if checkpoint_path is not None:
                save_train_state(checkpoint_path, model, tcfg, opt, epoch)
            if stop_after_epoch is not None and epoch >= stop_after_epoch:
                break
    finally:
        if writer_file is not None:
            writer_file.close()
    return result
