"""Label-smoothed loss, Adam, the step schedule, training loop and checkpoints."""

import csv
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig
from .errors import InputError, NonFiniteError
from .imageproc import translate_augment
from .model import GRRNN
from .variants import ModelVariant

log = logging.getLogger(__name__)

CKPT_MAGIC = b"GRRNN1"
METRICS_HEADER = ("epoch", "lr", "train_loss", "train_top1")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch: int = 16
    lr0: float = 1e-4
    halve_every: int = 10
    weight_decay: float = 1e-4
    epsilon: float = 0.1
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        for name in ("epochs", "batch", "halve_every"):
            if int(getattr(self, name)) <= 0:
                raise InputError(f"{name} must be positive")
        if self.lr0 <= 0 or self.weight_decay < 0:
            raise InputError("lr0 must be positive and weight_decay non-negative")
        if not 0.0 <= self.epsilon < 1.0:
            raise InputError("epsilon must lie in [0, 1)")


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def label_smooth_loss(logits, y, eps=0.1):
    """Mean over the batch of ``-(1-eps) log p_y - eps/N sum_n log p_n``.

    ``logits`` is (N,) or (B, N); ``y`` an int or (B,) array of class indices.
    """
    logits = logits if isinstance(logits, T.Tensor) else T.Tensor(logits)
    z = logits.data
    single = z.ndim == 1
    z2 = z[None] if single else z
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    b, n = z2.shape
    if y.shape != (b,) or np.any(y < 0) or np.any(y >= n):
        raise InputError(f"labels {y} incompatible with {n} classes / batch {b}")
    logp = log_softmax(z2.astype(np.float64))
    target = np.full((b, n), eps / n)
    target[np.arange(b), y] += 1.0 - eps
    loss = float(-(target * logp).sum() / b)

    def backward(g):
        grad = (np.exp(logp) - target) * (float(g) / b)
        return (grad[0] if single else grad).astype(z.dtype),

    return T._make("label_smooth_loss", np.asarray(loss, dtype=z.dtype), (logits,), backward)


def lr_at(epoch, lr0=1e-4, halve_every=10):
    return lr0 * 0.5 ** (epoch // halve_every)


class Adam:
    """Adam with L2-coupled weight decay (decay added to the gradient)."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr):
        grads = {n: (np.zeros_like(p.data) if p.grad is None else p.grad)
                 for n, p in self.params.items()}
        adam_step(self.params, grads, self, lr, self.weight_decay)


def adam_step(params, grads, state, lr, weight_decay=0.0):
    """One bias-corrected Adam update of ``params`` (name -> Tensor) in place."""
    for n, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NonFiniteError(f"non-finite gradient in parameter '{n}' ({bad} entries)")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for n, p in params.items():
        g = grads[n]
        if weight_decay:
            g = g + weight_decay * p.data
        m, v = state.m[n], state.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_top1: float


@dataclass
class TrainResult:
    model: GRRNN
    metrics: list = field(default_factory=list)

    def metrics_csv(self):
        buf = io.StringIO()
        write_metrics(self.metrics, buf)
        return buf.getvalue()


def write_metrics(metrics, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for m in metrics:
        w.writerow([m.epoch, repr(m.lr), repr(m.train_loss), repr(m.train_top1)])


def train_step(model, opt, images, labels, lr, eps):
    """Forward, backward and update on one batch; returns (loss, n_correct)."""
    model.zero_grad()
    with T.Tape() as tape:
        logits, _ = model.forward(images, training=True)
        loss = label_smooth_loss(logits, labels, eps)
    loss_value = float(loss.data)
    if not math.isfinite(loss_value):
        raise NonFiniteError(f"loss is {loss_value}")
    tape.backward(loss)
    opt.step(lr)
    correct = int((np.argmax(logits.data, axis=1) == labels).sum())
    return loss_value, correct


def train(model, images, labels, cfg=TrainConfig(), pad_value=1.0, on_epoch=None):
    """Train ``model`` in place on ``images`` (n, 64, 128, 1) with int ``labels``.

    Mini-batches are reshuffled every epoch from one generator seeded with
    ``cfg.seed``; augmentation draws come from the same generator.
    """
    images = np.asarray(images, dtype=model.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise InputError("empty training split")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, weight_decay=cfg.weight_decay)
    result = TrainResult(model)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.lr0, cfg.halve_every)
        order = rng.permutation(len(images))
        total_loss, total_correct = 0.0, 0
        for bi, start in enumerate(range(0, len(order), cfg.batch)):
            idx = order[start:start + cfg.batch]
            batch = images[idx]
            if cfg.augment:
                batch = np.stack([translate_augment(im, rng, fill=pad_value) for im in batch])
            try:
                loss, correct = train_step(model, opt, batch, labels[idx], lr, cfg.epsilon)
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch}, batch {bi}: {exc}") from exc
            total_loss += loss * len(idx)
            total_correct += correct
        m = EpochMetrics(epoch, lr, total_loss / len(images), total_correct / len(images))
        result.metrics.append(m)
        log.info("epoch %d lr %.3g loss %.4f top1 %.4f", epoch, lr, m.train_loss, m.train_top1)
        if on_epoch is not None:
            on_epoch(m, model)
    return result


# --------------------------------------------------------------------------
# checkpoints: b"GRRNN1" | u32 header length | UTF-8 JSON header | float32 LE data


def save_checkpoint(model, path, extra=None):
    entries, blobs = [], []
    tensors = [(n, p.data) for n, p in model.params.items()]
    tensors += [(n, b) for n, b in model.buffers.items()]
    for name, arr in tensors:
        entries.append({"name": name, "dtype": "float32", "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = {"config": model.config(), "tensors": entries}
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path):
    """Returns ``(header, {name: float32 array})``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise InputError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    arrays = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos)
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
        pos += 4 * count
    if pos != len(raw):
        raise InputError(f"{path}: {len(raw) - pos} trailing bytes")
    return header, arrays


def load_checkpoint(path, dtype=np.float32):
    header, arrays = read_checkpoint(path)
    c = header["config"]
    cfg = BackboneConfig(plan=tuple(c["plan"]), width=c["width"])
    model = GRRNN(ModelVariant.parse(c["variant"], c["axis"]), c["n_writers"], cfg, dtype=dtype)
    expected = set(model.params) | set(model.buffers)
    if expected != set(arrays):
        missing = sorted(expected - set(arrays))
        unknown = sorted(set(arrays) - expected)
        raise InputError(f"{path}: tensor mismatch, missing={missing} unknown={unknown}")
    for n, p in model.params.items():
        p.data = arrays[n].astype(dtype)
    for n in model.buffers:
        model.buffers[n] = arrays[n].astype(dtype)
    return model, header

