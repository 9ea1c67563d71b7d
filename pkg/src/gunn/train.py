"""SGD training loop, evaluation and metrics for desk-scale runs."""

from __future__ import annotations

import csv
import hashlib
import io
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import __version__
from .arch import NetworkSpec, config_digest
from .checkpoint import Checkpoint, save_checkpoint
from .data import augment as augment_batch
from .layers import softmax_cross_entropy
from .network import Network


class NumericalError(RuntimeError):
    """Non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.1
    weight_decay: float = 1e-4
    momentum: float = 0.9
    epochs: int = 300
    milestones: tuple = (150, 225)
    batch: int = 64
    seed: int = 0
    precision: str = "f64"
    augment: bool = True

    def __post_init__(self):
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        if ms and ms[-1] >= self.epochs:
            raise ValueError(f"milestone {ms[-1]} not below epochs={self.epochs}")
        if self.batch < 2:
            raise ValueError("batch size must be at least 2 for batch statistics")

    @classmethod
    def desk(cls, epochs: int = 20, **kw) -> "TrainConfig":
        """Full schedule compressed to ``epochs`` (drops at 1/2 and 3/4).

        Drops that coincide or land on epoch 0 for very short runs are merged.
        """
        ms = tuple(sorted({m for m in (epochs // 2, epochs * 3 // 4) if 0 < m < epochs}))
        return cls(epochs=epochs, milestones=ms, **kw)

    def lr(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch: divided by 10 at each milestone."""
        drops = sum(epoch >= m for m in self.milestones)
        return self.lr0 * 0.1 ** drops


def decays(name: str) -> bool:
    """Weight decay applies to convolution and fc weights only."""
    return name.endswith(".weight")


def sgd_step(params: dict, grads: dict, state: dict, config: TrainConfig, epoch: int) -> float:
    """Momentum SGD without dampening, in place; returns the learning rate used.

    ``v <- momentum * v + g + wd * p``; ``p <- p - lr * v``.
    """
    lr = config.lr(epoch)
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} vs parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name} at epoch {epoch}")
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(p)
        v *= config.momentum
        v += g
        if config.weight_decay and decays(name):
            v += config.weight_decay * p
        p -= lr * v
    return lr


@dataclass
class MetricRow:
    epoch: int
    step: int
    train_loss: float
    train_err: float
    test_err: Optional[float]
    lr: float
    wall_seconds: float


METRIC_FIELDS = [f.name for f in fields(MetricRow)]


def metrics_csv(rows, header: Optional[str] = None, wall_clock: bool = True) -> str:
    buf = io.StringIO()
    if header:
        buf.write(f"# {header}\n")
    cols = METRIC_FIELDS if wall_clock else METRIC_FIELDS[:-1]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        d = asdict(r)
        w.writerow(["" if d[c] is None else (repr(d[c]) if isinstance(d[c], float) else d[c]) for c in cols])
    return buf.getvalue()


def metrics_digest(rows) -> str:
    """SHA-256 of the metric CSV without the wall-clock column."""
    return hashlib.sha256(metrics_csv(rows, wall_clock=False).encode()).hexdigest()


def run_header(spec: NetworkSpec, seed: int, **extra) -> str:
    items = [f"gunn={__version__}", f"seed={seed}", f"config={spec.name}:{config_digest(spec)}"]
    items += [f"{k}={v}" for k, v in extra.items()]
    return " ".join(items)


def evaluate(network: Network, images: np.ndarray, labels: np.ndarray, batch: int = 256) -> dict:
    """Top-1 (and top-5 with >= 100 classes) error in inference mode."""
    labels = np.asarray(labels)
    k = network.spec.classes
    if len(labels) and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels outside [0, {k}) for a {k}-class network")
    if len(labels) == 0:
        raise ValueError("evaluation on an empty set")
    logits = network.predict(images, batch)
    out = {"top1": float((logits.argmax(axis=1) != labels).mean())}
    if k >= 100:
        top5 = np.argsort(-logits, axis=1)[:, :5]
        out["top5"] = float((top5 != labels[:, None]).all(axis=1).mean())
    return out


def dataset_loss(network: Network, images, labels, batch: int = 256) -> float:
    logits = network.predict(images, batch)
    loss, _ = softmax_cross_entropy(logits, labels)
    return loss


def network_from_checkpoint(ck: Checkpoint, precision: str = "f64") -> Network:
    net = Network(ck.spec, seed=0, precision=precision)
    net.load_state_dict(ck.model_state())
    return net


def evaluate_checkpoint(ck: Checkpoint, images, labels, mode: Optional[str] = None) -> dict:
    net = network_from_checkpoint(ck)
    if ck.spec.classes != int(ck.meta.get("classes", ck.spec.classes)):
        raise ValueError("checkpoint class count is inconsistent")
    if mode is not None:
        net.set_mode(mode)
    return evaluate(net, images, labels)


@dataclass
class TrainResult:
    network: Network
    checkpoint: Checkpoint
    rows: list = field(default_factory=list)
    diverged: bool = False
    message: str = ""


def _snapshot(net: Network, velocity: dict, epoch: int, step: int, rng, config: TrainConfig, extra: dict,
              norm=None):
    tensors = {k: v.copy() for k, v in net.state_dict().items()}
    tensors.update({f"velocity.{k}": v.copy() for k, v in velocity.items()})
    if norm is not None:
        tensors["norm.mean"] = np.asarray(norm[0], dtype=np.float64)
        tensors["norm.std"] = np.asarray(norm[1], dtype=np.float64)
    meta = {"train": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(config).items()},
            "classes": net.spec.classes, **extra}
    return Checkpoint(net.spec, tensors, epoch, step, rng.bit_generator.state, meta)


def train(spec: NetworkSpec, data, config: TrainConfig, test_data=None, resume: Optional[Checkpoint] = None,
          checkpoint_path=None, log=None, max_epochs: Optional[int] = None, norm=None) -> TrainResult:
    """Run SGD on ``data = (images, labels)``.

    Metrics are recorded per step; ``test_err`` is filled on the last step
    of each epoch when ``test_data`` is given. Checkpoints are taken at epoch
    boundaries; on a non-finite loss the last good one is kept (and written
    to ``checkpoint_path``) and training stops. ``max_epochs`` stops early
    without changing the schedule. ``norm = (mean, std)``, the input
    normalization constants, is stored with every checkpoint.
    """
    images, labels = data
    if images.ndim != 4 or images.shape[1] != spec.in_channels:
        raise ValueError(f"data shape {images.shape} does not match {spec.in_channels} input channels")
    if len(labels) == 0:
        raise ValueError("training on an empty set")
    if labels.min() < 0 or labels.max() >= spec.classes:
        raise ValueError(f"label {labels.max()} outside a {spec.classes}-class network")
    net = Network(spec, seed=config.seed, precision=config.precision)
    images = images.astype(net.dtype, copy=False)
    rng = np.random.default_rng(config.seed + 1)
    velocity: dict = {}
    start, step = 0, 0
    if resume is not None:
        if norm is None and "norm.mean" in resume.tensors:
            norm = (resume.tensors["norm.mean"], resume.tensors["norm.std"])
        net.load_state_dict(resume.model_state())
        velocity = {k: v.astype(net.dtype) for k, v in resume.velocity().items()}
        rng.bit_generator.state = resume.rng_state
        start, step = resume.epoch, resume.step
    params = net.parameters()
    extra = {}
    last_good = _snapshot(net, velocity, start, step, rng, config, extra, norm)
    rows: list[MetricRow] = []
    t0 = time.perf_counter()
    n = len(labels)
    end = config.epochs if max_epochs is None else min(config.epochs, start + max_epochs)
    for epoch in range(start, end):
        perm = rng.permutation(n)
        for b in range(0, n, config.batch):
            idx = perm[b : b + config.batch]
            if len(idx) < 2:
                continue
            xb = images[idx]
            if config.augment:
                xb = augment_batch(xb, rng)
            logits, caches = net.forward(xb, training=True)
            loss, gl = softmax_cross_entropy(logits, labels[idx])
            if not np.isfinite(loss):
                return _diverged(net, last_good, rows, checkpoint_path, f"non-finite loss at epoch {epoch} step {step}")
            grads = net.backward(caches, gl)
            try:
                lr = sgd_step(params, grads, velocity, config, epoch)
            except NumericalError as exc:
                return _diverged(net, last_good, rows, checkpoint_path, str(exc))
            err = float((logits.argmax(axis=1) != labels[idx]).mean())
            rows.append(MetricRow(epoch, step, loss, err, None, lr, time.perf_counter() - t0))
            step += 1
        if test_data is not None and rows:
            rows[-1].test_err = evaluate(net, *test_data)["top1"]
        if log is not None and rows:
            r = rows[-1]
            log(f"epoch {epoch}: loss {r.train_loss:.4f} test_err {r.test_err} lr {r.lr:g}")
        last_good = _snapshot(net, velocity, epoch + 1, step, rng, config, extra, norm)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, last_good)
    return TrainResult(net, last_good, rows)


def _diverged(net, last_good, rows, path, message) -> TrainResult:
    if path is not None:
        save_checkpoint(path, last_good)
    return TrainResult(net, last_good, rows, diverged=True, message=message)


def epoch_means(rows, column: str = "train_loss") -> list[float]:
    """Per-epoch average of a metric column."""
    by_epoch: dict[int, list] = {}
    for r in rows:
        by_epoch.setdefault(r.epoch, []).append(getattr(r, column))
    return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]
