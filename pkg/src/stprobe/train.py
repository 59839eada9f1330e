"""Optimizers, schedules, the epoch loop and checkpoint files."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .engine import (
    AGGREGATIONS,
    ALGORITHMS,
    BACKWARD,
    LifParams,
    Network,
    Surrogate,
    init_network,
    lif_forward,
    mode_for,
    sequence_loss,
    step_logits,
)
from .numerics import Rng64, fisher_yates
from .tasks import SequenceDataset

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"STPB"
CHECKPOINT_VERSION = 1

# substream tags for derive_seed
INIT_STREAM = 1
SHUFFLE_STREAM = 2


class TrainingDivergence(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def derive_seed(seed: int, *keys: int) -> int:
    """Independent child seed for ``(seed, keys...)``."""
    r = Rng64(seed)
    for k in keys:
        r = Rng64(r.next() ^ (int(k) & 0xFFFFFFFFFFFFFFFF))
    return r.next()


@dataclass
class TrainConfig:
    algorithm: str = "stbp"
    epochs: int = 50
    batch_size: int = 250
    lr: float = 5e-4
    optimizer: str = "adamw"
    schedule: str = "step"
    step_factor: float = 0.8
    step_period: int = 10
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    hidden: tuple = (128, 128)
    recurrent: bool = True
    recurrent_init: str = "zero"
    decay: float = 0.98
    threshold: float = 0.5
    detach_reset: bool = False
    surrogate: str = "rectangle"
    surrogate_a: float = 1.0
    surrogate_gamma: float = 1.0
    surrogate_k: float = 4.0
    surrogate_h: float = 0.15
    surrogate_sigma: float = 0.5
    # None picks 1.0 for stbp/sdbp; notd always runs its readout with decay 0
    readout_decay: float | None = None
    # None picks 1.0 for recurrent nets, no clipping otherwise; 0 disables
    clip_norm: float | None = None
    aggregation: str = "last"
    dtype: str = "float32"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError("optimizer must be 'adamw' or 'sgd'")
        if self.schedule not in ("constant", "step", "cosine"):
            raise ValueError("schedule must be 'constant', 'step' or 'cosine'")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr >= 0 are required")
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError("at least one hidden layer of positive width is required")
        if self.step_period < 1 or self.step_factor <= 0:
            raise ValueError("step schedule needs period >= 1 and factor > 0")
        self.lif()
        self.surrogate_spec()

    def lif(self) -> LifParams:
        return LifParams(self.decay, self.threshold, self.detach_reset)

    def surrogate_spec(self) -> Surrogate:
        return Surrogate(self.surrogate, self.surrogate_a, self.surrogate_gamma,
                         self.surrogate_k, self.surrogate_h, self.surrogate_sigma)

    def effective_readout_decay(self) -> float:
        if self.algorithm == "notd":
            return 0.0
        return 1.0 if self.readout_decay is None else float(self.readout_decay)

    def effective_clip(self) -> float:
        if self.clip_norm is None:
            return 1.0 if self.recurrent else 0.0
        return float(self.clip_norm)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


# -- optimizers ---------------------------------------------------------------

@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass
class SGDState:
    momentum: float = 0.0
    weight_decay: float = 0.0
    step: int = 0
    buf: dict = field(default_factory=dict)


def _check_grads(weights, grads):
    for name, w in weights.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient {name} has shape {g.shape}, weight has {w.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")


def adamw_step(weights: dict, grads: dict, state: AdamWState, lr: float) -> dict:
    """Decoupled weight decay Adam, updating ``weights`` in place."""
    _check_grads(weights, grads)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, w in weights.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if state.weight_decay:
            w -= w.dtype.type(lr * state.weight_decay) * w
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(w.dtype)
    return weights


def sgd_step(weights: dict, grads: dict, state: SGDState, lr: float) -> dict:
    _check_grads(weights, grads)
    state.step += 1
    for name, w in weights.items():
        g = grads[name]
        if state.weight_decay:
            g = g + state.weight_decay * w
        if state.momentum:
            buf = state.buf.setdefault(name, np.zeros_like(w))
            buf *= state.momentum
            buf += g
            g = buf
        w -= (lr * g).astype(w.dtype)
    return weights


def step_lr(base_lr: float, epoch: int, factor: float, period: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return base_lr * factor ** (epoch // period)


def cosine_lr(base_lr: float, epoch: int, total: int) -> float:
    if total <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(epoch, total) / total))


def learning_rate(config: TrainConfig, epoch: int) -> float:
    if config.schedule == "step":
        return step_lr(config.lr, epoch, config.step_factor, config.step_period)
    if config.schedule == "cosine":
        return cosine_lr(config.lr, epoch, config.epochs)
    return config.lr


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= g.dtype.type(scale)
    return total


def new_optimizer(config: TrainConfig):
    if config.optimizer == "adamw":
        return AdamWState(config.beta1, config.beta2, config.eps, config.weight_decay)
    return SGDState(config.momentum, config.weight_decay)


def optimizer_step(weights, grads, state, lr):
    if isinstance(state, AdamWState):
        return adamw_step(weights, grads, state, lr)
    return sgd_step(weights, grads, state, lr)


# -- model construction and evaluation -------------------------------------------

def build_network(config: TrainConfig, n_inputs: int, n_classes: int) -> Network:
    rng = Rng64(derive_seed(config.seed, INIT_STREAM))
    return init_network(
        n_inputs, list(config.hidden), n_classes, rng,
        recurrent=config.recurrent, recurrent_init=config.recurrent_init,
        lif=config.lif(), surrogate=config.surrogate_spec(),
        readout_decay=config.effective_readout_decay(), dtype=np.dtype(config.dtype),
    )


def predict(net: Network, inputs, algorithm: str, aggregation: str = "last") -> np.ndarray:
    """Class predictions; stbp/sdbp read the final step, notd uses ``aggregation``."""
    trace = lif_forward(inputs, net, mode_for(algorithm))
    agg = aggregation if algorithm == "notd" else "last"
    return step_logits(trace, agg).argmax(axis=1)


def evaluate(net: Network, dataset: SequenceDataset, algorithm: str,
             aggregation: str = "last", batch_size: int = 500) -> float:
    """Fraction of samples classified correctly."""
    if len(dataset) == 0:
        return float("nan")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        pred = predict(net, dataset.inputs[sl], algorithm, aggregation)
        correct += int(np.sum(pred == dataset.labels[sl]))
    return correct / len(dataset)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return fisher_yates(Rng64(derive_seed(seed, SHUFFLE_STREAM, epoch)), n)


def train_step(net: Network, inputs, labels, algorithm: str, aggregation: str = "last"):
    """One forward/backward pass; returns (loss, correct count, gradients)."""
    trace = lif_forward(inputs, net, mode_for(algorithm))
    per_step = algorithm == "notd"
    loss, g = sequence_loss(trace, labels, per_step)
    grads = BACKWARD[algorithm](trace, g)
    logits = step_logits(trace, aggregation if per_step else "last")
    correct = int(np.sum(logits.argmax(axis=1) == labels))
    return loss, correct, grads


# -- checkpoints -----------------------------------------------------------------

@dataclass
class Checkpoint:
    arrays: dict
    epoch: int
    config_hash: bytes
    rng_state: int = 0

    @classmethod
    def capture(cls, net: Network, opt, epoch: int, config: TrainConfig, rng_state: int = 0):
        arrays = {name: w.copy() for name, w in net.named_params().items()}
        if isinstance(opt, AdamWState):
            for name in net.named_params():
                if name in opt.m:
                    arrays[f"opt.m.{name}"] = opt.m[name].copy()
                    arrays[f"opt.v.{name}"] = opt.v[name].copy()
        elif isinstance(opt, SGDState):
            for name, b in opt.buf.items():
                arrays[f"opt.buf.{name}"] = b.copy()
        arrays["opt.step"] = np.array([opt.step], np.float64)
        return cls(arrays, epoch, config.hash(), rng_state)

    def restore(self, config: TrainConfig, n_inputs: int, n_classes: int):
        """Rebuild (network, optimizer state) for ``config``."""
        if self.config_hash != config.hash():
            raise CheckpointError("checkpoint was written under a different configuration")
        net = build_network(config, n_inputs, n_classes)
        params = net.named_params()
        for name, w in params.items():
            if name not in self.arrays:
                raise CheckpointError(f"checkpoint lacks {name}")
            if self.arrays[name].shape != w.shape:
                raise CheckpointError(f"{name}: shape {self.arrays[name].shape} != {w.shape}")
            w[...] = self.arrays[name]
        opt = new_optimizer(config)
        opt.step = int(self.arrays.get("opt.step", np.zeros(1))[0])
        for name, w in params.items():
            if isinstance(opt, AdamWState) and f"opt.m.{name}" in self.arrays:
                opt.m[name] = self.arrays[f"opt.m.{name}"].astype(w.dtype)
                opt.v[name] = self.arrays[f"opt.v.{name}"].astype(w.dtype)
            if isinstance(opt, SGDState) and f"opt.buf.{name}" in self.arrays:
                opt.buf[name] = self.arrays[f"opt.buf.{name}"].astype(w.dtype)
        return net, opt

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(CHECKPOINT_MAGIC)
        out.write(struct.pack("<I", CHECKPOINT_VERSION))
        if len(self.config_hash) != 32:
            raise CheckpointError("config hash must be 32 bytes")
        out.write(self.config_hash)
        meta = {
            "meta.epoch": np.array([self.epoch], np.float64),
            # split so each half is exact in f64
            "meta.rng": np.array([self.rng_state >> 32, self.rng_state & 0xFFFFFFFF], np.float64),
        }
        for name, arr in {**meta, **self.arrays}.items():
            arr = np.asarray(arr)
            raw = name.encode("utf-8")
            out.write(struct.pack("<I", len(raw)))
            out.write(raw)
            out.write(struct.pack("<B", arr.ndim))
            out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError("not an STPB checkpoint")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        config_hash = raw[8:40]
        pos = 40
        arrays = {}
        try:
            while pos < len(raw):
                (n,) = struct.unpack_from("<I", raw, pos)
                name = raw[pos + 4:pos + 4 + n].decode("utf-8")
                pos += 4 + n
                (ndim,) = struct.unpack_from("<B", raw, pos)
                shape = struct.unpack_from(f"<{ndim}I", raw, pos + 1)
                pos += 1 + 4 * ndim
                count = int(np.prod(shape)) if ndim else 1
                if pos + 8 * count > len(raw):
                    raise CheckpointError(f"array {name} truncated")
                arrays[name] = np.frombuffer(raw, "<f8", count, pos).reshape(shape).copy()
                pos += 8 * count
        except struct.error as exc:
            raise CheckpointError("truncated checkpoint") from exc
        epoch = int(arrays.pop("meta.epoch")[0])
        hi, lo = arrays.pop("meta.rng")
        return cls(arrays, epoch, config_hash, (int(hi) << 32) | int(lo))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


# -- epoch loop -------------------------------------------------------------------

@dataclass
class TrainResult:
    history: list
    best: Checkpoint
    final: Checkpoint
    net: Network


def train_run(config: TrainConfig, train: SequenceDataset, test: SequenceDataset | None = None,
              *, resume: Checkpoint | None = None, epoch_callback=None) -> TrainResult:
    """Train ``config`` on ``train``, scoring ``test`` after every epoch.

    History rows hold ``epoch``, ``lr``, ``train_loss``, ``train_accuracy`` and
    ``test_accuracy``; epoch -1 is the untrained network when starting fresh.
    The best checkpoint is the one with the highest test accuracy (earliest
    on ties).
    """
    test = test if test is not None else train
    if train.n_classes != test.n_classes or train.channels != test.channels:
        raise ValueError("train and test splits disagree on shape")
    if resume is None:
        net = build_network(config, train.channels, train.n_classes)
        opt = new_optimizer(config)
        start = 0
    else:
        net, opt = resume.restore(config, train.channels, train.n_classes)
        start = resume.epoch + 1

    history = []
    best = final = None
    best_acc = -1.0
    if resume is None:
        acc = evaluate(net, test, config.algorithm, config.aggregation)
        history.append({"epoch": -1, "lr": 0.0, "train_loss": float("nan"),
                        "train_accuracy": float("nan"), "test_accuracy": acc})
        best_acc = acc
        best = final = Checkpoint.capture(net, opt, -1, config)

    clip = config.effective_clip()
    params = net.named_params()
    for epoch in range(start, config.epochs):
        lr = learning_rate(config, epoch)
        order = epoch_order(config.seed, epoch, len(train))
        loss_sum = 0.0
        correct = 0
        for b0 in range(0, len(train), config.batch_size):
            idx = order[b0:b0 + config.batch_size]
            loss, hits, grads = train_step(net, train.inputs[idx], train.labels[idx],
                                           config.algorithm, config.aggregation)
            if not math.isfinite(loss):
                raise TrainingDivergence(
                    f"non-finite loss at epoch {epoch}, batch starting {b0} ({config.algorithm})")
            if clip > 0:
                clip_global_norm(grads, clip)
            optimizer_step(params, grads, opt, lr)
            loss_sum += loss * len(idx)
            correct += hits
        acc = evaluate(net, test, config.algorithm, config.aggregation)
        row = {"epoch": epoch, "lr": lr, "train_loss": loss_sum / len(train),
               "train_accuracy": correct / len(train), "test_accuracy": acc}
        history.append(row)
        log.info("%s epoch %d loss %.4f train %.4f test %.4f", config.algorithm, epoch,
                 row["train_loss"], row["train_accuracy"], acc)
        final = Checkpoint.capture(net, opt, epoch, config)
        if acc > best_acc:
            best_acc = acc
            best = final
        if epoch_callback is not None:
            epoch_callback(row, net)
    if final is None:
        final = best = Checkpoint.capture(net, opt, start - 1, config)
    return TrainResult(history, best, final, net)


METRIC_FIELDS = ("run_id", "task", "algorithm", "epoch", "split", "metric", "value")


def metrics_rows(history, run_id: str, task: str, algorithm: str):
    for row in history:
        for split, metric, key in (("train", "loss", "train_loss"),
                                   ("train", "accuracy", "train_accuracy"),
                                   ("test", "accuracy", "test_accuracy"),
                                   ("train", "lr", "lr")):
            yield (run_id, task, algorithm, row["epoch"], split, metric, repr(float(row[key])))


def write_metrics_csv(path, history, run_id: str, task: str, algorithm: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        w.writerows(metrics_rows(history, run_id, task, algorithm))
