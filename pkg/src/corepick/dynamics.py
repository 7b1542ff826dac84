"""Probe training and per-example difficulty from its training dynamics.

A small MLP (one hidden ReLU layer) is trained on labeled embeddings with
momentum SGD under a cosine learning-rate schedule. At the end of every epoch
the probe does a full forward pass over its training set and records, per
example, the classification margin and the L2 norm of the probability error
vector. Difficulty scores are read off those trajectories:

    margin(x)  = logit_y - max_{i != y} logit_i
    AUM        = mean margin across epochs (easy examples accumulate large
                 positive margins, so hardness is the negation)
    forgetting = number of correct -> incorrect transitions; never-correct
                 examples get the sentinel T+1, harder than any real count
    EL2N       = mean over the first E epochs of ||softmax(z) - onehot(y)||_2

An example counts as correct in an epoch when its margin is strictly positive.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import audit
from .data import EmbeddingStore, LabelVector, ScoreVector
from .optim import SGD, cosine_lr

DYN_MAGIC = b"ELFSDYN"
DYN_VERSION = 1
_DYN_HEADER = struct.Struct("<7sBQQQ")  # magic, version, N, T, flags
FLAG_CORRECTNESS = 0x1
FLAG_ERROR_NORMS = 0x2


@dataclass(frozen=True)
class ProbeConfig:
    hidden_dim: int = 512
    num_epochs: int = 50
    batch_size: int = 128
    lr: float = 0.1
    min_lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 2e-4
    el2n_epochs: int = 10
    seed: int = 0

    def validate(self) -> "ProbeConfig":
        if self.hidden_dim < 1:
            raise ValueError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.num_epochs < 1:
            raise ValueError(f"num_epochs must be >= 1, got {self.num_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.el2n_epochs < 1:
            raise ValueError(f"el2n_epochs must be >= 1, got {self.el2n_epochs}")
        return self


@dataclass
class ProbeModel:
    w1: np.ndarray  # hidden x d
    b1: np.ndarray  # hidden
    w2: np.ndarray  # C x hidden
    b2: np.ndarray  # C

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        hidden = np.maximum(x @ self.w1.T + self.b1, 0.0)
        return hidden @ self.w2.T + self.b2

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=1)

    def accuracy(self, x: np.ndarray, labels) -> float:
        y = np.asarray(getattr(labels, "labels", labels), dtype=np.int64)
        return float(np.mean(self.predict(x) == y))


@dataclass(frozen=True)
class DynamicsRecord:
    margins: np.ndarray  # N x T, margin at each epoch end
    error_norms: np.ndarray | None = None  # N x T, ||softmax - onehot||_2

    def validate(self) -> "DynamicsRecord":
        if self.margins.ndim != 2 or self.margins.shape[1] < 1:
            raise ValueError(f"margins must be N x T with T >= 1, got {self.margins.shape}")
        if not np.all(np.isfinite(self.margins)):
            raise ValueError("margins contain NaN or Inf")
        if self.error_norms is not None:
            if self.error_norms.shape != self.margins.shape:
                raise ValueError(
                    f"error_norms shape {self.error_norms.shape} does not match "
                    f"margins {self.margins.shape}"
                )
            if not np.all(np.isfinite(self.error_norms)):
                raise ValueError("error_norms contain NaN or Inf")
            self.error_norms.setflags(write=False)
        self.margins.setflags(write=False)
        return self

    @property
    def num_examples(self) -> int:
        return self.margins.shape[0]

    @property
    def num_epochs(self) -> int:
        return self.margins.shape[1]

    @property
    def correctness(self) -> np.ndarray:
        return self.margins > 0


def margin(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row gap between the true-class logit and the best other logit."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    true_logit = logits[np.arange(n), labels]
    rest = logits.copy()
    rest[np.arange(n), labels] = -np.inf
    return true_logit - rest.max(axis=1)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def probe_loss(model: ProbeModel, x: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy of the probe on (x, labels)."""
    logits = model.logits(x)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(labels)), labels].mean())


def _probe_grads(model: ProbeModel, x: np.ndarray, labels: np.ndarray):
    """Cross-entropy gradients for all four parameter arrays."""
    x = np.asarray(x, dtype=np.float64)
    n = len(labels)
    z1 = x @ model.w1.T + model.b1
    hidden = np.maximum(z1, 0.0)
    logits = hidden @ model.w2.T + model.b2
    delta2 = _softmax(logits)
    delta2[np.arange(n), labels] -= 1.0
    delta2 /= n
    grad_w2 = delta2.T @ hidden
    grad_b2 = delta2.sum(axis=0)
    delta1 = (delta2 @ model.w2) * (z1 > 0)
    grad_w1 = delta1.T @ x
    grad_b1 = delta1.sum(axis=0)
    return grad_w1, grad_b1, grad_w2, grad_b2


def init_probe(embed_dim: int, num_classes: int, config: ProbeConfig) -> ProbeModel:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))
    # He scaling on the hidden layer, small output layer
    w1 = rng.standard_normal((config.hidden_dim, embed_dim)) * np.sqrt(2.0 / embed_dim)
    w2 = rng.standard_normal((num_classes, config.hidden_dim)) * np.sqrt(
        1.0 / config.hidden_dim
    )
    return ProbeModel(
        w1=w1,
        b1=np.zeros(config.hidden_dim),
        w2=w2,
        b2=np.zeros(num_classes),
    )


def _train(
    store: EmbeddingStore,
    labels: LabelVector,
    config: ProbeConfig,
    record_dynamics: bool,
):
    config.validate()
    if len(labels) != store.num_examples:
        raise ValueError(
            f"labels cover {len(labels)} examples, store has {store.num_examples}"
        )
    x = store.data.astype(np.float64)
    y = labels.labels
    n = store.num_examples
    model = init_probe(store.embed_dim, store.num_classes, config)
    params = [model.w1, model.b1, model.w2, model.b2]
    opt = SGD(params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 4]))
    batches_per_epoch = (n + config.batch_size - 1) // config.batch_size
    total_steps = config.num_epochs * batches_per_epoch
    step = 0

    margins = np.empty((n, config.num_epochs)) if record_dynamics else None
    errors = np.empty((n, config.num_epochs)) if record_dynamics else None

    for epoch in range(config.num_epochs):
        perm = order_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            opt.lr = cosine_lr(step, total_steps, config.lr, config.min_lr)
            opt.step(_probe_grads(model, x[idx], y[idx]))
            step += 1
        if record_dynamics:
            logits = model.logits(x)
            margins[:, epoch] = margin(logits, y)
            probs = _softmax(logits)
            probs[np.arange(n), y] -= 1.0
            errors[:, epoch] = np.sqrt(np.einsum("ij,ij->i", probs, probs))

    if record_dynamics:
        return model, DynamicsRecord(margins=margins, error_norms=errors).validate()
    return model, None


def train_probe(store: EmbeddingStore, labels: LabelVector, config: ProbeConfig) -> ProbeModel:
    model, _ = _train(store, labels, config, record_dynamics=False)
    return model


def train_probe_with_dynamics(
    store: EmbeddingStore, labels: LabelVector, config: ProbeConfig
) -> tuple[ProbeModel, DynamicsRecord]:
    model, record = _train(store, labels, config, record_dynamics=True)
    return model, record


def aum_score(record: DynamicsRecord) -> ScoreVector:
    """Hardness as negated mean margin across epochs."""
    return ScoreVector.from_aum(record.margins.mean(axis=1))


def forgetting_score(record: DynamicsRecord) -> ScoreVector:
    """Count of correct -> incorrect flips; never-correct gets T+1."""
    correct = record.correctness
    flips = (correct[:, :-1] & ~correct[:, 1:]).sum(axis=1).astype(np.float64)
    never = ~correct.any(axis=1)
    flips[never] = record.num_epochs + 1
    return ScoreVector(metric="forgetting", hardness=flips).validate()


def el2n_score(record: DynamicsRecord, num_epochs: int | None = None) -> ScoreVector:
    """Mean error-vector norm over the first num_epochs epochs (default 10)."""
    if record.error_norms is None:
        raise ValueError("record has no error norms; retrain with dynamics enabled")
    e = 10 if num_epochs is None else num_epochs
    if e < 1:
        raise ValueError(f"num_epochs must be >= 1, got {e}")
    e = min(e, record.num_epochs)
    hardness = record.error_norms[:, :e].mean(axis=1)
    return ScoreVector(metric="el2n", hardness=np.ascontiguousarray(hardness)).validate()


def write_dynamics(record: DynamicsRecord, path) -> None:
    """Margins always; correctness bits and error norms behind flag bits."""
    path = Path(path)
    n, t = record.margins.shape
    flags = FLAG_CORRECTNESS
    if record.error_norms is not None:
        flags |= FLAG_ERROR_NORMS
    with open(path, "wb") as fh:
        fh.write(_DYN_HEADER.pack(DYN_MAGIC, DYN_VERSION, n, t, flags))
        fh.write(np.ascontiguousarray(record.margins, dtype="<f4").tobytes())
        fh.write(np.packbits(record.correctness.ravel()).tobytes())
        if record.error_norms is not None:
            fh.write(np.ascontiguousarray(record.error_norms, dtype="<f4").tobytes())
    audit.record_write(path)


def read_dynamics(path) -> DynamicsRecord:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    audit.record_read(path)
    if len(raw) < _DYN_HEADER.size:
        raise ValueError(f"{path}: file too short for header")
    magic, version, n, t, flags = _DYN_HEADER.unpack_from(raw, 0)
    if magic != DYN_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {DYN_MAGIC!r}")
    if version != DYN_VERSION:
        raise ValueError(f"{path}: format version {version}, expected {DYN_VERSION}")
    expected = _DYN_HEADER.size + 4 * n * t
    if flags & FLAG_CORRECTNESS:
        expected += (n * t + 7) // 8
    if flags & FLAG_ERROR_NORMS:
        expected += 4 * n * t
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")

    off = _DYN_HEADER.size
    margins = (
        np.frombuffer(raw, dtype="<f4", count=n * t, offset=off)
        .reshape(n, t)
        .astype(np.float64)
    )
    off += 4 * n * t
    if flags & FLAG_CORRECTNESS:
        nbits = n * t
        packed = np.frombuffer(raw, dtype=np.uint8, count=(nbits + 7) // 8, offset=off)
        bits = np.unpackbits(packed)[:nbits].reshape(n, t).astype(bool)
        if not np.array_equal(bits, margins > 0):
            raise ValueError(f"{path}: stored correctness disagrees with margins")
        off += (nbits + 7) // 8
    error_norms = None
    if flags & FLAG_ERROR_NORMS:
        error_norms = (
            np.frombuffer(raw, dtype="<f4", count=n * t, offset=off)
            .reshape(n, t)
            .astype(np.float64)
        )
    return DynamicsRecord(margins=margins, error_norms=error_norms).validate()
