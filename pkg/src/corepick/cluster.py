"""Self-labeling via multi-head mutual-information clustering.

Each head is a linear map from the frozen embedding to C cluster logits, kept
in two copies: a student updated by gradient and a teacher trailing it as an
exponential moving average. Heads train independently and in parallel on a
shared objective: for every point and each of its k nearest neighbours,
maximize a weighted pointwise-mutual-information score that rewards putting
neighbours in the same cluster while a running class-marginal discourages
collapse onto one cluster.

For one pair (x, x') and one head, with student probs p = q_s(.|x), teacher
probs t = q_t(.|x'), and running marginal m:

    pmi(x, x') = log sum_c (p_c * t_c)^beta / m_c
    w(x, x')   = sum_c q_t(c|x) * q_t(c|x')        (no gradient)
    loss(x)    = -(1/2H) sum_h sum_{x' in N(x)} w_h * (pmi_h(x,x') + pmi_h(x',x))

Only the student side carries gradients. The derivative of pmi with respect
to the student's pre-temperature logits has the closed form beta*(g - p)/tau
where g_c = (p_c t_c)^beta / (m_c * S) and S is the sum inside the log; the
trainer uses that directly rather than an autodiff graph.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import audit
from .data import EmbeddingStore, LabelVector
from .knn import NeighborTable
from .optim import AdamW

MARGINAL_MOMENTUM = 0.9
MARGINAL_FLOOR = 1e-6
COLLAPSE_THRESHOLD = 0.999
COLLAPSE_PATIENCE = 5

CKPT_MAGIC = b"ELFSHEAD"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIQQQddd")  # magic, version, H, d, C, beta, ema, tau


@dataclass(frozen=True)
class TrainConfig:
    num_heads: int = 50
    num_epochs: int = 200
    batch_size: int = 512
    lr: float = 1e-4
    weight_decay: float = 1e-4
    pmi_exponent: float = 0.6
    ema_momentum: float = 0.996
    temperature: float = 0.1
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.num_heads < 1:
            raise ValueError(f"num_heads must be >= 1, got {self.num_heads}")
        if self.num_epochs < 0:
            raise ValueError(f"num_epochs must be >= 0, got {self.num_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.pmi_exponent <= 1.0:
            raise ValueError(f"pmi_exponent must be in (0, 1], got {self.pmi_exponent}")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ValueError(f"ema_momentum must be in [0, 1), got {self.ema_momentum}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        return self


@dataclass(frozen=True)
class ClusterHead:
    """Read view of one head's parameters."""

    student_w: np.ndarray  # C x d
    student_b: np.ndarray  # C
    teacher_w: np.ndarray
    teacher_b: np.ndarray
    marginal: np.ndarray  # C


@dataclass
class HeadEnsemble:
    student_w: np.ndarray  # H x C x d
    student_b: np.ndarray  # H x C
    teacher_w: np.ndarray
    teacher_b: np.ndarray
    marginal: np.ndarray  # H x C, running teacher class frequencies
    pmi_exponent: float
    ema_momentum: float
    temperature: float

    @property
    def num_heads(self) -> int:
        return self.student_w.shape[0]

    @property
    def num_classes(self) -> int:
        return self.student_w.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.student_w.shape[2]

    def head(self, h: int) -> ClusterHead:
        return ClusterHead(
            student_w=self.student_w[h],
            student_b=self.student_b[h],
            teacher_w=self.teacher_w[h],
            teacher_b=self.teacher_b[h],
            marginal=self.marginal[h],
        )


def init_ensemble(embed_dim: int, num_classes: int, config: TrainConfig) -> HeadEnsemble:
    """Fresh ensemble: per-head Gaussian student, teacher a copy, uniform marginal.

    Each head draws from its own seed stream keyed by (seed, head index), so
    the first H heads of a larger ensemble are identical to a smaller one.
    """
    config.validate()
    h, c, d = config.num_heads, num_classes, embed_dim
    student_w = np.empty((h, c, d), dtype=np.float64)
    for i in range(h):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2, i]))
        student_w[i] = rng.standard_normal((c, d)) / np.sqrt(d)
    student_b = np.zeros((h, c), dtype=np.float64)
    return HeadEnsemble(
        student_w=student_w,
        student_b=student_b,
        teacher_w=student_w.copy(),
        teacher_b=student_b.copy(),
        marginal=np.full((h, c), 1.0 / c, dtype=np.float64),
        pmi_exponent=config.pmi_exponent,
        ema_momentum=config.ema_momentum,
        temperature=config.temperature,
    )


def _log_probs(w: np.ndarray, b: np.ndarray, x: np.ndarray, temperature: float) -> np.ndarray:
    """Log-softmax of (W x + b) / tau; x is (n, d), result (n, H, C)."""
    logits = (np.einsum("hcd,nd->nhc", w, x) + b[None, :, :]) / temperature
    logits -= logits.max(axis=2, keepdims=True)
    lse = np.log(np.exp(logits).sum(axis=2, keepdims=True))
    return logits - lse


def head_probs(ensemble: HeadEnsemble, x: np.ndarray, which: str = "teacher") -> np.ndarray:
    """Per-head cluster probabilities for rows x, shape (n, H, C)."""
    x = np.asarray(x, dtype=np.float64)
    if which == "teacher":
        w, b = ensemble.teacher_w, ensemble.teacher_b
    elif which == "student":
        w, b = ensemble.student_w, ensemble.student_b
    else:
        raise ValueError(f"which must be 'teacher' or 'student', got {which!r}")
    return np.exp(_log_probs(w, b, x, ensemble.temperature))


def pmi_term(student_probs, teacher_probs, marginal, exponent: float) -> np.ndarray:
    """log sum_c (p_c t_c)^beta / m_c, broadcast over leading axes."""
    p = np.asarray(student_probs, dtype=np.float64)
    t = np.asarray(teacher_probs, dtype=np.float64)
    m = np.maximum(np.asarray(marginal, dtype=np.float64), MARGINAL_FLOOR)
    return np.log(np.sum((p * t) ** exponent / m, axis=-1))


def pair_weight(teacher_probs_a, teacher_probs_b) -> np.ndarray:
    """sum_c q_t(c|a) q_t(c|b): agreement of the two teacher distributions."""
    a = np.asarray(teacher_probs_a, dtype=np.float64)
    b = np.asarray(teacher_probs_b, dtype=np.float64)
    return np.sum(a * b, axis=-1)


def _forward(
    ensemble: HeadEnsemble,
    x: np.ndarray,
    anchors: np.ndarray,
    table: NeighborTable,
    with_grads: bool = True,
):
    """Mean loss over the anchor batch, plus student gradients if asked.

    Gathers student/teacher log-probs once for the union of anchors and their
    neighbours, then works pairwise in the log domain so saturated heads do
    not underflow.
    """
    nb = len(anchors)
    h = ensemble.num_heads
    beta = ensemble.pmi_exponent
    tau = ensemble.temperature

    neigh = table.indices[anchors]  # (nb, k)
    rows = np.unique(np.concatenate([anchors, neigh.ravel()]))
    a_pos = np.searchsorted(rows, anchors)
    n_pos = np.searchsorted(rows, neigh.ravel())
    a_pos = np.repeat(a_pos, table.k)

    xu = x[rows]
    logp_s = _log_probs(ensemble.student_w, ensemble.student_b, xu, tau)
    logp_t = _log_probs(ensemble.teacher_w, ensemble.teacher_b, xu, tau)
    logm = np.log(np.maximum(ensemble.marginal, MARGINAL_FLOOR))

    w = np.exp(logp_t[a_pos] + logp_t[n_pos]).sum(axis=2)  # (P, H), no gradient

    def pmi_parts(anchor_side, teacher_side):
        log_s = beta * (logp_s[anchor_side] + logp_t[teacher_side]) - logm[None]
        top = log_s.max(axis=2, keepdims=True)
        norm = np.exp(log_s - top).sum(axis=2, keepdims=True)
        pmi = (top + np.log(norm))[:, :, 0]
        g = np.exp(log_s - top) / norm
        return pmi, g

    pmi1, g1 = pmi_parts(a_pos, n_pos)  # pmi(x, x'): student at the anchor
    pmi2, g2 = pmi_parts(n_pos, a_pos)  # pmi(x', x): student at the neighbour

    loss = float(-(w * (pmi1 + pmi2)).sum() / (2.0 * h * nb))
    if not with_grads:
        return loss, None, None

    coef = -beta / (2.0 * h * nb * tau)
    p_s = np.exp(logp_s)
    grad_z = np.zeros_like(logp_s)
    np.add.at(grad_z, a_pos, coef * w[:, :, None] * (g1 - p_s[a_pos]))
    np.add.at(grad_z, n_pos, coef * w[:, :, None] * (g2 - p_s[n_pos]))
    grad_w = np.einsum("uhc,ud->hcd", grad_z, xu)
    grad_b = grad_z.sum(axis=0)
    return loss, grad_w, grad_b


def temi_loss(
    ensemble: HeadEnsemble, x: np.ndarray, anchors: np.ndarray, table: NeighborTable
) -> float:
    """Mean pairwise objective over the given anchors."""
    x = np.asarray(x, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.int64)
    loss, _, _ = _forward(ensemble, x, anchors, table, with_grads=False)
    return loss


def ema_update(target: np.ndarray, source: np.ndarray, momentum: float) -> None:
    """target <- momentum * target + (1 - momentum) * source, in place."""
    target *= momentum
    target += (1.0 - momentum) * source


class CollapseMonitor:
    """Tracks epochs where some head's marginal saturates on a single cluster."""

    def __init__(self, threshold: float = COLLAPSE_THRESHOLD, patience: int = COLLAPSE_PATIENCE):
        self.threshold = threshold
        self.patience = patience
        self.streak = 0

    def update(self, marginal: np.ndarray) -> bool:
        """Feed one epoch's marginals; True when the streak first hits patience."""
        if float(marginal.max()) > self.threshold:
            self.streak += 1
        else:
            self.streak = 0
        return self.streak == self.patience


def _align_heads(ensemble: HeadEnsemble, x: np.ndarray) -> None:
    """Permute every head's class ids to best agree with head 0.

    Independently trained heads settle on the same partition up to a class
    permutation, and the objective cannot tell permutations apart; averaging
    their probabilities is only meaningful once the label spaces coincide.
    Alignment maximizes argmax-label agreement with head 0 via assignment on
    the label contingency table, and permutes student, teacher, and marginal
    together so the head stays self-consistent.
    """
    from .metrics import ContingencyTable, hungarian

    c = ensemble.num_classes
    n = x.shape[0]
    labels = np.empty((n, ensemble.num_heads), dtype=np.int64)
    for lo in range(0, n, 4096):
        probs = head_probs(ensemble, x[lo : lo + 4096], which="teacher")
        labels[lo : lo + 4096] = probs.argmax(axis=2)
    ref = labels[:, 0]
    for h in range(1, ensemble.num_heads):
        counts = ContingencyTable.from_labels(ref, labels[:, h], num_a=c, num_b=c).counts
        order, _ = hungarian(-counts.astype(np.float64))  # order[new id] = old id
        for arr in (
            ensemble.student_w,
            ensemble.student_b,
            ensemble.teacher_w,
            ensemble.teacher_b,
            ensemble.marginal,
        ):
            arr[h] = arr[h][order]


def train_ensemble(
    store: EmbeddingStore,
    table: NeighborTable,
    config: TrainConfig,
) -> tuple[HeadEnsemble, list[float]]:
    """Train all heads; returns the ensemble and per-epoch mean losses."""
    config.validate()
    if table.num_examples != store.num_examples:
        raise ValueError(
            f"neighbour table covers {table.num_examples} points, store has {store.num_examples}"
        )
    x = store.data.astype(np.float64)
    n = store.num_examples
    ensemble = init_ensemble(store.embed_dim, store.num_classes, config)
    opt = AdamW(
        [ensemble.student_w, ensemble.student_b],
        lr=config.lr,
        weight_decay=config.weight_decay,
    )
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    monitor = CollapseMonitor()
    history: list[float] = []

    for epoch in range(config.num_epochs):
        perm = order_rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            anchors = perm[start : start + config.batch_size]
            loss, grad_w, grad_b = _forward(ensemble, x, anchors, table)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"loss became non-finite at epoch {epoch}, batch {start // config.batch_size}"
                )
            opt.step([grad_w, grad_b])
            ema_update(ensemble.teacher_w, ensemble.student_w, config.ema_momentum)
            ema_update(ensemble.teacher_b, ensemble.student_b, config.ema_momentum)
            # refresh the running marginal from the post-update teacher
            batch_probs = head_probs(ensemble, x[anchors], which="teacher")
            ema_update(ensemble.marginal, batch_probs.mean(axis=0), MARGINAL_MOMENTUM)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        if monitor.update(ensemble.marginal):
            warnings.warn(
                f"a head's marginal stayed above {COLLAPSE_THRESHOLD} for "
                f"{COLLAPSE_PATIENCE} consecutive epochs (epoch {epoch}); "
                "that head has likely collapsed onto one cluster",
                RuntimeWarning,
                stacklevel=2,
            )
    if config.num_epochs > 0:
        _align_heads(ensemble, x)
    return ensemble, history


def assign_pseudo_labels(ensemble: HeadEnsemble, store: EmbeddingStore) -> LabelVector:
    """Argmax of head-averaged teacher probabilities; ties take the smaller id."""
    n = store.num_examples
    labels = np.empty(n, dtype=np.int64)
    x = store.data.astype(np.float64)
    for lo in range(0, n, 4096):
        probs = head_probs(ensemble, x[lo : lo + 4096], which="teacher")
        labels[lo : lo + 4096] = probs.mean(axis=1).argmax(axis=1)
    return LabelVector(labels=labels, kind="pseudo", num_classes=store.num_classes).validate()


def write_ensemble(ensemble: HeadEnsemble, path) -> None:
    """Checkpoint: fixed header then per-head float32 blocks."""
    path = Path(path)
    h, c, d = ensemble.num_heads, ensemble.num_classes, ensemble.embed_dim
    header = _CKPT_HEADER.pack(
        CKPT_MAGIC,
        CKPT_VERSION,
        h,
        d,
        c,
        ensemble.pmi_exponent,
        ensemble.ema_momentum,
        ensemble.temperature,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for i in range(h):
            for arr in (
                ensemble.student_w[i],
                ensemble.student_b[i],
                ensemble.teacher_w[i],
                ensemble.teacher_b[i],
                ensemble.marginal[i],
            ):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    audit.record_write(path)


def read_ensemble(path) -> HeadEnsemble:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    audit.record_read(path)
    if len(raw) < _CKPT_HEADER.size:
        raise ValueError(f"{path}: file too short for header")
    magic, version, h, d, c, beta, ema, tau = _CKPT_HEADER.unpack_from(raw, 0)
    if magic != CKPT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: format version {version}, expected {CKPT_VERSION}")
    per_head = (2 * (c * d + c) + c) * 4
    expected = _CKPT_HEADER.size + h * per_head
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")

    student_w = np.empty((h, c, d), dtype=np.float64)
    student_b = np.empty((h, c), dtype=np.float64)
    teacher_w = np.empty((h, c, d), dtype=np.float64)
    teacher_b = np.empty((h, c), dtype=np.float64)
    marginal = np.empty((h, c), dtype=np.float64)
    off = _CKPT_HEADER.size
    for i in range(h):
        for arr, count in (
            (student_w[i], c * d),
            (student_b[i], c),
            (teacher_w[i], c * d),
            (teacher_b[i], c),
            (marginal[i], c),
        ):
            vals = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
            arr[...] = vals.reshape(arr.shape)
            off += 4 * count
    # float32 rounding can leave marginals summing slightly off 1
    sums = marginal.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise ValueError(f"{path}: a head's marginal does not sum to a positive value")
    marginal /= sums
    return HeadEnsemble(
        student_w=student_w,
        student_b=student_b,
        teacher_w=teacher_w,
        teacher_b=teacher_b,
        marginal=marginal,
        pmi_exponent=beta,
        ema_momentum=ema,
        temperature=tau,
    )
