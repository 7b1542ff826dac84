"""Dataset manifest, embedding store, label/score vectors, and their file formats.

Embedding files are a small custom binary so readers stay dependency-free and
round-trips are bit-exact:

    bytes 0..3    magic "ELFS"
    bytes 4..7    format version, u32 little-endian (currently 1)
    bytes 8..15   N, u64
    bytes 16..23  d, u64
    bytes 24..31  C, u64
    bytes 32..35  flags, u32 (bit0 = rows are unit-L2)
    bytes 36..    N*d float32 values, little-endian, row-major

A JSON sidecar (same basename, ".manifest.json") mirrors the manifest for
human inspection and carries the fields the binary has no room for (name,
seed). Label files are newline-separated decimal integers; score files are
CSV with header "index,hardness".
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import audit

MAGIC = b"ELFS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQQQI")  # magic, version, N, d, C, flags
HEADER_SIZE = _HEADER.size  # 36

FLAG_NORMALIZED = 0x1

UNIT_NORM_TOL = 1e-5

SCORE_METRICS = ("aum", "forgetting", "el2n")
LABEL_KINDS = ("ground_truth", "pseudo")


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    num_examples: int
    embed_dim: int
    num_classes: int
    normalized: bool
    seed: int

    def validate(self) -> None:
        if self.num_examples < 1:
            raise ValueError(f"num_examples must be >= 1, got {self.num_examples}")
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_classes > self.num_examples:
            raise ValueError(
                f"num_classes ({self.num_classes}) exceeds num_examples ({self.num_examples})"
            )

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "num_examples": self.num_examples,
            "embed_dim": self.embed_dim,
            "num_classes": self.num_classes,
            "normalized": self.normalized,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetManifest":
        return cls(
            name=str(doc["name"]),
            num_examples=int(doc["num_examples"]),
            embed_dim=int(doc["embed_dim"]),
            num_classes=int(doc["num_classes"]),
            normalized=bool(doc["normalized"]),
            seed=int(doc["seed"]),
        )


@dataclass(frozen=True)
class EmbeddingStore:
    """N x d float32 matrix plus its manifest. Immutable after validation."""

    manifest: DatasetManifest
    data: np.ndarray

    def validate(self) -> "EmbeddingStore":
        self.manifest.validate()
        if self.data.dtype != np.float32:
            raise ValueError(f"embedding dtype must be float32, got {self.data.dtype}")
        if self.data.ndim != 2:
            raise ValueError(f"embedding matrix must be 2-D, got shape {self.data.shape}")
        n, d = self.data.shape
        if n != self.manifest.num_examples or d != self.manifest.embed_dim:
            raise ValueError(
                f"matrix shape {self.data.shape} does not match manifest "
                f"({self.manifest.num_examples}, {self.manifest.embed_dim})"
            )
        if not np.all(np.isfinite(self.data)):
            raise ValueError("embedding matrix contains NaN or Inf")
        if self.manifest.normalized:
            norms = row_norms(self.data)
            worst = float(np.max(np.abs(norms - 1.0)))
            if worst > UNIT_NORM_TOL:
                raise ValueError(
                    f"normalized flag set but a row norm deviates from 1 by {worst:.3g}"
                )
        self.data.setflags(write=False)
        return self

    @property
    def num_examples(self) -> int:
        return self.manifest.num_examples

    @property
    def embed_dim(self) -> int:
        return self.manifest.embed_dim

    @property
    def num_classes(self) -> int:
        return self.manifest.num_classes

    def restrict(self, indices: np.ndarray, name_suffix: str = "subset") -> "EmbeddingStore":
        """New store holding the given rows, in the given order."""
        indices = np.asarray(indices, dtype=np.int64)
        sub = self.data[indices].copy()
        manifest = replace(
            self.manifest,
            name=f"{self.manifest.name}.{name_suffix}",
            num_examples=int(len(indices)),
        )
        return EmbeddingStore(manifest=manifest, data=sub).validate()


@dataclass(frozen=True)
class LabelVector:
    labels: np.ndarray
    kind: str
    num_classes: int

    def validate(self) -> "LabelVector":
        if self.kind not in LABEL_KINDS:
            raise ValueError(f"label kind must be one of {LABEL_KINDS}, got {self.kind!r}")
        arr = self.labels
        if arr.ndim != 1:
            raise ValueError("labels must be 1-D")
        if len(arr) and (arr.min() < 0 or arr.max() >= self.num_classes):
            raise ValueError(
                f"labels must lie in [0, {self.num_classes}), "
                f"got range [{arr.min()}, {arr.max()}]"
            )
        arr.setflags(write=False)
        return self

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class ScoreVector:
    """Per-example difficulty, single convention: larger = harder."""

    metric: str
    hardness: np.ndarray

    def validate(self) -> "ScoreVector":
        if self.metric not in SCORE_METRICS:
            raise ValueError(f"metric must be one of {SCORE_METRICS}, got {self.metric!r}")
        if self.hardness.ndim != 1:
            raise ValueError("hardness must be 1-D")
        if not np.all(np.isfinite(self.hardness)):
            raise ValueError("hardness contains NaN or Inf")
        self.hardness.setflags(write=False)
        return self

    @classmethod
    def from_aum(cls, aum: np.ndarray) -> "ScoreVector":
        # AUM is large for easy examples; hardness is the negation.
        return cls(metric="aum", hardness=-np.asarray(aum, dtype=np.float64)).validate()

    def __len__(self) -> int:
        return len(self.hardness)


def row_norms(data: np.ndarray) -> np.ndarray:
    """Per-row L2 norms with 64-bit accumulation."""
    x = data.astype(np.float64, copy=False)
    return np.sqrt(np.einsum("ij,ij->i", x, x))


def l2_normalize(store: EmbeddingStore) -> EmbeddingStore:
    """Divide each row by its L2 norm and set the normalized flag.

    Raises ValueError naming the first zero-norm row, since those have no
    direction to keep.
    """
    norms = row_norms(store.data)
    zero = np.nonzero(norms == 0.0)[0]
    if len(zero):
        raise ValueError(f"cannot normalize: row {int(zero[0])} has zero norm")
    data = (store.data.astype(np.float64) / norms[:, None]).astype(np.float32)
    manifest = replace(store.manifest, normalized=True)
    return EmbeddingStore(manifest=manifest, data=data).validate()


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".manifest.json")


def write_embeddings(store: EmbeddingStore, path) -> None:
    """Write the binary embedding file plus its JSON manifest sidecar."""
    store.validate()
    path = Path(path)
    flags = FLAG_NORMALIZED if store.manifest.normalized else 0
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        store.manifest.num_examples,
        store.manifest.embed_dim,
        store.manifest.num_classes,
        flags,
    )
    payload = np.ascontiguousarray(store.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())
    audit.record_write(path)
    sidecar = _sidecar_path(path)
    with open(sidecar, "w") as fh:
        json.dump(store.manifest.to_json(), fh, indent=2)
        fh.write("\n")
    audit.record_write(sidecar)


def read_embeddings(path) -> EmbeddingStore:
    """Read a binary embedding file written by write_embeddings."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    audit.record_read(path)
    if len(raw) < HEADER_SIZE:
        raise ValueError(
            f"{path}: file too short for header ({len(raw)} < {HEADER_SIZE} bytes)"
        )
    magic, version, n, d, c, flags = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    expected = HEADER_SIZE + 4 * n * d
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", count=n * d, offset=HEADER_SIZE)
    data = data.reshape(n, d).copy()

    name = path.stem
    seed = 0
    sidecar = _sidecar_path(path)
    if sidecar.exists():
        with open(sidecar) as fh:
            doc = json.load(fh)
        audit.record_read(sidecar)
        side = DatasetManifest.from_json(doc)
        binary = (n, d, c, bool(flags & FLAG_NORMALIZED))
        stated = (side.num_examples, side.embed_dim, side.num_classes, side.normalized)
        if binary != stated:
            raise ValueError(f"{path}: manifest sidecar disagrees with binary header")
        name, seed = side.name, side.seed

    manifest = DatasetManifest(
        name=name,
        num_examples=n,
        embed_dim=d,
        num_classes=c,
        normalized=bool(flags & FLAG_NORMALIZED),
        seed=seed,
    )
    return EmbeddingStore(manifest=manifest, data=data).validate()


def write_labels(vec: LabelVector, path) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        for v in vec.labels:
            fh.write(f"{int(v)}\n")
    audit.record_write(path)


def read_labels(path, kind: str, num_classes: int | None = None) -> LabelVector:
    """Read newline-separated integer labels. num_classes defaults to max+1."""
    path = Path(path)
    with open(path) as fh:
        values = [int(line) for line in fh if line.strip()]
    audit.record_read(path)
    labels = np.asarray(values, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 2
    return LabelVector(labels=labels, kind=kind, num_classes=num_classes).validate()


def write_scores(vec: ScoreVector, path) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("index,hardness\n")
        for i, h in enumerate(vec.hardness):
            # repr of a Python float is the shortest round-trip form
            fh.write(f"{i},{float(h)!r}\n")
    audit.record_write(path)


def read_scores(path, metric: str) -> ScoreVector:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "index,hardness":
            raise ValueError(f"{path}: expected header 'index,hardness', got {header!r}")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    audit.record_read(path)
    indices = np.asarray([int(r[0]) for r in rows], dtype=np.int64)
    hardness = np.asarray([float(r[1]) for r in rows], dtype=np.float64)
    if len(indices) and not np.array_equal(indices, np.arange(len(indices))):
        raise ValueError(f"{path}: score rows must cover indices 0..N-1 in order")
    return ScoreVector(metric=metric, hardness=hardness).validate()
