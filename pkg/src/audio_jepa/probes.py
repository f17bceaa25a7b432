"""Frozen-embedding evaluation: clip embeddings, kNN and linear probes.

Embedding file layout (little-endian)::

    magic   8 bytes b"AJEMBED1"
    count   uint32
    records count x {id_len uint16, id UTF-8, label int64 (-1 = none),
                     width uint32, float32 x width}
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dsp import AudioClip, MelConfig, preprocess
from .jepa import JepaModel, forward_target


@dataclass
class EmbeddingSet:
    vectors: np.ndarray  # [n, width]
    labels: np.ndarray  # [n] int
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError(f"embeddings must be 2-D, got shape {self.vectors.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.vectors))]
        if not len(self.vectors) == len(self.labels) == len(self.ids):
            raise ValueError("vectors, labels and ids must have equal lengths")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embeddings contain non-finite values")

    def __len__(self):
        return len(self.vectors)

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class ProbeConfig:
    k: int = 5
    metric: str = "cosine"
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("probe.k must be >= 1")
        if self.metric not in ("cosine", "euclidean"):
            raise ValueError(f"probe.metric must be 'cosine' or 'euclidean', got {self.metric!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("probe.epochs >= 0, probe.batch_size >= 1 and probe.lr > 0 required")


@dataclass
class ProbeResult:
    accuracy: float
    per_class: dict[int, float]
    counts: dict[int, int]
    predictions: np.ndarray


@dataclass
class LinearProbe:
    weight: np.ndarray  # [classes, width]
    bias: np.ndarray  # [classes]
    losses: list[float] = field(default_factory=list)


# --- embeddings -------------------------------------------------------------


def embed_patches(model: JepaModel, patches: np.ndarray | torch.Tensor) -> np.ndarray:
    """Mean-pooled target-encoder embedding of a [N, P] or [B, N, P] patch array."""
    patches = torch.as_tensor(patches, dtype=model.mask_token.dtype)
    return forward_target(model, patches).mean(dim=-2).double().numpy()


def embed_clip(model: JepaModel, clip: AudioClip, mel: MelConfig, patch_side: int = 16) -> np.ndarray:
    grid = preprocess(clip, mel, patch_side)
    if (grid.grid_h, grid.grid_w) != tuple(model.grid):
        raise ValueError(f"clip yields a {grid.grid_h}x{grid.grid_w} grid, model expects {model.grid}")
    return embed_patches(model, grid.patches)


# --- kNN --------------------------------------------------------------------


def _unit(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cosine distance is undefined for zero-norm vectors")
    return x / norms


def distances(train: np.ndarray, queries: np.ndarray, metric: str) -> np.ndarray:
    """[n_queries, n_train] distance matrix."""
    if metric == "cosine":
        return 1.0 - _unit(queries) @ _unit(train).T
    sq = (queries**2).sum(1)[:, None] + (train**2).sum(1)[None, :] - 2.0 * queries @ train.T
    return np.sqrt(np.maximum(sq, 0.0))


def _vote(neighbor_labels: np.ndarray) -> int:
    """Majority vote over neighbors sorted nearest-first; ties go to the class seen first, then lowest id."""
    classes, counts = np.unique(neighbor_labels, return_counts=True)
    tied = classes[counts == counts.max()]
    for label in neighbor_labels:
        if label in tied:
            return int(label)
    return int(tied.min())


def knn_predict(train: EmbeddingSet, queries: np.ndarray, cfg: ProbeConfig) -> np.ndarray:
    if len(train) == 0:
        raise ValueError("kNN needs a non-empty training set")
    if cfg.k > len(train):
        raise ValueError(f"k={cfg.k} exceeds training-set size {len(train)}")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[1] != train.width:
        raise ValueError(f"query width {queries.shape[1]} != embedding width {train.width}")
    d = distances(train.vectors, queries, cfg.metric)
    order = np.argsort(d, axis=1, kind="stable")[:, : cfg.k]
    return np.array([_vote(train.labels[row]) for row in order], dtype=np.int64)


def knn_classify(train: EmbeddingSet, query: np.ndarray, cfg: ProbeConfig) -> int:
    return int(knn_predict(train, np.asarray(query)[None, :], cfg)[0])


def score(predictions: np.ndarray, labels: np.ndarray) -> ProbeResult:
    labels = np.asarray(labels)
    correct = predictions == labels
    per_class, counts = {}, {}
    for c in np.unique(labels):
        sel = labels == c
        per_class[int(c)] = float(correct[sel].mean())
        counts[int(c)] = int(sel.sum())
    accuracy = float(correct.mean()) if len(labels) else 0.0
    return ProbeResult(accuracy, per_class, counts, predictions)


def _check_label_space(train: EmbeddingSet, test: EmbeddingSet) -> None:
    if train.width != test.width:
        raise ValueError(f"train width {train.width} != test width {test.width}")
    unknown = set(test.labels.tolist()) - set(train.labels.tolist())
    if unknown:
        raise ValueError(f"test labels {sorted(unknown)} never occur in the training set")


def knn_evaluate(train: EmbeddingSet, test: EmbeddingSet, cfg: ProbeConfig) -> ProbeResult:
    _check_label_space(train, test)
    return score(knn_predict(train, test.vectors, cfg), test.labels)


# --- linear probe -----------------------------------------------------------


def linear_probe_train(train: EmbeddingSet, cfg: ProbeConfig, num_classes: int | None = None) -> LinearProbe:
    """Softmax-regression probe trained with Adam on mini-batches; deterministic given ``cfg.seed``."""
    classes = np.unique(train.labels)
    if len(classes) < 2:
        raise ValueError("linear probe needs at least two classes")
    if train.labels.min() < 0:
        raise ValueError("linear probe needs non-negative class ids")
    num_classes = num_classes or int(classes.max()) + 1
    rng = np.random.default_rng(cfg.seed)
    bound = 1.0 / np.sqrt(train.width)
    weight = torch.tensor(rng.uniform(-bound, bound, (num_classes, train.width)), requires_grad=True)
    bias = torch.zeros(num_classes, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([weight, bias], lr=cfg.lr, weight_decay=cfg.weight_decay)

    x = torch.from_numpy(train.vectors)
    y = torch.from_numpy(train.labels)
    losses = []
    for _ in range(cfg.epochs):
        perm = torch.from_numpy(rng.permutation(len(train)))
        total = 0.0
        for start in range(0, len(train), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss = F.cross_entropy(F.linear(x[idx], weight, bias), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        losses.append(total / len(train))
    return LinearProbe(weight.detach().numpy().copy(), bias.detach().numpy().copy(), losses)


def probe_logits(probe: LinearProbe, vectors: np.ndarray) -> np.ndarray:
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if vectors.shape[1] != probe.weight.shape[1]:
        raise ValueError(f"embedding width {vectors.shape[1]} != probe width {probe.weight.shape[1]}")
    return vectors @ probe.weight.T + probe.bias


def linear_probe_evaluate(probe: LinearProbe, test: EmbeddingSet) -> ProbeResult:
    # np.argmax returns the first maximum, i.e. the lowest class id on ties
    predictions = np.argmax(probe_logits(probe, test.vectors), axis=1).astype(np.int64)
    return score(predictions, test.labels)


# --- embedding file ---------------------------------------------------------

EMBED_MAGIC = b"AJEMBED1"


def save_embeddings(path: str | Path, embeddings: EmbeddingSet) -> None:
    chunks = [EMBED_MAGIC, struct.pack("<I", len(embeddings))]
    for clip_id, label, vector in zip(embeddings.ids, embeddings.labels, embeddings.vectors):
        encoded = clip_id.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<qI", int(label), len(vector)))
        chunks.append(np.asarray(vector, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_embeddings(path: str | Path) -> EmbeddingSet:
    raw = Path(path).read_bytes()
    if not raw.startswith(EMBED_MAGIC):
        raise ValueError(f"{path}: not an embedding file")
    try:
        (count,) = struct.unpack_from("<I", raw, len(EMBED_MAGIC))
        pos = len(EMBED_MAGIC) + 4
        ids, labels, vectors = [], [], []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            ids.append(raw[pos + 2 : pos + 2 + n].decode("utf-8"))
            pos += 2 + n
            label, width = struct.unpack_from("<qI", raw, pos)
            pos += 12
            if pos + 4 * width > len(raw):
                raise struct.error("record runs past end of file")
            vectors.append(np.frombuffer(raw, dtype="<f4", count=width, offset=pos))
            labels.append(label)
            pos += 4 * width
    except struct.error as exc:
        raise ValueError(f"{path}: truncated embedding file") from exc
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes after {count} records")
    width = len(vectors[0]) if vectors else 0
    return EmbeddingSet(np.array(vectors).reshape(count, width), np.array(labels), ids)
