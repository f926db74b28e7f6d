"""Fixed per-class embedding vectors and the label-to-embedding-map pipeline.

An EmbeddingSet assigns every class one frozen vector that carries no
information about either visual domain. Label maps are turned into dense
embedding maps by pasting the class vector at each pixel, then down-sampled
to feature resolution. No gradient ever reaches the vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classes import CLASS_ALIASES, CLASS_NAMES, IGNORE_ID, NUM_CLASSES
from .errors import DimensionError, InputError
from .tensor import Tensor, bilinear_resize, nearest_resize


@dataclass(frozen=True)
class EmbeddingSet:
    kind: str               # one_hot | random | loaded
    dim: int
    vectors: np.ndarray     # [C, dim] float64, write-protected
    class_names: tuple

    def __post_init__(self):
        self.vectors.setflags(write=False)

    def row(self, class_id: int) -> np.ndarray:
        return self.vectors[class_id]


def build_one_hot(num_classes: int = NUM_CLASSES) -> EmbeddingSet:
    """Standard basis vectors, one per class."""
    if num_classes < 2:
        raise InputError("need at least 2 classes")
    return EmbeddingSet("one_hot", num_classes, np.eye(num_classes),
                        CLASS_NAMES[:num_classes] if num_classes <= NUM_CLASSES
                        else tuple(f"class_{i}" for i in range(num_classes)))


def build_random(num_classes: int, dim: int, seed: int) -> EmbeddingSet:
    """I.i.d. standard-normal rows, L2-normalized; deterministic per seed."""
    if dim < 2:
        raise InputError("random embeddings need dim >= 2")
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((num_classes, dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    names = CLASS_NAMES[:num_classes] if num_classes <= NUM_CLASSES \
        else tuple(f"class_{i}" for i in range(num_classes))
    return EmbeddingSet("random", dim, rows, names)


def load_vectors(path, class_names=CLASS_NAMES) -> EmbeddingSet:
    """Parse a word-vector text file and order rows by the class table.

    Format: first line `D <int>`, then one `<name> <v1> ... <vD>` line per
    word, UTF-8, LF endings. Class names match case-insensitively, with the
    alias table tried when the canonical name is absent. Vectors are used
    as-is, without re-normalization.
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise InputError(f"{path}: empty vector file")
    header = lines[0].split()
    if len(header) != 2 or header[0] != "D":
        raise InputError(f"{path}:1: expected header 'D <int>'")
    try:
        dim = int(header[1])
    except ValueError:
        raise InputError(f"{path}:1: bad dimension {header[1]!r}") from None

    table = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != dim + 1:
            raise InputError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
        try:
            table[parts[0].lower()] = np.array([float(v) for v in parts[1:]])
        except ValueError:
            raise InputError(f"{path}:{lineno}: bad float value") from None

    rows = []
    for name in class_names:
        candidates = (name,) + CLASS_ALIASES.get(name, ())
        for candidate in candidates:
            if candidate.lower() in table:
                rows.append(table[candidate.lower()])
                break
        else:
            raise InputError(f"class {name} unresolved in {path}")
    return EmbeddingSet("loaded", dim, np.stack(rows), tuple(class_names))


def save_vectors(path, embeddings: EmbeddingSet) -> None:
    """Inverse of load_vectors; float repr keeps the round trip exact."""
    lines = [f"D {embeddings.dim}"]
    for name, row in zip(embeddings.class_names, embeddings.vectors):
        lines.append(name + " " + " ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def proj(labels: np.ndarray, embeddings: EmbeddingSet) -> Tensor:
    """Paste each pixel's class vector into a dense [N,D,H,W] map.

    Ignore pixels carry the zero vector. The result is a constant: no
    gradient flows into the embedding table.
    """
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    if labels.ndim != 3:
        raise DimensionError("proj expects [H,W] or [N,H,W] labels")
    num_classes = embeddings.vectors.shape[0]
    lookup = np.vstack([embeddings.vectors, np.zeros((1, embeddings.dim))])
    idx = np.where(labels == IGNORE_ID, num_classes, labels).astype(np.int64)
    if idx.max() > num_classes:
        raise InputError("label id outside the embedding table")
    grid = lookup[idx]                                   # [N,H,W,D]
    return Tensor(np.ascontiguousarray(grid.transpose(0, 3, 1, 2)))


def downsample_embedding(embedding_map: Tensor, out_h: int, out_w: int,
                         mode: str = "bilinear") -> Tensor:
    """Shrink an embedding map to feature resolution.

    Bilinear blending lets sub-grid minority objects leave a trace in the
    output; nearest sampling can drop them entirely.
    """
    n, d, h, w = embedding_map.data.shape
    if out_h > h or out_w > w:
        raise DimensionError("downsample_embedding cannot enlarge the map")
    if mode == "bilinear":
        return bilinear_resize(embedding_map, out_h, out_w)
    if mode == "nearest":
        return nearest_resize(embedding_map, out_h, out_w)
    raise InputError(f"unknown interpolation mode {mode!r}")


def make_embeddings(kind: str, num_classes: int = NUM_CLASSES, *,
                    dim: int = 300, seed: int = 0,
                    vector_file=None) -> EmbeddingSet:
    """Config-level constructor: kind is one of onehot|random|file."""
    if kind in ("onehot", "one_hot"):
        return build_one_hot(num_classes)
    if kind == "random":
        return build_random(num_classes, dim, seed)
    if kind == "file":
        if vector_file is None:
            raise InputError("prior kind 'file' needs a vector file path")
        return load_vectors(vector_file, CLASS_NAMES[:num_classes])
    raise InputError(f"unknown prior kind {kind!r}")
