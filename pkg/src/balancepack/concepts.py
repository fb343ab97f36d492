"""Embedding storage, exact top-k concept assignment, and pseudo-captions.

Embeddings are plain float32 numpy matrices, one vector per row. They are
ingested precomputed; no encoder runs here. Similarity is the dot product
of L2-normalized rows, computed with float64 accumulation over the float32
values, which matches common embedding dumps while bounding accumulation
error. The top-k scan is exact (full stable sort per row, ties resolved to
the lower concept index); there is no approximate index.

Binary embedding format: magic ``EMB1``, uint32-LE rows, uint32-LE dim,
then rows*dim float32-LE values, row-major.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EMB_MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sII")

# Rows with an L2 norm below this signal upstream corruption; hard error.
NORM_EPS = 1e-12

CAPTION_SEPARATOR = ", "

# Image rows per worker task in topk_concepts. Fixed so results do not
# depend on the thread count.
_TOPK_CHUNK = 8192


@dataclass(frozen=True)
class ConceptAssignment:
    """Ranked top-k concepts for one sample.

    ``concepts`` holds (concept_index, cosine_similarity) pairs in
    non-increasing similarity order; indices are distinct.
    """

    sample_index: int
    concepts: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        if not self.concepts:
            raise ValueError("assignment must contain at least one concept")
        indices = [c for c, _ in self.concepts]
        if len(set(indices)) != len(indices):
            raise ValueError(f"duplicate concept index in assignment {self.sample_index}")
        sims = [s for _, s in self.concepts]
        for s in sims:
            if not -1.0 - 1e-6 <= s <= 1.0 + 1e-6:
                raise ValueError(f"similarity {s} outside [-1, 1]")
        if any(a < b for a, b in zip(sims, sims[1:])):
            raise ValueError("similarities must be non-increasing in rank order")

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(c for c, _ in self.concepts)


@dataclass
class ConceptVocabulary:
    """Concept names plus their embedding matrix, row i = concept i."""

    names: list[str]
    embeddings: np.ndarray

    def __post_init__(self) -> None:
        self.names = [n.strip() for n in self.names]
        if len(set(self.names)) != len(self.names):
            raise ValueError("vocabulary names must be unique after whitespace trimming")
        validate_embeddings(self.embeddings)
        if self.embeddings.shape[0] != len(self.names):
            raise ValueError(
                f"vocabulary has {len(self.names)} names but "
                f"{self.embeddings.shape[0]} embedding rows"
            )

    @property
    def size(self) -> int:
        return len(self.names)


def validate_embeddings(m: np.ndarray) -> None:
    if m.ndim != 2:
        raise ValueError(f"embedding matrix must be 2-D, got shape {m.shape}")
    rows, dim = m.shape
    if rows < 1 or dim < 1:
        raise ValueError(f"embedding matrix must be at least 1x1, got {rows}x{dim}")
    if not np.all(np.isfinite(m)):
        raise ValueError("embedding matrix contains non-finite values")


def load_embeddings(path: str | Path) -> np.ndarray:
    """Read an EMB1 file into a float32 (rows, dim) matrix.

    Malformed input raises ValueError naming the offending byte offset.
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated header at byte {len(data)}, need {_HEADER.size}")
    magic, rows, dim = _HEADER.unpack_from(data)
    if magic != EMB_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r} at byte 0, expected {EMB_MAGIC!r}")
    if rows < 1 or dim < 1:
        raise ValueError(f"{path}: invalid header rows={rows} dim={dim} at byte 4")
    expected = _HEADER.size + rows * dim * 4
    if len(data) != expected:
        raise ValueError(
            f"{path}: truncated payload at byte {len(data)}, expected {expected} bytes"
        )
    m = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(rows, dim).copy()
    finite = np.isfinite(m.ravel())
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise ValueError(
            f"{path}: non-finite value at byte {_HEADER.size + bad * 4} (element {bad})"
        )
    return m


def save_embeddings(path: str | Path, m: np.ndarray) -> None:
    """Write a float32 matrix in the EMB1 binary format."""
    validate_embeddings(m)
    rows, dim = m.shape
    payload = np.ascontiguousarray(m, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(EMB_MAGIC, rows, dim))
        f.write(payload)


def load_vocabulary(names_path: str | Path, embeddings_path: str | Path) -> ConceptVocabulary:
    """Load a TSV of ``index<TAB>name`` rows plus the matching EMB1 file."""
    entries: dict[int, str] = {}
    with open(names_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{names_path}: line {lineno}: expected 'index<TAB>name'")
            try:
                idx = int(parts[0])
            except ValueError:
                raise ValueError(f"{names_path}: line {lineno}: bad index {parts[0]!r}") from None
            if idx in entries:
                raise ValueError(f"{names_path}: line {lineno}: duplicate index {idx}")
            entries[idx] = parts[1]
    if not entries:
        raise ValueError(f"{names_path}: empty vocabulary")
    size = len(entries)
    if set(entries) != set(range(size)):
        raise ValueError(f"{names_path}: indices must cover 0..{size - 1} exactly")
    names = [entries[i] for i in range(size)]
    return ConceptVocabulary(names=names, embeddings=load_embeddings(embeddings_path))


def save_vocabulary(
    names_path: str | Path, embeddings_path: str | Path, vocab: ConceptVocabulary
) -> None:
    with open(names_path, "w", encoding="utf-8", newline="\n") as f:
        for i, name in enumerate(vocab.names):
            f.write(f"{i}\t{name}\n")
    save_embeddings(embeddings_path, vocab.embeddings)


def l2_normalize(m: np.ndarray) -> np.ndarray:
    """Scale every row to unit Euclidean norm; output stays float32.

    Rows with norm below NORM_EPS are rejected with the row index.
    """
    validate_embeddings(m)
    m32 = np.ascontiguousarray(m, dtype=np.float32)
    norms = np.linalg.norm(m32.astype(np.float64), axis=1)
    bad = np.flatnonzero(norms < NORM_EPS)
    if bad.size:
        raise ValueError(f"row {int(bad[0])} has near-zero norm {norms[bad[0]]:.3e}")
    return (m32.astype(np.float64) / norms[:, None]).astype(np.float32)


def _ensure_normalized(m: np.ndarray) -> np.ndarray:
    m32 = np.ascontiguousarray(m, dtype=np.float32)
    norms = np.linalg.norm(m32.astype(np.float64), axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        return l2_normalize(m32)
    return m32


def cosine_similarities(images: np.ndarray, concepts: np.ndarray) -> np.ndarray:
    """Dot products of float32 rows, accumulated in float64.

    Inputs are assumed L2-normalized; the result is a float64
    (n_images, n_concepts) similarity matrix.
    """
    return images.astype(np.float64) @ concepts.astype(np.float64).T


def topk_concepts(
    images: np.ndarray,
    vocab: ConceptVocabulary,
    k: int,
    threads: int = 1,
) -> list[ConceptAssignment]:
    """Assign each image row its k most cosine-similar concepts.

    The scan is exhaustive and exact: per image, all concepts are scored
    and sorted descending, with equal similarities resolved to the lower
    concept index. Rows may be processed by parallel workers; output order
    and content are independent of ``threads``.
    """
    validate_embeddings(images)
    if images.shape[1] != vocab.embeddings.shape[1]:
        raise ValueError(
            f"dimension mismatch: images have dim {images.shape[1]}, "
            f"vocabulary has dim {vocab.embeddings.shape[1]}"
        )
    if not 1 <= k <= vocab.size:
        raise ValueError(f"k={k} out of range [1, {vocab.size}]")

    img = _ensure_normalized(images)
    con = _ensure_normalized(vocab.embeddings)

    def score_chunk(start: int) -> list[ConceptAssignment]:
        chunk = img[start : start + _TOPK_CHUNK]
        sims = cosine_similarities(chunk, con)
        # Stable sort on -sims: descending similarity, ties keep lower index.
        order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        picked = np.take_along_axis(sims, order, axis=1)
        return [
            ConceptAssignment(
                sample_index=start + r,
                concepts=tuple(
                    (int(order[r, j]), float(picked[r, j])) for j in range(k)
                ),
            )
            for r in range(chunk.shape[0])
        ]

    starts = range(0, img.shape[0], _TOPK_CHUNK)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(score_chunk, starts))
    else:
        parts = [score_chunk(s) for s in starts]
    return [a for part in parts for a in part]


def build_pseudo_caption(assignment: ConceptAssignment, vocab: ConceptVocabulary) -> str:
    """Join the assignment's concept names in rank order with ", "."""
    for idx, _ in assignment.concepts:
        if not 0 <= idx < vocab.size:
            raise ValueError(f"concept index {idx} out of vocabulary range [0, {vocab.size})")
    return CAPTION_SEPARATOR.join(vocab.names[idx] for idx, _ in assignment.concepts)


def save_assignments(path: str | Path, assignments: Iterable[ConceptAssignment]) -> None:
    """Write assignments as JSON Lines: {"i": idx, "c": [...], "s": [...]}."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for a in assignments:
            rec = {
                "i": a.sample_index,
                "c": [c for c, _ in a.concepts],
                "s": [s for _, s in a.concepts],
            }
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_assignments(path: str | Path) -> list[ConceptAssignment]:
    out: list[ConceptAssignment] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(
                    ConceptAssignment(
                        sample_index=int(rec["i"]),
                        concepts=tuple(
                            (int(c), float(s)) for c, s in zip(rec["c"], rec["s"], strict=True)
                        ),
                    )
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
                raise ValueError(f"{path}: line {lineno}: {e}") from None
    return out


def assignment_indices(assignments: Sequence[ConceptAssignment]) -> np.ndarray:
    """Flatten assignments into one int64 vector of concept indices."""
    return np.fromiter(
        (c for a in assignments for c in a.indices),
        dtype=np.int64,
        count=sum(len(a.concepts) for a in assignments),
    )
