"""Per-task corpus indexes: build, persist, load, exact top-k search.

Search is exact brute force over cosine similarity. Rows are stored float32;
scoring runs in float64. Ties break by ascending doc_id for determinism.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import EncoderParams, encode_batch, tokenize
from .errors import (
    CorruptIndexError,
    DimMismatchError,
    DuplicateDocIdError,
    EmptyCorpusError,
    ZeroVectorError,
)
from .vecops import ZERO_NORM_EPS

INDEX_MAGIC = b"QDCIDX01"
_INDEX_HEADER = struct.Struct("<IIII")  # task_id, encoder_version, N, d


@dataclass(frozen=True)
class DocRecord:
    doc_id: str
    title: str
    text: str


def doc_encoding_text(doc: DocRecord) -> str:
    """Text fed to the encoder: title, a space, then the body."""
    return doc.title + " " + doc.text


@dataclass(eq=False)
class CorpusIndex:
    """Immutable-after-build document embedding matrix for one task."""

    task_id: int
    encoder_version: int
    dim: int
    rows: np.ndarray
    doc_ids: list[str]
    # Derived arrays land in one attribute assignment so concurrent readers
    # see either nothing or the complete triple.
    _derived: tuple | None = field(default=None, init=False, repr=False)

    def _cache(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        derived = self._derived
        if derived is None:
            rows64 = self.rows.astype(np.float64)
            derived = (
                rows64,
                np.linalg.norm(rows64, axis=1),
                np.asarray(self.doc_ids),
            )
            self._derived = derived
        return derived


def build_index(
    params: EncoderParams, corpus: list[DocRecord], task_id: int
) -> CorpusIndex:
    """Encode every document with params and freeze the rows as float32."""
    if not corpus:
        raise EmptyCorpusError(f"no documents for task {task_id}")
    doc_ids = [doc.doc_id for doc in corpus]
    seen: set[str] = set()
    for doc_id in doc_ids:
        if doc_id in seen:
            raise DuplicateDocIdError(f"duplicate doc_id {doc_id!r}")
        seen.add(doc_id)
    feats = [tokenize(doc_encoding_text(d), params.vocab_size) for d in corpus]
    rows = encode_batch(params, feats).astype(np.float32)
    return CorpusIndex(
        task_id=task_id,
        encoder_version=params.version,
        dim=params.dim,
        rows=rows,
        doc_ids=doc_ids,
    )


def _query_scores(index: CorpusIndex, q: np.ndarray) -> np.ndarray:
    rows64, norms, _ = index._cache()
    arr = np.asarray(q, dtype=np.float64)
    if arr.shape != (index.dim,):
        raise DimMismatchError(f"query shape {arr.shape} vs dim {index.dim}")
    qn = float(np.linalg.norm(arr))
    if qn < ZERO_NORM_EPS:
        raise ZeroVectorError("cannot search with a zero query embedding")
    return (rows64 @ (arr / qn)) / norms


def search_topk(
    index: CorpusIndex, q: np.ndarray, k: int
) -> list[tuple[str, float]]:
    """Exact top-k by cosine, ties by ascending doc_id; clamps k to N."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = _query_scores(index, q)
    _, _, ids_arr = index._cache()
    order = np.lexsort((ids_arr, -scores))[: min(k, len(scores))]
    return [(str(ids_arr[i]), float(scores[i])) for i in order]


def search_topk_batch(
    index: CorpusIndex, queries: np.ndarray, k: int
) -> list[list[tuple[str, float]]]:
    """Per-query search_topk over a stack of query embeddings."""
    return [search_topk(index, q, k) for q in np.asarray(queries, np.float64)]


def save_index(index: CorpusIndex, path) -> None:
    """Binary dump with a CRC32 over the payload; round-trips bit-exactly."""
    n = len(index.doc_ids)
    rows = np.ascontiguousarray(index.rows, dtype="<f4")
    parts = [rows.tobytes()]
    for doc_id in index.doc_ids:
        raw = doc_id.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    payload = b"".join(parts)
    header = _INDEX_HEADER.pack(index.task_id, index.encoder_version, n, index.dim)
    crc = struct.pack("<I", zlib.crc32(payload))
    Path(path).write_bytes(INDEX_MAGIC + header + crc + payload)


def load_index(path) -> CorpusIndex:
    """Read an index file, rejecting bad magic, bad CRC, or layout drift."""
    data = Path(path).read_bytes()
    base = len(INDEX_MAGIC) + _INDEX_HEADER.size + 4
    if len(data) < base or data[: len(INDEX_MAGIC)] != INDEX_MAGIC:
        raise CorruptIndexError(f"bad magic or truncated header: {path}")
    task_id, encoder_version, n, dim = _INDEX_HEADER.unpack(
        data[len(INDEX_MAGIC) : len(INDEX_MAGIC) + _INDEX_HEADER.size]
    )
    (crc,) = struct.unpack(
        "<I", data[len(INDEX_MAGIC) + _INDEX_HEADER.size : base]
    )
    payload = data[base:]
    if n < 1 or dim < 1:
        raise CorruptIndexError(f"invalid header counts: {path}")
    if zlib.crc32(payload) != crc:
        raise CorruptIndexError(f"payload CRC mismatch: {path}")
    rows_bytes = n * dim * 4
    if len(payload) < rows_bytes:
        raise CorruptIndexError(f"row data truncated: {path}")
    rows = np.frombuffer(payload, dtype="<f4", count=n * dim).reshape(n, dim)
    rows = rows.astype(np.float32)
    offset = rows_bytes
    doc_ids: list[str] = []
    for _ in range(n):
        if offset + 4 > len(payload):
            raise CorruptIndexError(f"doc_id table truncated: {path}")
        (length,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        if offset + length > len(payload):
            raise CorruptIndexError(f"doc_id table truncated: {path}")
        try:
            doc_ids.append(payload[offset : offset + length].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise CorruptIndexError(f"doc_id not valid UTF-8: {path}") from exc
        offset += length
    if offset != len(payload):
        raise CorruptIndexError(f"trailing bytes after doc_id table: {path}")
    if len(set(doc_ids)) != n:
        raise CorruptIndexError(f"duplicate doc_ids in file: {path}")
    if not np.all(np.isfinite(rows)) or bool(
        (np.linalg.norm(rows.astype(np.float64), axis=1) < ZERO_NORM_EPS).any()
    ):
        raise CorruptIndexError(f"non-finite or zero rows: {path}")
    return CorpusIndex(
        task_id=task_id,
        encoder_version=encoder_version,
        dim=dim,
        rows=rows,
        doc_ids=doc_ids,
    )
