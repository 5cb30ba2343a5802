"""Embedding matrix I/O, L2 normalization, and exact cosine k-NN.

Binary layout (little-endian): magic ``EMB1``, u32 N, u32 d, then N*d float32
values row-major.  Image ids live in a companion text file ``<path>.ids``,
one id per row, same order.  Search is exact brute force; dot products
accumulate in float64 so tie-breaking is reproducible.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"EMB1"


class EmbedStoreError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingMatrix:
    ids: tuple[str, ...]
    data: np.ndarray  # N x d float32
    normalized: bool = False

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise EmbedStoreError(f"data must be 2-D, got shape {data.shape}")
        if data.shape[1] < 1:
            raise EmbedStoreError("d must be >= 1")
        if len(self.ids) != data.shape[0]:
            raise EmbedStoreError(f"{len(self.ids)} ids for {data.shape[0]} rows")
        if len(set(self.ids)) != len(self.ids):
            raise EmbedStoreError("ids must be unique")
        object.__setattr__(self, "data", data)
        if self.normalized and data.shape[0]:
            norms = np.linalg.norm(data.astype(np.float64), axis=1)
            bad = np.nonzero(np.abs(norms - 1.0) > 1e-5)[0]
            if bad.size:
                raise EmbedStoreError(f"row {bad[0]} norm {norms[bad[0]]:.6g} but normalized flag set")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def row_of(self) -> dict[str, int]:
        return {img: i for i, img in enumerate(self.ids)}

    def subset(self, ids: list[str] | tuple[str, ...]) -> "EmbeddingMatrix":
        """Rows for the given ids, in the given order."""
        row = self.row_of()
        missing = [i for i in ids if i not in row]
        if missing:
            raise EmbedStoreError(f"ids not in matrix: {missing[:5]!r}")
        idx = np.array([row[i] for i in ids], dtype=np.intp)
        return EmbeddingMatrix(tuple(ids), self.data[idx], self.normalized)


@dataclass(frozen=True, slots=True)
class NeighborList:
    query_ids: tuple[str, ...]
    indices: np.ndarray  # Q x k gallery row indices
    similarities: np.ndarray  # Q x k, descending per row
    neighbor_ids: tuple[tuple[str, ...], ...]


def _ids_path(path: Path) -> Path:
    return Path(str(path) + ".ids")


def write_embeddings(matrix: EmbeddingMatrix, path: str | Path) -> None:
    path = Path(path)
    with path.open("wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", matrix.n, matrix.d))
        f.write(np.ascontiguousarray(matrix.data, dtype="<f4").tobytes())
    _ids_path(path).write_text("".join(i + "\n" for i in matrix.ids), encoding="utf-8")


def read_embeddings(path: str | Path) -> EmbeddingMatrix:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise EmbedStoreError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise EmbedStoreError(f"{path}: truncated header")
    n, d = struct.unpack("<II", raw[4:12])
    if d < 1:
        raise EmbedStoreError(f"{path}: d must be >= 1")
    expected = 12 + 4 * n * d
    if len(raw) != expected:
        raise EmbedStoreError(f"{path}: size {len(raw)} does not match {n}x{d} ({expected} bytes)")
    data = np.frombuffer(raw, dtype="<f4", count=n * d, offset=12).reshape(n, d)
    ids_file = _ids_path(path)
    if not ids_file.exists():
        raise EmbedStoreError(f"missing id file {ids_file}")
    ids = tuple(ids_file.read_text(encoding="utf-8").splitlines())
    if len(ids) != n:
        raise EmbedStoreError(f"{ids_file}: {len(ids)} ids for {n} rows")
    return EmbeddingMatrix(ids, data.copy())


def l2_normalize(matrix: EmbeddingMatrix) -> EmbeddingMatrix:
    data = matrix.data.astype(np.float64)
    norms = np.linalg.norm(data, axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise EmbedStoreError(f"cannot normalize zero row {zero[0]}")
    out = (data / norms[:, None]).astype(np.float32)
    return EmbeddingMatrix(matrix.ids, out, normalized=True)


def _unit_rows(matrix: EmbeddingMatrix) -> np.ndarray:
    data = matrix.data.astype(np.float64)
    norms = np.linalg.norm(data, axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise EmbedStoreError(f"zero row {zero[0]} has no cosine direction")
    return data / norms[:, None]


def cosine_knn(
    queries: EmbeddingMatrix,
    gallery: EmbeddingMatrix,
    k: int,
    exclude_self: bool = False,
    threads: int = 1,
) -> NeighborList:
    """Exact top-k gallery rows by cosine similarity, ties by ascending index."""
    if queries.d != gallery.d:
        raise EmbedStoreError(f"dimension mismatch: {queries.d} vs {gallery.d}")
    if k < 1:
        raise EmbedStoreError("k must be >= 1")
    available = gallery.n - (1 if exclude_self else 0)
    if k > available:
        raise EmbedStoreError(f"k={k} exceeds {available} available gallery rows")
    q = _unit_rows(queries)
    g = _unit_rows(gallery)
    self_row: dict[int, int] = {}
    if exclude_self:
        gallery_row = gallery.row_of()
        for qi, qid in enumerate(queries.ids):
            if qid not in gallery_row:
                raise EmbedStoreError(f"exclude_self: query id {qid!r} not in gallery")
            self_row[qi] = gallery_row[qid]

    n_q = q.shape[0]
    indices = np.empty((n_q, k), dtype=np.intp)
    sims = np.empty((n_q, k), dtype=np.float64)

    def run(chunk: tuple[int, int]) -> None:
        lo, hi = chunk
        block = q[lo:hi] @ g.T
        for i in range(lo, hi):
            row = block[i - lo]
            if exclude_self:
                row = row.copy()
                row[self_row[i]] = -np.inf
            order = np.lexsort((np.arange(row.shape[0]), -row))[:k]
            indices[i] = order
            sims[i] = row[order]

    chunks = [(lo, min(lo + 512, n_q)) for lo in range(0, n_q, 512)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, chunks))
    else:
        for c in chunks:
            run(c)

    neighbor_ids = tuple(tuple(gallery.ids[j] for j in indices[i]) for i in range(n_q))
    return NeighborList(tuple(queries.ids), indices, sims, neighbor_ids)
