"""Teacher-side sequence embeddings.

The pretrained backbone is frozen, so all the teacher needs from it is a fixed
vector per contig. Vectors either come from a file written by an external
model, or from a seeded random projection of 6-mer frequencies.
"""

from __future__ import annotations

import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import IO, Iterable, Sequence

import numpy as np

from .errors import DuplicateError, MissingDataError, ParseError, ShapeError, TooShortError
from .features import ContigRecord, _read_exact, _text_lines, kmer_counts
from .neuralnet import MlpModel, forward

EMBED_MAGIC = b"TXDE"
EMBED_VERSION = 1
PROJECTION_K = 6
DEFAULT_EMBED_DIM = 256


class EmbeddingProvider:
    kind: str
    dim: int

    def embed(self, records: Sequence[ContigRecord], threads: int = 1) -> np.ndarray:
        raise NotImplementedError


@dataclass
class FileEmbeddings(EmbeddingProvider):
    vectors: dict[str, np.ndarray]
    dim: int
    source: str | None = None
    kind: str = field(default="file_backed", init=False)

    def lookup(self, contig_ids: Sequence[str]) -> np.ndarray:
        missing = [c for c in contig_ids if c not in self.vectors]
        if missing:
            raise MissingDataError("embedding", missing)
        if not contig_ids:
            return np.zeros((0, self.dim))
        return np.vstack([self.vectors[c] for c in contig_ids])

    def embed(self, records, threads=1):
        return self.lookup([r.id for r in records])


@lru_cache(maxsize=8)
def projection_matrix(dim: int, seed: int) -> np.ndarray:
    n = 4**PROJECTION_K
    mat = np.random.default_rng(seed).standard_normal((n, dim)) / np.sqrt(n)
    mat.setflags(write=False)
    return mat


def kmer_projection_embed(record: ContigRecord, dim: int = DEFAULT_EMBED_DIM, seed: int = 0) -> np.ndarray:
    if record.length < PROJECTION_K:
        raise TooShortError(f"contig {record.id!r} shorter than {PROJECTION_K} bp")
    counts = kmer_counts(record.sequence, PROJECTION_K)
    total = counts.sum()
    if total == 0:
        raise TooShortError(f"contig {record.id!r} has no N-free {PROJECTION_K}-mer window")
    v = (counts / total) @ projection_matrix(dim, seed)
    norm = np.linalg.norm(v)
    if norm == 0:
        raise TooShortError(f"contig {record.id!r} projects to the zero vector")
    return v / norm


@dataclass
class KmerProjection(EmbeddingProvider):
    dim: int = DEFAULT_EMBED_DIM
    seed: int = 0
    kind: str = field(default="kmer_projection", init=False)

    def embed(self, records, threads=1):
        if not records:
            return np.zeros((0, self.dim))
        fn = lambda r: kmer_projection_embed(r, self.dim, self.seed)  # noqa: E731
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                rows = list(pool.map(fn, records))
        else:
            rows = [fn(r) for r in records]
        return np.vstack(rows)


def load_embedding_file(stream, source: str | None = None) -> FileEmbeddings:
    """Load embeddings from the binary ``TXDE`` format or a TSV.

    TSV rows are ``contig_id<TAB>v1<TAB>...``; an optional header starting with
    ``contig_id`` is skipped. Width is fixed by the first row.
    """
    head = stream.peek(4)[:4] if hasattr(stream, "peek") else None
    if head is None:
        data = stream.read()
        if isinstance(data, str):
            data = data.encode("utf-8")
        stream = io.BufferedReader(io.BytesIO(data))
        head = stream.peek(4)[:4]
    if head == EMBED_MAGIC:
        return _load_binary(stream, source)
    return _load_tsv(stream, source)


def _load_tsv(stream, source):
    vectors: dict[str, np.ndarray] = {}
    dim = None
    for lineno, line in enumerate(_text_lines(stream), start=1):
        if not line.strip():
            continue
        cells = line.split("\t")
        if lineno == 1 and cells[0] == "contig_id":
            continue
        cid, vals = cells[0], cells[1:]
        if dim is None:
            dim = len(vals)
            if dim == 0:
                raise ParseError("embedding row has no values", lineno, source)
        elif len(vals) != dim:
            raise ParseError(f"embedding width {len(vals)} != {dim}", lineno, source)
        if cid in vectors:
            raise DuplicateError(f"duplicate embedding id {cid!r}", lineno, source)
        try:
            vec = np.array([float(v) for v in vals])
        except ValueError as exc:
            raise ParseError(str(exc), lineno, source) from None
        if not np.all(np.isfinite(vec)):
            raise ParseError(f"non-finite embedding value for {cid!r}", lineno, source)
        vectors[cid] = vec
    if dim is None:
        raise ParseError("embedding file is empty", None, source)
    return FileEmbeddings(vectors, dim, source)


def _load_binary(stream, source):
    _read_exact(stream, 4)
    version, dim = struct.unpack("<2I", _read_exact(stream, 8))
    if version != EMBED_VERSION:
        raise ParseError(f"unsupported embedding file version {version}", None, source)
    (count,) = struct.unpack("<Q", _read_exact(stream, 8))
    vectors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (length,) = struct.unpack("<I", _read_exact(stream, 4))
        cid = _read_exact(stream, length).decode("utf-8")
        if cid in vectors:
            raise DuplicateError(f"duplicate embedding id {cid!r}", None, source)
        vec = np.frombuffer(_read_exact(stream, 4 * dim), dtype="<f4").astype(np.float64)
        if not np.all(np.isfinite(vec)):
            raise ParseError(f"non-finite embedding value for {cid!r}", None, source)
        vectors[cid] = vec
    return FileEmbeddings(vectors, dim, source)


def write_embedding_file(ids: Iterable[str], matrix: np.ndarray, stream: IO[bytes]) -> None:
    """Binary writer; values are stored as float32."""
    ids = list(ids)
    matrix = np.asarray(matrix)
    if matrix.shape[0] != len(ids):
        raise ShapeError(f"{len(ids)} ids for {matrix.shape[0]} rows")
    stream.write(EMBED_MAGIC)
    stream.write(struct.pack("<2IQ", EMBED_VERSION, matrix.shape[1], len(ids)))
    for cid, row in zip(ids, matrix):
        raw = cid.encode("utf-8")
        stream.write(struct.pack("<I", len(raw)))
        stream.write(raw)
        stream.write(np.asarray(row, dtype="<f4").tobytes())


def write_embedding_tsv(ids: Iterable[str], matrix: np.ndarray, stream: IO[str]) -> None:
    """TSV writer using ``repr`` floats, so float64 values round-trip exactly."""
    for cid, row in zip(ids, np.asarray(matrix, dtype=np.float64)):
        stream.write(cid + "\t" + "\t".join(repr(float(x)) for x in row) + "\n")


def teacher_logits(head: MlpModel, embeddings: np.ndarray) -> np.ndarray:
    return forward(head, embeddings)
