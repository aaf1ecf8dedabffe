"""Student input features: projected tetranucleotide frequencies and abundances."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import IO, Iterable, Sequence

import numpy as np

from .errors import (
    DuplicateError,
    EmptyDatasetError,
    KernelError,
    MissingDataError,
    ParseError,
    TooShortError,
)

log = logging.getLogger(__name__)

BASES = "ACGT"
DEFAULT_MIN_LENGTH = 2000
KERNEL_THRESHOLD = 1e-10

# A,C,G,T -> 0..3, everything else -> 4 (N)
_CODE = np.full(256, 4, dtype=np.uint8)
for _i, _b in enumerate(BASES):
    _CODE[ord(_b)] = _i
_COMPLEMENT = str.maketrans("ACGTN", "TGCAN")
_VALID = frozenset("ACGTN")


@dataclass(frozen=True)
class ContigRecord:
    id: str
    sequence: str

    @property
    def length(self) -> int:
        return len(self.sequence)


def reverse_complement(seq: str) -> str:
    return seq.translate(_COMPLEMENT)[::-1]


def _text_lines(stream) -> Iterable[str]:
    for raw in stream:
        if isinstance(raw, bytes):
            raw = raw.decode("ascii", errors="replace")
        yield raw.rstrip("\r\n")


def parse_fasta(stream, source: str | None = None) -> list[ContigRecord]:
    """Read every record from a (possibly multi-line) FASTA stream.

    Headers are cut at the first whitespace. Sequences are uppercased and any
    character outside ACGTN becomes N; the number of such replacements is
    logged once per file.
    """
    records: list[ContigRecord] = []
    seen: set[str] = set()
    cur_id: str | None = None
    chunks: list[str] = []
    replaced = 0

    def flush():
        nonlocal replaced
        seq = "".join(chunks).upper()
        if not _VALID.issuperset(seq):
            replaced += sum(c not in _VALID for c in seq)
            seq = "".join(c if c in _VALID else "N" for c in seq)
        records.append(ContigRecord(cur_id, seq))

    for lineno, line in enumerate(_text_lines(stream), start=1):
        if line.startswith(">"):
            if cur_id is not None:
                flush()
            header = line[1:].strip()
            cur_id = header.split()[0] if header else ""
            if not cur_id:
                raise ParseError("empty FASTA header", lineno, source)
            if cur_id in seen:
                raise DuplicateError(f"duplicate contig id {cur_id!r}", lineno, source)
            seen.add(cur_id)
            chunks = []
        elif line.strip():
            if cur_id is None:
                raise ParseError("sequence data before first FASTA header", lineno, source)
            chunks.append(line.strip())
    if cur_id is not None:
        flush()
    if replaced:
        log.warning("%s: replaced %d non-ACGTN characters with N", source or "fasta", replaced)
    return records


def write_fasta(records: Iterable[ContigRecord], stream: IO[str], width: int = 80) -> None:
    for rec in records:
        stream.write(f">{rec.id}\n")
        for i in range(0, len(rec.sequence), width):
            stream.write(rec.sequence[i : i + width] + "\n")


def filter_by_length(
    records: Sequence[ContigRecord], min_length: int = DEFAULT_MIN_LENGTH, max_length: int | None = None
) -> list[ContigRecord]:
    kept = [r for r in records if r.length >= min_length and (max_length is None or r.length <= max_length)]
    if len(kept) < len(records):
        log.info("length filter [%s, %s] kept %d of %d contigs", min_length, max_length, len(kept), len(records))
    return kept


# --- tetranucleotide kernel -------------------------------------------------

def kmers(k: int) -> list[str]:
    return ["".join(p) for p in itertools.product(BASES, repeat=k)]


@dataclass(frozen=True)
class TnfKernel:
    basis: np.ndarray  # 256 x dim, orthonormal columns
    n_rc_constraints: int
    n_sum_constraints: int
    n_overlap_constraints: int
    threshold: float
    singular_values: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]


def tnf_constraint_matrix() -> np.ndarray:
    """Rows: reverse-complement pairs, the all-ones row, then 3-mer overlap balances."""
    words = kmers(4)
    index = {w: i for i, w in enumerate(words)}
    rows = []
    for w in words:
        rc = reverse_complement(w)
        if w < rc:
            row = np.zeros(256)
            row[index[w]] = 1.0
            row[index[rc]] = -1.0
            rows.append(row)
    rows.append(np.ones(256))
    for s in kmers(3):
        row = np.zeros(256)
        for x in BASES:
            row[index[s + x]] += 1.0
            row[index[x + s]] -= 1.0
        rows.append(row)
    return np.array(rows)


@lru_cache(maxsize=None)
def build_tnf_kernel(threshold: float = KERNEL_THRESHOLD) -> TnfKernel:
    constraints = tnf_constraint_matrix()
    n_rc = 120
    _, sv, vt = np.linalg.svd(constraints, full_matrices=True)
    near = np.abs(sv - threshold) <= 1e-12 * threshold
    if near.any():
        raise KernelError(f"singular value within 1e-12 relative of threshold {threshold}")
    rank = int(np.sum(sv > threshold))
    basis = np.ascontiguousarray(vt[rank:].T)
    dim = 256 - rank
    if basis.shape[1] != dim:
        raise KernelError(f"null-space basis has {basis.shape[1]} columns, expected {dim}")
    if dim != 103:
        log.warning("TNF kernel null space has dimension %d (expected 103)", dim)
    basis.setflags(write=False)
    return TnfKernel(
        basis=basis,
        n_rc_constraints=n_rc,
        n_sum_constraints=1,
        n_overlap_constraints=constraints.shape[0] - n_rc - 1,
        threshold=threshold,
        singular_values=sv,
    )


def encode(seq: str) -> np.ndarray:
    return _CODE[np.frombuffer(seq.encode("ascii"), dtype=np.uint8)]


def kmer_counts(seq: str, k: int) -> np.ndarray:
    """Counts of all overlapping k-mers, skipping windows that contain N."""
    codes = encode(seq).astype(np.int64)
    n_win = len(codes) - k + 1
    if n_win <= 0:
        return np.zeros(4**k, dtype=np.int64)
    bad = codes == 4
    idx = np.zeros(n_win, dtype=np.int64)
    invalid = np.zeros(n_win, dtype=bool)
    for j in range(k):
        idx = idx * 4 + codes[j : j + n_win]
        invalid |= bad[j : j + n_win]
    return np.bincount(idx[~invalid], minlength=4**k)


def tnf(record: ContigRecord, kernel: TnfKernel) -> np.ndarray:
    if record.length < 4:
        raise TooShortError(f"contig {record.id!r} shorter than 4 bp")
    counts = kmer_counts(record.sequence, 4)
    total = counts.sum()
    if total == 0:
        raise TooShortError(f"contig {record.id!r} has no N-free 4-mer window")
    freq = counts / total
    return kernel.basis.T @ (freq - 1.0 / 256)


# --- abundances ---------------------------------------------------------------

@dataclass
class AbundanceTable:
    sample_names: list[str]
    rows: dict[str, np.ndarray]

    @property
    def n_samples(self) -> int:
        return len(self.sample_names)

    def matrix(self, contig_ids: Sequence[str]) -> np.ndarray:
        missing = [c for c in contig_ids if c not in self.rows]
        if missing:
            raise MissingDataError("abundance", missing)
        if not contig_ids:
            return np.zeros((0, self.n_samples))
        return np.vstack([self.rows[c] for c in contig_ids])


def read_abundance_table(stream, source: str | None = None) -> AbundanceTable:
    lines = _text_lines(stream)
    reader = csv.reader(lines, delimiter="\t")
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty abundance table", 1, source) from None
    if not header or header[0] != "contig_id" or len(header) < 2:
        raise ParseError("abundance header must be 'contig_id<TAB>sample...'", 1, source)
    samples = header[1:]
    rows: dict[str, np.ndarray] = {}
    for lineno, cells in enumerate(reader, start=2):
        if not cells or (len(cells) == 1 and not cells[0].strip()):
            continue
        if len(cells) != len(header):
            raise ParseError(f"expected {len(header)} columns, got {len(cells)}", lineno, source)
        cid = cells[0]
        if cid in rows:
            raise DuplicateError(f"duplicate abundance row {cid!r}", lineno, source)
        try:
            vals = np.array([float(c) for c in cells[1:]])
        except ValueError as exc:
            raise ParseError(str(exc), lineno, source) from None
        if not np.all(np.isfinite(vals)):
            raise ParseError(f"non-finite abundance for {cid!r}", lineno, source)
        if np.any(vals < 0):
            raise ParseError(f"negative abundance for {cid!r}", lineno, source)
        rows[cid] = vals
    return AbundanceTable(samples, rows)


def normalize_abundances(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (row-normalised abundances, raw totals, z-scored log1p totals)."""
    raw = np.asarray(raw, dtype=np.float64)
    totals = raw.sum(axis=1)
    comp = np.zeros_like(raw)
    pos = totals > 0
    comp[pos] = raw[pos] / totals[pos, None]
    logt = np.log1p(totals)
    sd = logt.std() if len(logt) else 0.0
    z = (logt - logt.mean()) / sd if sd > 0 else np.zeros_like(logt)
    return comp, totals, z


def load_abundances(stream, contig_ids: Sequence[str], source: str | None = None):
    """Read an abundance TSV and align it to ``contig_ids``.

    Returns ``(abundances, totals, sample_names)`` where ``abundances`` rows sum
    to one (or are all zero) and ``totals`` are z-scored log1p row sums.
    """
    table = read_abundance_table(stream, source)
    comp, _, z = normalize_abundances(table.matrix(contig_ids))
    return comp, z, table.sample_names


# --- feature matrix -------------------------------------------------------------

@dataclass
class FeatureMatrix:
    contig_ids: list[str]
    data: np.ndarray
    tnf_dim: int
    n_samples: int

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return len(self.contig_ids)


def standardize_columns(x: np.ndarray) -> np.ndarray:
    """Per-column z-score over rows; constant columns become zero."""
    sd = x.std(axis=0)
    return np.divide(x - x.mean(axis=0), sd, out=np.zeros_like(x), where=sd > 0)


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _try_tnf(rec: ContigRecord, kernel: TnfKernel):
    try:
        return tnf(rec, kernel)
    except TooShortError:
        return None


def assemble_features(
    records: Sequence[ContigRecord],
    kernel: TnfKernel,
    abundances: AbundanceTable,
    *,
    zscore_tnf: bool = True,
    threads: int = 1,
) -> FeatureMatrix:
    """Stack ``[tnf | abundance composition | z-scored total]`` per contig.

    Contigs without a usable 4-mer window are dropped (and logged) before the
    abundance totals are standardised, so the z-score covers survivors only.
    With ``zscore_tnf`` the TNF block is also standardised per column over the
    surviving contigs.
    """
    vecs = _map(lambda r: _try_tnf(r, kernel), records, threads)
    dropped = [r.id for r, v in zip(records, vecs) if v is None]
    if dropped:
        log.warning("dropped %d contig(s) without usable TNF: %s", len(dropped), ", ".join(dropped[:20]))
    kept = [(r, v) for r, v in zip(records, vecs) if v is not None]
    if not kept:
        raise EmptyDatasetError("no contigs survive feature extraction")
    ids = [r.id for r, _ in kept]
    t = np.vstack([v for _, v in kept])
    if zscore_tnf:
        t = standardize_columns(t)
    comp, _, z = normalize_abundances(abundances.matrix(ids))
    data = np.hstack([t, comp, z[:, None]])
    return FeatureMatrix(ids, data, kernel.dim, abundances.n_samples)


# --- binary cache ---------------------------------------------------------------

FEATURE_MAGIC = b"TXDF"
FEATURE_VERSION = 1


def write_feature_cache(fm: FeatureMatrix, stream: IO[bytes]) -> None:
    n, width = fm.data.shape
    stream.write(FEATURE_MAGIC)
    stream.write(struct.pack("<4I", FEATURE_VERSION, n, width, fm.n_samples))
    stream.write(np.ascontiguousarray(fm.data, dtype="<f8").tobytes())
    stream.write(struct.pack("<I", len(fm.contig_ids)))
    for cid in fm.contig_ids:
        raw = cid.encode("utf-8")
        stream.write(struct.pack("<I", len(raw)))
        stream.write(raw)


def _read_exact(stream, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise ParseError(f"truncated binary file (wanted {n} bytes, got {len(buf)})")
    return buf


def read_feature_cache(stream: IO[bytes]) -> FeatureMatrix:
    if _read_exact(stream, 4) != FEATURE_MAGIC:
        raise ParseError("not a feature cache (bad magic)")
    version, n, width, k = struct.unpack("<4I", _read_exact(stream, 16))
    if version != FEATURE_VERSION:
        raise ParseError(f"unsupported feature cache version {version}")
    data = np.frombuffer(_read_exact(stream, 8 * n * width), dtype="<f8").astype(np.float64).reshape(n, width)
    (count,) = struct.unpack("<I", _read_exact(stream, 4))
    if count != n:
        raise ParseError(f"id table has {count} entries for {n} rows")
    ids = []
    for _ in range(count):
        (length,) = struct.unpack("<I", _read_exact(stream, 4))
        ids.append(_read_exact(stream, length).decode("utf-8"))
    return FeatureMatrix(ids, data, width - k - 1, k)


def feature_cache_bytes(fm: FeatureMatrix) -> bytes:
    buf = io.BytesIO()
    write_feature_cache(fm, buf)
    return buf.getvalue()


def expected_width(tnf_dim: int, n_samples: int) -> int:
    return tnf_dim + n_samples + 1


__all__ = [
    "AbundanceTable",
    "ContigRecord",
    "FeatureMatrix",
    "TnfKernel",
    "assemble_features",
    "build_tnf_kernel",
    "filter_by_length",
    "kmer_counts",
    "load_abundances",
    "normalize_abundances",
    "parse_fasta",
    "read_abundance_table",
    "read_feature_cache",
    "reverse_complement",
    "tnf",
    "write_fasta",
    "write_feature_cache",
]
