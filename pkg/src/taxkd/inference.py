"""Decoding student outputs into lineages, and scoring lineages against ground truth."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .errors import AlignmentError, CoverageError, DegenerateTreeError, DuplicateError, ParseError, ValidationError
from .features import _text_lines
from .neuralnet import MlpModel, forward
from .taxonomy import RankedPath, TaxTree, leaf_probabilities, node_probabilities

DESCEND_THRESHOLD = 0.5
REPORT_THRESHOLD = 0.80

CORRECT, WRONG, NO_LABEL = "Correct", "Wrong", "NoLabel"
STATUSES = (CORRECT, WRONG, NO_LABEL)


@dataclass(frozen=True)
class Prediction:
    contig_id: str
    path: RankedPath
    node_prob: float
    leaf_argmax: int


def _walk(tree: TaxTree, node_p: np.ndarray) -> list[int]:
    """Greedy descent: follow the most probable child while it is strictly above 0.5."""
    chain = [0]
    u = 0
    while tree.children[u]:
        kids = tree.children[u]
        # children are sorted by name, so earlier kids own lower leaf slots; argmax keeps the first max
        best = kids[int(np.argmax(node_p[list(kids)]))]
        if not node_p[best] > DESCEND_THRESHOLD:
            break
        chain.append(best)
        u = best
    return chain


def decode_from_nodes(tree: TaxTree, node_p: np.ndarray, leaf_probs: np.ndarray, contig_id: str = "") -> Prediction:
    chain = _walk(tree, node_p)
    chain_p = node_p[chain]
    if np.any(np.diff(chain_p) > 0):
        raise AssertionError(f"decode chain probabilities increase with depth: {chain_p}")
    reported = 0
    for u in reversed(chain[1:]):
        if node_p[u] >= REPORT_THRESHOLD:
            reported = u
            break
    return Prediction(contig_id, tree.path_of(reported), float(node_p[reported]), int(np.argmax(leaf_probs)))


def decode(tree: TaxTree, leaf_probs, contig_id: str = "") -> Prediction:
    """Descend while the best child exceeds 0.5, then report the deepest visited node at >= 0.80.

    An empty path means nothing below the root reached 0.80.
    """
    if tree.n_leaves == 0:
        raise DegenerateTreeError("tree has no leaves")
    p = np.asarray(leaf_probs, dtype=np.float64)
    return decode_from_nodes(tree, node_probabilities(tree, p), p, contig_id)


def decode_batch(tree: TaxTree, leaf_probs: np.ndarray, contig_ids: Sequence[str], threads: int = 1) -> list[Prediction]:
    p = np.asarray(leaf_probs, dtype=np.float64)
    if p.shape[0] != len(contig_ids):
        raise AlignmentError(f"{len(contig_ids)} ids for {p.shape[0]} rows")
    if tree.n_leaves == 0:
        raise DegenerateTreeError("tree has no leaves")
    node_p = node_probabilities(tree, p)
    rows = range(len(contig_ids))
    fn = lambda i: decode_from_nodes(tree, node_p[i], p[i], contig_ids[i])  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, rows))
    return [fn(i) for i in rows]


def predict(tree: TaxTree, student: MlpModel, features: np.ndarray, contig_ids: Sequence[str], threads: int = 1) -> list[Prediction]:
    if features.shape[0] == 0:
        return []
    return decode_batch(tree, leaf_probabilities(forward(student, features)), contig_ids, threads)


# --- evaluation ------------------------------------------------------------------

@dataclass
class EvalCounts:
    correct: int
    wrong: int
    no_label: int
    rank: int
    transition: np.ndarray | None = field(default=None, compare=False)

    @property
    def n_total(self) -> int:
        return self.correct + self.wrong + self.no_label

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.correct, self.wrong, self.no_label)


def default_rank(truth: Mapping[str, RankedPath]) -> int:
    """Deepest rank (0-based) present in the ground truth."""
    depth = max((len(p) for p in truth.values()), default=0)
    if depth == 0:
        raise ValidationError("ground truth holds no assigned lineage")
    return depth - 1


def status(pred: RankedPath, truth: RankedPath, rank: int) -> str:
    if len(pred) <= rank:
        return NO_LABEL
    return CORRECT if pred.names[: rank + 1] == truth.names[: rank + 1] else WRONG


def statuses(
    predicted: Mapping[str, RankedPath], truth: Mapping[str, RankedPath], rank: int
) -> dict[str, str]:
    missing = [cid for cid in predicted if cid not in truth or len(truth[cid]) <= rank]
    if missing:
        raise CoverageError(f"ground truth at rank {rank}", missing)
    return {cid: status(path, truth[cid], rank) for cid, path in predicted.items()}


def _as_paths(predictions) -> dict[str, RankedPath]:
    if isinstance(predictions, Mapping):
        return dict(predictions)
    return {p.contig_id: p.path for p in predictions}


def evaluate(predictions, ground_truth: Mapping[str, RankedPath], rank: int | None = None) -> EvalCounts:
    """Count Correct / Wrong / NoLabel at ``rank``.

    ``predictions`` is a list of :class:`Prediction` or a mapping id -> lineage.
    A prediction deeper than ``rank`` is judged by its ancestor at ``rank``.
    """
    if rank is None:
        rank = default_rank(ground_truth)
    st = statuses(_as_paths(predictions), ground_truth, rank)
    values = list(st.values())
    return EvalCounts(values.count(CORRECT), values.count(WRONG), values.count(NO_LABEL), rank)


def metrics(counts: EvalCounts | tuple[int, int, int]) -> dict[str, float]:
    c, w, u = counts.as_tuple() if isinstance(counts, EvalCounts) else counts
    n = c + w + u
    if n == 0:
        raise ValidationError("cannot compute metrics over zero contigs")
    recall = c / n
    precision = c / (c + w) if c + w else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"recall": recall, "precision": precision, "f1": f1}


def transitions(before: Mapping[str, str], after: Mapping[str, str]) -> np.ndarray:
    """3x3 counts; row = status before, column = status after, both in Correct/Wrong/NoLabel order."""
    if set(before) != set(after):
        only_b = sorted(set(before) - set(after))
        only_a = sorted(set(after) - set(before))
        raise AlignmentError(
            f"contig sets differ: {len(only_b)} only before (e.g. {only_b[:5]}), "
            f"{len(only_a)} only after (e.g. {only_a[:5]})"
        )
    pos = {s: i for i, s in enumerate(STATUSES)}
    mat = np.zeros((3, 3), dtype=np.int64)
    for cid, b in before.items():
        mat[pos[b], pos[after[cid]]] += 1
    return mat


# --- TSV formats -------------------------------------------------------------------

def read_lineage_tsv(stream, source: str | None = None) -> dict[str, RankedPath]:
    """Read ``contig_id<TAB>lineage[<TAB>...]`` rows; extra columns are ignored.

    Also reads predictions files. A missing or empty lineage means unassigned.
    """
    out: dict[str, RankedPath] = {}
    for lineno, line in enumerate(_text_lines(stream), start=1):
        if not line.strip():
            continue
        cells = line.split("\t")
        if lineno == 1 and cells[0] == "contig_id":
            continue
        cid = cells[0].strip()
        if not cid:
            raise ParseError("empty contig id", lineno, source)
        if cid in out:
            raise DuplicateError(f"duplicate contig id {cid!r}", lineno, source)
        out[cid] = RankedPath.parse(cells[1] if len(cells) > 1 else "", line=lineno)
    return out


def write_lineage_tsv(labels: Mapping[str, RankedPath], stream: IO[str]) -> None:
    stream.write("contig_id\tlineage\n")
    for cid, path in labels.items():
        stream.write(f"{cid}\t{path}\n")


def write_predictions(predictions: Iterable[Prediction], stream: IO[str]) -> None:
    stream.write("contig_id\tpath\tnode_prob\n")
    for p in predictions:
        stream.write(f"{p.contig_id}\t{p.path}\t{p.node_prob:.6f}\n")


def write_eval_report(counts: EvalCounts, stream: IO[str], label: str = "") -> None:
    m = metrics(counts)
    stream.write("name\trank\tn_total\tcorrect\twrong\tno_label\tf1\trecall\tprecision\n")
    stream.write(
        f"{label}\t{counts.rank}\t{counts.n_total}\t{counts.correct}\t{counts.wrong}\t{counts.no_label}\t"
        f"{m['f1']:.6f}\t{m['recall']:.6f}\t{m['precision']:.6f}\n"
    )


def write_transitions(matrix: np.ndarray, stream: IO[str]) -> None:
    stream.write("before\\after\t" + "\t".join(STATUSES) + "\n")
    for name, row in zip(STATUSES, matrix):
        stream.write(name + "\t" + "\t".join(str(int(v)) for v in row) + "\n")


def read_transitions(stream) -> np.ndarray:
    lines = [l for l in _text_lines(stream) if l.strip()]
    return np.array([[int(v) for v in l.split("\t")[1:]] for l in lines[1:]], dtype=np.int64)
