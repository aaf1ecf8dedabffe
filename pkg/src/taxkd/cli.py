"""Command-line entry point: ``taxkd <subcommand> ...``.

Exit codes: 0 success, 1 invalid arguments/configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

from . import __version__
from .distill import DistillConfig, load_checkpoint, save_checkpoint, train, write_loss_history
from .errors import TaxKdError, ValidationError
from .features import (
    DEFAULT_MIN_LENGTH,
    assemble_features,
    build_tnf_kernel,
    filter_by_length,
    kmers,
    parse_fasta,
    read_abundance_table,
    read_feature_cache,
    write_feature_cache,
)
from .inference import (
    default_rank,
    evaluate,
    predict,
    read_lineage_tsv,
    statuses,
    transitions,
    write_eval_report,
    write_predictions,
    write_transitions,
)
from .simgen import SimConfig, simulate, write_simulation
from .taxonomy import RankedPath, build_tree
from .teacher import DEFAULT_EMBED_DIM, KmerProjection, load_embedding_file

log = logging.getLogger("taxkd")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _int_tuple(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"expected a boolean, got {text!r}")


# --- output bookkeeping ---------------------------------------------------------

class OutputSet:
    """Stage outputs under temporary names; publish them all only on success."""

    def __init__(self):
        self._pending: list[tuple[Path, Path]] = []

    def path(self, final: str | Path) -> Path:
        final = Path(final)
        final.parent.mkdir(parents=True, exist_ok=True)
        tmp = final.with_name(final.name + ".partial")
        self._pending.append((tmp, final))
        return tmp

    def commit(self):
        for tmp, final in self._pending:
            if tmp.exists():
                os.replace(tmp, final)

    def discard(self):
        for tmp, _ in self._pending:
            tmp.unlink(missing_ok=True)


@contextmanager
def staged_outputs():
    out = OutputSet()
    try:
        yield out
    except BaseException:
        out.discard()
        raise
    out.commit()


def _require_inputs(*paths):
    for p in paths:
        if p is None:
            continue
        if not Path(p).is_file() or not os.access(p, os.R_OK):
            raise ValidationError(f"input file not found or unreadable: {p}")


def _threads(args) -> int:
    return 1 if getattr(args, "deterministic", False) else max(1, args.threads)


# --- subcommands --------------------------------------------------------------------

def cmd_kernel(args) -> None:
    kernel = build_tnf_kernel()
    log.info("TNF kernel dimension %d (%d RC + %d sum + %d overlap constraints)",
             kernel.dim, kernel.n_rc_constraints, kernel.n_sum_constraints, kernel.n_overlap_constraints)
    with staged_outputs() as out, open(out.path(args.out), "w", newline="\n") as fh:
        fh.write(f"# dimension\t{kernel.dim}\n")
        fh.write("kmer\t" + "\t".join(f"b{j}" for j in range(kernel.dim)) + "\n")
        for word, row in zip(kmers(4), kernel.basis):
            fh.write(word + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")


def cmd_featurize(args) -> None:
    _require_inputs(args.fasta, args.abundances)
    with open(args.fasta, "rb") as fh:
        records = parse_fasta(fh, source=args.fasta)
    records = filter_by_length(records, args.min_length, args.max_length)
    with open(args.abundances, "rb") as fh:
        table = read_abundance_table(fh, source=args.abundances)
    fm = assemble_features(records, build_tnf_kernel(), table, zscore_tnf=args.zscore_tnf, threads=_threads(args))
    log.info("featurized %d contigs, width %d (TNF %d + K=%d + 1)", len(fm), fm.width, fm.tnf_dim, fm.n_samples)
    with staged_outputs() as out, open(out.path(args.out), "wb") as fh:
        write_feature_cache(fm, fh)


def distill_config_from_args(args) -> DistillConfig:
    return DistillConfig(
        alpha=args.alpha,
        tau=args.tau,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr_student=args.lr_student,
        lr_teacher=args.lr_teacher,
        weight_decay=args.weight_decay,
        seed=args.seed,
        deterministic=args.deterministic,
        student_hidden=args.student_hidden,
        teacher_hidden=args.teacher_hidden,
        standardize_embeddings=args.standardize_embeddings,
    )


def cmd_train(args) -> None:
    config = distill_config_from_args(args)
    if args.embeddings is None and args.fasta is None:
        raise ValidationError("train needs --fasta (built-in embedder) or --embeddings")
    _require_inputs(args.features, args.labels, args.embeddings, args.fasta)

    with open(args.features, "rb") as fh:
        fm = read_feature_cache(fh)
    with open(args.labels, "rb") as fh:
        pseudo = read_lineage_tsv(fh, source=args.labels)
    unlabeled = sum(1 for c in fm.contig_ids if c not in pseudo)
    if unlabeled:
        log.info("%d contig(s) have no pseudo-label row; treated as unassigned", unlabeled)
    labels = [pseudo.get(c, RankedPath()) for c in fm.contig_ids]

    if args.embeddings is not None:
        with open(args.embeddings, "rb") as fh:
            emb = load_embedding_file(fh, source=args.embeddings).lookup(fm.contig_ids)
    else:
        with open(args.fasta, "rb") as fh:
            by_id = {r.id: r for r in parse_fasta(fh, source=args.fasta)}
        missing = [c for c in fm.contig_ids if c not in by_id]
        if missing:
            raise TaxKdError(f"{len(missing)} featurized contig(s) absent from {args.fasta}: {missing[:5]}")
        provider = KmerProjection(args.embed_dim, args.embed_seed)
        emb = provider.embed([by_id[c] for c in fm.contig_ids], threads=_threads(args))

    tree = build_tree(labels)
    log.info("label tree: %d nodes, %d leaves", tree.n_nodes, tree.n_leaves)
    out_dir = Path(args.out_dir)
    with staged_outputs() as out:
        def snapshot(state):
            if args.checkpoint_every and state.epoch % args.checkpoint_every == 0 and state.epoch < config.epochs:
                with open(out.path(out_dir / f"model.epoch{state.epoch:04d}.txdm"), "wb") as fh:
                    save_checkpoint(state, fh)

        state = train(tree, fm, emb, labels, config, on_epoch=snapshot)
        with open(out.path(out_dir / "model.txdm"), "wb") as fh:
            save_checkpoint(state, fh)
        with open(out.path(out_dir / "loss_history.tsv"), "w", newline="\n") as fh:
            write_loss_history(state.history, fh, config.alpha)


def cmd_predict(args) -> None:
    _require_inputs(args.features, args.checkpoint)
    with open(args.checkpoint, "rb") as fh:
        ckpt = load_checkpoint(fh)
    with open(args.features, "rb") as fh:
        fm = read_feature_cache(fh)
    if fm.width != ckpt.student.input_dim:
        raise TaxKdError(f"feature width {fm.width} does not match model input {ckpt.student.input_dim}")
    preds = predict(ckpt.tree, ckpt.student, fm.data, fm.contig_ids, threads=_threads(args))
    with staged_outputs() as out, open(out.path(args.out), "w", newline="\n") as fh:
        write_predictions(preds, fh)


def _load_eval_inputs(truth_path, *pred_paths, rank=None):
    with open(truth_path, "rb") as fh:
        truth = read_lineage_tsv(fh, source=truth_path)
    if rank is None:
        rank = default_rank(truth)
    scored = {c: p for c, p in truth.items() if len(p) > rank}
    if len(scored) < len(truth):
        log.info("%d ground-truth row(s) do not reach rank %d and are not scored", len(truth) - len(scored), rank)
    preds = []
    for path in pred_paths:
        with open(path, "rb") as fh:
            pred = read_lineage_tsv(fh, source=path)
        missing = [c for c in scored if c not in pred]
        if missing:
            raise TaxKdError(f"{path}: no row for {len(missing)} scored contig(s), e.g. {missing[:5]}")
        preds.append({c: pred[c] for c in scored})
    return scored, rank, preds


def cmd_eval(args) -> None:
    _require_inputs(args.predictions, args.truth)
    truth, rank, (pred,) = _load_eval_inputs(args.truth, args.predictions, rank=args.rank)
    counts = evaluate(pred, truth, rank)
    with staged_outputs() as out, open(out.path(args.out), "w", newline="\n") as fh:
        write_eval_report(counts, fh, label=args.name or Path(args.predictions).stem)


def cmd_transitions(args) -> None:
    _require_inputs(args.before, args.after, args.truth)
    truth, rank, (before, after) = _load_eval_inputs(args.truth, args.before, args.after, rank=args.rank)
    mat = transitions(statuses(before, truth, rank), statuses(after, truth, rank))
    with staged_outputs() as out, open(out.path(args.out), "w", newline="\n") as fh:
        write_transitions(mat, fh)


def cmd_simulate(args) -> None:
    config = SimConfig(
        tree_shape=args.tree_shape,
        n_contigs=args.n_contigs,
        length_range=(args.min_length, args.max_length),
        n_samples=args.n_samples,
        markov_order=args.markov_order,
        p_wrong=args.p_wrong,
        p_drop=args.p_drop,
        siblings_only=args.siblings_only,
        seed=args.seed,
    )
    data = simulate(config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".simulate-", dir=out_dir))
    try:
        files = write_simulation(data, tmp)
        for f in files.values():
            os.replace(f, out_dir / f.name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    log.info("wrote %d contigs to %s", config.n_contigs, out_dir)


# --- parser -----------------------------------------------------------------------------

_Fmt = argparse.ArgumentDefaultsHelpFormatter


def _add_common(p):
    p.add_argument("--config", help="key=value file; command-line flags override it")
    p.add_argument("--threads", type=int, default=1, help="worker threads for feature extraction and decoding")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="taxkd", description="Noisy taxonomic label correction by teacher/student distillation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("kernel", help="dump the TNF projection basis", formatter_class=_Fmt)
    _add_common(p)
    p.add_argument("--out", required=True, help="output TSV (256 rows, one per tetramer)")
    p.set_defaults(func=cmd_kernel)

    p = sub.add_parser("featurize", help="build the student feature cache", formatter_class=_Fmt)
    _add_common(p)
    p.add_argument("--fasta", required=True, help="contig FASTA")
    p.add_argument("--abundances", required=True, help="abundance TSV: contig_id, then one column per sample")
    p.add_argument("--out", required=True, help="output feature cache (TXDF)")
    p.add_argument("--min-length", type=int, default=DEFAULT_MIN_LENGTH, help="drop contigs shorter than this")
    p.add_argument("--max-length", type=int, default=None, help="drop contigs longer than this")
    p.add_argument("--zscore-tnf", type=_bool, default=True, help="standardise TNF columns over the dataset")
    p.add_argument("--deterministic", type=_bool, default=True, help="single-threaded extraction")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="jointly train teacher head and student", formatter_class=_Fmt)
    _add_common(p)
    d = DistillConfig()
    p.add_argument("--features", required=True, help="feature cache from 'featurize'")
    p.add_argument("--labels", required=True, help="pseudo-label TSV: contig_id, lineage")
    p.add_argument("--fasta", help="contig FASTA for the built-in k-mer projection embedder")
    p.add_argument("--embeddings", help="precomputed teacher embeddings (TXDE binary or TSV)")
    p.add_argument("--out-dir", required=True, help="directory for model.txdm and loss_history.tsv")
    p.add_argument("--alpha", type=float, default=d.alpha, help="weight of the hierarchical loss in the student objective")
    p.add_argument("--tau", type=float, default=d.tau, help="distillation temperature")
    p.add_argument("--epochs", type=int, default=d.epochs, help="training epochs")
    p.add_argument("--batch-size", type=int, default=d.batch_size, help="mini-batch size")
    p.add_argument("--lr-student", type=float, default=d.lr_student, help="student learning rate")
    p.add_argument("--lr-teacher", type=float, default=d.lr_teacher, help="teacher head learning rate")
    p.add_argument("--weight-decay", type=float, default=d.weight_decay, help="decoupled weight decay")
    p.add_argument("--seed", type=int, default=d.seed, help="training seed")
    p.add_argument("--student-hidden", type=_int_tuple, default=",".join(map(str, d.student_hidden)),
                   help="student hidden widths, comma separated")
    p.add_argument("--teacher-hidden", type=_int_tuple, default="", help="teacher head hidden widths (empty = linear)")
    p.add_argument("--standardize-embeddings", type=_bool, default=d.standardize_embeddings,
                   help="z-score teacher embeddings per dimension before the head")
    p.add_argument("--embed-dim", type=int, default=DEFAULT_EMBED_DIM, help="built-in embedder width")
    p.add_argument("--embed-seed", type=int, default=0, help="built-in embedder projection seed")
    p.add_argument("--checkpoint-every", type=int, default=0, help="also save a checkpoint every k epochs (0 = off)")
    p.add_argument("--deterministic", type=_bool, default=d.deterministic, help="single-threaded embedding")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="decode corrected labels with a trained student", formatter_class=_Fmt)
    _add_common(p)
    p.add_argument("--features", required=True, help="feature cache from 'featurize'")
    p.add_argument("--checkpoint", required=True, help="model.txdm from 'train'")
    p.add_argument("--out", required=True, help="predictions TSV")
    p.add_argument("--deterministic", type=_bool, default=True, help="single-threaded decoding")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions or labels against ground truth", formatter_class=_Fmt)
    _add_common(p)
    p.add_argument("--predictions", required=True, help="predictions or pseudo-label TSV")
    p.add_argument("--truth", required=True, help="ground-truth lineage TSV")
    p.add_argument("--rank", type=int, default=None, help="0-based evaluation rank (default: deepest in truth)")
    p.add_argument("--name", default=None, help="label written in the report (default: file stem)")
    p.add_argument("--out", required=True, help="metrics TSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transitions", help="before/after status transition counts", formatter_class=_Fmt)
    _add_common(p)
    p.add_argument("--before", required=True, help="labels or predictions before correction")
    p.add_argument("--after", required=True, help="labels or predictions after correction")
    p.add_argument("--truth", required=True, help="ground-truth lineage TSV")
    p.add_argument("--rank", type=int, default=None, help="0-based evaluation rank (default: deepest in truth)")
    p.add_argument("--out", required=True, help="3x3 transitions TSV")
    p.set_defaults(func=cmd_transitions)

    s = SimConfig()
    p = sub.add_parser("simulate", help="write a synthetic noisy-label corpus", formatter_class=_Fmt)
    _add_common(p)
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=s.seed, help="simulation seed")
    p.add_argument("--n-contigs", type=int, default=s.n_contigs, help="number of contigs")
    p.add_argument("--tree-shape", type=_int_tuple, default=",".join(map(str, s.tree_shape)),
                   help="branching factor per rank, comma separated")
    p.add_argument("--min-length", type=int, default=s.length_range[0], help="shortest contig")
    p.add_argument("--max-length", type=int, default=s.length_range[1], help="longest contig")
    p.add_argument("--n-samples", type=int, default=s.n_samples, help="number of abundance samples K")
    p.add_argument("--markov-order", type=int, default=s.markov_order, help="genome Markov order")
    p.add_argument("--p-wrong", type=float, default=s.p_wrong, help="fraction relabelled to another species")
    p.add_argument("--p-drop", type=float, default=s.p_drop, help="fraction truncated to an ancestor or unassigned")
    p.add_argument("--siblings-only", type=_bool, default=False, help="wrong labels only pick sibling species")
    p.set_defaults(func=cmd_simulate)
    return parser


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def read_config_file(path: str) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected key=value")
            key, value = (t.strip() for t in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        _require_inputs(args.config)
        values = read_config_file(args.config)
        sub = _subparser(parser, args.command)
        known = {a.dest: a for a in sub._actions}
        for key in values:
            if key not in known or key in ("config", "help", "func"):
                raise ValidationError(f"{args.config}: unknown key {key!r} for '{args.command}'")
        # string defaults go through each option's type converter on re-parse
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except ValidationError as exc:
        log.error("%s", exc)
        return 1
    except (TaxKdError, OSError, ValueError, ArithmeticError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
