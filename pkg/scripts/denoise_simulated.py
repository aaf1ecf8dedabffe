"""Simulate a noisy-label corpus, train teacher + student, and report before/after scores.

    python3 scripts/denoise_simulated.py --seed 42 --epochs 100
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from taxkd import (
    DistillConfig,
    assemble_features,
    build_tnf_kernel,
    build_tree,
    evaluate,
    metrics,
    predict,
    simulate,
    train,
)
from taxkd.features import AbundanceTable
from taxkd.inference import STATUSES, default_rank, statuses, transitions
from taxkd.simgen import SimConfig
from taxkd.teacher import KmerProjection


def prepare(sim: SimConfig, embed_dim: int = 256):
    data = simulate(sim)
    table = AbundanceTable(data.sample_names, {r.id: row for r, row in zip(data.records, data.abundances)})
    fm = assemble_features(data.records, build_tnf_kernel(), table)
    emb = KmerProjection(embed_dim, 0).embed(data.records)
    labels = [data.labels[c] for c in fm.contig_ids]
    return data, fm, emb, labels


def run(data, fm, emb, labels, config: DistillConfig) -> dict:
    tree = build_tree(labels)
    state = train(tree, fm, emb, labels, config)
    preds = {p.contig_id: p.path for p in predict(tree, state.student, fm.data, fm.contig_ids)}
    rank = default_rank(data.truth)
    before, after = evaluate(data.labels, data.truth, rank), evaluate(preds, data.truth, rank)
    mat = transitions(statuses(data.labels, data.truth, rank), statuses(preds, data.truth, rank))
    return {"before": before, "after": after, "transitions": mat, "history": state.history}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--n-contigs", type=int, default=3000)
    ap.add_argument("--p-wrong", type=float, default=0.2)
    ap.add_argument("--p-drop", type=float, default=0.2)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--alpha", type=float, default=0.3)
    ap.add_argument("--tau", type=float, default=4.0)
    args = ap.parse_args()

    t0 = time.perf_counter()
    sim = SimConfig(seed=args.seed, n_contigs=args.n_contigs, p_wrong=args.p_wrong, p_drop=args.p_drop)
    data, fm, emb, labels = prepare(sim)
    config = DistillConfig(alpha=args.alpha, tau=args.tau, epochs=args.epochs, seed=args.seed)
    res = run(data, fm, emb, labels, config)

    last = res["history"][-1]
    print(f"final epoch {last.epoch}: teacher hier {last.teacher_hier:.4f}, student hier {last.student_hier:.4f}, kd {last.kd:.4f}")
    for name in ("before", "after"):
        counts = res[name]
        m = metrics(counts)
        print(f"{name:>6}: C={counts.correct} W={counts.wrong} U={counts.no_label} "
              f"F1={m['f1']:.4f} recall={m['recall']:.4f} precision={m['precision']:.4f}")
    print("transitions (rows before, columns after):")
    print("         " + " ".join(f"{s:>8}" for s in STATUSES))
    for s, row in zip(STATUSES, np.asarray(res["transitions"])):
        print(f"{s:>8} " + " ".join(f"{v:>8d}" for v in row))
    print(f"{time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
