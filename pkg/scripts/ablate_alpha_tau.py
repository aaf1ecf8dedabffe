"""Grid over the loss mix alpha and the distillation temperature tau on one simulated corpus.

Prints a TSV of post-correction species-level scores per (alpha, tau).

    python3 scripts/ablate_alpha_tau.py --alphas 0.1,0.3,0.6,1.0 --taus 1,4 --epochs 40
"""

from __future__ import annotations

import argparse

from denoise_simulated import prepare, run

from taxkd import DistillConfig, metrics
from taxkd.simgen import SimConfig


def floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--alphas", type=floats, default=floats("0.0,0.3,0.6,1.0"))
    ap.add_argument("--taus", type=floats, default=floats("1,4"))
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--n-contigs", type=int, default=1500)
    ap.add_argument("--epochs", type=int, default=40)
    args = ap.parse_args()

    data, fm, emb, labels = prepare(SimConfig(seed=args.seed, n_contigs=args.n_contigs))
    print("alpha\ttau\tcorrect\twrong\tno_label\tf1\tbaseline_f1")
    for alpha in args.alphas:
        for tau in args.taus:
            res = run(data, fm, emb, labels, DistillConfig(alpha=alpha, tau=tau, epochs=args.epochs, seed=args.seed))
            a, b = res["after"], res["before"]
            print(f"{alpha:g}\t{tau:g}\t{a.correct}\t{a.wrong}\t{a.no_label}\t{metrics(a)['f1']:.4f}\t{metrics(b)['f1']:.4f}")
            if alpha == 1.0:
                break  # tau has no effect without the distillation term


if __name__ == "__main__":
    main()
