"""Synthetic labelled metagenomes with noisy pseudo-labels.

Each species gets its own order-k Markov genome, so tetranucleotide content
separates species. Contigs are random substrings; pseudo-labels are the true
lineage, a wrong species, or a truncated lineage, drawn per contig.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .features import BASES, ContigRecord, write_fasta
from .inference import write_lineage_tsv
from .taxonomy import RANK_PREFIXES, RankedPath

GENOME_FACTOR = 10
FILES = {
    "fasta": "contigs.fasta",
    "labels": "labels.tsv",
    "truth": "truth.tsv",
    "abundances": "abundances.tsv",
    "manifest": "manifest.json",
}


@dataclass
class SimConfig:
    tree_shape: tuple[int, ...] = (2, 2, 5)
    n_species: int | None = None
    n_contigs: int = 3000
    length_range: tuple[int, int] = (2000, 10000)
    n_samples: int = 4
    markov_order: int = 3
    p_wrong: float = 0.2
    p_drop: float = 0.2
    siblings_only: bool = False
    seed: int = 42

    def __post_init__(self):
        self.tree_shape = tuple(int(b) for b in self.tree_shape)
        self.length_range = tuple(int(x) for x in self.length_range)
        if not self.tree_shape or any(b < 1 for b in self.tree_shape):
            raise ConfigError(f"bad tree shape {self.tree_shape}")
        if len(self.tree_shape) > len(RANK_PREFIXES):
            raise ConfigError(f"at most {len(RANK_PREFIXES)} ranks supported")
        product = math.prod(self.tree_shape)
        if self.n_species is None:
            self.n_species = product
        elif self.n_species != product:
            raise ConfigError(f"n_species={self.n_species} but tree shape {self.tree_shape} gives {product}")
        lo, hi = self.length_range
        if lo < 4 or hi < lo:
            raise ConfigError(f"bad length range {self.length_range}")
        if not (0 <= self.p_wrong and 0 <= self.p_drop and self.p_wrong + self.p_drop <= 1):
            raise ConfigError("noise probabilities must be non-negative and sum to at most 1")
        if self.n_contigs < 1 or self.n_samples < 1 or self.markov_order < 0:
            raise ConfigError("n_contigs, n_samples must be >= 1 and markov_order >= 0")
        if self.p_wrong > 0 and self.n_species < 2:
            raise ConfigError("wrong-label noise needs at least two species")
        if self.siblings_only and self.p_wrong > 0 and self.tree_shape[-1] < 2:
            raise ConfigError("siblings-only noise needs at least two species per parent")

    @property
    def genome_length(self) -> int:
        return GENOME_FACTOR * self.length_range[1]


@dataclass
class SimulatedData:
    config: SimConfig
    records: list[ContigRecord]
    truth: dict[str, RankedPath]
    labels: dict[str, RankedPath]
    abundances: np.ndarray
    species_of: np.ndarray
    species_paths: list[RankedPath]
    genomes: list[str] = field(repr=False)

    @property
    def sample_names(self) -> list[str]:
        return [f"sample{k + 1}" for k in range(self.abundances.shape[1])]


def species_lineages(shape: tuple[int, ...]) -> list[RankedPath]:
    prefixes = RANK_PREFIXES[-len(shape):]
    out = []
    for idx in np.ndindex(*shape):
        names = []
        for depth in range(len(shape)):
            tag = "_".join(str(i) for i in idx[: depth + 1])
            names.append(f"{prefixes[depth]}__T{depth}_{tag}")
        out.append(RankedPath(tuple(names)))
    return out


def markov_genome(length: int, order: int, rng: np.random.Generator) -> str:
    """Order-``order`` Markov chain over ACGT with Dirichlet(1) transition rows."""
    n_ctx = 4**order
    cum = np.cumsum(rng.dirichlet(np.ones(4), size=n_ctx), axis=1)
    cum[:, -1] = 1.0
    draws = rng.random(length)
    seq = np.empty(length, dtype=np.int64)
    seq[:order] = rng.integers(0, 4, size=min(order, length))
    table = cum.tolist()
    mask = n_ctx - 1
    ctx = 0
    for i in range(order):
        ctx = ((ctx << 2) | int(seq[i])) & mask
    out = seq.tolist()
    u = draws.tolist()
    for i in range(order, length):
        row = table[ctx]
        x = u[i]
        b = 0 if x < row[0] else 1 if x < row[1] else 2 if x < row[2] else 3
        out[i] = b
        ctx = ((ctx << 2) | b) & mask
    return "".join(BASES[b] for b in out)


def simulate(config: SimConfig) -> SimulatedData:
    cfg = config
    root = np.random.SeedSequence(cfg.seed)
    genome_ss = root.spawn(cfg.n_species)
    contig_rng, abund_rng, noise_rng = (np.random.default_rng(s) for s in root.spawn(3))

    genomes = [markov_genome(cfg.genome_length, cfg.markov_order, np.random.default_rng(s)) for s in genome_ss]
    paths = species_lineages(cfg.tree_shape)

    lo, hi = cfg.length_range
    species_of = contig_rng.integers(0, cfg.n_species, size=cfg.n_contigs)
    lengths = contig_rng.integers(lo, hi + 1, size=cfg.n_contigs)
    records = []
    for i, (sp, ln) in enumerate(zip(species_of, lengths)):
        if ln > len(genomes[sp]):
            raise ConfigError(f"genome of {len(genomes[sp])} bp shorter than contig of {ln} bp")
        start = int(contig_rng.integers(0, len(genomes[sp]) - ln + 1))
        records.append(ContigRecord(f"sim_{i}", genomes[sp][start : start + ln]))

    species_abund = abund_rng.dirichlet(np.ones(cfg.n_species), size=cfg.n_samples)  # samples x species
    depth_noise = abund_rng.lognormal(0.0, 0.25, size=(cfg.n_contigs, cfg.n_samples))
    abundances = species_abund[:, species_of].T * depth_noise

    group = cfg.tree_shape[-1]
    truth, labels = {}, {}
    for rec, sp in zip(records, species_of):
        true_path = paths[sp]
        truth[rec.id] = true_path
        u = noise_rng.random()
        if u < cfg.p_wrong:
            if cfg.siblings_only:
                base = (sp // group) * group
                choices = [s for s in range(base, base + group) if s != sp]
            else:
                choices = [s for s in range(cfg.n_species) if s != sp]
            labels[rec.id] = paths[choices[int(noise_rng.integers(0, len(choices)))]]
        elif u < cfg.p_wrong + cfg.p_drop:
            labels[rec.id] = true_path.truncate(int(noise_rng.integers(0, len(true_path))))
        else:
            labels[rec.id] = true_path
    return SimulatedData(cfg, records, truth, labels, abundances, species_of, paths, genomes)


def write_simulation(data: SimulatedData, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {k: out / v for k, v in FILES.items()}
    with open(files["fasta"], "w", newline="\n") as fh:
        write_fasta(data.records, fh)
    with open(files["labels"], "w", newline="\n") as fh:
        write_lineage_tsv(data.labels, fh)
    with open(files["truth"], "w", newline="\n") as fh:
        write_lineage_tsv(data.truth, fh)
    with open(files["abundances"], "w", newline="\n") as fh:
        fh.write("contig_id\t" + "\t".join(data.sample_names) + "\n")
        for rec, row in zip(data.records, data.abundances):
            fh.write(rec.id + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")
    manifest = {
        "config": dataclasses.asdict(data.config),
        "seed": data.config.seed,
        "files": {k: v.name for k, v in files.items() if k != "manifest"},
    }
    with open(files["manifest"], "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return files
