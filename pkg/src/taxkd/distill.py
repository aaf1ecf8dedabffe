"""Hierarchical and distillation losses, and the joint teacher/student training loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import IO, Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ParseError, ShapeError, TrainingError
from .features import FeatureMatrix, _read_exact, standardize_columns
from .neuralnet import (
    DenseLayer,
    MlpModel,
    OptimizerState,
    backward,
    forward,
    init_mlp,
    optimizer_step,
)
from .taxonomy import PROB_FLOOR, RankedPath, TaxTree, build_tree, leaf_probabilities, node_probabilities

log = logging.getLogger(__name__)

_LOG_FLOOR = math.log(PROB_FLOOR)


@dataclass
class DistillConfig:
    alpha: float = 0.3
    tau: float = 4.0
    epochs: int = 100
    batch_size: int = 64
    lr_student: float = 1e-3
    lr_teacher: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    deterministic: bool = True
    student_hidden: tuple[int, ...] = (512, 512)
    teacher_hidden: tuple[int, ...] = ()
    # Seeds the student initialisation separately from ``seed`` when set.
    student_seed: int | None = None
    # Per-dimension z-score of teacher embeddings over the dataset before the head.
    standardize_embeddings: bool = True

    def __post_init__(self):
        self.student_hidden = tuple(int(h) for h in self.student_hidden)
        self.teacher_hidden = tuple(int(h) for h in self.teacher_hidden)
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_student <= 0 or self.lr_teacher <= 0:
            raise ConfigError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if any(h < 1 for h in self.student_hidden + self.teacher_hidden):
            raise ConfigError("hidden widths must be positive")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> DistillConfig:
        return cls(**json.loads(text))


# --- losses ----------------------------------------------------------------------

def resolve_targets(tree: TaxTree, targets: Sequence[RankedPath | str]) -> np.ndarray:
    return np.array([tree.node_of(t) for t in targets], dtype=np.int64)


def hier_loss_nodes(tree: TaxTree, logits: np.ndarray, target_nodes: Sequence[int]) -> tuple[float, np.ndarray]:
    """Deep hierarchical loss for targets given as node ids (0 = unassigned)."""
    z = np.asarray(logits, dtype=np.float64)
    n = z.shape[0]
    if n == 0:
        raise ShapeError("empty batch")
    if len(target_nodes) != n:
        raise ShapeError(f"{len(target_nodes)} targets for {n} rows")
    p = leaf_probabilities(z)
    node_p = node_probabilities(tree, p)
    inv_mass = np.zeros_like(p)
    n_active = np.zeros(n)
    row_loss = np.zeros(n)
    for i, u in enumerate(target_nodes):
        acc = 0.0
        for v in tree.path_cache[u]:
            pv = node_p[i, v]
            if pv > PROB_FLOOR:
                acc -= math.log(pv)
                lo, hi = tree.leaf_range[v]
                inv_mass[i, lo:hi] += 1.0 / pv
                n_active[i] += 1
            else:
                acc -= _LOG_FLOOR  # clamped term: constant, no gradient
        row_loss[i] = acc
    # d/dz_k of -log P(u) is p_k - p_k [k under u] / P(u)
    grad = p * (n_active[:, None] - inv_mass) / n
    return float(row_loss.sum() / n), grad


def hier_loss(tree: TaxTree, logits: np.ndarray, targets: Sequence[RankedPath | str]) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of every node on each target lineage.

    Returns the loss and its gradient w.r.t. ``logits``. Unassigned (empty)
    targets add nothing to either, but still count in the batch mean.
    """
    return hier_loss_nodes(tree, logits, resolve_targets(tree, targets))


def soften(logits, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    return leaf_probabilities(np.asarray(logits, dtype=np.float64) / tau)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    s = z - z.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def kd_loss(teacher_logits: np.ndarray, student_logits: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """Temperature-scaled KL(teacher || student), times tau**2, averaged over rows.

    Only the student gradient is returned: teacher logits are constants here.
    """
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    zt = np.asarray(teacher_logits, dtype=np.float64)
    zs = np.asarray(student_logits, dtype=np.float64)
    if zt.shape != zs.shape or zt.ndim != 2:
        raise ShapeError(f"teacher/student logits shapes differ: {zt.shape} vs {zs.shape}")
    n = zs.shape[0]
    if n == 0:
        raise ShapeError("empty batch")
    log_qt = _log_softmax(zt / tau)
    log_qs = _log_softmax(zs / tau)
    qt = np.exp(log_qt)
    qs = np.exp(log_qs)
    active = log_qs > _LOG_FLOOR
    ratio = log_qt - np.where(active, log_qs, _LOG_FLOOR)
    terms = np.where(qt > 0, qt * ratio, 0.0)
    # KL is non-negative; clip rounding noise on near-identical rows
    rows = np.maximum(terms.sum(axis=1), 0.0)
    value = tau * tau * rows.sum() / n
    qt_active = qt * active
    grad = tau * (qs * qt_active.sum(axis=1, keepdims=True) - qt_active) / n
    return float(value), grad


# --- training --------------------------------------------------------------------

@dataclass
class EpochLosses:
    epoch: int
    teacher_hier: float
    student_hier: float
    kd: float


@dataclass
class BatchRecord:
    epoch: int
    batch: int
    size: int
    teacher_hier: float
    student_hier: float
    kd: float
    student: float
    total: float


@dataclass
class TrainState:
    tree: TaxTree
    config: DistillConfig
    student: MlpModel
    student_opt: OptimizerState
    teacher_head: MlpModel
    teacher_opt: OptimizerState
    shuffle_rng: np.random.Generator
    epoch: int = 0
    history: list[EpochLosses] = field(default_factory=list)
    batch_log: list[BatchRecord] = field(default_factory=list)


def _streams(config: DistillConfig):
    teacher_ss, student_ss, shuffle_ss = np.random.SeedSequence(config.seed).spawn(3)
    if config.student_seed is not None:
        student_ss = np.random.SeedSequence([config.student_seed, 1])
    return (
        np.random.default_rng(teacher_ss),
        np.random.default_rng(student_ss),
        np.random.default_rng(shuffle_ss),
    )


def init_state(tree: TaxTree, input_dim: int, embed_dim: int, config: DistillConfig) -> TrainState:
    if tree.n_leaves < 2:
        raise TrainingError(f"need at least 2 leaf taxa to train, tree has {tree.n_leaves}")
    t_rng, s_rng, sh_rng = _streams(config)
    teacher = init_mlp([embed_dim, *config.teacher_hidden, tree.n_leaves], t_rng)
    student = init_mlp([input_dim, *config.student_hidden, tree.n_leaves], s_rng)
    return TrainState(
        tree=tree,
        config=config,
        student=student,
        student_opt=OptimizerState.for_params(student.parameters(), config.lr_student, config.weight_decay),
        teacher_head=teacher,
        teacher_opt=OptimizerState.for_params(teacher.parameters(), config.lr_teacher, config.weight_decay),
        shuffle_rng=sh_rng,
    )


def _step(model: MlpModel, opt: OptimizerState, batch: np.ndarray, upstream: np.ndarray) -> None:
    optimizer_step(opt, model.parameters(), backward(model, batch, upstream))


def train(
    tree: TaxTree,
    features: FeatureMatrix | np.ndarray,
    embeddings: np.ndarray,
    labels: Sequence[RankedPath | str],
    config: DistillConfig | None = None,
    *,
    state: TrainState | None = None,
    on_epoch: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Jointly train the teacher head and the student for ``config.epochs`` epochs.

    Each batch first takes a teacher step on its own hierarchical loss, then
    recomputes teacher logits and takes a student step on
    ``alpha * hier + (1 - alpha) * kd`` with those logits held fixed.
    Rows of ``features``, ``embeddings`` and ``labels`` must be aligned.
    """
    config = config or DistillConfig()
    x = features.data if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    emb = np.asarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise TrainingError("empty dataset")
    if emb.shape[0] != n or len(labels) != n:
        raise ShapeError(f"misaligned inputs: {n} feature rows, {emb.shape[0]} embeddings, {len(labels)} labels")
    for name, arr in (("feature", x), ("embedding", emb)):
        bad = np.flatnonzero(~np.isfinite(arr).all(axis=1))
        if bad.size:
            raise TrainingError(f"non-finite {name} values in {bad.size} row(s), first row {bad[0]}")
    if config.standardize_embeddings:
        emb = standardize_columns(emb)
    targets = resolve_targets(tree, labels)
    if state is None:
        state = init_state(tree, x.shape[1], emb.shape[1], config)
    alpha, tau = config.alpha, config.tau

    for _ in range(config.epochs):
        epoch = state.epoch + 1
        perm = state.shuffle_rng.permutation(n)
        sums = np.zeros(3)
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start : start + config.batch_size]
            xb, eb, tb = x[idx], emb[idx], targets[idx]
            where = f"epoch {epoch} batch {b}"
            try:
                zt = forward(state.teacher_head, eb)
                l_teacher, g_teacher = hier_loss_nodes(tree, zt, tb)
                if not math.isfinite(l_teacher):
                    raise NumericError("non-finite teacher loss")
                _step(state.teacher_head, state.teacher_opt, eb, g_teacher)

                zt = forward(state.teacher_head, eb)
                zs = forward(state.student, xb)
                l_hier, g_hier = hier_loss_nodes(tree, zs, tb)
                l_kd, g_kd = kd_loss(zt, zs, tau)
                if not (math.isfinite(l_hier) and math.isfinite(l_kd)):
                    raise NumericError("non-finite student loss")
                _step(state.student, state.student_opt, xb, alpha * g_hier + (1.0 - alpha) * g_kd)
            except (NumericError, FloatingPointError) as exc:
                raise TrainingError(f"{where}: {exc}") from exc

            l_student = alpha * l_hier + (1.0 - alpha) * l_kd
            state.batch_log.append(
                BatchRecord(epoch, b, len(idx), l_teacher, l_hier, l_kd, l_student, l_teacher + l_student)
            )
            sums += len(idx) * np.array([l_teacher, l_hier, l_kd])
        state.epoch = epoch
        rec = EpochLosses(epoch, *(sums / n))
        state.history.append(rec)
        log.info(
            "epoch %d  teacher_hier=%.4f  student_hier=%.4f  kd=%.4f",
            epoch, rec.teacher_hier, rec.student_hier, rec.kd,
        )
        if on_epoch is not None:
            on_epoch(state)
    return state


# --- checkpoints -----------------------------------------------------------------

CHECKPOINT_MAGIC = b"TXDM"
CHECKPOINT_VERSION = 1
_ACT_CODES = {"identity": 0, "relu": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


@dataclass
class Checkpoint:
    tree: TaxTree
    config: DistillConfig
    student: MlpModel
    teacher_head: MlpModel
    history: list[EpochLosses]


def _put_str(stream, text: str) -> None:
    raw = text.encode("utf-8")
    stream.write(struct.pack("<I", len(raw)))
    stream.write(raw)


def _get_str(stream) -> str:
    (length,) = struct.unpack("<I", _read_exact(stream, 4))
    return _read_exact(stream, length).decode("utf-8")


def save_checkpoint(state: TrainState | Checkpoint, stream: IO[bytes]) -> None:
    """Layout (little-endian): magic, version, tree paths, config JSON,
    layer shapes for student then teacher, float64 parameters in the same
    order, then per-epoch loss records."""
    stream.write(CHECKPOINT_MAGIC)
    stream.write(struct.pack("<I", CHECKPOINT_VERSION))
    paths = state.tree.canonical_paths()
    stream.write(struct.pack("<I", len(paths)))
    for p in paths:
        _put_str(stream, str(p))
    _put_str(stream, state.config.to_json())
    models = (state.student, state.teacher_head)
    for model in models:
        stream.write(struct.pack("<I", len(model.layers)))
        for layer in model.layers:
            stream.write(struct.pack("<3I", layer.in_dim, layer.out_dim, _ACT_CODES[layer.activation]))
    for model in models:
        for arr in model.parameters().values():
            stream.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    stream.write(struct.pack("<I", len(state.history)))
    for rec in state.history:
        stream.write(struct.pack("<I3d", rec.epoch, rec.teacher_hier, rec.student_hier, rec.kd))


def load_checkpoint(stream: IO[bytes]) -> Checkpoint:
    if _read_exact(stream, 4) != CHECKPOINT_MAGIC:
        raise ParseError("not a model checkpoint (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(stream, 4))
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    (n_paths,) = struct.unpack("<I", _read_exact(stream, 4))
    paths = [_get_str(stream) for _ in range(n_paths)]
    tree = build_tree(paths or [""])
    config = DistillConfig.from_json(_get_str(stream))
    shapes = []
    for _ in range(2):
        (n_layers,) = struct.unpack("<I", _read_exact(stream, 4))
        shapes.append([struct.unpack("<3I", _read_exact(stream, 12)) for _ in range(n_layers)])
    models = []
    for layer_shapes in shapes:
        layers = []
        for n_in, n_out, act in layer_shapes:
            w = np.frombuffer(_read_exact(stream, 8 * n_in * n_out), dtype="<f8").astype(np.float64).reshape(n_out, n_in)
            b = np.frombuffer(_read_exact(stream, 8 * n_out), dtype="<f8").astype(np.float64)
            layers.append(DenseLayer(w, b, _ACT_NAMES[act]))
        models.append(MlpModel(layers))
    (n_hist,) = struct.unpack("<I", _read_exact(stream, 4))
    history = []
    for _ in range(n_hist):
        epoch, a, b, c = struct.unpack("<I3d", _read_exact(stream, 28))
        history.append(EpochLosses(epoch, a, b, c))
    return Checkpoint(tree, config, models[0], models[1], history)


def write_loss_history(history: Sequence[EpochLosses], stream: IO[str], alpha: float) -> None:
    stream.write("epoch\tteacher_hier\tstudent_hier\tkd\tstudent_total\ttotal\n")
    for rec in history:
        student = alpha * rec.student_hier + (1.0 - alpha) * rec.kd
        cols = [rec.teacher_hier, rec.student_hier, rec.kd, student, rec.teacher_hier + student]
        stream.write(f"{rec.epoch}\t" + "\t".join(repr(float(c)) for c in cols) + "\n")
