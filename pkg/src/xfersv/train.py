"""SGD training: the schedule, the optimizer step, and the three-stage
pipeline (baseline on near+far, teacher on near only, frozen-teacher
student on the parallel pairs with any transfer recipe).

One epoch is a full shuffle-and-sweep over the pair pool; batches that end
up with fewer than two pairs or a single distinct speaker (only possible
for the last partial chunk at sane scales) are dropped. All randomness is
drawn from per-purpose child generators of the config seed, so stages are
independently reproducible.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Corpus, ParallelPair, PairBatch, _stack_pairs
from .errors import ConfigError, ParameterError, ShapeError
from .losses import RECIPES, LabeledBatch, LossWeights, ce_loss, combined_loss
from .model import (
    ExtractorConfig,
    ModelParams,
    backward,
    forward,
    init_params,
    params_hash,
)
from .numerics import Rng, softmax

_STUDENT_INPUTS = ("far_only", "near_and_far")
_SCHEDULES = ("multiplicative", "subtractive")
_LR_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr_init: float = 0.01
    lr_decay_factor: float = 0.9
    lr_decay_every: int = 2
    lr_schedule: str = "multiplicative"
    recipe: str = "ce"
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    student_input: str = "near_and_far"

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ParameterError("batch_size must be >= 2")
        if not (self.lr_init > 0):
            raise ParameterError("lr_init must be > 0")
        if not (0 < self.lr_decay_factor <= 1):
            raise ParameterError("lr_decay_factor must be in (0, 1]")
        if self.lr_decay_every < 1:
            raise ParameterError("lr_decay_every must be >= 1")
        if self.lr_schedule not in _SCHEDULES:
            raise ParameterError(f"lr_schedule must be one of {_SCHEDULES}")
        if self.recipe not in RECIPES:
            raise ParameterError(f"unknown recipe {self.recipe!r}")
        if self.student_input not in _STUDENT_INPUTS:
            raise ParameterError(f"student_input must be one of {_STUDENT_INPUTS}")


@dataclass
class OptimizerState:
    lr: float
    epoch: int = 0
    step: int = 0


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_loss: float
    components: dict[str, float]
    lr: float
    wall_time: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = []
        for r in self.records:
            lines.append(json.dumps({
                "epoch": r.epoch,
                "mean_loss": r.mean_loss,
                "components": r.components,
                "lr": r.lr,
                "wall_time": r.wall_time,
            }, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Learning rate for the given 0-based epoch.

    Multiplicative schedule: lr_init * factor^floor(epoch / every).
    Subtractive schedule: each decay interval removes (1 - factor) of the
    original lr; floored just above zero.
    """
    if epoch < 0:
        raise ParameterError("epoch must be >= 0")
    k = epoch // config.lr_decay_every
    if config.lr_schedule == "multiplicative":
        return config.lr_init * config.lr_decay_factor**k
    multiplier = max(1.0 - (1.0 - config.lr_decay_factor) * k, _LR_FLOOR)
    return config.lr_init * multiplier


def sgd_step(params: ModelParams, grads, lr: float) -> ModelParams:
    """Plain SGD: p <- p - lr * g, returned as new parameters."""
    if not (lr > 0):
        raise ParameterError("lr must be > 0")
    if len(grads.weights) != len(params.weights):
        raise ShapeError("gradient/parameter layer counts differ")
    new_w, new_b = [], []
    for w, b, gw, gb in zip(params.weights, params.biases, grads.weights, grads.biases):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ShapeError("gradient shape mismatch")
        new_w.append(w - lr * gw)
        new_b.append(b - lr * gb)
    return ModelParams(config=params.config, weights=new_w, biases=new_b, role=params.role)


def _epoch_batches(pairs: list[ParallelPair], batch_size: int, rng: Rng):
    """Shuffle the pool and yield aligned full batches.

    A trailing partial chunk is dropped (the Gram and mean-based loss terms
    carry 1/B^2 and 1/B coefficients, so a short batch would take an
    amplified step), as is any chunk with a single distinct speaker. Pools
    smaller than one batch sweep as a single short batch.
    """
    perm = rng.permutation(len(pairs))
    for start in range(0, len(perm), batch_size):
        idx = perm[start:start + batch_size]
        if idx.size < batch_size and start > 0:
            continue
        if idx.size < 2:
            continue
        batch = _stack_pairs(pairs, idx)
        if np.unique(batch.labels).size < 2:
            continue
        yield batch


def _student_views(batch: PairBatch, student_input: str):
    """Teacher-side and student-side feature rows plus labels for one batch.

    far_only: teacher sees near rows, student the far rows. near_and_far:
    near rows are additionally fed to the student paired with themselves as
    their own teacher input.
    """
    if student_input == "far_only":
        return batch.near, batch.far, batch.labels
    teacher_rows = np.vstack([batch.near, batch.near])
    student_rows = np.vstack([batch.far, batch.near])
    labels = np.concatenate([batch.labels, batch.labels])
    return teacher_rows, student_rows, labels


def _run_ce_stage(rows_of, pairs, config: TrainConfig, params: ModelParams) -> tuple[ModelParams, TrainLog]:
    """Shared CE-only loop for the baseline and teacher stages.

    `rows_of` maps a PairBatch to (features, labels) for this stage.
    """
    rng = Rng(config.seed).spawn("batches")
    log = TrainLog()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(config, epoch)
        losses = []
        for batch in _epoch_batches(pairs, config.batch_size, rng):
            feats, labels = rows_of(batch)
            _, logits, cache = forward(params, feats)
            out = ce_loss(logits, labels)
            grads = backward(params, cache, grad_logits=out.grad_logits)
            params = sgd_step(params, grads, lr)
            losses.append(out.value)
        if not losses:
            raise ParameterError("corpus too small: every batch was dropped")
        log.records.append(EpochRecord(
            epoch=epoch, mean_loss=float(np.mean(losses)),
            components={"ce": float(np.mean(losses))}, lr=lr,
            wall_time=time.perf_counter() - t0))
    return params, log


def train_baseline(corpus: Corpus, config: TrainConfig,
                   model_config: ExtractorConfig,
                   init: ModelParams | None = None) -> tuple[ModelParams, TrainLog]:
    """Cross-entropy training on both domains (near and far rows)."""
    if not corpus.pairs:
        raise ParameterError("corpus has no training pairs")
    params = init.copy(role="baseline") if init is not None else init_params(
        model_config, Rng(config.seed).spawn("init"), role="baseline")

    def rows_of(batch: PairBatch):
        feats = np.vstack([batch.near, batch.far])
        return feats, np.concatenate([batch.labels, batch.labels])

    return _run_ce_stage(rows_of, corpus.pairs, config, params)


def train_teacher(corpus: Corpus, config: TrainConfig,
                  model_config: ExtractorConfig,
                  init: ModelParams | None = None) -> tuple[ModelParams, TrainLog]:
    """Cross-entropy training on the near-field rows only."""
    if not corpus.pairs:
        raise ParameterError("corpus has no training pairs")
    params = init.copy(role="teacher") if init is not None else init_params(
        model_config, Rng(config.seed).spawn("init"), role="teacher")

    def rows_of(batch: PairBatch):
        # Data-path guard: the teacher must never train on far-field rows.
        return batch.near, batch.labels

    return _run_ce_stage(rows_of, corpus.pairs, config, params)


def train_student(teacher: ModelParams, init: ModelParams,
                  pairs: list[ParallelPair],
                  config: TrainConfig) -> tuple[ModelParams, TrainLog]:
    """Frozen-teacher student training with the configured transfer recipe.

    Per batch the teacher runs forward on the near-field side (no gradient)
    and the student on its own view; the combined loss backpropagates
    through the student only. Teacher parameters are verified bit-identical
    before and after.
    """
    if teacher.config.embedding_dim != init.config.embedding_dim:
        raise ConfigError("teacher and student embedding dims differ")
    if teacher.config.num_speakers != init.config.num_speakers:
        raise ConfigError("teacher and student class counts differ")
    if not pairs:
        raise ParameterError("no training pairs")
    teacher_before = params_hash(teacher)
    student = init.copy(role="student")
    rng = Rng(config.seed).spawn("batches")
    log = TrainLog()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(config, epoch)
        totals: list[float] = []
        comp_sums: dict[str, float] = {}
        n_batches = 0
        for batch in _epoch_batches(pairs, config.batch_size, rng):
            t_rows, s_rows, labels = _student_views(batch, config.student_input)
            t_emb, t_logits, _ = forward(teacher, t_rows)
            s_emb, s_logits, cache = forward(student, s_rows)
            lb = LabeledBatch(teacher_embeddings=t_emb, student_embeddings=s_emb,
                              student_logits=s_logits,
                              teacher_posteriors=softmax(t_logits), labels=labels)
            out = combined_loss(lb, config.weights, config.recipe)
            if not np.isfinite(out.value):
                raise NumericError(
                    f"student loss diverged at epoch {epoch} (recipe "
                    f"{config.recipe!r}); the Gram-matching term is scale-"
                    f"sensitive, lower train.student.lr_init")
            grads = backward(student, cache, out.grad_embeddings, out.grad_logits)
            student = sgd_step(student, grads, lr)
            totals.append(out.value)
            for name, v in out.components.items():
                comp_sums[name] = comp_sums.get(name, 0.0) + v
            n_batches += 1
        if not totals:
            raise ParameterError("corpus too small: every batch was dropped")
        log.records.append(EpochRecord(
            epoch=epoch, mean_loss=float(np.mean(totals)),
            components={k: v / n_batches for k, v in sorted(comp_sums.items())},
            lr=lr, wall_time=time.perf_counter() - t0))
    if params_hash(teacher) != teacher_before:
        raise RuntimeError("teacher parameters changed during student training")
    return student, log
