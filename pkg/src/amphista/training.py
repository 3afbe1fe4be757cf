"""Drafter training against a frozen target: dual cross-entropy objective,
decoupled-weight-decay adaptive optimizer, warmup + cosine schedule.

The adaptation layers train with full-sequence causal attention (teacher
forcing: the sampled-token input is the ground-truth next token), which is
step-for-step equivalent to the cached inference computation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .drafter import Drafter
from .model import TargetModel
from .tensor import Parameter, Tensor


class TrainingError(RuntimeError):
    """A training precondition was violated (unfrozen target, missing grads, ...)."""


@dataclass
class LossWeights:
    lambda1: float = 1.0  # distribution-alignment term
    lambda2: float = 1.0  # ground-truth language-modeling term

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda1 + self.lambda2 <= 0:
            raise ValueError("loss weights must be non-negative and not both zero")


def compute_losses(
    d_logits: Tensor,
    target_logits,
    gt,
    weights: LossWeights,
) -> tuple[Tensor, Tensor, Tensor]:
    """Return (total, alignment, lm) for per-head draft logits [..., K, V].

    alignment: mean soft cross-entropy of each head against the target
    model's softmax distribution for that future position. lm: mean hard
    cross-entropy against the ground-truth tokens.
    """
    tl = target_logits.data if isinstance(target_logits, Tensor) else np.asarray(target_logits)
    if tl.shape != d_logits.shape:
        raise T.DimensionError(
            f"target logits shape {tl.shape} != draft logits shape {d_logits.shape}"
        )
    shifted = tl - tl.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    soft = ex / ex.sum(axis=-1, keepdims=True)
    alignment = T.cross_entropy(d_logits, soft)
    lm = T.cross_entropy(d_logits, np.asarray(gt, dtype=np.int64))
    dt = d_logits.data.dtype
    total = T.add(
        T.mul(alignment, T.Tensor(np.asarray(weights.lambda1, dtype=dt))),
        T.mul(lm, T.Tensor(np.asarray(weights.lambda2, dtype=dt))),
    )
    return total, alignment, lm


class AdamW:
    """Bias-corrected adaptive moments with decoupled weight decay.

    Gradients are left untouched by ``step``; callers zero them between steps.
    """

    def __init__(
        self,
        params: list[Parameter],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.grad is None:
                raise TrainingError(f"missing gradient for parameter {p.name or '<unnamed>'}")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


@dataclass
class Schedule:
    base_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear ramp 0 -> base_lr over warmup, then cosine decay to 0."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step <= schedule.warmup_steps:
        if schedule.warmup_steps == 0:
            return schedule.base_lr
        return schedule.base_lr * step / schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainConfig:
    epochs: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    batch_size: int = 4
    seed: int = 0
    lambda1: float = 1.0
    lambda2: float = 1.0
    warmup_frac: float = 0.05


@dataclass
class EpochStats:
    epoch: int
    alignment_loss: float
    lm_loss: float
    total_loss: float
    head_top1: list[float]
    head_top5: list[float]


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)

    @property
    def final(self) -> EpochStats:
        return self.epochs[-1]

    @property
    def total_losses(self) -> list[float]:
        return [e.total_loss for e in self.epochs]

    @property
    def head_accuracy_monotone(self) -> bool:
        """Soft expectation: top-1 accuracy does not increase with head index."""
        acc = self.final.head_top1
        return all(a >= b - 1e-12 for a, b in zip(acc, acc[1:]))

    def to_csv(self, path: str | Path) -> None:
        k = len(self.epochs[0].head_top1) if self.epochs else 0
        header = ["epoch", "alignment_loss", "lm_loss", "total"]
        for i in range(1, k + 1):
            header += [f"head_{i}_top1", f"head_{i}_top5"]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            for e in self.epochs:
                row = [e.epoch, f"{e.alignment_loss:.8f}", f"{e.lm_loss:.8f}", f"{e.total_loss:.8f}"]
                for t1, t5 in zip(e.head_top1, e.head_top5):
                    row += [f"{t1:.6f}", f"{t5:.6f}"]
                w.writerow(row)


def _as_token_matrix(sequences: list[list[int]]) -> np.ndarray:
    lengths = {len(s) for s in sequences}
    if len(lengths) != 1:
        raise TrainingError("training expects equal-length sequences (chunk text corpora first)")
    return np.asarray(sequences, dtype=np.int64)


def batch_draft_logits(model: TargetModel, drafter: Drafter, tokens: np.ndarray):
    """Teacher-forced forward: returns (d_logits [B,T',K,V], target_logits, gt).

    T' excludes the trailing positions that lack a full K-token future.
    """
    k = drafter.config.K
    b, t = tokens.shape
    t_valid = t - k - 1
    if t_valid < 1:
        raise TrainingError(f"sequences of length {t} are shorter than K+2={k + 2} tokens")
    with T.no_grad():
        out = model.forward_batch(tokens)
    hidden = Tensor(out.hidden.data[:, : t - 1])
    d_logits_full = drafter.sequence_logits(hidden, tokens[:, 1:])
    d_logits = T.narrow(d_logits_full, 1, 0, t_valid)
    logits_np = out.logits.data
    target_logits = np.stack([logits_np[:, 1 + i : 1 + i + t_valid] for i in range(k)], axis=2)
    gt = np.stack([tokens[:, 2 + i : 2 + i + t_valid] for i in range(k)], axis=2)
    return d_logits, target_logits, gt


def split_corpus(sequences: list[list[int]], held_out_frac: float = 0.1):
    n_held = max(1, int(round(len(sequences) * held_out_frac)))
    if n_held >= len(sequences):
        raise TrainingError("corpus too small to hold out an evaluation split")
    return sequences[:-n_held], sequences[-n_held:]


def train(
    corpus,
    model: TargetModel,
    drafter: Drafter,
    config: TrainConfig,
    held_out_frac: float = 0.1,
) -> TrainReport:
    """Train the drafter with the dual objective; the target stays frozen."""
    if any(p.requires_grad for p in model.parameters()):
        raise TrainingError("target model must be frozen before drafter training")
    sequences = corpus.sequences if hasattr(corpus, "sequences") else list(corpus)
    train_seqs, held_seqs = split_corpus(sequences, held_out_frac)
    tokens_all = _as_token_matrix(train_seqs)
    n = tokens_all.shape[0]
    weights = LossWeights(config.lambda1, config.lambda2)

    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * steps_per_epoch
    schedule = Schedule(
        base_lr=config.lr,
        warmup_steps=min(max(int(config.warmup_frac * total_steps), 0), total_steps - 1),
        total_steps=total_steps,
    )
    opt = AdamW(
        drafter.parameters(),
        beta1=config.beta1,
        beta2=config.beta2,
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(config.seed)

    report = TrainReport()
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(3)
        seen = 0
        for lo in range(0, n, config.batch_size):
            batch = tokens_all[order[lo : lo + config.batch_size]]
            step += 1
            d_logits, target_logits, gt = batch_draft_logits(model, drafter, batch)
            total, alignment, lm = compute_losses(d_logits, target_logits, gt, weights)
            opt.zero_grad()
            total.backward()
            opt.step(lr_at(step, schedule))
            sums += [alignment.item() * len(batch), lm.item() * len(batch), total.item() * len(batch)]
            seen += len(batch)
        top1, top5 = measure_head_accuracy(held_seqs, model, drafter, top_ns=(1, 5))
        report.epochs.append(
            EpochStats(
                epoch=epoch,
                alignment_loss=float(sums[0] / seen),
                lm_loss=float(sums[1] / seen),
                total_loss=float(sums[2] / seen),
                head_top1=top1,
                head_top5=top5,
            )
        )
    opt.zero_grad()
    return report


def drafter_position_logits(model: TargetModel, drafter: Drafter, tokens: np.ndarray) -> np.ndarray:
    """Teacher-forced per-position draft logits [T-1, K, V] for one sequence."""
    with T.no_grad():
        out = model.forward_batch(tokens[None, :])
        hidden = Tensor(out.hidden.data[0, :-1])
        return drafter.sequence_logits(hidden, tokens[1:]).data


def measure_head_accuracy(
    sequences,
    model: TargetModel,
    drafter,
    top_ns: tuple[int, ...] = (1, 5),
    logits_fn=None,
) -> tuple[list[float], ...]:
    """Per-head top-n accuracy: head k is correct@n at position t iff the true
    token at t+1+k ranks in its top n. Returns one list per requested n.

    ``logits_fn(model, tokens) -> [T-1, K, V]`` overrides the real drafter
    forward (used by reference/oracle probes).
    """
    sequences = sequences.sequences if hasattr(sequences, "sequences") else sequences
    if logits_fn is None:
        logits_fn = lambda m, toks: drafter_position_logits(m, drafter, toks)
    k_heads = drafter.config.K if hasattr(drafter, "config") else None
    hits: np.ndarray | None = None
    total = 0
    for seq in sequences:
        tokens = np.asarray(seq, dtype=np.int64)
        t = len(tokens)
        d_logits = logits_fn(model, tokens)
        k = d_logits.shape[1]
        if k_heads is None:
            k_heads = k
        t_valid = t - k - 1
        if t_valid < 1:
            raise TrainingError(f"sequence of length {t} is shorter than K+2={k + 2} tokens")
        if hits is None:
            hits = np.zeros((len(top_ns), k))
        gt = np.stack([tokens[2 + i : 2 + i + t_valid] for i in range(k)], axis=1)  # [T', K]
        rows = d_logits[:t_valid]  # [T', K, V]
        order = np.argsort(-rows, axis=-1, kind="stable")
        for ni, n in enumerate(top_ns):
            top = order[..., :n]  # [T', K, n]
            hits[ni] += (top == gt[..., None]).any(axis=-1).sum(axis=0)
        total += t_valid
    assert hits is not None
    return tuple((hits[ni] / total).tolist() for ni in range(len(top_ns)))


@dataclass
class TargetTrainReport:
    losses: list[float] = field(default_factory=list)


def train_target(corpus, model: TargetModel, config: TrainConfig) -> TargetTrainReport:
    """Plain next-token pretraining for the toy target model."""
    sequences = corpus.sequences if hasattr(corpus, "sequences") else list(corpus)
    tokens_all = _as_token_matrix(sequences)
    n = tokens_all.shape[0]
    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * steps_per_epoch
    schedule = Schedule(
        base_lr=config.lr,
        warmup_steps=min(max(int(config.warmup_frac * total_steps), 0), total_steps - 1),
        total_steps=total_steps,
    )
    opt = AdamW(
        model.parameters(),
        beta1=config.beta1,
        beta2=config.beta2,
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(config.seed)
    report = TargetTrainReport()
    step = 0
    for _epoch in range(config.epochs):
        order = rng.permutation(n)
        loss_sum, seen = 0.0, 0
        for lo in range(0, n, config.batch_size):
            batch = tokens_all[order[lo : lo + config.batch_size]]
            step += 1
            out = model.forward_batch(batch)
            logits = T.narrow(out.logits, 1, 0, batch.shape[1] - 1)
            loss = T.cross_entropy(logits, batch[:, 1:])
            opt.zero_grad()
            loss.backward()
            opt.step(lr_at(step, schedule))
            loss_sum += loss.item() * len(batch)
            seen += len(batch)
        report.losses.append(loss_sum / seen)
    opt.zero_grad()
    return report
