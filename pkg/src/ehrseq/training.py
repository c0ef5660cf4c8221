"""Objectives, optimizer, schedule, and the two training loops.

Pretraining is next-token prediction over the non-pad prefix; masked-token
denoising is implemented behind a flag but is not part of the default
pipeline. Finetuning is multitask and prompted: every labeled example is
expanded into one (sequence, task token, label) triple per task and all
tasks share the single clinical head, with mixed-task minibatches.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import derive_labels, prepare_task_record
from .errors import DataError, DivergenceError
from .model import (Batch, Model, forecasting_head, forward, make_batch, prediction_head)
from .sequence import EVENT_TYPES, PatientSequence, TaskKind, apply_task_token, encode_patient

PROB_CLAMP = 1e-12


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    peak_lr: float = 5e-5
    floor_lr: float = 5e-7
    warmup_fraction: float = 0.1
    mask_probability: float = 0.15
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    objective: str = "ntp"  # or "mlm"

    def validate(self):
        if not 0.0 < self.warmup_fraction < 1.0:
            raise DataError("warmup fraction must lie in (0, 1)")
        if self.batch_size < 1:
            raise DataError("batch size must be at least 1")


def ntp_valid_mask(batch: Batch) -> np.ndarray:
    """Positions with a real next token: j and j+1 both inside the prefix."""
    B, L = batch.ids.shape
    idx = np.arange(L)[None, :]
    return idx + 1 < batch.true_lengths[:, None]


def ntp_targets(batch: Batch) -> np.ndarray:
    tgt = np.zeros_like(batch.ids)
    tgt[:, :-1] = batch.ids[:, 1:]
    return tgt


def ntp_loss(log_probs: ad.Tensor, targets: np.ndarray, valid_mask: np.ndarray) -> ad.Tensor:
    """Mean negative log-likelihood of the shifted targets over valid positions."""
    n = valid_mask.sum()
    if n == 0:
        raise DataError("no valid positions for the next-token loss")
    picked = ad.pick(log_probs, targets)
    return ad.mul(ad.tsum(ad.mul(picked, ad.constant(valid_mask.astype(float)))), -1.0 / n)


def ntp_accuracy(log_probs: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    if mask.sum() == 0:
        return float("nan")
    pred = log_probs.argmax(axis=-1)
    return float(((pred == targets) & mask).sum() / mask.sum())


def mlm_corrupt(seq: PatientSequence, p: float, rng, mask_id: int):
    """Independently replace event tokens by the mask id with probability p.

    Returns (corrupted copy, sorted list of masked positions). Special
    tokens are never masked; the type/attribute streams are left intact.
    """
    if not 0.0 < p < 1.0:
        raise DataError("mask probability must lie in (0, 1)")
    out = seq.copy()
    ev = np.isin(seq.type[: seq.true_length], [int(t) for t in EVENT_TYPES])
    draw = rng.random(seq.true_length) < p
    positions = np.nonzero(ev & draw)[0]
    out.ids[positions] = mask_id
    return out, positions.tolist()


def mlm_loss(log_probs: ad.Tensor, original_ids: np.ndarray, masked_positions) -> ad.Tensor:
    """Mean NLL of the original ids over the masked positions only."""
    mask = np.zeros(original_ids.shape, dtype=bool)
    for b, pos in enumerate(masked_positions):
        mask[b, list(pos)] = True
    if mask.sum() == 0:
        raise DataError("empty mask set for the denoising loss")
    picked = ad.pick(log_probs, original_ids)
    return ad.mul(ad.tsum(ad.mul(picked, ad.constant(mask.astype(float)))), -1.0 / mask.sum())


def mpf_bce_loss(probs: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    """Mean binary cross-entropy with clamped probabilities."""
    labels = np.asarray(labels, dtype=np.float64)
    if np.any((labels != 0) & (labels != 1)):
        raise DataError("labels must be 0 or 1")
    p = ad.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    terms = ad.add(ad.mul(ad.constant(labels), ad.log(p)),
                   ad.mul(ad.constant(1.0 - labels), ad.log(ad.sub(1.0, p))))
    return ad.mul(ad.tmean(terms), -1.0)


def lr_schedule(step: int, total: int, peak: float, floor: float, warmup_fraction: float) -> float:
    """Linear warmup floor->peak, then linear decay back to floor."""
    if total <= 0:
        raise DataError("schedule needs a positive total step count")
    w = warmup_fraction * total
    if step <= w:
        return floor + (peak - floor) * (step / w if w > 0 else 1.0)
    return peak + (floor - peak) * ((step - w) / (total - w))


class AdamW:
    """Decoupled weight decay; bias-corrected moments; fully deterministic."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in {name}")
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1**self.t)
            vhat = self.v[name] / (1 - b2**self.t)
            p.data -= lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)


@dataclass
class LossLogRow:
    epoch: int
    split: str
    objective: str
    loss: float
    accuracy: float


def write_loss_log(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "split", "objective", "loss", "accuracy"])
        for r in rows:
            w.writerow([r.epoch, r.split, r.objective, f"{r.loss:.10f}", f"{r.accuracy:.10f}"])


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def pretrain(model: Model, sequences, cfg: TrainConfig, mask_id: int | None = None,
             checkpoint_fn=None):
    """Next-token (or masked-token) pretraining; returns per-epoch log rows."""
    cfg.validate()
    if not sequences:
        raise DataError("empty pretraining split")
    params = model.named_parameters()
    opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    n = len(sequences)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total = max(1, cfg.epochs * steps_per_epoch)
    log = []
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        drop_rng = np.random.default_rng([cfg.seed, epoch, 1])
        losses, accs = [], []
        for idx in _batches(n, cfg.batch_size, rng):
            batch_seqs = [sequences[i] for i in idx]
            if cfg.objective == "mlm":
                assert mask_id is not None
                pairs = [mlm_corrupt(s, cfg.mask_probability, rng, mask_id) for s in batch_seqs]
                corrupted = [c for c, _ in pairs]
                positions = [p for _, p in pairs]
                if all(len(p) == 0 for p in positions):
                    continue
                batch = make_batch(corrupted)
                h = forward(model, batch, train=True, rng=drop_rng)
                logp = forecasting_head(model, h)
                orig = make_batch(batch_seqs).ids
                loss = mlm_loss(logp, orig, positions)
                mask = np.zeros(orig.shape, dtype=bool)
                for b, pos in enumerate(positions):
                    mask[b, list(pos)] = True
                acc = ntp_accuracy(logp.data, orig, mask)
            else:
                batch = make_batch(batch_seqs)
                h = forward(model, batch, train=True, rng=drop_rng)
                logp = forecasting_head(model, h)
                targets = ntp_targets(batch)
                mask = ntp_valid_mask(batch)
                loss = ntp_loss(logp, targets, mask)
                acc = ntp_accuracy(logp.data, targets, mask)
            model.zero_grad()
            ad.backward(loss)
            step += 1
            opt.step(lr_schedule(step, total, cfg.peak_lr, cfg.floor_lr, cfg.warmup_fraction))
            losses.append(float(loss.data))
            accs.append(acc)
        log.append(LossLogRow(epoch, "pretrain", cfg.objective,
                              float(np.mean(losses)), float(np.nanmean(accs))))
        if checkpoint_fn is not None:
            checkpoint_fn(model, epoch)
    return log


@dataclass
class TaskExample:
    sequence: PatientSequence
    task: TaskKind
    label: int


def expand_task_examples(records, vocab, l_c, tasks, edges=None):
    """One (preprocessed sequence, task token, label) triple per labeled task."""
    from .data import apply_lab_binning

    out = []
    for rec in records:
        labels = derive_labels(rec)
        for task in tasks:
            y = labels.get(task)
            if y is None:
                continue
            prepped = prepare_task_record(rec, task, labels)
            if edges is not None:
                prepped = apply_lab_binning(prepped, edges)
            if not prepped.visits or not any(v.events for v in prepped.visits):
                continue
            seq = encode_patient(prepped, vocab, l_c)
            out.append(TaskExample(apply_task_token(seq, task, vocab), task, int(y)))
    return out


def finetune_mpf(model: Model, examples, cfg: TrainConfig, log_split: str = "finetune"):
    """Joint finetuning over mixed-task minibatches through the shared head."""
    cfg.validate()
    by_task = {}
    for ex in examples:
        by_task.setdefault(ex.task, []).append(ex)
    kept = []
    for task, exs in by_task.items():
        if len(exs) == 0:
            continue
        kept.extend(exs)
    if not kept:
        raise DataError("no labeled examples for any task")
    params = model.named_parameters()
    opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    n = len(kept)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total = max(1, cfg.epochs * steps_per_epoch)
    log = []
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 7, epoch])
        drop_rng = np.random.default_rng([cfg.seed, 8, epoch])
        losses, accs = [], []
        for idx in _batches(n, cfg.batch_size, rng):
            exs = [kept[i] for i in idx]
            batch = make_batch([e.sequence for e in exs])
            labels = np.array([e.label for e in exs], dtype=np.float64)
            h = forward(model, batch, train=True, rng=drop_rng)
            probs = prediction_head(model, h, batch.true_lengths, train=True, rng=drop_rng)
            loss = mpf_bce_loss(probs, labels)
            model.zero_grad()
            ad.backward(loss)
            step += 1
            opt.step(lr_schedule(step, total, cfg.peak_lr, cfg.floor_lr, cfg.warmup_fraction))
            losses.append(float(loss.data))
            accs.append(float(((probs.data >= 0.5) == labels).mean()))
        log.append(LossLogRow(epoch, log_split, "mpf_bce",
                              float(np.mean(losses)), float(np.mean(accs))))
    return log
