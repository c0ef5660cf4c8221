"""Classification metrics, forecasting evaluation, gradient attribution.

AUROC counts concordant pairs with half credit for ties; AUPRC sweeps
every distinct score threshold with right-constant interpolation. The
attribution path integrates gradients of the clinical logit with respect
to the embedding matrix from zero to the input (midpoint rule) and
reports per-token and per-type scores plus the completeness residual.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DataError
from .model import (Model, forecast_tokens, forward, make_batch, prediction_logit)
from .embedding import embed_batch
from .sequence import EVENT_TYPES, TokenType


@dataclass
class MetricsReport:
    auroc: float
    auprc: float
    f1: float
    threshold: float
    n_pos: int
    n_neg: int


def compute_metrics(scores, labels, threshold: float = 0.5) -> MetricsReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUROC/AUPRC need at least one positive and one negative")
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    diff = pos[:, None] - neg[None, :]
    auroc = float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (n_pos * n_neg))
    auprc = _auprc(scores, labels)
    pred = scores >= threshold
    tp = int((pred & (labels == 1)).sum())
    fp = int((pred & (labels == 0)).sum())
    fn = int((~pred & (labels == 1)).sum())
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    return MetricsReport(auroc, auprc, float(f1), threshold, n_pos, n_neg)


def _auprc(scores, labels) -> float:
    """Exhaustive sweep over distinct scores, right-constant interpolation."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y == 1)
    fp = np.cumsum(y == 0)
    # keep only the last index of each tied block
    last = np.nonzero(np.r_[s[1:] != s[:-1], True])[0]
    tp, fp = tp[last], fp[last]
    n_pos = tp[-1]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev_r = 0.0
    area = 0.0
    for p, r in zip(precision, recall):
        area += (r - prev_r) * p
        prev_r = r
    return float(area)


@dataclass
class ForecastReport:
    horizons: tuple
    accuracy: dict  # horizon -> mean exact-match rate
    cosine: dict  # horizon -> mean concept-embedding cosine
    n_evaluated: int
    n_skipped: int


def forecasting_eval(model: Model, sequences, concept_table: np.ndarray,
                     horizons=(1, 2, 5, 10), cutoff: int = 10, type_of=None) -> ForecastReport:
    """Hide the last `cutoff` tokens, greedily decode, score prefixes."""
    acc = {h: [] for h in horizons}
    cos = {h: [] for h in horizons}
    skipped = 0
    for seq in sequences:
        if seq.true_length < cutoff + 1:
            skipped += 1
            continue
        truth = seq.ids[seq.true_length - cutoff : seq.true_length].copy()
        prefix = seq.copy()
        n = prefix.true_length - cutoff
        prefix.ids[n:] = 0
        prefix.type[n:] = 0
        prefix.age[n:] = 0
        prefix.time[n:] = 0
        prefix.segment[n:] = 0
        prefix.visit_order[n:] = 0
        prefix.true_length = n
        pred = np.array(forecast_tokens(model, prefix, cutoff, type_of=type_of))
        correct = pred == truth
        sims = np.empty(cutoff)
        for i in range(cutoff):
            a = concept_table[pred[i]]
            b = concept_table[truth[i]]
            na, nb = np.linalg.norm(a), np.linalg.norm(b)
            sims[i] = 1.0 if pred[i] == truth[i] else (
                float(a @ b / (na * nb)) if na > 0 and nb > 0 else 0.0)
        for h in horizons:
            acc[h].append(correct[:h].mean())
            cos[h].append(sims[:h].mean())
    if not acc[horizons[0]]:
        raise DataError("no sequence long enough to evaluate forecasting")
    return ForecastReport(
        tuple(horizons),
        {h: float(np.mean(acc[h])) for h in horizons},
        {h: float(np.mean(cos[h])) for h in horizons},
        len(acc[horizons[0]]), skipped,
    )


@dataclass
class AttributionReport:
    scores: np.ndarray  # per non-pad position
    token_types: np.ndarray
    by_type: dict  # TokenType -> mean attribution
    completeness_residual: float
    output_delta: float  # F(E) - F(0)


def integrated_gradients(model: Model, seq, m: int = 64) -> AttributionReport:
    """Midpoint-rule path integral of clinical-head gradients from a zero
    embedding baseline to the sequence's embedding matrix."""
    if m < 1:
        raise DataError("integrated gradients need at least one step")
    batch = make_batch([seq], trim_to_multiple=1)
    e_full = embed_batch(batch.ids, batch.type, batch.age, batch.time, batch.segment,
                         batch.visit_order, batch.position, model.tables,
                         model.use_position).data
    lengths = batch.true_lengths

    def logit_at(e_data):
        e = ad.tensor(e_data, requires_grad=True)
        h = forward(model, batch, embeddings=e)
        z = prediction_logit(model, h, lengths)
        return e, z

    total = np.zeros_like(e_full)
    for i in range(m):
        alpha = (i + 0.5) / m
        e, z = logit_at(alpha * e_full)
        ad.backward(z)
        total += e.grad
    attribution = e_full * (total / m)
    _, z1 = logit_at(e_full)
    _, z0 = logit_at(np.zeros_like(e_full))
    delta = float(z1.data[0] - z0.data[0])
    n = int(lengths[0])
    per_token = attribution[0, :n].sum(axis=-1)
    types = batch.type[0, :n]
    by_type = attribution_by_type(per_token, types)
    residual = abs(float(per_token.sum()) - delta)
    return AttributionReport(per_token, types, by_type, residual, delta)


def attribution_by_type(scores, token_types) -> dict:
    """Mean attribution per token category; absent categories omitted."""
    scores = np.asarray(scores, dtype=np.float64)
    token_types = np.asarray(token_types)
    if scores.shape[0] != token_types.shape[0]:
        raise DataError("attribution and type streams differ in length")
    out = {}
    for t in TokenType:
        sel = token_types == int(t)
        if sel.any():
            out[t] = float(scores[sel].mean())
    return out


def write_metrics_csv(rows, path):
    """rows: iterable of (task_name, MetricsReport)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["task", "auroc", "auprc", "f1", "threshold", "n_pos", "n_neg"])
        for task, r in rows:
            w.writerow([task, f"{r.auroc:.10f}", f"{r.auprc:.10f}", f"{r.f1:.10f}",
                        f"{r.threshold:.4f}", r.n_pos, r.n_neg])


def format_report(rows) -> str:
    lines = []
    for task, r in rows:
        lines.append(f"{task}: AUROC={r.auroc:.4f} AUPRC={r.auprc:.4f} F1={r.f1:.4f} "
                     f"(+{r.n_pos}/-{r.n_neg})")
    return "\n".join(lines)
