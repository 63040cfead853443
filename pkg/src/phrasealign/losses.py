"""Training objectives over correct/hallucinated record pairs.

The alignment loss compares each hallucinated phrase against its correct
twin through span-summed label log-probs: L_a = mean_i softplus(l_h_i -
l_c_i), the numerically safe form of -log(P_c / (P_c + P_h)). A forward
KL term against a frozen reference model keeps the rest of the
distribution in place, and a sequence-level preference loss is provided
as the baseline. All products of probabilities live in log space; spans
longer than ~20 tokens would underflow anything else.

Two layers: plain-numpy evaluation (reporting, oracles) and autodiff
graph builders (training, gradient inspection). Reference-model
quantities enter graphs as constants, so gradients flow only through the
trainable model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .augment import ReferenceRecord, TrainingRecord
from .model import batched_log_rows
from .textcore import Span


def _softplus(x: np.ndarray | float) -> np.ndarray | float:
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


@dataclass
class LossBreakdown:
    l_a: float
    l_d: float
    total: float
    alpha: float
    per_pair_margins: list[float]
    l_dpo: float | None = None
    beta: float | None = None


def accumulate_phrase_logps(label_logps: np.ndarray, spans: list[Span]) -> list[float]:
    """Span-summed label log-probs: the log of each phrase's probability product."""
    label_logps = np.asarray(label_logps, dtype=np.float64)
    out = []
    for s in spans:
        if s.end > len(label_logps):
            raise ValueError(f"span {s} out of range for {len(label_logps)} positions")
        out.append(float(label_logps[s.start : s.end].sum()))
    return out


def alignment_loss_from_phrase_logps(
    correct_logps: list[float], hallucinated_logps: list[float]
) -> tuple[float, list[float]]:
    """L_a and per-pair margins (l_h - l_c) from already-accumulated phrases."""
    if not correct_logps:
        raise ValueError("record has no phrase pairs")
    if len(correct_logps) != len(hallucinated_logps):
        raise ValueError("pair count mismatch between correct and hallucinated")
    margins = [h - c for c, h in zip(correct_logps, hallucinated_logps)]
    return float(np.mean([_softplus(m) for m in margins])), margins


def alignment_loss(record: TrainingRecord, model) -> tuple[float, list[float]]:
    """Phrase-level alignment loss for one record; returns (L_a, margins)."""
    if not record.pairs:
        raise ValueError("record has no phrase pairs")
    _, labels_c = model.logprobs(record.instruction, record.correct)
    _, labels_h = model.logprobs(record.instruction, record.hallucinated)
    lc = accumulate_phrase_logps(labels_c, [Span(p.c_start, p.c_end) for p in record.pairs])
    lh = accumulate_phrase_logps(labels_h, [Span(p.h_start, p.h_end) for p in record.pairs])
    return alignment_loss_from_phrase_logps(lc, lh)


def kl_from_rows(ref_rows: np.ndarray, model_rows: np.ndarray, mode: str = "full_vocab",
                 labels: np.ndarray | None = None) -> float:
    """Position-summed divergence of one response, reference taken as truth.

    full_vocab is the forward KL summed over the vocabulary; label_only
    weights only the realized token (and so may be negative: it is a
    truncation, not a KL).
    """
    if ref_rows.shape != model_rows.shape:
        raise ValueError(f"row shape mismatch {ref_rows.shape} vs {model_rows.shape}")
    if mode == "full_vocab":
        p = np.exp(ref_rows)
        return float((p * (ref_rows - model_rows)).sum())
    if mode == "label_only":
        if labels is None:
            raise ValueError("label_only mode needs the realized token ids")
        idx = (np.arange(len(labels)), np.asarray(labels, dtype=np.intp))
        p = np.exp(ref_rows[idx])
        return float((p * (ref_rows[idx] - model_rows[idx])).sum())
    raise ValueError(f"unknown kl mode {mode!r}")


def kl_divergence(ref_model, model, ref_records: list[ReferenceRecord],
                  mode: str = "full_vocab") -> float:
    """Token-wise divergence: positions summed, mean over records."""
    if not ref_records:
        raise ValueError("no reference records")
    if getattr(ref_model, "vocab_size", None) != getattr(model, "vocab_size", None):
        raise ValueError(
            f"vocab mismatch: reference {getattr(ref_model, 'vocab_size', None)} "
            f"vs model {getattr(model, 'vocab_size', None)}"
        )
    total = 0.0
    for r in ref_records:
        ref_rows, _ = ref_model.logprobs(r.instruction, r.response)
        model_rows, _ = model.logprobs(r.instruction, r.response)
        total += kl_from_rows(ref_rows, model_rows, mode, labels=np.asarray(r.response))
    return total / len(ref_records)


def dpa_loss(record: TrainingRecord, ref_records: list[ReferenceRecord], model,
             ref_model, alpha: float, kl_mode: str = "full_vocab") -> LossBreakdown:
    """Combined objective: alignment plus alpha times the reference leash."""
    l_a, margins = alignment_loss(record, model)
    l_d = kl_divergence(ref_model, model, ref_records, kl_mode) if ref_records else 0.0
    return LossBreakdown(
        l_a=l_a, l_d=l_d, total=l_a + alpha * l_d, alpha=alpha, per_pair_margins=margins
    )


def sequence_logprob(model, x, y) -> float:
    _, labels = model.logprobs(x, y)
    return float(labels.sum())


def dpo_loss(record: TrainingRecord, model, ref_model, beta: float) -> float:
    """Sequence-level preference baseline: -log sigmoid of the reward margin."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    z = beta * (
        (sequence_logprob(model, record.instruction, record.correct)
         - sequence_logprob(ref_model, record.instruction, record.correct))
        - (sequence_logprob(model, record.instruction, record.hallucinated)
           - sequence_logprob(ref_model, record.instruction, record.hallucinated))
    )
    return float(_softplus(-z))


# ---------------------------------------------------------------------------
# graph builders


def build_dpa_graph(
    param_nodes: dict[str, ad.Node],
    records: list[TrainingRecord],
    ref_records: list[ReferenceRecord],
    ref_model,
    alpha: float,
    k: int,
    kl_mode: str = "full_vocab",
) -> dict:
    """One autodiff graph for a whole batch of the combined objective.

    Returns nodes for the total loss, its two terms, and the raw logits
    (whose gradient is inspected by the locality checks), plus the
    per-sequence row slices. Correct sequences come first, hallucinated
    second, reference third.
    """
    if not records:
        raise ValueError("empty batch")
    if any(not r.pairs for r in records):
        raise ValueError("record has no phrase pairs")
    B = len(records)
    xs = [r.instruction for r in records] + [r.instruction for r in records]
    ys = [list(r.correct) for r in records] + [list(r.hallucinated) for r in records]
    xs += [r.instruction for r in ref_records]
    ys += [list(r.response) for r in ref_records]
    rows, logits, slices = batched_log_rows(param_nodes, xs, ys, k)
    total_rows = rows.value.shape[0]
    all_tokens = np.concatenate([np.asarray(y, dtype=np.intp) for y in ys])
    labels = ad.select(rows, np.arange(total_rows), all_tokens)
    col = ad.reshape(labels, (total_rows, 1))

    n_pairs = sum(len(r.pairs) for r in records)
    M = np.zeros((n_pairs, total_rows))
    w = np.zeros((n_pairs, 1))
    row = 0
    for i, r in enumerate(records):
        c_start = slices[i][0]
        h_start = slices[B + i][0]
        for p in r.pairs:
            M[row, c_start + p.c_start : c_start + p.c_end] = -1.0
            M[row, h_start + p.h_start : h_start + p.h_end] = 1.0
            w[row, 0] = 1.0 / (B * len(r.pairs))
            row += 1
    margins = ad.matmul(ad.constant(M), col)
    l_a = ad.sum_(ad.mul(ad.softplus(margins), ad.constant(w)))

    if ref_records and alpha != 0.0:
        ref_rows_np = []
        ref_labels_np = []
        for r in ref_records:
            rr, rl = ref_model.logprobs(r.instruction, r.response)
            ref_rows_np.append(rr)
            ref_labels_np.append(rl)
        ref_rows_np = np.concatenate(ref_rows_np, axis=0)
        ref_start = slices[2 * B][0]
        if kl_mode == "full_vocab":
            p = np.exp(ref_rows_np)
            entropy_side = float((p * ref_rows_np).sum())
            theta_rows = ad.gather_rows(rows, np.arange(ref_start, total_rows))
            cross = ad.sum_(ad.mul(ad.constant(p), theta_rows))
            l_d = ad.scalar_mul(
                ad.add(ad.constant(entropy_side), ad.scalar_mul(cross, -1.0)),
                1.0 / len(ref_records),
            )
        elif kl_mode == "label_only":
            ref_labels_np = np.concatenate(ref_labels_np)
            p = np.exp(ref_labels_np)
            const_side = float((p * ref_labels_np).sum())
            theta_labels = ad.select(labels, np.arange(ref_start, total_rows))
            cross = ad.sum_(ad.mul(ad.constant(p), theta_labels))
            l_d = ad.scalar_mul(
                ad.add(ad.constant(const_side), ad.scalar_mul(cross, -1.0)),
                1.0 / len(ref_records),
            )
        else:
            raise ValueError(f"unknown kl mode {kl_mode!r}")
        loss = ad.add(l_a, ad.scalar_mul(l_d, alpha))
    else:
        l_d = ad.constant(0.0)
        loss = l_a
    return {"loss": loss, "l_a": l_a, "l_d": l_d, "logits": logits,
            "rows": rows, "slices": slices}


def build_dpo_graph(
    param_nodes: dict[str, ad.Node],
    records: list[TrainingRecord],
    ref_model,
    beta: float,
    k: int,
) -> dict:
    """Batch graph for the sequence-level baseline; mean loss over records."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if not records:
        raise ValueError("empty batch")
    B = len(records)
    xs = [r.instruction for r in records] + [r.instruction for r in records]
    ys = [list(r.correct) for r in records] + [list(r.hallucinated) for r in records]
    rows, logits, slices = batched_log_rows(param_nodes, xs, ys, k)
    total_rows = rows.value.shape[0]
    all_tokens = np.concatenate([np.asarray(y, dtype=np.intp) for y in ys])
    labels = ad.select(rows, np.arange(total_rows), all_tokens)
    col = ad.reshape(labels, (total_rows, 1))
    # row i: sum of correct sequence i minus sum of hallucinated sequence i
    D = np.zeros((B, total_rows))
    ref_margin = np.zeros((B, 1))
    for i, r in enumerate(records):
        s, e = slices[i]
        D[i, s:e] = 1.0
        s, e = slices[B + i]
        D[i, s:e] = -1.0
        ref_margin[i, 0] = (
            sequence_logprob(ref_model, r.instruction, r.correct)
            - sequence_logprob(ref_model, r.instruction, r.hallucinated)
        )
    theta_margin = ad.matmul(ad.constant(D), col)
    z = ad.scalar_mul(ad.add(theta_margin, ad.constant(-ref_margin)), beta)
    loss = ad.mean(ad.softplus(ad.scalar_mul(z, -1.0)))
    return {"loss": loss, "logits": logits, "slices": slices}
