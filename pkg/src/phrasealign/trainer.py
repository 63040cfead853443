"""Training loops: likelihood pretraining and preference finetuning.

Finetuning clones the input model into a frozen reference at entry,
optimizes with momentum SGD plus decoupled weight decay, and probes how
far the model has drifted from its initial state (full-vocabulary
divergence over a fixed probe set) at regular intervals. Alpha sweeps
rerun finetuning from the same checkpoint to trace the alignment /
drift tradeoff.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .augment import ReferenceRecord, TrainingRecord
from .losses import (alignment_loss, build_dpa_graph, build_dpo_graph,
                     dpo_loss, kl_divergence)
from .model import PARAM_NAMES, WindowedLM, batched_log_rows
from .textcore import EOS, TokenSeq

LOSS_MODES = ("mle", "dpa", "dpo")
REFERENCE_SOURCES = ("seen", "unseen")


@dataclass
class TrainConfig:
    """Knobs for both training loops; desk-scale defaults."""

    loss: str = "dpa"
    alpha: float = 0.4
    beta: float = 0.1
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-5
    steps: int = 2000
    batch: int = 32
    seed: int = 0
    kl_mode: str = "full_vocab"
    reference_source: str = "seen"
    probe_every: int = 50
    probe_size: int = 256

    def __post_init__(self):
        if self.loss not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {self.loss!r}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.kl_mode not in ("full_vocab", "label_only"):
            raise ValueError(f"unknown kl mode {self.kl_mode!r}")
        if self.reference_source not in REFERENCE_SOURCES:
            raise ValueError(f"unknown reference source {self.reference_source!r}")
        if self.probe_every < 1 or self.probe_size < 1:
            raise ValueError("probe_every and probe_size must be >= 1")


@dataclass
class TrainTrace:
    """Per-step loss terms plus periodic drift probes.

    l_a and l_d are NaN on steps where the objective has no such term
    (the sequence-level baseline). divergence maps probe step -> value,
    measured before that step's update, so step 0 reads the untouched
    model. final_divergence is probed after the last update.
    """

    l_a: list[float] = field(default_factory=list)
    l_d: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    divergence: dict[int, float] = field(default_factory=dict)
    final_divergence: float = float("nan")
    wall_time: float = 0.0

    @property
    def steps(self) -> int:
        return len(self.total)

    def save(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "l_a", "l_d", "total", "divergence"])
            for i in range(self.steps):
                w.writerow([
                    i,
                    "" if np.isnan(self.l_a[i]) else repr(self.l_a[i]),
                    "" if np.isnan(self.l_d[i]) else repr(self.l_d[i]),
                    repr(self.total[i]),
                    repr(self.divergence[i]) if i in self.divergence else "",
                ])


def _sgd_step(model: WindowedLM, grads: dict[str, np.ndarray],
              velocity: dict[str, np.ndarray], cfg: TrainConfig) -> None:
    # decoupled decay: shrink weights directly, not through the gradient
    for n in PARAM_NAMES:
        v = velocity[n]
        v *= cfg.momentum
        v += grads[n]
        model.params[n] -= cfg.lr * (v + cfg.weight_decay * model.params[n])


def _sample(rng: np.random.Generator, items: list, size: int) -> list:
    idx = rng.choice(len(items), size=min(size, len(items)), replace=False)
    return [items[i] for i in idx]


def mean_alignment_loss(model, records: list[TrainingRecord]) -> float:
    if not records:
        raise ValueError("no records")
    return float(np.mean([alignment_loss(r, model)[0] for r in records]))


def mean_nll(model, corpus: list[tuple[TokenSeq, TokenSeq]]) -> float:
    """Token-level mean negative log-likelihood, EOS appended to targets."""
    if not corpus:
        raise ValueError("empty corpus")
    tot, n = 0.0, 0
    for x, y in corpus:
        _, labels = model.logprobs(x, list(y) + [EOS])
        tot -= labels.sum()
        n += len(labels)
    return tot / n


def pretrain_mle(model: WindowedLM, corpus: list[tuple[TokenSeq, TokenSeq]],
                 cfg: TrainConfig) -> tuple[WindowedLM, list[float]]:
    """Next-token NLL minimization; returns the model and per-step batch NLL."""
    if not corpus:
        raise ValueError("empty corpus")
    velocity = {n: np.zeros_like(model.params[n]) for n in PARAM_NAMES}
    trace = []
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, 3, step])
        batch = _sample(rng, corpus, cfg.batch)
        nodes = {n: ad.leaf(model.params[n]) for n in PARAM_NAMES}
        ys = [list(y) + [EOS] for _, y in batch]
        rows, _, _ = batched_log_rows(nodes, [list(x) for x, _ in batch], ys, model.k)
        all_tokens = np.concatenate([np.asarray(y, dtype=np.intp) for y in ys])
        picked = ad.select(rows, np.arange(len(all_tokens)), all_tokens)
        loss = ad.scalar_mul(ad.mean(picked), -1.0)
        ad.backward(loss)
        _sgd_step(model, {n: nodes[n].grad for n in PARAM_NAMES}, velocity, cfg)
        trace.append(float(loss.value))
    return model, trace


def _blame_nan(batch: list[TrainingRecord], refs: list[ReferenceRecord],
               model, ref_model, cfg: TrainConfig) -> str:
    """Name a record whose loss is non-finite, for the abort message."""
    for r in batch:
        if cfg.loss == "dpo":
            bad = not np.isfinite(dpo_loss(r, model, ref_model, cfg.beta))
        else:
            la, _ = alignment_loss(r, model)
            bad = not np.isfinite(la)
        if bad:
            return r.id
    for r in refs:
        if not np.isfinite(kl_divergence(ref_model, model, [r], cfg.kl_mode)):
            return r.id
    return batch[0].id


def finetune(model: WindowedLM, records: list[TrainingRecord],
             ref_records: list[ReferenceRecord], cfg: TrainConfig,
             out_dir: str | None = None) -> tuple[WindowedLM, TrainTrace]:
    """Preference finetuning against a reference frozen at entry.

    The combined objective needs reference records for its leash term;
    the sequence-level baseline uses them only for drift probes.
    Writes model.json and trace.csv into out_dir when given.
    """
    if cfg.loss not in ("dpa", "dpo"):
        raise ValueError(f"finetune expects dpa or dpo, got {cfg.loss!r}")
    if not records:
        raise ValueError("no training records")
    if not ref_records:
        raise ValueError("no reference records")
    ref_model = model.clone_frozen()
    velocity = {n: np.zeros_like(model.params[n]) for n in PARAM_NAMES}
    probe_rng = np.random.default_rng([cfg.seed, 1])
    probe_set = _sample(probe_rng, ref_records, cfg.probe_size)
    trace = TrainTrace()
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        if step % cfg.probe_every == 0:
            trace.divergence[step] = kl_divergence(ref_model, model, probe_set)
        rng = np.random.default_rng([cfg.seed, 2, step])
        batch = _sample(rng, records, cfg.batch)
        nodes = {n: ad.leaf(model.params[n]) for n in PARAM_NAMES}
        if cfg.loss == "dpa":
            ref_rng = np.random.default_rng([cfg.seed, 4, step])
            ref_batch = _sample(ref_rng, ref_records, cfg.batch)
            g = build_dpa_graph(nodes, batch, ref_batch, ref_model,
                                cfg.alpha, model.k, cfg.kl_mode)
            la, ld = float(g["l_a"].value), float(g["l_d"].value)
        else:
            ref_batch = []
            g = build_dpo_graph(nodes, batch, ref_model, cfg.beta, model.k)
            la = ld = float("nan")
        total = float(g["loss"].value)
        if not np.isfinite(total):
            rid = _blame_nan(batch, ref_batch, model, ref_model, cfg)
            raise ArithmeticError(
                f"non-finite loss at step {step} (record {rid})")
        ad.backward(g["loss"])
        _sgd_step(model, {n: nodes[n].grad for n in PARAM_NAMES}, velocity, cfg)
        trace.l_a.append(la)
        trace.l_d.append(ld)
        trace.total.append(total)
    trace.final_divergence = kl_divergence(ref_model, model, probe_set)
    trace.wall_time = time.perf_counter() - t0
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        model.save(os.path.join(out_dir, "model.json"))
        trace.save(os.path.join(out_dir, "trace.csv"))
    return model, trace


SWEEP_COLUMNS = ("alpha", "final_l_a", "final_divergence",
                 "chair_i", "chair_s", "coverage", "f1")


def sweep_alpha(model: WindowedLM, records: list[TrainingRecord],
                ref_records: list[ReferenceRecord], alphas: list[float],
                cfg: TrainConfig, csv_path: str | None = None,
                eval_fn=None) -> list[dict]:
    """One finetune per alpha from the same checkpoint and seed.

    eval_fn(trained_model) may supply chair_i/chair_s/coverage/f1 for
    the table; those columns stay empty otherwise.
    """
    if not alphas:
        raise ValueError("no alpha values")
    rows = []
    for a in alphas:
        m = model.clone_frozen()
        trained, trace = finetune(m, records, ref_records,
                                  replace(cfg, loss="dpa", alpha=float(a)))
        row = {
            "alpha": float(a),
            "final_l_a": mean_alignment_loss(trained, records),
            "final_divergence": trace.final_divergence,
        }
        extra = eval_fn(trained) if eval_fn is not None else {}
        for name in SWEEP_COLUMNS[3:]:
            row[name] = extra.get(name, float("nan"))
        rows.append(row)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(SWEEP_COLUMNS)
            for row in rows:
                w.writerow([
                    "" if isinstance(row[c], float) and np.isnan(row[c])
                    else repr(float(row[c])) for c in SWEEP_COLUMNS
                ])
    return rows
