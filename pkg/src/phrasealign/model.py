"""Conditional next-token models: a learnable windowed MLP and a tabular
count model used as an exactly solvable oracle.

Both expose the same contract: logprobs(x, y) returns a full length-V
log-distribution per response position plus the realized-token log-probs,
where position j is conditioned on the instruction x and the previous
response tokens. The windowed model realizes conditioning on x as the
mean of the instruction-token embeddings; the tabular model ignores x.
"""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad
from .textcore import BOS, EOS, PAD, TokenSeq

PARAM_NAMES = ("E", "W1", "b1", "W2", "b2")

MODEL_FORMAT = "windowed-lm"
MODEL_VERSION = 1


def _window_matrix(y: TokenSeq, k: int) -> np.ndarray:
    """Context ids for each position: last k tokens of [BOS] + y, left-padded."""
    seq = [PAD] * (k - 1) + [BOS] + list(y)
    return np.array([seq[j : j + k] for j in range(len(y))], dtype=np.intp)


class WindowedLM:
    """Embedding -> (window ++ pooled instruction) -> tanh -> logits."""

    def __init__(self, params: dict[str, np.ndarray], k: int = 3):
        missing = [n for n in PARAM_NAMES if n not in params]
        if missing:
            raise ValueError(f"missing parameters {missing}")
        self.params = {n: np.array(params[n], dtype=np.float64) for n in PARAM_NAMES}
        self.k = int(k)
        V, d = self.params["E"].shape
        if self.params["W1"].shape != ((self.k + 1) * d, self.params["W1"].shape[1]):
            raise ValueError(
                f"W1 shape {self.params['W1'].shape} does not match window "
                f"{(self.k + 1) * d} inputs"
            )
        if self.params["W2"].shape[1] != V or self.params["b2"].shape != (V,):
            raise ValueError("output head shape does not match vocab size")
        for n, p in self.params.items():
            if not np.all(np.isfinite(p)):
                raise ValueError(f"parameter {n} contains non-finite values")

    @classmethod
    def init_random(
        cls, vocab_size: int, d: int = 32, h: int = 64, k: int = 3, seed: int = 0
    ) -> "WindowedLM":
        rng = np.random.default_rng(seed)
        ctx = (k + 1) * d
        params = {
            "E": rng.normal(0.0, 0.1, size=(vocab_size, d)),
            "W1": rng.normal(0.0, 1.0 / np.sqrt(ctx), size=(ctx, h)),
            "b1": np.zeros(h),
            "W2": rng.normal(0.0, 1.0 / np.sqrt(h), size=(h, vocab_size)),
            "b2": np.zeros(vocab_size),
        }
        return cls(params, k=k)

    @property
    def vocab_size(self) -> int:
        return self.params["E"].shape[0]

    def _check_ids(self, ids: TokenSeq) -> None:
        V = self.vocab_size
        for t in ids:
            if not (0 <= t < V):
                raise ValueError(f"token id {t} out of range for vocab size {V}")

    def _pooled(self, x: TokenSeq) -> np.ndarray:
        E = self.params["E"]
        if not x:
            return E[BOS].copy()
        return E[np.asarray(x, dtype=np.intp)].mean(axis=0)

    def _logits(self, x: TokenSeq, y: TokenSeq) -> np.ndarray:
        E, W1, b1, W2, b2 = (self.params[n] for n in PARAM_NAMES)
        win = _window_matrix(y, self.k)
        L = len(y)
        ctx = np.concatenate(
            [E[win].reshape(L, self.k * E.shape[1]), np.tile(self._pooled(x), (L, 1))],
            axis=1,
        )
        return np.tanh(ctx @ W1 + b1) @ W2 + b2

    def logprobs(self, x: TokenSeq, y: TokenSeq) -> tuple[np.ndarray, np.ndarray]:
        """Per-position log-distribution rows (L, V) and label log-probs (L,)."""
        if not y:
            raise ValueError("empty response")
        self._check_ids(x)
        self._check_ids(y)
        logits = self._logits(x, y)
        rows = logits - _logsumexp_rows(logits)
        return rows, rows[np.arange(len(y)), np.asarray(y, dtype=np.intp)]

    def generate(self, x: TokenSeq, max_len: int = 64, mode: str = "greedy") -> TokenSeq:
        """Argmax decoding until EOS or max_len; EOS is not returned."""
        if mode != "greedy":
            raise ValueError(f"unknown decode mode {mode!r}")
        self._check_ids(x)
        E, W1, b1, W2, b2 = (self.params[n] for n in PARAM_NAMES)
        pooled = self._pooled(x)
        window = [PAD] * (self.k - 1) + [BOS]
        out: TokenSeq = []
        for _ in range(max_len):
            ctx = np.concatenate([E[np.asarray(window[-self.k :])].reshape(-1), pooled])
            logits = np.tanh(ctx @ W1 + b1) @ W2 + b2
            t = int(np.argmax(logits))
            if t == EOS:
                break
            out.append(t)
            window.append(t)
        return out

    def clone_frozen(self) -> "WindowedLM":
        return WindowedLM({n: p.copy() for n, p in self.params.items()}, k=self.k)

    def save(self, path: str) -> None:
        payload = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "k": self.k,
            "params": {n: self.params[n].tolist() for n in PARAM_NAMES},
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f)
            f.write("\n")

    @classmethod
    def load(cls, path: str) -> "WindowedLM":
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
        if payload.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a model file: format={payload.get('format')!r}")
        if payload.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {payload.get('version')!r}")
        params = {n: np.array(v, dtype=np.float64) for n, v in payload["params"].items()}
        return cls(params, k=payload["k"])


def _logsumexp_rows(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    return m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))


def batched_log_rows(
    param_nodes: dict[str, ad.Node],
    xs: list[TokenSeq],
    ys: list[TokenSeq],
    k: int,
) -> tuple[ad.Node, ad.Node, list[tuple[int, int]]]:
    """Autodiff forward over a whole batch in one graph.

    Stacks every response position of every (x, y) pair into one context
    matrix, so the graph size is independent of batch size. Returns the
    log-distribution rows node (sum L_i, V), the pre-softmax logits node
    (for gradient inspection), and per-sequence (start, end) row slices.
    """
    if len(xs) != len(ys):
        raise ValueError(f"batch mismatch: {len(xs)} instructions, {len(ys)} responses")
    if not ys or any(not y for y in ys):
        raise ValueError("empty response in batch")
    E = param_nodes["E"]
    d = E.value.shape[1]
    win_rows = np.concatenate([_window_matrix(y, k) for y in ys], axis=0)
    slices = []
    start = 0
    for y in ys:
        slices.append((start, start + len(y)))
        start += len(y)
    total = start
    # averaging matrix: response row -> mean over its instruction tokens
    instr_ids = []
    pool = np.zeros((total, sum(max(len(x), 1) for x in xs)))
    col = 0
    for (s, e), x in zip(slices, xs):
        ids = list(x) if x else [BOS]
        pool[s:e, col : col + len(ids)] = 1.0 / len(ids)
        instr_ids.extend(ids)
        col += len(ids)
    pooled = ad.matmul(ad.constant(pool), ad.gather_rows(E, instr_ids))
    parts = [ad.gather_rows(E, win_rows[:, m]) for m in range(k)]
    ctx = ad.concat(parts + [pooled], axis=1)
    hidden = ad.tanh(ad.add(ad.matmul(ctx, param_nodes["W1"]), param_nodes["b1"]))
    logits = ad.add(ad.matmul(hidden, param_nodes["W2"]), param_nodes["b2"])
    return ad.log_softmax(logits), logits, slices


class TabularLM:
    """Add-one-smoothed (window -> next token) counts; ignores the instruction."""

    def __init__(self, vocab_size: int, k: int = 3):
        self.vocab_size = int(vocab_size)
        self.k = int(k)
        self.counts: dict[tuple, np.ndarray] = {}

    def fit(self, responses: list[TokenSeq]) -> "TabularLM":
        for y in responses:
            targets = list(y) + [EOS]
            win = _window_matrix(targets, self.k)
            for row, t in zip(win, targets):
                key = tuple(int(v) for v in row)
                if key not in self.counts:
                    self.counts[key] = np.zeros(self.vocab_size)
                self.counts[key][t] += 1.0
        return self

    def _row(self, key: tuple) -> np.ndarray:
        n = self.counts.get(key)
        if n is None:
            n = np.zeros(self.vocab_size)
        return np.log(n + 1.0) - np.log(n.sum() + self.vocab_size)

    def logprobs(self, x: TokenSeq, y: TokenSeq) -> tuple[np.ndarray, np.ndarray]:
        if not y:
            raise ValueError("empty response")
        for t in y:
            if not (0 <= t < self.vocab_size):
                raise ValueError(f"token id {t} out of range for vocab size {self.vocab_size}")
        win = _window_matrix(y, self.k)
        rows = np.stack([self._row(tuple(int(v) for v in r)) for r in win])
        return rows, rows[np.arange(len(y)), np.asarray(y, dtype=np.intp)]

    def generate(self, x: TokenSeq, max_len: int = 64, mode: str = "greedy") -> TokenSeq:
        if mode != "greedy":
            raise ValueError(f"unknown decode mode {mode!r}")
        window = [PAD] * (self.k - 1) + [BOS]
        out: TokenSeq = []
        for _ in range(max_len):
            t = int(np.argmax(self._row(tuple(window[-self.k :]))))
            if t == EOS:
                break
            out.append(t)
            window.append(t)
        return out
