"""Synthetic multi-task data: four structurally distinct sequence tasks.

Each task owns a disjoint slice of a shared fixed vocabulary so that routing
pressure differs per task. All default tasks emit sequences of the same
length, which keeps mixed-task batches rectangular without padding.

Sequence layouts (m = payload length):
    copy / reverse / shift:  [BOS s1..sm SEP t1..tm]   targets at SEP..t_{m-1}
    parity:                  [BOS b1..bm SEP]          one target at SEP

Accuracy is multiple-choice: argmax over the task's candidate ids at each
target position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .model import Batch, ToyModel
from .moe import RoutingStats

BOS = 1
SEP = 2
SYMBOL_BASE = 3

KINDS = ("copy", "reverse", "shift-by-k", "parity-classify")


@dataclass(frozen=True)
class SyntheticTask:
    name: str
    kind: str
    sym_lo: int           # vocab slice [sym_lo, sym_hi)
    sym_hi: int
    payload_len: int
    shift: int = 0                       # shift-by-k only
    label_ids: tuple[int, int] = (0, 0)  # parity-classify only
    train_count: int = 2048
    test_count: int = 512

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.sym_hi <= self.sym_lo or self.sym_lo < SYMBOL_BASE:
            raise ConfigError(f"bad vocab slice [{self.sym_lo}, {self.sym_hi})")
        if self.payload_len < 1:
            raise ConfigError("payload_len must be positive")

    @property
    def n_symbols(self) -> int:
        return self.sym_hi - self.sym_lo

    @property
    def seq_len(self) -> int:
        if self.kind == "parity-classify":
            return self.payload_len + 2
        return 2 * self.payload_len + 2

    @property
    def targets_per_sample(self) -> int:
        return 1 if self.kind == "parity-classify" else self.payload_len

    @property
    def candidate_ids(self) -> np.ndarray:
        """Ids eligible as answers; accuracy is argmax over these."""
        if self.kind == "parity-classify":
            return np.asarray(self.label_ids, dtype=np.int64)
        return np.arange(self.sym_lo, self.sym_hi, dtype=np.int64)

    @property
    def target_offsets(self) -> np.ndarray:
        """Positions within one sequence that carry a loss."""
        m = self.payload_len
        if self.kind == "parity-classify":
            return np.asarray([m + 1], dtype=np.int64)
        return np.arange(m + 1, 2 * m + 1, dtype=np.int64)

    def _answer(self, payload: np.ndarray) -> np.ndarray:
        if self.kind == "copy":
            return payload
        if self.kind == "reverse":
            return payload[::-1]
        if self.kind == "shift-by-k":
            return (payload - self.sym_lo + self.shift) % self.n_symbols + self.sym_lo
        ones = int((payload == self.sym_lo + 1).sum())
        return np.asarray([self.label_ids[ones % 2]], dtype=np.int64)

    def generate(self, seed: int) -> "TaskData":
        """Deterministic train/test sets with disjoint payloads."""
        rng = np.random.default_rng([int(seed), 3, self.sym_lo, self.payload_len])
        total = self.train_count + self.test_count
        space = self.n_symbols ** self.payload_len
        if total > space:
            raise ConfigError(
                f"task {self.name}: {total} samples exceed {space} distinct payloads"
            )
        seen: set[bytes] = set()
        payloads = np.empty((total, self.payload_len), dtype=np.int64)
        filled = 0
        while filled < total:
            cand = rng.integers(self.sym_lo, self.sym_hi,
                                size=(total - filled, self.payload_len))
            for row in cand:
                key = row.tobytes()
                if key in seen:
                    continue
                seen.add(key)
                payloads[filled] = row
                filled += 1
                if filled == total:
                    break
        return TaskData(
            task=self,
            train=self._encode(payloads[: self.train_count]),
            test=self._encode(payloads[self.train_count:]),
        )

    def _encode(self, payloads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = payloads.shape[0]
        m = self.payload_len
        tokens = np.zeros((n, self.seq_len), dtype=np.int64)
        tokens[:, 0] = BOS
        tokens[:, 1: m + 1] = payloads
        tokens[:, m + 1] = SEP
        if self.kind == "parity-classify":
            labels = np.stack([self._answer(p) for p in payloads])
        else:
            answers = np.stack([self._answer(p) for p in payloads])
            tokens[:, m + 2:] = answers
            labels = answers
        return tokens, labels


@dataclass
class TaskData:
    task: SyntheticTask
    train: tuple[np.ndarray, np.ndarray]  # (tokens [n,T], labels [n,P])
    test: tuple[np.ndarray, np.ndarray]


def default_tasks(train_count: int = 2048, test_count: int = 512) -> dict[str, SyntheticTask]:
    """The standard 4-task suite; every sequence is 14 tokens long."""
    kw = dict(train_count=train_count, test_count=test_count)
    return {
        "copy": SyntheticTask("copy", "copy", 3, 11, 6, **kw),
        "reverse": SyntheticTask("reverse", "reverse", 11, 19, 6, **kw),
        "shift": SyntheticTask("shift", "shift-by-k", 19, 27, 6, shift=1, **kw),
        "parity": SyntheticTask("parity", "parity-classify", 27, 29, 12,
                                label_ids=(29, 30), **kw),
    }


def required_vocab(tasks: list[SyntheticTask]) -> int:
    hi = SYMBOL_BASE
    for t in tasks:
        hi = max(hi, t.sym_hi, max(t.label_ids) + 1 if t.label_ids != (0, 0) else 0)
    return hi


def make_batch(task: SyntheticTask, tokens: np.ndarray, labels: np.ndarray,
               rows: np.ndarray) -> Batch:
    """Assemble a Batch from sample rows of one task's (tokens, labels)."""
    toks = tokens[rows]
    n, seq_len = toks.shape
    offs = task.target_offsets
    positions = (np.arange(n)[:, None] * seq_len + offs[None, :]).ravel()
    return Batch(tokens=toks, positions=positions, labels=labels[rows].ravel())


def sample_batch(task: SyntheticTask, data: tuple[np.ndarray, np.ndarray],
                 rng: np.random.Generator, batch_size: int) -> Batch:
    tokens, labels = data
    rows = rng.integers(0, tokens.shape[0], size=batch_size)
    return make_batch(task, tokens, labels, rows)


def mixed_batch(tasks: list[SyntheticTask], datas: list[tuple[np.ndarray, np.ndarray]],
                rng: np.random.Generator, batch_size: int) -> Batch:
    """Evenly mixed batch across tasks; all tasks must share seq_len."""
    seq_lens = {t.seq_len for t in tasks}
    if len(seq_lens) != 1:
        raise ContractError(f"mixed batch needs one seq_len, got {sorted(seq_lens)}")
    per = batch_size // len(tasks)
    if per < 1:
        raise ContractError(f"batch_size {batch_size} below task count {len(tasks)}")
    tok_parts, pos_parts, lab_parts = [], [], []
    row_base = 0
    seq_len = seq_lens.pop()
    for task, data in zip(tasks, datas):
        b = sample_batch(task, data, rng, per)
        tok_parts.append(b.tokens)
        pos_parts.append(b.positions + row_base * seq_len)
        lab_parts.append(b.labels)
        row_base += per
    return Batch(
        tokens=np.concatenate(tok_parts, axis=0),
        positions=np.concatenate(pos_parts),
        labels=np.concatenate(lab_parts),
    )


def evaluate(model: ToyModel, task: SyntheticTask,
             data: tuple[np.ndarray, np.ndarray], mode: str = "optimized",
             batch_size: int = 256) -> tuple[float, list[RoutingStats]]:
    """Accuracy over a dataset plus merged per-layer routing stats."""
    tokens, labels = data
    n = tokens.shape[0]
    cand = task.candidate_ids
    correct = 0
    total = 0
    layer_stats: list[list[RoutingStats]] = []
    for start in range(0, n, batch_size):
        rows = np.arange(start, min(start + batch_size, n))
        batch = make_batch(task, tokens, labels, rows)
        logits, stats = model.logits_at(batch.tokens, batch.positions, mode,
                                        training=False)
        picked = cand[np.argmax(logits.data[:, cand], axis=1)]
        correct += int((picked == batch.labels).sum())
        total += batch.labels.size
        if stats:
            if not layer_stats:
                layer_stats = [[st] for st in stats]
            else:
                for acc, st in zip(layer_stats, stats):
                    acc.append(st)
    merged = [RoutingStats.merge(parts) for parts in layer_stats]
    return correct / total, merged
