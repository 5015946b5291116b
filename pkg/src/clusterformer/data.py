"""Datasets: synthetic long-range key-value retrieval and character LM windows.

Both are stored the same way: ``tokens`` (N, L) and ``labels`` (N, n) scoring
the last n positions. Retrieval labels sit at the query tokens themselves; an
LM window's single label is the character following it. Optional
``questions`` (N, q) are fed to the encoder as question tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    tokens: np.ndarray
    labels: np.ndarray
    kind: str = "retrieval"
    vocab_size: int = 0
    questions: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim == 1:
            self.labels = self.labels[:, None]
        if self.tokens.ndim != 2 or len(self.labels) != len(self.tokens):
            raise ValueError("tokens must be (N, L) with labels for every row")
        if self.labels.shape[1] > self.tokens.shape[1]:
            raise ValueError("more labels than positions")
        if self.kind not in ("retrieval", "lm"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.questions is not None:
            self.questions = np.asarray(self.questions, dtype=np.int64)
            if self.questions.ndim != 2 or len(self.questions) != len(self.tokens):
                raise ValueError("questions must be (N, q)")

    @property
    def question_len(self) -> int:
        return 0 if self.questions is None else self.questions.shape[1]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    @property
    def num_scored(self) -> int:
        """Scored positions per example (the trailing ones; all of them for LM)."""
        return self.seq_len if self.kind == "lm" else self.labels.shape[1]

    def targets(self, idx) -> np.ndarray:
        """Targets for the last ``num_scored`` positions of examples ``idx``."""
        toks, labels = self.tokens[idx], self.labels[idx]
        if self.kind == "lm":
            return np.concatenate([toks[:, 1:], labels[:, -1:]], axis=1)
        return labels

    def subset(self, idx) -> "Dataset":
        qs = None if self.questions is None else self.questions[idx]
        return Dataset(self.tokens[idx], self.labels[idx], self.kind, self.vocab_size, qs)


QUERY_POLICIES = ("end", "end+question")


@dataclass
class SyntheticTaskSpec:
    """Key-value retrieval: pairs (key, value) scattered in noise, query keys at the end.

    Token ids: noise [0, noise), keys [noise, noise+keys), values after that.
    The last ``num_queries`` tokens repeat keys of the sequence (distinct ones,
    in random order); each is labelled with its pair's value. Every value sits
    more than ``min_distance`` tokens before every query.

    ``query_policy`` "end" places the queries only at the end of the sequence;
    "end+question" also hands them to the encoder as question tokens, so every
    chunk carries a copy of what is being asked.
    """

    seq_len: int = 2048
    num_pairs: int = 16
    num_keys: int = 32
    num_values: int = 16
    num_noise: int = 16
    min_distance: int = 64
    num_queries: int = 1
    query_policy: str = "end"
    num_examples: int = 1024
    seed: int = 0

    @property
    def vocab_size(self) -> int:
        return self.num_noise + self.num_keys + self.num_values

    @property
    def chance(self) -> float:
        return 1.0 / self.num_values

    def validate(self) -> None:
        if self.num_pairs > self.num_keys:
            raise ValueError(f"{self.num_pairs} pairs need distinct keys but only {self.num_keys} exist")
        if min(self.num_pairs, self.num_values, self.num_noise, self.num_examples, self.num_queries) < 1:
            raise ValueError("pairs, values, noise, queries and examples must be positive")
        if self.query_policy not in QUERY_POLICIES:
            raise ValueError(f"query_policy {self.query_policy!r} not in {QUERY_POLICIES}")
        if self.num_queries > self.num_pairs:
            raise ValueError(f"{self.num_queries} queries but only {self.num_pairs} pairs")
        if self._slots() < self.num_pairs:
            raise ValueError(
                f"seq_len={self.seq_len} too short for {self.num_pairs} pairs "
                f"more than {self.min_distance} tokens before the query"
            )

    def _slots(self) -> int:
        # slot s holds (key, value) at (2s, 2s+1); value must precede the first query by > min_distance
        return max(0, (self.seq_len - self.num_queries - 1 - self.min_distance) // 2)


def gen_kv_retrieval(spec: SyntheticTaskSpec) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, L = spec.num_examples, spec.seq_len
    key0 = spec.num_noise
    val0 = spec.num_noise + spec.num_keys
    nq = spec.num_queries
    tokens = rng.integers(0, spec.num_noise, size=(n, L))
    labels = np.empty((n, nq), dtype=np.int64)
    slots = spec._slots()
    for i in range(n):
        where = rng.choice(slots, size=spec.num_pairs, replace=False) * 2
        keys = rng.choice(spec.num_keys, size=spec.num_pairs, replace=False) + key0
        values = rng.integers(0, spec.num_values, size=spec.num_pairs) + val0
        tokens[i, where] = keys
        tokens[i, where + 1] = values
        asked = rng.choice(spec.num_pairs, size=nq, replace=False)
        tokens[i, L - nq :] = keys[asked]
        labels[i] = values[asked]
    questions = tokens[:, L - nq :].copy() if spec.query_policy == "end+question" else None
    return Dataset(tokens, labels, "retrieval", spec.vocab_size, questions)


@dataclass
class CharLMSpec:
    corpus: str
    seq_len: int = 512
    num_examples: int = 256
    seed: int = 0


def char_vocab(text: str) -> list[str]:
    return sorted(set(text))


def gen_char_lm(spec: CharLMSpec, vocab: list[str] | None = None) -> tuple[Dataset, list[str]]:
    """Random windows of a text; the label is the character after each window.

    ``vocab`` fixes the id mapping (e.g. shared by train and held-out splits);
    by default it is the sorted character set of the corpus.
    """
    text = spec.corpus
    if len(text) <= spec.seq_len:
        raise ValueError(f"corpus of {len(text)} chars too short for windows of {spec.seq_len}")
    vocab = char_vocab(text) if vocab is None else vocab
    lookup = {c: i for i, c in enumerate(vocab)}
    missing = set(text) - lookup.keys()
    if missing:
        raise ValueError(f"characters {sorted(missing)[:5]} not in vocabulary")
    ids = np.array([lookup[c] for c in text], dtype=np.int64)
    rng = np.random.default_rng(spec.seed)
    starts = rng.integers(0, len(ids) - spec.seq_len, size=spec.num_examples)
    windows = np.stack([ids[s : s + spec.seq_len] for s in starts])
    labels = ids[starts + spec.seq_len]
    return Dataset(windows, labels, "lm", len(vocab)), vocab


def _ids(a: np.ndarray) -> str:
    return " ".join(map(str, a.tolist()))


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """One example per line: tokens, a tab, labels, and optionally a tab and question tokens.

    Ids within a field are space-separated.
    """
    with open(path, "w") as fh:
        for i, (toks, lab) in enumerate(zip(ds.tokens, ds.labels)):
            fields = [_ids(toks), _ids(lab)]
            if ds.questions is not None:
                fields.append(_ids(ds.questions[i]))
            fh.write("\t".join(fields) + "\n")


def load_dataset(path: str | Path, kind: str = "retrieval", vocab_size: int = 0) -> Dataset:
    rows, labels, questions = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                fields = line.split("\t")
                if len(fields) not in (2, 3):
                    raise ValueError(f"{len(fields)} fields")
                rows.append([int(t) for t in fields[0].split()])
                labels.append([int(t) for t in fields[1].split()])
                if len(fields) == 3:
                    questions.append([int(t) for t in fields[2].split()])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed example line") from exc
    if not rows:
        raise ValueError(f"{path}: no examples")
    if questions and len(questions) != len(rows):
        raise ValueError(f"{path}: question field present on some examples only")
    if any(len({len(r) for r in f}) > 1 for f in (rows, labels, questions)):
        raise ValueError(f"{path}: examples have differing lengths")
    vocab_size = vocab_size or int(max(max(max(r) for r in rows), max(max(r) for r in labels))) + 1
    return Dataset(np.array(rows), np.array(labels), kind, vocab_size, np.array(questions) if questions else None)
