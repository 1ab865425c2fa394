"""Synthetic cipher corpora, TSV ingestion, vocabularies and batching.

In the cipher task every language is a permutation of one latent vocabulary,
so translating ``i -> j`` means applying ``perm_j`` after ``inverse(perm_i)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
TAG_OFFSET = 4
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")


class DataError(ValueError):
    """Raised for malformed corpora or batches."""


class ParseError(DataError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Example:
    src_lang: str
    tgt_lang: str
    src: tuple[str, ...]
    tgt: tuple[str, ...]

    @property
    def pair(self) -> tuple[str, str]:
        return self.src_lang, self.tgt_lang


# ---------------------------------------------------------------------------
# cipher task


def language_name(i: int) -> str:
    return f"l{i}"


def marker_token(i: int) -> str:
    return f"<{language_name(i)}>"


def word_token(k: int) -> str:
    return f"w{k}"


def english_centric_pairs(n_languages: int) -> list[tuple[int, int]]:
    pairs = []
    for j in range(1, n_languages):
        pairs += [(0, j), (j, 0)]
    return pairs


@dataclass
class CipherTask:
    """Languages as permutations of a shared latent vocabulary.

    ``pair_sizes`` gives the number of training sentences per entry of
    ``pairs``; a single int applies to every pair.
    """

    permutations: list[np.ndarray]
    min_len: int = 4
    max_len: int = 10
    pairs: list[tuple[int, int]] | None = None
    pair_sizes: int | Sequence[int] = 1000
    valid_per_pair: int = 100

    def __post_init__(self):
        self.permutations = [np.asarray(p, dtype=np.int64) for p in self.permutations]
        v = len(self.permutations[0]) if self.permutations else 0
        if v < 2:
            raise ValueError(f"latent vocabulary must have at least 2 words, got {v}")
        for p in self.permutations:
            if len(p) != v or not np.array_equal(np.sort(p), np.arange(v)):
                raise ValueError("every language needs a permutation of the latent vocabulary")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"bad length range [{self.min_len}, {self.max_len}]")
        if self.pairs is None:
            self.pairs = english_centric_pairs(self.n_languages) or [(0, 0)]
        if isinstance(self.pair_sizes, int):
            self.pair_sizes = [self.pair_sizes] * len(self.pairs)
        if len(self.pair_sizes) != len(self.pairs):
            raise ValueError("pair_sizes must have one entry per pair")

    @property
    def n_languages(self) -> int:
        return len(self.permutations)

    @property
    def latent_vocab(self) -> int:
        return len(self.permutations[0])

    @property
    def languages(self) -> list[str]:
        return [language_name(i) for i in range(self.n_languages)]

    def inverse(self, lang: int) -> np.ndarray:
        return np.argsort(self.permutations[lang])

    def translate(self, src_words: Sequence[int], src_lang: int, tgt_lang: int) -> np.ndarray:
        """Table-lookup oracle: compose ``perm_tgt`` with ``inverse(perm_src)``."""
        z = self.inverse(src_lang)[np.asarray(src_words, dtype=np.int64)]
        return self.permutations[tgt_lang][z]

    @classmethod
    def random(
        cls,
        n_languages: int = 4,
        latent_vocab: int = 48,
        seed: int = 0,
        **kwargs,
    ) -> "CipherTask":
        """Task with pairwise-distinct random permutations drawn from ``seed``."""
        if latent_vocab < 2:
            raise ValueError(f"latent vocabulary must have at least 2 words, got {latent_vocab}")
        rng = np.random.default_rng(seed)
        perms: list[np.ndarray] = []
        while len(perms) < n_languages:
            p = rng.permutation(latent_vocab)
            if not any(np.array_equal(p, q) for q in perms):
                perms.append(p)
        return cls(perms, **kwargs)


def default_task(seed: int = 0) -> CipherTask:
    """4 languages, 48 latent words, English-centric pairs with skewed sizes."""
    sizes = [2000, 2000, 600, 600, 150, 150]
    return CipherTask.random(4, 48, seed=seed, pair_sizes=sizes, valid_per_pair=64)


def _cipher_example(task: CipherTask, z: np.ndarray, i: int, j: int) -> Example:
    src = (marker_token(i),) + tuple(word_token(k) for k in task.permutations[i][z])
    tgt = tuple(word_token(k) for k in task.permutations[j][z])
    return Example(language_name(i), language_name(j), src, tgt)


def gen_cipher_corpus(task: CipherTask, seed: int = 0) -> tuple[list[Example], list[Example]]:
    """Sample latent sentences and render them for every pair: ``(train, valid)``."""
    rng = np.random.default_rng(seed)
    train: list[Example] = []
    valid: list[Example] = []
    for (i, j), n in zip(task.pairs, task.pair_sizes):
        for split, count in ((train, n), (valid, task.valid_per_pair)):
            for _ in range(count):
                length = int(rng.integers(task.min_len, task.max_len + 1))
                z = rng.integers(0, task.latent_vocab, size=length)
                split.append(_cipher_example(task, z, i, j))
    return train, valid


# ---------------------------------------------------------------------------
# TSV


def load_tsv(path) -> list[Example]:
    """Read ``src_lang<TAB>tgt_lang<TAB>src text<TAB>tgt text`` rows."""
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise ParseError(path, lineno, f"expected 4 tab-separated fields, found {len(fields)}")
            sl, tl, s, t = fields
            if not sl or not tl:
                raise ParseError(path, lineno, "empty language field")
            out.append(Example(sl, tl, tuple(s.split()), tuple(t.split())))
    return out


def write_tsv(examples: Sequence[Example], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n", quoting=csv.QUOTE_NONE, escapechar=None)
        for ex in examples:
            w.writerow([ex.src_lang, ex.tgt_lang, " ".join(ex.src), " ".join(ex.tgt)])


# ---------------------------------------------------------------------------
# vocabulary


@dataclass
class Vocab:
    """Token inventory: specials, one target tag per language, then words."""

    languages: list[str]
    words: list[str]
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {t: i for i, t in enumerate(self.tokens)}

    @property
    def tokens(self) -> list[str]:
        return [*SPECIALS, *(f"<2{l}>" for l in self.languages), *self.words]

    def __len__(self) -> int:
        return len(SPECIALS) + len(self.languages) + len(self.words)

    def lang_id(self, name: str) -> int:
        try:
            return self.languages.index(name)
        except ValueError:
            raise DataError(f"unknown language {name!r}") from None

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._index.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        toks = self.tokens
        return [toks[i] for i in ids]

    @classmethod
    def build(cls, examples: Sequence[Example], languages: Sequence[str] | None = None) -> "Vocab":
        if languages is None:
            seen: dict[str, None] = {}
            for ex in examples:
                seen.setdefault(ex.src_lang)
                seen.setdefault(ex.tgt_lang)
            languages = list(seen)
        words = sorted({t for ex in examples for t in (*ex.src, *ex.tgt)})
        return cls(list(languages), words)

    def to_dict(self) -> dict:
        return {"languages": self.languages, "words": self.words}


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """Right-padded id matrices for sentences of one direction.

    ``tgt`` rows end with EOS before padding.
    """

    src: np.ndarray
    tgt: np.ndarray
    src_lang: int
    tgt_lang: int
    pad_id: int = PAD

    @property
    def size(self) -> int:
        return self.src.shape[0]

    @property
    def pair(self) -> tuple[int, int]:
        return self.src_lang, self.tgt_lang

    def permuted(self, order: Sequence[int]) -> "Batch":
        order = np.asarray(order)
        return Batch(self.src[order], self.tgt[order], self.src_lang, self.tgt_lang, self.pad_id)


def _pad(rows: list[list[int]], pad: int) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), pad, dtype=np.int64)
    for k, r in enumerate(rows):
        out[k, : len(r)] = r
    return out


def make_batch(examples: Sequence[Example], vocab: Vocab) -> Batch:
    """Encode and pad one homogeneous batch; mixed directions raise DataError."""
    if not examples:
        raise DataError("empty batch")
    pairs = {ex.pair for ex in examples}
    if len(pairs) != 1:
        raise DataError(f"batch is not homogeneous: directions {sorted(pairs)}")
    (sl, tl), = pairs
    src = _pad([vocab.encode(ex.src) for ex in examples], PAD)
    tgt = _pad([vocab.encode(ex.tgt) + [EOS] for ex in examples], PAD)
    return Batch(src, tgt, vocab.lang_id(sl), vocab.lang_id(tl), PAD)


def temperature_sample(sizes: Sequence[float], temperature: float) -> np.ndarray:
    """Probability of each pair proportional to ``size ** (1 / T)``."""
    if temperature < 1:
        raise ValueError(f"temperature must be >= 1, got {temperature}")
    s = np.asarray(sizes, dtype=np.float64)
    if s.size == 0 or (s <= 0).any():
        raise ValueError("pair sizes must be positive")
    w = s ** (1.0 / temperature)
    return w / w.sum()


def group_by_pair(examples: Sequence[Example]) -> dict[tuple[str, str], list[Example]]:
    groups: dict[tuple[str, str], list[Example]] = {}
    for ex in examples:
        groups.setdefault(ex.pair, []).append(ex)
    return groups


class BatchStream:
    """Endless stream of homogeneous batches.

    Each batch picks a direction from the temperature distribution over pair
    sizes, then takes the next ``batch_size`` sentences of that direction's
    shuffled pool (reshuffled whenever it runs out).
    """

    def __init__(
        self,
        examples: Sequence[Example],
        vocab: Vocab,
        batch_size: int,
        temperature: float = 1.0,
        seed: int = 0,
    ):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.vocab = vocab
        self.batch_size = batch_size
        self.groups = group_by_pair(examples)
        self.pairs = list(self.groups)
        self.probs = temperature_sample([len(self.groups[p]) for p in self.pairs], temperature)
        self.rng = np.random.default_rng(seed)
        self._order = {p: self.rng.permutation(len(self.groups[p])) for p in self.pairs}
        self._cursor = {p: 0 for p in self.pairs}

    def _take(self, pair) -> list[Example]:
        pool = self.groups[pair]
        picked = []
        while len(picked) < min(self.batch_size, len(pool)):
            if self._cursor[pair] == len(pool):
                self._order[pair] = self.rng.permutation(len(pool))
                self._cursor[pair] = 0
            picked.append(pool[self._order[pair][self._cursor[pair]]])
            self._cursor[pair] += 1
        return picked

    def next_pair(self) -> tuple[str, str]:
        return self.pairs[int(self.rng.choice(len(self.pairs), p=self.probs))]

    def __iter__(self) -> Iterator[Batch]:
        return self

    def __next__(self) -> Batch:
        return make_batch(self._take(self.next_pair()), self.vocab)


def make_batches(
    examples: Sequence[Example],
    vocab: Vocab,
    batch_size: int,
    temperature: float = 1.0,
    seed: int = 0,
) -> BatchStream:
    return BatchStream(examples, vocab, batch_size, temperature, seed)


def eval_batches(examples: Sequence[Example], vocab: Vocab, batch_size: int) -> list[Batch]:
    """Deterministic, in-order batches covering every example once."""
    out = []
    for pair, exs in group_by_pair(examples).items():
        for k in range(0, len(exs), batch_size):
            out.append(make_batch(exs[k : k + batch_size], vocab))
    return out
