"""Count-based language models: word unigram LM and character n-gram LM.

The word LM assigns absolute-discounted unigram probabilities with
count-conditional Chen-Goodman discounts; the discounted mass becomes a
single unknown-word probability. The character LM is a backoff model with the
same discount scheme at every order, trained on within-word character windows
(word-start padding, word-end as the terminating event) and backing off
through all lower orders down to a uniform floor over the alphabet.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Alphabet

WORD_START = "<w>"
WORD_END = "</w>"

PROB_FLOOR = 1e-12  # applied before taking logs, never inside the model

FIXED_FALLBACK_DISCOUNT = 0.5


def chen_goodman_discounts(counts: Iterable[int]) -> tuple[float, float, float, bool]:
    """Count-conditional discounts (D1, D2, D3+) from count-of-count statistics.

    Y = n1/(n1+2*n2); D1 = 1 - 2*Y*n2/n1; D2 = 2 - 3*Y*n3/n2;
    D3+ = 3 - 4*Y*n4/n3. Degenerate statistics (any of n1..n4 zero, or
    discounts that would break positivity or count-monotonicity of the
    discounted probabilities) fall back to a fixed 0.5 discount; the returned
    flag records the fallback.
    """
    of = Counter()
    for c in counts:
        if 1 <= c <= 4:
            of[c] += 1
    n1, n2, n3, n4 = of[1], of[2], of[3], of[4]
    if min(n1, n2, n3, n4) == 0:
        d = FIXED_FALLBACK_DISCOUNT
        return d, d, d, True
    y = n1 / (n1 + 2.0 * n2)
    d1 = 1.0 - 2.0 * y * n2 / n1
    d2 = 2.0 - 3.0 * y * n3 / n2
    d3 = 3.0 - 4.0 * y * n4 / n3
    ok = 0.0 < d1 < 1.0 and 0.0 < d2 < min(2.0, 1.0 + d1) and 0.0 < d3 < min(3.0, 1.0 + d2)
    if not ok:
        d = FIXED_FALLBACK_DISCOUNT
        return d, d, d, True
    return d1, d2, d3, False


@dataclass(frozen=True)
class WordUnigramLM:
    """Smoothed unigram word probabilities plus a single <unk> event.

    Either count-backed (trained) or probability-backed (direct constructor
    used for tests and hand-built lexica). Invariant: sum over the vocabulary
    plus p_unk equals 1.
    """

    probs: dict[str, float]
    p_unk: float
    counts: dict[str, int] | None = None
    discounts: tuple[float, float, float] | None = None
    used_fallback_discount: bool = False

    @property
    def vocab(self) -> set[str]:
        return set(self.probs)

    def word_prob(self, w: str) -> float:
        return self.probs.get(w, self.p_unk)

    @classmethod
    def from_probabilities(
        cls, probs: dict[str, float], p_unk: float
    ) -> "WordUnigramLM":
        total = sum(probs.values()) + p_unk
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"probabilities + p_unk must sum to 1, got {total}")
        if p_unk <= 0 or any(p <= 0 for p in probs.values()):
            raise ValueError("all probabilities must be positive")
        return cls(probs=dict(probs), p_unk=p_unk)

    @classmethod
    def train(cls, texts: Iterable[str], alphabet: Alphabet) -> "WordUnigramLM":
        counts: Counter[str] = Counter()
        for text in texts:
            counts.update(alphabet.words(text))
        if not counts:
            raise ValueError("no word tokens in the training texts")
        d1, d2, d3, fallback = chen_goodman_discounts(counts.values())
        dm = (0.0, d1, d2, d3)
        total = sum(counts.values())
        probs = {w: (c - dm[min(c, 3)]) / total for w, c in counts.items()}
        p_unk = sum(dm[min(c, 3)] for c in counts.values()) / total
        return cls(
            probs=probs,
            p_unk=p_unk,
            counts=dict(counts),
            discounts=(d1, d2, d3),
            used_fallback_discount=fallback,
        )

    def dump(self, path: str | Path) -> None:
        lines = []
        if self.counts is not None:
            d1, d2, d3 = self.discounts
            flag = int(self.used_fallback_discount)
            lines.append(f"wordlm\tcounts\t{d1!r}\t{d2!r}\t{d3!r}\t{flag}")
            lines.extend(f"{w}\t{c}" for w, c in sorted(self.counts.items()))
        else:
            lines.append(f"wordlm\tprobs\t{self.p_unk!r}")
            lines.extend(f"{w}\t{p!r}" for w, p in sorted(self.probs.items()))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "WordUnigramLM":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        header = lines[0].split("\t")
        if header[0] != "wordlm":
            raise ValueError("not a word LM dump")
        if header[1] == "counts":
            d1, d2, d3 = float(header[2]), float(header[3]), float(header[4])
            fallback = bool(int(header[5]))
            counts = {}
            for line in lines[1:]:
                w, c = line.split("\t")
                counts[w] = int(c)
            dm = (0.0, d1, d2, d3)
            total = sum(counts.values())
            probs = {w: (c - dm[min(c, 3)]) / total for w, c in counts.items()}
            p_unk = sum(dm[min(c, 3)] for c in counts.values()) / total
            return cls(
                probs=probs,
                p_unk=p_unk,
                counts=counts,
                discounts=(d1, d2, d3),
                used_fallback_discount=fallback,
            )
        probs = {}
        for line in lines[1:]:
            w, p = line.split("\t")
            probs[w] = float(p)
        return cls(probs=probs, p_unk=float(header[2]))


def train_word_unigram(texts: Iterable[str], alphabet: Alphabet) -> WordUnigramLM:
    return WordUnigramLM.train(texts, alphabet)


def word_prob(lm: WordUnigramLM, w: str) -> float:
    return lm.word_prob(w)


class CharNgramLM:
    """Backoff character n-gram model with Chen-Goodman discounts.

    Events predict a support symbol (every alphabet symbol plus the word-end
    marker); contexts are the preceding symbols, left-padded with the
    word-start marker. Lower-order statistics use continuation (type) counts
    except for padded-start n-grams, which keep their occurrence counts since
    they cannot be extended to the left. Probabilities are exactly normalized
    over the support for every context and never zero.
    """

    def __init__(
        self,
        order: int,
        alphabet: Alphabet,
        counts: list[dict[tuple[str, ...], dict[str, int]]],
        discounts: list[tuple[float, float, float]],
        used_fallback: list[bool],
        stream_counts: Counter,
        mode: str,
    ):
        self.order = order
        self.alphabet = alphabet
        self.support: tuple[str, ...] = alphabet.symbols + (WORD_END,)
        self.support_index = {s: i for i, s in enumerate(self.support)}
        self._counts = counts  # index k-1 holds order-k tables: ctx -> {sym: count}
        self._dens = [
            {ctx: sum(table.values()) for ctx, table in order_counts.items()}
            for order_counts in counts
        ]
        self.discounts = discounts
        self.used_fallback_discount = used_fallback
        self.stream_counts = stream_counts  # training streams, for inspection
        self.mode = mode  # "words" or "lines"
        self._dist_cache: dict[tuple[str, ...], np.ndarray] = {}

    # -- training ---------------------------------------------------------

    @classmethod
    def train_streams(
        cls,
        streams: Sequence[Sequence[str]],
        order: int,
        alphabet: Alphabet,
        mode: str,
    ) -> "CharNgramLM":
        if order < 2:
            raise ValueError("order must be at least 2")
        if not streams:
            raise ValueError("empty training vocabulary")
        top: dict[tuple[str, ...], dict[str, int]] = defaultdict(dict)
        for stream in streams:
            padded = [WORD_START] * (order - 1) + list(stream) + [WORD_END]
            for t in range(order - 1, len(padded)):
                ctx = tuple(padded[t - order + 1 : t])
                sym = padded[t]
                table = top[ctx]
                table[sym] = table.get(sym, 0) + 1
        counts: list[dict[tuple[str, ...], dict[str, int]]] = [None] * order
        counts[order - 1] = dict(top)
        # lower orders: continuation counts; padded-start n-grams keep raw counts
        for k in range(order - 1, 0, -1):
            lower: dict[tuple[str, ...], dict[str, int]] = defaultdict(dict)
            for ctx, table in counts[k].items():
                for sym, c in table.items():
                    gram = ctx + (sym,)
                    g = gram[1:]
                    gctx, gsym = g[:-1], g[-1]
                    tab = lower[gctx]
                    if g and g[0] == WORD_START:
                        if gram[0] == WORD_START:
                            tab[gsym] = tab.get(gsym, 0) + c
                    else:
                        tab[gsym] = tab.get(gsym, 0) + 1
            counts[k - 1] = dict(lower)
        discounts = []
        fallback = []
        for order_counts in counts:
            vals = [c for table in order_counts.values() for c in table.values()]
            d1, d2, d3, fb = chen_goodman_discounts(vals)
            discounts.append((d1, d2, d3))
            fallback.append(fb)
        stream_counts = Counter("".join(s) for s in streams)
        return cls(order, alphabet, counts, discounts, fallback, stream_counts, mode)

    @classmethod
    def train_words(
        cls, texts: Iterable[str], order: int, alphabet: Alphabet
    ) -> "CharNgramLM":
        """Train on unique word forms, each contributing exactly once."""
        forms: set[str] = set()
        for text in texts:
            forms.update(alphabet.words(text))
        streams = [list(w) for w in sorted(forms)]
        return cls.train_streams(streams, order, alphabet, mode="words")

    @classmethod
    def train_lines(
        cls, texts: Iterable[str], order: int, alphabet: Alphabet
    ) -> "CharNgramLM":
        """Train on whole lines (contexts cross word boundaries)."""
        streams = [
            list(text.replace(alphabet.eos_char, "")) for text in texts if text
        ]
        return cls.train_streams(streams, order, alphabet, mode="lines")

    # -- querying ---------------------------------------------------------

    def _pad(self, context: Sequence[str]) -> tuple[str, ...]:
        ctx = tuple(context)[-(self.order - 1) :]
        if len(ctx) < self.order - 1:
            ctx = (WORD_START,) * (self.order - 1 - len(ctx)) + ctx
        return tuple(
            c if (c in self.support_index or c == WORD_START) else self.alphabet.unk_char
            for c in ctx
        )

    def distribution(self, context: Sequence[str]) -> np.ndarray:
        """Probability vector over the support given a within-word context."""
        ctx = self._pad(context)
        cached = self._dist_cache.get(ctx)
        if cached is not None:
            return cached
        vec = np.full(len(self.support), 1.0 / len(self.support))
        for k in range(1, self.order + 1):
            ctx_k = ctx[len(ctx) - (k - 1) :] if k > 1 else ()
            table = self._counts[k - 1].get(ctx_k)
            if not table:
                continue
            den = self._dens[k - 1][ctx_k]
            d1, d2, d3 = self.discounts[k - 1]
            dm = (0.0, d1, d2, d3)
            seen_idx = np.fromiter(
                (self.support_index[s] for s in table), dtype=np.int64, count=len(table)
            )
            cvals = np.fromiter(table.values(), dtype=np.float64, count=len(table))
            dvals = np.array([dm[min(int(c), 3)] for c in cvals])
            reserved = dvals.sum() / den
            missing = 1.0 - float(vec[seen_idx].sum())
            gamma = reserved / missing if missing > 1e-15 else 0.0
            new_vec = gamma * vec
            new_vec[seen_idx] = (cvals - dvals) / den
            vec = new_vec
        vec.setflags(write=False)
        if len(self._dist_cache) > 200_000:
            self._dist_cache.clear()
        self._dist_cache[ctx] = vec
        return vec

    def prob(self, symbol: str, context: Sequence[str]) -> float:
        """p(symbol | context); symbol may be the word-end marker."""
        idx = self.support_index.get(symbol)
        if idx is None:
            idx = self.support_index[self.alphabet.unk_char]
        return float(self.distribution(context)[idx])

    # -- serialization ----------------------------------------------------

    @staticmethod
    def _encode_sym(s: str) -> str:
        if s in (WORD_START, WORD_END):
            return s
        return f"U+{ord(s):04X}"

    @staticmethod
    def _decode_sym(s: str) -> str:
        if s in (WORD_START, WORD_END):
            return s
        if not s.startswith("U+"):
            raise ValueError(f"bad symbol encoding: {s}")
        return chr(int(s[2:], 16))

    def dump(self, path: str | Path) -> None:
        lines = [f"charngram\t{self.order}\t{self.mode}"]
        for k in range(1, self.order + 1):
            d1, d2, d3 = self.discounts[k - 1]
            flag = int(self.used_fallback_discount[k - 1])
            lines.append(f"order\t{k}\t{d1!r}\t{d2!r}\t{d3!r}\t{flag}")
        for k in range(1, self.order + 1):
            for ctx in sorted(self._counts[k - 1]):
                table = self._counts[k - 1][ctx]
                for sym in sorted(table):
                    gram = ",".join(self._encode_sym(s) for s in ctx + (sym,))
                    lines.append(f"{k}\t{gram}\t{table[sym]}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, alphabet: Alphabet) -> "CharNgramLM":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        header = lines[0].split("\t")
        if header[0] != "charngram":
            raise ValueError("not a char n-gram LM dump")
        order = int(header[1])
        mode = header[2]
        discounts: list[tuple[float, float, float]] = [None] * order
        fallback: list[bool] = [False] * order
        counts: list[dict] = [defaultdict(dict) for _ in range(order)]
        for line in lines[1:]:
            parts = line.split("\t")
            if parts[0] == "order":
                k = int(parts[1])
                discounts[k - 1] = (float(parts[2]), float(parts[3]), float(parts[4]))
                fallback[k - 1] = bool(int(parts[5]))
            else:
                k = int(parts[0])
                gram = tuple(cls._decode_sym(s) for s in parts[1].split(","))
                counts[k - 1][gram[:-1]][gram[-1]] = int(parts[2])
        counts = [dict(c) for c in counts]
        return cls(order, alphabet, counts, discounts, fallback, Counter(), mode)


def train_char_ngram(
    texts: Iterable[str], n: int, alphabet: Alphabet
) -> CharNgramLM:
    return CharNgramLM.train_words(texts, n, alphabet)


def char_prob(lm: CharNgramLM, symbol: str, context: Sequence[str]) -> float:
    return lm.prob(symbol, context)


class UniformCharLM:
    """Uniform stub over the support, for the uniform-unknown decoding variant."""

    def __init__(self, alphabet: Alphabet):
        self.order = 1
        self.alphabet = alphabet
        self.support: tuple[str, ...] = alphabet.symbols + (WORD_END,)
        self.support_index = {s: i for i, s in enumerate(self.support)}
        self._vec = np.full(len(self.support), 1.0 / len(self.support))
        self._vec.setflags(write=False)

    def distribution(self, context: Sequence[str]) -> np.ndarray:
        return self._vec

    def prob(self, symbol: str, context: Sequence[str]) -> float:
        return 1.0 / len(self.support)


def neg_log(p: float) -> float:
    """Negative log with the artifact-wide probability floor."""
    return -math.log(max(p, PROB_FLOOR))
