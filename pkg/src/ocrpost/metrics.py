"""Character and word error rates, plus the known/unknown accuracy split."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .corpus import Alphabet


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit-cost insert/delete/substitute."""
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(
                min(
                    prev[j] + 1,  # delete from a
                    cur[j - 1] + 1,  # insert into a
                    prev[j - 1] + (ca != cb),
                )
            )
        prev = cur
    return prev[-1]


def align_tokens(gold: Sequence, pred: Sequence) -> list[tuple[int, int | None]]:
    """Edit-distance alignment of gold positions onto pred positions.

    Returns one entry per gold token: (gold_index, pred_index or None when the
    gold token has no aligned prediction). Ties prefer substitution/match over
    an insert+delete pair, so alignments are deterministic.
    """
    n, m = len(gold), len(pred)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i][j] = min(
                d[i - 1][j] + 1,
                d[i][j - 1] + 1,
                d[i - 1][j - 1] + (gold[i - 1] != pred[j - 1]),
            )
    pairs: list[tuple[int, int | None]] = []
    i, j = n, m
    while i > 0 or j > 0:
        if (
            i > 0
            and j > 0
            and d[i][j] == d[i - 1][j - 1] + (gold[i - 1] != pred[j - 1])
        ):
            pairs.append((i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            pairs.append((i - 1, None))
            i -= 1
        else:
            j -= 1
    pairs.reverse()
    return pairs


@dataclass(frozen=True)
class ErrorReport:
    char_edits: int
    word_edits: int
    ref_chars: int
    ref_words: int

    @property
    def cer_percent(self) -> float:
        return 100.0 * self.char_edits / self.ref_chars if self.ref_chars else 0.0

    @property
    def wer_percent(self) -> float:
        return 100.0 * self.word_edits / self.ref_words if self.ref_words else 0.0

    def formatted(self) -> str:
        # reports carry 2-decimal percentages; internal values stay full precision
        return f"CER {self.cer_percent:.2f}\tWER {self.wer_percent:.2f}"


def _strip_eos(text: str, alphabet: Alphabet) -> str:
    return text.replace(alphabet.eos_char, "")


def score(pred: str, gold: str, alphabet: Alphabet) -> ErrorReport:
    """CER over characters and WER over word tokens of a single line.

    Both rates use the gold side as the reference length; trailing EOS
    markers never affect either rate.
    """
    pred = _strip_eos(pred, alphabet)
    gold = _strip_eos(gold, alphabet)
    if not gold:
        raise ValueError("gold transcription must be non-empty")
    gold_tokens = alphabet.tokens(gold)
    pred_tokens = alphabet.tokens(pred)
    return ErrorReport(
        char_edits=edit_distance(pred, gold),
        word_edits=edit_distance(pred_tokens, gold_tokens),
        ref_chars=len(gold),
        ref_words=len(gold_tokens),
    )


def score_corpus(
    preds: Iterable[str], golds: Iterable[str], alphabet: Alphabet
) -> ErrorReport:
    """Corpus-level rates: summed edits over summed reference lengths."""
    preds = list(preds)
    golds = list(golds)
    if len(preds) != len(golds):
        raise ValueError("prediction/gold line counts differ")
    char_edits = word_edits = ref_chars = ref_words = 0
    for p, g in zip(preds, golds):
        r = score(p, g, alphabet)
        char_edits += r.char_edits
        word_edits += r.word_edits
        ref_chars += r.ref_chars
        ref_words += r.ref_words
    return ErrorReport(char_edits, word_edits, ref_chars, ref_words)


def lexical_accuracy_split(
    preds: Sequence[str],
    golds: Sequence[str],
    lexicon_vocab: set[str],
    alphabet: Alphabet,
) -> tuple[float | None, float | None, float]:
    """Fraction of gold words predicted correctly, split by lexicon membership.

    Gold words are aligned to predicted words with the word-level
    edit-distance alignment; a gold word counts as correct when its aligned
    predicted word is identical. Returns (known accuracy, unknown accuracy,
    known coverage); an accuracy is None when its bucket is empty.
    """
    if len(preds) != len(golds):
        raise ValueError("prediction/gold line counts differ")
    known_total = known_correct = unk_total = unk_correct = 0
    for pred, gold in zip(preds, golds):
        gold_words = alphabet.words(_strip_eos(gold, alphabet))
        pred_words = alphabet.words(_strip_eos(pred, alphabet))
        for gi, pj in align_tokens(gold_words, pred_words):
            word = gold_words[gi]
            correct = pj is not None and pred_words[pj] == word
            if word in lexicon_vocab:
                known_total += 1
                known_correct += correct
            else:
                unk_total += 1
                unk_correct += correct
    total = known_total + unk_total
    known_acc = known_correct / known_total if known_total else None
    unk_acc = unk_correct / unk_total if unk_total else None
    coverage = known_total / total if total else 0.0
    return known_acc, unk_acc, coverage


def report_rows(
    rows: list[tuple[str, int, int, ErrorReport]],
) -> list[str]:
    """Tab-separated report lines (dataset, fold, seed, CER, WER) + mean row."""
    out = ["dataset\tfold\tseed\tcer\twer"]
    for name, fold, seed, rep in rows:
        out.append(f"{name}\t{fold}\t{seed}\t{rep.cer_percent:.2f}\t{rep.wer_percent:.2f}")
    if rows:
        mean_cer = sum(r.cer_percent for *_, r in rows) / len(rows)
        mean_wer = sum(r.wer_percent for *_, r in rows) / len(rows)
        out.append(f"mean\t-\t-\t{mean_cer:.2f}\t{mean_wer:.2f}")
    return out
