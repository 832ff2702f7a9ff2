"""Deterministic synthetic language corpus for end-to-end runs.

Generates a small CV-syllable language with a Zipf-shaped vocabulary, renders
clean lines, and corrupts them through the noise channel. The packaged data
files under ``ocrpost/data`` are the output of ``write_corpus`` with the
default config; regeneration is byte-stable given the seed.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .corpus import Alphabet, GoldDataset, UnannotatedSet, load_parallel, load_sources, write_lines
from .noise import NoiseChannel, NoiseConfig

CONSONANTS = "bdgklmnprst"
VOWELS = "aeiou"
CODAS = "nsr"

# substituted letters become an unreadable-glyph marker, the way smudged or
# broken type comes out of an OCR engine; recovering the letter requires
# context, which is where dictionary knowledge pays off
DAMAGE = "x"
CONFUSIONS: dict[str, dict[str, float]] = {
    c: {DAMAGE: 1.0} for c in CONSONANTS + VOWELS
}


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 20240
    vocab_size: int = 120
    gold_lines: int = 600
    unannotated_lines: int = 3200
    min_words: int = 3
    max_words: int = 8
    substitution_rate: float = 0.065
    deletion_rate: float = 0.01
    insertion_rate: float = 0.01

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ValueError("vocabulary needs at least two words")
        if self.gold_lines < 1 or self.unannotated_lines < 0:
            raise ValueError("line counts out of range")
        if not 1 <= self.min_words <= self.max_words:
            raise ValueError("word-count bounds out of order")


@dataclass(frozen=True)
class SynthCorpus:
    alphabet: Alphabet
    gold: GoldDataset
    unannotated: UnannotatedSet
    gold_sources: list[str]
    gold_targets: list[str]
    unannotated_sources: list[str]


def _make_word(rng: random.Random) -> str:
    syllables = rng.choices((1, 2, 3), weights=(0.15, 0.55, 0.30))[0]
    parts = [rng.choice(CONSONANTS) + rng.choice(VOWELS) for _ in range(syllables)]
    if rng.random() < 0.3:
        parts.append(rng.choice(CODAS))
    return "".join(parts)


def make_vocabulary(rng: random.Random, size: int) -> list[str]:
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < size:
        w = _make_word(rng)
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def make_lines(rng: random.Random, vocab: list[str], count: int, lo: int, hi: int) -> list[str]:
    # mild frequency skew: rank weighting strong enough to give the unigram
    # model signal, flat enough that no word dominates the corpus
    weights = [1.0 / (rank + 1) ** 0.7 for rank in range(len(vocab))]
    return [
        " ".join(rng.choices(vocab, weights=weights, k=rng.randint(lo, hi)))
        for _ in range(count)
    ]


def generate_corpus(cfg: SynthConfig = SynthConfig()) -> SynthCorpus:
    rng = random.Random(cfg.seed)
    vocab = make_vocabulary(rng, cfg.vocab_size)
    gold_clean = make_lines(rng, vocab, cfg.gold_lines, cfg.min_words, cfg.max_words)
    unannot_clean = make_lines(
        rng, vocab, cfg.unannotated_lines, cfg.min_words, cfg.max_words
    )
    # the damage marker only ever appears on the corrupted side, so it must
    # be forced into the alphabet before the channel runs
    alphabet = Alphabet.from_texts(list(gold_clean or unannot_clean) + [DAMAGE])

    noise = NoiseConfig(
        substitution_rate=cfg.substitution_rate,
        deletion_rate=cfg.deletion_rate,
        insertion_rate=cfg.insertion_rate,
        confusion_pairs=CONFUSIONS,
        rng_seed=cfg.seed + 1,
    )
    channel = NoiseChannel(noise, alphabet)
    gold_noisy = [channel.corrupt_text(t) for t in gold_clean]
    unannot_noisy = [channel.corrupt_text(t) for t in unannot_clean]

    gold, _ = _pairs_from_texts(gold_noisy, gold_clean, alphabet)
    unannotated = _sources_from_texts(unannot_noisy, alphabet)
    return SynthCorpus(
        alphabet=alphabet,
        gold=gold,
        unannotated=unannotated,
        gold_sources=gold_noisy,
        gold_targets=gold_clean,
        unannotated_sources=unannot_noisy,
    )


def _pairs_from_texts(sources, targets, alphabet):
    from .corpus import SourceSequence, TargetSequence

    pairs = tuple(
        (
            SourceSequence.from_text(alphabet, s),
            TargetSequence.from_text(alphabet, t),
        )
        for s, t in zip(sources, targets)
    )
    return GoldDataset(pairs=pairs), alphabet


def _sources_from_texts(sources, alphabet) -> UnannotatedSet:
    from .corpus import SourceSequence

    return UnannotatedSet(
        sources=tuple(SourceSequence.from_text(alphabet, s) for s in sources)
    )


def write_corpus(corpus: SynthCorpus, out_dir: str | Path, cfg: SynthConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_lines(out / "gold_sources.txt", corpus.gold_sources)
    write_lines(out / "gold_targets.txt", corpus.gold_targets)
    write_lines(out / "unannotated.txt", corpus.unannotated_sources)
    manifest = [f"{name}\t{value}" for name, value in sorted(vars(cfg).items())]
    write_lines(out / "manifest.txt", manifest)


def load_corpus(data_dir: str | Path) -> tuple[GoldDataset, UnannotatedSet, Alphabet]:
    data = Path(data_dir)
    gold, alphabet = load_parallel(
        data / "gold_sources.txt", data / "gold_targets.txt"
    )
    unannotated = load_sources(data / "unannotated.txt", alphabet)
    return gold, unannotated, alphabet


def packaged_corpus() -> tuple[GoldDataset, UnannotatedSet, Alphabet]:
    """The corpus shipped with the package (generated with the default config)."""
    data = resources.files("ocrpost") / "data"
    with resources.as_file(data) as path:
        return load_corpus(path)
