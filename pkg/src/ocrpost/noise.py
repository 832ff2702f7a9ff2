"""Synthetic OCR noise channel for desk-scale experiments.

Corrupts gold text through an independent per-character channel (substitute,
delete, or copy, with optional insertions between characters) so that the
training pipeline can be exercised without real scans.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .corpus import Alphabet, SourceSequence, TargetSequence


@dataclass(frozen=True)
class NoiseConfig:
    substitution_rate: float = 0.0
    insertion_rate: float = 0.0
    deletion_rate: float = 0.0
    # char -> {alternative: weight}; chars without an entry substitute uniformly
    confusion_pairs: dict[str, dict[str, float]] | None = None
    rng_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("substitution_rate", "insertion_rate", "deletion_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {rate}")
        if self.substitution_rate + self.deletion_rate > 1.0:
            raise ValueError("substitution_rate + deletion_rate must not exceed 1")


@dataclass
class NoiseEvents:
    """Aggregate event log of the channel, for empirical rate checks."""

    opportunities: int = 0  # characters passed through the channel
    substitutions: int = 0
    deletions: int = 0
    copies: int = 0
    insertions: int = 0
    gaps: int = 0  # insertion opportunities


class NoiseChannel:
    """Seeded character-level corruption channel over an alphabet."""

    def __init__(self, cfg: NoiseConfig, alphabet: Alphabet):
        self.cfg = cfg
        self.alphabet = alphabet
        self.events = NoiseEvents()
        self._rng = random.Random(cfg.rng_seed)
        # substitution/insertion candidates: plain word characters only
        reserved = {alphabet.unk_char, alphabet.eos_char}
        self._letters = [
            ch
            for ch in alphabet.symbols
            if ch not in alphabet.boundary_symbols and ch not in reserved
        ]
        self._confusion: dict[str, tuple[list[str], list[float]]] = {}
        for ch, alts in (cfg.confusion_pairs or {}).items():
            pairs = sorted(alts.items())
            self._confusion[ch] = ([a for a, _ in pairs], [w for _, w in pairs])

    def _substitute(self, ch: str) -> str:
        if ch in self._confusion:
            alts, weights = self._confusion[ch]
            return self._rng.choices(alts, weights=weights, k=1)[0]
        pool = [c for c in self._letters if c != ch]
        if not pool:
            return ch
        return self._rng.choice(pool)

    def _maybe_insert(self, out: list[str]) -> None:
        self.events.gaps += 1
        if self.cfg.insertion_rate > 0 and self._rng.random() < self.cfg.insertion_rate:
            out.append(self._rng.choice(self._letters) if self._letters else " ")
            self.events.insertions += 1

    def corrupt_text(self, text: str) -> str:
        cfg = self.cfg
        out: list[str] = []
        for ch in text:
            self._maybe_insert(out)
            self.events.opportunities += 1
            r = self._rng.random()
            if r < cfg.substitution_rate:
                out.append(self._substitute(ch))
                self.events.substitutions += 1
            elif r < cfg.substitution_rate + cfg.deletion_rate:
                self.events.deletions += 1
            else:
                out.append(ch)
                self.events.copies += 1
        self._maybe_insert(out)
        return "".join(out)

    def corrupt(self, gold: TargetSequence) -> SourceSequence:
        text = gold.text(self.alphabet)  # EOS stripped by decode
        return SourceSequence.from_text(self.alphabet, self.corrupt_text(text))


def synthesize_noise(
    gold: list[TargetSequence],
    cfg: NoiseConfig,
    alphabet: Alphabet,
) -> list[SourceSequence]:
    """Corrupt every gold line; deterministic given ``cfg.rng_seed``."""
    channel = NoiseChannel(cfg, alphabet)
    return [channel.corrupt(g) for g in gold]
