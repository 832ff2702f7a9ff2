"""Lexicon automaton over the tropical semiring and per-step lexical scoring.

The word unigram LM compiles to a character trie whose boundary arcs carry
the word weights; weight pushing moves cost toward the start state and Moore
partition refinement merges equivalent states. Decoding-time scoring keeps a
known arm (matrix lookups into the automaton) and an unknown arm (entry
weight plus character LM) per word and recombines them at boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Alphabet
from .ngram import WordUnigramLM, neg_log

INF = float("inf")


@dataclass
class LexiconWfsa:
    """Deterministic automaton accepting vocab words followed by a boundary.

    The start state is the sole final state; boundary arcs return to it. The
    unknown-word entry cost is carried alongside rather than as a transition,
    keeping the automaton free of epsilon arcs.
    """

    alphabet: Alphabet
    num_states: int
    transitions: dict[tuple[int, str], tuple[int, float]]
    unk_entry_weight: float
    start: int = 0

    def __post_init__(self) -> None:
        self.score_matrix = precompute_scores(self)

    def arc(self, state: int, symbol: str) -> tuple[int, float] | None:
        return self.transitions.get((state, symbol))


def precompute_scores(wfsa: LexiconWfsa) -> np.ndarray:
    """Dense (state x alphabet) weight table; +inf marks absent arcs."""
    matrix = np.full((wfsa.num_states, len(wfsa.alphabet)), INF)
    for (src, sym), (_, weight) in wfsa.transitions.items():
        matrix[src, wfsa.alphabet.index(sym)] = weight
    matrix.setflags(write=False)
    return matrix


def build_wfsa(word_lm: WordUnigramLM, alphabet: Alphabet) -> LexiconWfsa:
    """Compile the word LM to trie form.

    Word weights -log p_word(w) sit on the boundary arcs out of each word's
    final state (total per accepted word is what matters; pushing relocates
    the mass later). Boundary loops at the start state accept empty words at
    zero cost so whitespace runs never score infinite.
    """
    if not word_lm.probs:
        raise ValueError("word LM has an empty vocabulary")
    boundary = sorted(alphabet.boundary_symbols)
    transitions: dict[tuple[int, str], tuple[int, float]] = {}
    num_states = 1
    for word in sorted(word_lm.probs):
        if not word:
            raise ValueError("empty word in vocabulary")
        for ch in word:
            if ch in alphabet.boundary_symbols:
                raise ValueError(f"word {word!r} contains a boundary symbol")
            if ch not in alphabet._index:
                raise ValueError(f"word {word!r} uses a symbol outside the alphabet")
        state = 0
        for ch in word:
            nxt = transitions.get((state, ch))
            if nxt is None:
                transitions[(state, ch)] = (num_states, 0.0)
                state = num_states
                num_states += 1
            else:
                state = nxt[0]
        weight = -math.log(word_lm.probs[word])
        for b in boundary:
            transitions[(state, b)] = (0, weight)
    for b in boundary:
        transitions[(0, b)] = (0, 0.0)
    return LexiconWfsa(
        alphabet=alphabet,
        num_states=num_states,
        transitions=transitions,
        unk_entry_weight=neg_log(word_lm.p_unk),
    )


def _push_weights(wfsa: LexiconWfsa) -> dict[tuple[int, str], tuple[int, float]]:
    """Reweight arcs by shortest-distance potentials toward the final state."""
    outgoing: dict[int, list[tuple[str, int, float]]] = {
        q: [] for q in range(wfsa.num_states)
    }
    for (src, sym), (dst, w) in wfsa.transitions.items():
        outgoing[src].append((sym, dst, w))
    potential = [INF] * wfsa.num_states
    potential[wfsa.start] = 0.0
    # trie states are created parent-first; non-boundary arcs only descend,
    # boundary arcs only target the start state, so one reverse sweep suffices
    for q in range(wfsa.num_states - 1, 0, -1):
        best = INF
        for _, dst, w in outgoing[q]:
            best = min(best, w + potential[dst])
        potential[q] = best
    pushed = {}
    for (src, sym), (dst, w) in wfsa.transitions.items():
        pushed[(src, sym)] = (dst, w + potential[dst] - potential[src])
    return pushed


def determinize_minimize(wfsa: LexiconWfsa) -> LexiconWfsa:
    """Weight-pushed minimal automaton with identical per-string weights.

    The trie is already deterministic, so this is pushing followed by Moore
    partition refinement with arc weights in the state signatures.
    """
    pushed = _push_weights(wfsa)
    outgoing: dict[int, dict[str, tuple[int, float]]] = {
        q: {} for q in range(wfsa.num_states)
    }
    for (src, sym), (dst, w) in pushed.items():
        outgoing[src][sym] = (dst, w)
    # start alone in its class: it is the unique final state
    classes = [0 if q == wfsa.start else 1 for q in range(wfsa.num_states)]
    while True:
        sigs = [
            (
                classes[q],
                tuple(
                    sorted(
                        (sym, round(w, 10), classes[dst])
                        for sym, (dst, w) in outgoing[q].items()
                    )
                ),
            )
            for q in range(wfsa.num_states)
        ]
        numbering: dict = {}
        new_classes = [numbering.setdefault(sig, len(numbering)) for sig in sigs]
        if new_classes == classes:
            break
        classes = new_classes
    # renumber classes: start first, then by smallest member state
    members: dict[int, int] = {}
    for q in range(wfsa.num_states):
        members.setdefault(classes[q], q)
    order = sorted(members, key=lambda c: (c != classes[wfsa.start], members[c]))
    renumber = {c: i for i, c in enumerate(order)}
    transitions = {}
    for cls, rep in members.items():
        for sym, (dst, w) in outgoing[rep].items():
            transitions[(renumber[cls], sym)] = (renumber[classes[dst]], w)
    return LexiconWfsa(
        alphabet=wfsa.alphabet,
        num_states=len(members),
        transitions=transitions,
        unk_entry_weight=wfsa.unk_entry_weight,
    )


def dump_wfsa(wfsa: LexiconWfsa, path: str | Path) -> None:
    lines = [
        f"wfsa\tstart\t{wfsa.start}\tstates\t{wfsa.num_states}"
        f"\tunk\t{wfsa.unk_entry_weight.hex()}"
    ]
    for (src, sym), (dst, w) in sorted(
        wfsa.transitions.items(), key=lambda kv: (kv[0][0], kv[0][1])
    ):
        lines.append(f"{src}\tU+{ord(sym):04X}\t{dst}\t{w.hex()}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_wfsa(path: str | Path, alphabet: Alphabet) -> LexiconWfsa:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    if header[0] != "wfsa":
        raise ValueError("not an automaton dump")
    transitions = {}
    for line in lines[1:]:
        src, sym, dst, w = line.split("\t")
        transitions[(int(src), chr(int(sym[2:], 16)))] = (int(dst), float.fromhex(w))
    return LexiconWfsa(
        alphabet=alphabet,
        num_states=int(header[4]),
        transitions=transitions,
        unk_entry_weight=float.fromhex(header[6]),
        start=int(header[2]),
    )


@dataclass(frozen=True)
class LexicalScorerState:
    """Per-hypothesis scoring state: one word in progress, prefix committed."""

    wfsa_state: int | None  # None once the known path is dead
    known_score: float
    unk_score: float
    prefix_score: float
    lex_score: float  # prefix + min(known, unk), the cumulative best
    unk_context: tuple[str, ...]
    word_started: bool


class LexicalScorer:
    """Fuses automaton lookups with the character LM, one symbol at a time."""

    def __init__(self, wfsa: LexiconWfsa, char_lm) -> None:
        self.wfsa = wfsa
        self.char_lm = char_lm
        self.alphabet = wfsa.alphabet
        self.matrix = wfsa.score_matrix
        n = len(self.alphabet)
        self.boundary_idx = np.array(
            sorted(self.alphabet.index(b) for b in self.alphabet.boundary_symbols)
        )
        self.nonboundary_mask = np.ones(n, dtype=bool)
        self.nonboundary_mask[self.boundary_idx] = False
        self._ctx_cache: dict[tuple[str, ...], tuple[np.ndarray, float]] = {}

    def _neglog_dist(self, ctx: tuple[str, ...]) -> tuple[np.ndarray, float]:
        """(-log p_char vector over the alphabet, -log p_char of word end)."""
        cached = self._ctx_cache.get(ctx)
        if cached is not None:
            return cached
        dist = self.char_lm.distribution(ctx)
        logs = -np.log(np.maximum(dist, 1e-12))
        pair = (logs[: len(self.alphabet)], float(logs[-1]))
        if len(self._ctx_cache) > 200_000:
            self._ctx_cache.clear()
        self._ctx_cache[ctx] = pair
        return pair

    def init(self) -> LexicalScorerState:
        return LexicalScorerState(
            wfsa_state=self.wfsa.start,
            known_score=0.0,
            unk_score=0.0,
            prefix_score=0.0,
            lex_score=0.0,
            unk_context=(),
            word_started=False,
        )

    def _trim(self, ctx: tuple[str, ...]) -> tuple[str, ...]:
        keep = self.char_lm.order - 1
        return ctx[-keep:] if keep > 0 else ()

    def candidate_scores(self, state: LexicalScorerState) -> np.ndarray:
        """Cumulative lexical score after consuming each possible symbol."""
        char_logs, end_log = self._neglog_dist(state.unk_context)
        entry = 0.0 if state.word_started else self.wfsa.unk_entry_weight
        unk_base = state.unk_score + entry
        if state.wfsa_state is None:
            known = np.full(len(self.alphabet), INF)
        else:
            known = state.known_score + self.matrix[state.wfsa_state]
        best = np.minimum(known, unk_base + char_logs)
        # boundary symbols close the word: unknown arm prices the end event
        end_total = unk_base + end_log
        bidx = self.boundary_idx
        best[bidx] = np.minimum(known[bidx], end_total)
        return state.prefix_score + best

    def candidate_increments(self, state: LexicalScorerState) -> np.ndarray:
        return self.candidate_scores(state) - state.lex_score

    def step(self, state: LexicalScorerState, symbol: str) -> tuple[LexicalScorerState, float]:
        """Consume one symbol; returns the new state and the score increment."""
        if symbol not in self.alphabet._index:
            raise ValueError(f"symbol {symbol!r} outside the alphabet")
        char_logs, end_log = self._neglog_dist(state.unk_context)
        entry = 0.0 if state.word_started else self.wfsa.unk_entry_weight
        arc = (
            None
            if state.wfsa_state is None
            else self.wfsa.arc(state.wfsa_state, symbol)
        )
        if symbol in self.alphabet.boundary_symbols:
            known_total = state.known_score + arc[1] if arc else INF
            unk_total = state.unk_score + entry + end_log
            prefix = state.prefix_score + min(known_total, unk_total)
            new = LexicalScorerState(
                wfsa_state=self.wfsa.start,
                known_score=0.0,
                unk_score=0.0,
                prefix_score=prefix,
                lex_score=prefix,
                unk_context=(),
                word_started=False,
            )
            return new, new.lex_score - state.lex_score
        known = state.known_score + arc[1] if arc else INF
        unk = state.unk_score + entry + float(char_logs[self.alphabet.index(symbol)])
        lex = state.prefix_score + min(known, unk)
        new = LexicalScorerState(
            wfsa_state=arc[0] if arc else None,
            known_score=known,
            unk_score=unk,
            prefix_score=state.prefix_score,
            lex_score=lex,
            unk_context=self._trim(state.unk_context + (symbol,)),
            word_started=True,
        )
        return new, new.lex_score - state.lex_score


class CharOnlyScorer:
    """Line-level character LM scoring without any lexicon.

    Matches the LexicalScorer stepping interface closely enough for the
    decoder: contexts run across word boundaries and the end-of-sequence
    symbol is priced as the LM's end event.
    """

    def __init__(self, char_lm, alphabet: Alphabet) -> None:
        self.char_lm = char_lm
        self.alphabet = alphabet
        self._ctx_cache: dict[tuple[str, ...], np.ndarray] = {}

    def _neglog(self, ctx: tuple[str, ...]) -> np.ndarray:
        cached = self._ctx_cache.get(ctx)
        if cached is None:
            dist = self.char_lm.distribution(ctx)
            cached = -np.log(np.maximum(dist, 1e-12))
            if len(self._ctx_cache) > 200_000:
                self._ctx_cache.clear()
            self._ctx_cache[ctx] = cached
        return cached

    def init(self) -> tuple[tuple[str, ...], float]:
        return ((), 0.0)

    def candidate_scores(self, state) -> np.ndarray:
        ctx, total = state
        logs = self._neglog(ctx)
        scores = total + logs[: len(self.alphabet)]
        scores[self.alphabet.eos_index] = total + logs[-1]
        return scores

    def candidate_increments(self, state) -> np.ndarray:
        return self.candidate_scores(state) - state[1]

    def step(self, state, symbol: str):
        scores = self.candidate_scores(state)
        ctx, total = state
        new_total = float(scores[self.alphabet.index(symbol)])
        if symbol == self.alphabet.eos_char:
            new_ctx = ctx
        else:
            keep = self.char_lm.order - 1
            new_ctx = (ctx + (symbol,))[-keep:] if keep > 0 else ()
        return (new_ctx, new_total), new_total - total


def score_sequence(wfsa: LexiconWfsa, char_lm, text: str) -> float:
    """Total lexical weight of a boundary-terminated character sequence."""
    if not text or text[-1] not in wfsa.alphabet.boundary_symbols:
        raise ValueError("sequence must end with a boundary symbol")
    scorer = LexicalScorer(wfsa, char_lm)
    state = scorer.init()
    for ch in text:
        if ch not in wfsa.alphabet._index:
            ch = wfsa.alphabet.unk_char
        state, _ = scorer.step(state, ch)
    return state.lex_score
