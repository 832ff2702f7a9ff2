"""Beam-search inference, optionally fused with the lexical scorer.

The per-step fused distribution is p = (1-lam) * p_lstm + lam * exp(-delta),
renormalized, where delta is the increment of the lexical score if the
candidate symbol is consumed (a config switch scores the literal cumulative
value instead). lam = 0 bypasses the fusion entirely so the reduction to the
plain neural decoder is exact. All public entry points funnel through one
batched engine: many lines are decoded together and every live hypothesis
across lines shares each forward step.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import Alphabet, SourceSequence, read_lines, write_lines
from .model import PostCorrectionModel


@dataclass(frozen=True)
class DecodeConfig:
    beam_width: int = 8
    max_len_slack: int = 10  # output length cap is 2*N + this
    lam: float = 0.0
    use_lexicon: bool = False
    lex_cumulative: bool = False
    length_normalize: bool = False
    chunk_lines: int = 32
    keep_step_probs: bool = False  # retain the winner's neural distributions

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if self.beam_width < 1:
            raise ValueError("beam width must be at least 1")


@dataclass(frozen=True)
class DecodeResult:
    tokens: tuple[int, ...]  # emitted indices, EOS included when completed
    score: float  # sum of per-step fused log probabilities
    truncated: bool
    # per-step decoder distributions, present when keep_step_probs was set;
    # feeds replay_score, which must not depend on re-running the network
    # (BLAS results drift at float32 ulp level across batch shapes)
    step_probs: tuple | None = None

    def text(self, alphabet: Alphabet) -> str:
        return alphabet.decode(self.tokens)


def joint_step_prob(
    p_lstm: np.ndarray,
    scorer,
    state,
    lam: float,
    cumulative: bool = False,
) -> np.ndarray:
    """Fused next-symbol distribution for one hypothesis."""
    if lam == 0.0 or scorer is None:
        return p_lstm
    delta = (
        scorer.candidate_scores(state)
        if cumulative
        else scorer.candidate_increments(state)
    )
    p_lex = np.exp(-delta)
    mixed = (1.0 - lam) * p_lstm + lam * p_lex
    return mixed / mixed.sum()


def step_log_probs(
    p_lstm: np.ndarray, scorer, state, cfg: DecodeConfig
) -> np.ndarray:
    """Log of the fused distribution; shared by the engine and score replay."""
    mixed = joint_step_prob(
        p_lstm, scorer if cfg.use_lexicon else None, state, cfg.lam, cfg.lex_cumulative
    )
    with np.errstate(divide="ignore"):
        return np.log(mixed)


@dataclass
class _Hyp:
    tokens: tuple[int, ...]
    score: float
    row: int  # index into the stacked step tensors of the previous step
    lex_state: object | None
    probs: tuple | None = None  # per-step p vectors when retention is on


def _decode_chunk(
    model: PostCorrectionModel,
    sources: Sequence[SourceSequence],
    cfg: DecodeConfig,
    scorer,
) -> list[DecodeResult]:
    alphabet = model.alphabet
    eos = alphabet.eos_index
    lines = len(sources)
    lengths = [len(s) for s in sources]
    caps = [2 * n + cfg.max_len_slack for n in lengths]
    src = torch.full((lines, max(lengths)), alphabet.unk_index, dtype=torch.long)
    for i, s in enumerate(sources):
        src[i, : len(s)] = torch.tensor(list(s.chars), dtype=torch.long)
    enc, enc_proj, mask, (s_h, s_c) = model.encode_projected(
        src, torch.tensor(lengths, dtype=torch.long)
    )
    coverage = torch.zeros_like(enc[..., 0])

    init_state = (
        scorer.init() if (scorer is not None and cfg.use_lexicon and cfg.lam > 0) else None
    )
    init_probs: tuple | None = () if cfg.keep_step_probs else None
    beams: list[list[_Hyp]] = [
        [_Hyp(tokens=(), score=0.0, row=i, lex_state=init_state, probs=init_probs)]
        for i in range(lines)
    ]
    pools: list[list[DecodeResult]] = [[] for _ in range(lines)]
    last_live = [list(beam) for beam in beams]  # best partials if nothing completes
    prev_h, prev_c, prev_cov = s_h, s_c, coverage

    step = 0
    while True:
        rows: list[tuple[int, _Hyp]] = [
            (line, hyp)
            for line in range(lines)
            if step < caps[line]
            for hyp in beams[line]
        ]
        if not rows:
            break
        line_idx = torch.tensor([line for line, _ in rows], dtype=torch.long)
        gather = torch.tensor([hyp.row for _, hyp in rows], dtype=torch.long)
        y_prev = None
        if step > 0:
            y_prev = torch.tensor(
                [hyp.tokens[-1] for _, hyp in rows], dtype=torch.long
            )
        with torch.no_grad():
            p, (new_h, new_c), _, new_cov = model.decode_step(
                (prev_h.index_select(0, gather), prev_c.index_select(0, gather)),
                y_prev,
                enc.index_select(0, line_idx),
                enc_proj.index_select(0, line_idx),
                mask.index_select(0, line_idx),
                prev_cov.index_select(0, gather),
                src.index_select(0, line_idx),
            )
        p64 = p.double().numpy()
        next_beams: list[list[_Hyp]] = [[] for _ in range(lines)]
        for line in range(lines):
            row_ids = [r for r, (ln, _) in enumerate(rows) if ln == line]
            if not row_ids:
                next_beams[line] = []
                continue
            cand_scores = []
            for r in row_ids:
                hyp = rows[r][1]
                logp = step_log_probs(p64[r], scorer, hyp.lex_state, cfg)
                cand_scores.append(hyp.score + logp)
            stacked = np.stack(cand_scores)  # [rows, vocab]
            flat = stacked.reshape(-1)
            order = np.argsort(-flat, kind="stable")
            kept: list[_Hyp] = []
            seen: set[tuple[int, ...]] = set()
            for j in order:
                if not np.isfinite(flat[j]):
                    break
                r_local, sym = divmod(int(j), stacked.shape[1])
                hyp = rows[row_ids[r_local]][1]
                tokens = hyp.tokens + (int(sym),)
                probs = None
                if cfg.keep_step_probs:
                    probs = hyp.probs + (p64[row_ids[r_local]].copy(),)
                if sym == eos:
                    pools[line].append(
                        DecodeResult(
                            tokens=tokens,
                            score=float(flat[j]),
                            truncated=False,
                            step_probs=probs,
                        )
                    )
                    continue
                if tokens in seen:
                    continue  # identical emissions recombine, better score kept
                seen.add(tokens)
                state = hyp.lex_state
                if state is not None:
                    state, _ = scorer.step(state, alphabet.char(int(sym)))
                kept.append(
                    _Hyp(
                        tokens=tokens,
                        score=float(flat[j]),
                        row=row_ids[r_local],
                        lex_state=state,
                        probs=probs,
                    )
                )
                if len(kept) >= cfg.beam_width:
                    break
            # once enough hypotheses completed, the line can stop expanding;
            # under length normalization short completions fill the pool while
            # the best normalized hypothesis may still be live, so run to cap
            if not cfg.length_normalize and len(pools[line]) >= cfg.beam_width:
                next_beams[line] = []
            else:
                next_beams[line] = kept
            if kept:
                last_live[line] = kept
        beams = next_beams
        # rows recorded by kept hypotheses index into this step's outputs
        prev_h, prev_c, prev_cov = new_h, new_c, new_cov
        step += 1

    results: list[DecodeResult] = []
    key = (
        (lambda r: r.score / len(r.tokens))
        if cfg.length_normalize
        else (lambda r: r.score)
    )
    for line in range(lines):
        if pools[line]:
            results.append(max(pools[line], key=key))
        else:
            best = max(last_live[line], key=lambda h: h.score)
            results.append(
                DecodeResult(
                    tokens=best.tokens,
                    score=best.score,
                    truncated=True,
                    step_probs=best.probs,
                )
            )
    return results


def decode_many(
    model: PostCorrectionModel,
    sources: Sequence[SourceSequence],
    cfg: DecodeConfig = DecodeConfig(),
    scorer=None,
) -> list[DecodeResult]:
    """Beam-decode a batch of lines; empty sources pass through unchanged."""
    model.eval()
    results: dict[int, DecodeResult] = {}
    todo: list[tuple[int, SourceSequence]] = []
    for i, source in enumerate(sources):
        if len(source) == 0:
            results[i] = DecodeResult(
                tokens=(),
                score=0.0,
                truncated=False,
                step_probs=() if cfg.keep_step_probs else None,
            )
        else:
            todo.append((i, source))
    for lo in range(0, len(todo), cfg.chunk_lines):
        chunk = todo[lo : lo + cfg.chunk_lines]
        decoded = _decode_chunk(model, [s for _, s in chunk], cfg, scorer)
        for (i, _), result in zip(chunk, decoded):
            results[i] = result
    return [results[i] for i in range(len(sources))]


def beam_search(
    model: PostCorrectionModel,
    source: SourceSequence,
    cfg: DecodeConfig = DecodeConfig(),
    scorer=None,
) -> DecodeResult:
    return decode_many(model, [source], cfg, scorer)[0]


def replay_score(
    alphabet: Alphabet,
    result: DecodeResult,
    cfg: DecodeConfig,
    scorer=None,
) -> float:
    """Recompute sum(log p) for a decoded hypothesis, step by step.

    Walks the emitted sequence through joint_step_prob using the retained
    per-step decoder distributions, rebuilding the lexical scorer states
    from scratch. Verifies the search's score bookkeeping and state
    threading without re-running the network, whose float32 outputs shift
    with batch shape.
    """
    if result.step_probs is None:
        raise ValueError("decode with keep_step_probs=True to enable replay")
    if len(result.step_probs) != len(result.tokens):
        raise ValueError("one retained distribution per emitted symbol expected")
    lex = (
        scorer.init()
        if (scorer is not None and cfg.use_lexicon and cfg.lam > 0)
        else None
    )
    total = 0.0
    for p, token in zip(result.step_probs, result.tokens):
        logp = step_log_probs(p, scorer, lex, cfg)
        total += float(logp[token])
        if lex is not None and token != alphabet.eos_index:
            lex, _ = scorer.step(lex, alphabet.char(int(token)))
    return total


def decode_file(
    model: PostCorrectionModel,
    src_path: str | Path,
    out_path: str | Path,
    cfg: DecodeConfig = DecodeConfig(),
    scorer=None,
    with_scores: bool = False,
) -> list[DecodeResult]:
    texts = read_lines(src_path)
    sources = [SourceSequence.from_text(model.alphabet, t) for t in texts]
    results = decode_many(model, sources, cfg, scorer)
    lines = [
        f"{r.text(model.alphabet)}\t{r.score:.6f}" if with_scores else r.text(model.alphabet)
        for r in results
    ]
    write_lines(out_path, lines)
    return results
