"""Semi-supervised refinement: predict, pseudo-train, fine-tune, repeat.

Each iteration decodes the unannotated pages into a pseudo-parallel set,
rebuilds the lexicon from those predictions, warm-starts the encoder and
decoder with character-LM objectives, sequence-trains on the pseudo pairs
alone, fine-tunes on the gold pairs alone, and scores a held-out split.
The loop keeps the parameters flowing from one iteration into the next and
returns whichever checkpoint scored the best validation WER.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

from .corpus import Alphabet, GoldDataset, TargetSequence, UnannotatedSet
from .decoding import DecodeConfig, decode_many
from .metrics import score_corpus
from .model import (
    PostCorrectionModel,
    TrainConfig,
    lm_pretrain_decoder,
    lm_pretrain_encoder,
    save_checkpoint,
    train,
)
from .ngram import CharNgramLM, WordUnigramLM
from .wfsa import LexicalScorer, LexiconWfsa, build_wfsa, determinize_minimize, dump_wfsa


@dataclass(frozen=True)
class SelfTrainConfig:
    max_iterations: int = 5
    patience: int = 1
    lam: float = 0.1
    dropout: float = 0.1
    lm_epochs: int = 3
    pseudo_epochs: int = 3
    finetune_epochs: int = 5
    learning_rate: float = 1e-3
    batch_size: int = 32
    beam_width: int = 8
    char_order: int = 6
    seed: int = 0
    chunk_lines: int = 32
    # feed the freshly built lexicon back into the next prediction pass;
    # the first pass is always plain because no lexicon exists yet
    lexical_pseudo_decoding: bool = True
    # rank completed hypotheses by per-character score; the lexical term
    # prices word exits cheaply, so unnormalized totals favor short output
    length_normalize: bool = True

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("at least one iteration required")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")


@dataclass(frozen=True)
class PseudoDataset:
    pairs: list
    truncated: list[bool]
    iteration: int

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def clean_target_texts(self, alphabet: Alphabet) -> list[str]:
        """Prediction texts with the truncation-flagged lines dropped."""
        return [
            tgt.text(alphabet)
            for (_, tgt), flagged in zip(self.pairs, self.truncated)
            if not flagged
        ]


@dataclass(frozen=True)
class IterationMetrics:
    iteration: int
    val_wer: float
    val_cer: float
    pseudo_pairs: int
    truncated_pairs: int
    lexicon_words: int


@dataclass(frozen=True, eq=False)
class Lexicon:
    word_lm: WordUnigramLM
    char_lm: CharNgramLM
    wfsa: LexiconWfsa
    scorer: LexicalScorer


def make_pseudo_dataset(
    model: PostCorrectionModel,
    unannotated: UnannotatedSet,
    cfg: DecodeConfig,
    scorer=None,
    iteration: int = 0,
) -> PseudoDataset:
    """Decode every unannotated source into a training target."""
    sources = list(unannotated)
    results = decode_many(model, sources, cfg, scorer)
    eos = model.alphabet.eos_index
    pairs = []
    truncated = []
    for src, res in zip(sources, results):
        tokens = res.tokens if res.tokens and res.tokens[-1] == eos else res.tokens + (eos,)
        pairs.append((src, TargetSequence(tokens).validate(model.alphabet)))
        truncated.append(res.truncated)
    return PseudoDataset(pairs=pairs, truncated=truncated, iteration=iteration)


def build_lexicon(texts, alphabet: Alphabet, char_order: int) -> Lexicon | None:
    """Word-unigram automaton plus unknown-word character model from texts."""
    if not any(alphabet.words(t) for t in texts):
        return None
    word_lm = WordUnigramLM.train(texts, alphabet)
    char_lm = CharNgramLM.train_words(texts, char_order, alphabet)
    wfsa = determinize_minimize(build_wfsa(word_lm, alphabet))
    return Lexicon(word_lm, char_lm, wfsa, LexicalScorer(wfsa, char_lm))


def _validate_disjoint(gold: GoldDataset, validation: GoldDataset) -> None:
    seen = {(src.chars, tgt.chars) for src, tgt in gold}
    for src, tgt in validation:
        if (src.chars, tgt.chars) in seen:
            raise ValueError("validation pairs overlap the gold training set")


def _evaluate(
    model: PostCorrectionModel,
    validation: GoldDataset,
    cfg: SelfTrainConfig,
    scorer,
):
    decode_cfg = DecodeConfig(
        beam_width=cfg.beam_width,
        lam=cfg.lam if scorer is not None else 0.0,
        use_lexicon=scorer is not None,
        chunk_lines=cfg.chunk_lines,
        length_normalize=cfg.length_normalize,
    )
    results = decode_many(model, validation.sources, decode_cfg, scorer)
    preds = [r.text(model.alphabet) for r in results]
    golds = validation.target_texts(model.alphabet)
    return score_corpus(preds, golds, model.alphabet)


def _phase_cfg(cfg: SelfTrainConfig, epochs: int, iteration: int, phase: int) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg.learning_rate,
        epochs=epochs,
        batch_size=cfg.batch_size,
        dropout=cfg.dropout,
        seed=cfg.seed * 7919 + iteration * 31 + phase,
    )


def self_train(
    model: PostCorrectionModel,
    gold: GoldDataset,
    unannotated: UnannotatedSet,
    validation: GoldDataset,
    cfg: SelfTrainConfig = SelfTrainConfig(),
    run_dir: str | Path | None = None,
) -> tuple[PostCorrectionModel, list[IterationMetrics]]:
    """Iterative pseudo-training loop; returns the best-validation model."""
    _validate_disjoint(gold, validation)
    alphabet = model.alphabet
    out = Path(run_dir) if run_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    trace: list[IterationMetrics] = []
    report = _evaluate(model, validation, cfg, None)
    trace.append(
        IterationMetrics(0, report.wer_percent, report.cer_percent, 0, 0, 0)
    )
    best_wer = report.wer_percent
    best_iteration = 0
    best_state = copy.deepcopy(model.state_dict())
    bad_streak = 0
    lexicon: Lexicon | None = None

    for it in range(1, cfg.max_iterations + 1):
        pseudo_scorer = (
            lexicon.scorer
            if (lexicon is not None and cfg.lexical_pseudo_decoding)
            else None
        )
        pseudo_cfg = DecodeConfig(
            beam_width=cfg.beam_width,
            lam=cfg.lam if pseudo_scorer is not None else 0.0,
            use_lexicon=pseudo_scorer is not None,
            chunk_lines=cfg.chunk_lines,
            length_normalize=cfg.length_normalize,
        )
        pseudo = make_pseudo_dataset(model, unannotated, pseudo_cfg, pseudo_scorer, it)

        clean_texts = pseudo.clean_target_texts(alphabet)
        lexicon = build_lexicon(clean_texts, alphabet, cfg.char_order)

        if len(pseudo) > 0:
            lm_pretrain_encoder(
                model, list(unannotated), _phase_cfg(cfg, cfg.lm_epochs, it, 1)
            )
            lm_pretrain_decoder(
                model,
                [tgt for _, tgt in pseudo],
                _phase_cfg(cfg, cfg.lm_epochs, it, 2),
            )
            train(model, list(pseudo), _phase_cfg(cfg, cfg.pseudo_epochs, it, 3))
        train(model, list(gold), _phase_cfg(cfg, cfg.finetune_epochs, it, 4))

        scorer = lexicon.scorer if lexicon is not None else None
        report = _evaluate(model, validation, cfg, scorer)
        trace.append(
            IterationMetrics(
                iteration=it,
                val_wer=report.wer_percent,
                val_cer=report.cer_percent,
                pseudo_pairs=len(pseudo),
                truncated_pairs=sum(pseudo.truncated),
                lexicon_words=len(lexicon.word_lm.probs) if lexicon else 0,
            )
        )

        if out is not None:
            _write_iteration(out, it, model, lexicon, trace[-1])

        if report.wer_percent < best_wer:
            best_wer = report.wer_percent
            best_iteration = it
            best_state = copy.deepcopy(model.state_dict())
            bad_streak = 0
        else:
            bad_streak += 1
            if bad_streak >= cfg.patience:
                break

    model.load_state_dict(best_state)
    model.eval()
    if out is not None:
        save_checkpoint(model, out / "best.ckpt")
        _write_manifest(out, cfg, trace, best_iteration)
    return model, trace


def _write_iteration(
    out: Path,
    iteration: int,
    model: PostCorrectionModel,
    lexicon: Lexicon | None,
    row: IterationMetrics,
) -> None:
    it_dir = out / f"iteration_{iteration:02d}"
    it_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, it_dir / "model.ckpt")
    if lexicon is not None:
        lexicon.word_lm.dump(it_dir / "word_lm.txt")
        lexicon.char_lm.dump(it_dir / "char_lm.txt")
        dump_wfsa(lexicon.wfsa, it_dir / "lexicon.wfsa")
    header = "iteration\tval_wer\tval_cer\tpseudo_pairs\ttruncated_pairs\tlexicon_words\n"
    metrics_path = out / "metrics.tsv"
    line = (
        f"{row.iteration}\t{row.val_wer:.4f}\t{row.val_cer:.4f}"
        f"\t{row.pseudo_pairs}\t{row.truncated_pairs}\t{row.lexicon_words}\n"
    )
    new_file = not metrics_path.exists()
    with metrics_path.open("a", encoding="utf-8") as fh:
        if new_file:
            fh.write(header)
        fh.write(line)


def _write_manifest(
    out: Path, cfg: SelfTrainConfig, trace: list[IterationMetrics], best_iteration: int
) -> None:
    lines = [f"iterations\t{len(trace) - 1}"]
    lines.append(f"best_iteration\t{best_iteration}")
    lines.append("best_checkpoint\tbest.ckpt")
    for name, value in sorted(vars(cfg).items()):
        lines.append(f"config.{name}\t{value}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
