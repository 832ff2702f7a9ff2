"""Experiment orchestration: correction grids and the synthetic trend study.

Two entry points. ``run_grid`` sweeps folds x seeds x fusion weights x lexicon
variants and emits one report row per cell; failed cells are recorded and
excluded from the means. ``run_trend`` runs the full pipeline comparison
(first pass, supervised base, self-training only, lexical decoding only,
both combined) over several seeds on a fixed three-way split.
"""

from __future__ import annotations

import copy
import logging
import random
from dataclasses import dataclass
from statistics import mean

import torch

from .corpus import Alphabet, GoldDataset, UnannotatedSet, split_folds
from .decoding import DecodeConfig, decode_many
from .metrics import lexical_accuracy_split, score_corpus
from .model import ModelConfig, PostCorrectionModel, TrainConfig, train
from .ngram import CharNgramLM, UniformCharLM, WordUnigramLM
from .selftrain import Lexicon, SelfTrainConfig, build_lexicon, make_pseudo_dataset, self_train
from .wfsa import CharOnlyScorer, LexicalScorer, build_wfsa, determinize_minimize

log = logging.getLogger(__name__)

VARIANTS = ("word+char", "word+uniform", "char-only")


def new_model(alphabet: Alphabet, cfg: ModelConfig, seed: int) -> PostCorrectionModel:
    torch.manual_seed(seed)
    return PostCorrectionModel(alphabet, cfg)


def build_scorer(variant: str, texts: list[str], alphabet: Alphabet, char_order: int):
    """Lexical scorer for one variant, or None when the texts carry no words.

    "word+char" pairs the word automaton with a character n-gram trained on
    word forms, "word+uniform" replaces that n-gram with a uniform unknown
    model, "char-only" drops the automaton and scores raw line continuations.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown lexicon variant: {variant}")
    texts = [t for t in texts if t.strip()]
    if variant == "char-only":
        if not texts:
            return None
        return CharOnlyScorer(CharNgramLM.train_lines(texts, char_order, alphabet), alphabet)
    if not any(alphabet.words(t) for t in texts):
        return None
    word_lm = WordUnigramLM.train(texts, alphabet)
    wfsa = determinize_minimize(build_wfsa(word_lm, alphabet))
    if variant == "word+char":
        char_lm = CharNgramLM.train_words(texts, char_order, alphabet)
    else:
        char_lm = UniformCharLM(alphabet)
    return LexicalScorer(wfsa, char_lm)


# ---------------------------------------------------------------------------
# fold x seed x lambda x variant grid


@dataclass(frozen=True)
class GridConfig:
    folds: int = 3
    fold_seed: int = 17
    seeds: tuple[int, ...] = (0, 1, 2)
    lams: tuple[float, ...] = (0.0, 0.05, 0.1)
    variants: tuple[str, ...] = ("word+char",)
    gold_fraction: float = 1.0
    unannotated_fraction: float = 1.0
    emb_dim: int = 32
    hidden_dim: int = 64
    attn_dim: int = 32
    epochs: int = 12
    learning_rate: float = 2e-3
    batch_size: int = 32
    dropout: float = 0.1
    beam_width: int = 4
    chunk_lines: int = 64
    char_order: int = 5
    self_train_iterations: int = 0
    length_normalize: bool = True

    def __post_init__(self) -> None:
        if self.folds < 3:
            raise ValueError("cross-validation needs at least 3 folds")
        if not self.seeds or not self.lams or not self.variants:
            raise ValueError("seeds, lams, and variants must be non-empty")
        unknown = set(self.variants) - set(VARIANTS)
        if unknown:
            raise ValueError(f"unknown lexicon variants: {sorted(unknown)}")
        for frac in (self.gold_fraction, self.unannotated_fraction):
            if not 0.0 < frac <= 1.0:
                raise ValueError("data fractions must be in (0, 1]")
        if any(not 0.0 <= lam <= 1.0 for lam in self.lams):
            raise ValueError("fusion weights must be in [0, 1]")


@dataclass(frozen=True)
class CellResult:
    fold: int
    seed: int
    variant: str
    lam: float
    cer: float | None
    wer: float | None
    known_acc: float | None
    unknown_acc: float | None
    coverage: float | None
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


def _subset(items: list, fraction: float, seed: int) -> list:
    if fraction >= 1.0:
        return list(items)
    k = max(1, round(len(items) * fraction))
    return random.Random(seed * 9176 + 11).sample(list(items), k)


def _failed_cells(cfg: GridConfig, fold: int, seed: int, error: str) -> list[CellResult]:
    return [
        CellResult(fold, seed, variant, lam, None, None, None, None, None, error=error)
        for variant in cfg.variants
        for lam in cfg.lams
    ]


def _fit_cell(
    train_pairs: list,
    validation: GoldDataset,
    u_set: UnannotatedSet,
    alphabet: Alphabet,
    cfg: GridConfig,
    seed: int,
) -> tuple[PostCorrectionModel, list[str]]:
    """Train one model and return it with corrected texts for lexicon building."""
    model = new_model(alphabet, ModelConfig(cfg.emb_dim, cfg.hidden_dim, cfg.attn_dim), seed)
    train(
        model,
        train_pairs,
        TrainConfig(cfg.learning_rate, cfg.epochs, cfg.batch_size, cfg.dropout, seed=seed),
    )
    if cfg.self_train_iterations > 0 and len(u_set) > 0:
        st_cfg = SelfTrainConfig(
            max_iterations=cfg.self_train_iterations,
            patience=cfg.self_train_iterations,
            lam=max(cfg.lams),
            dropout=cfg.dropout,
            learning_rate=cfg.learning_rate,
            batch_size=cfg.batch_size,
            beam_width=cfg.beam_width,
            char_order=cfg.char_order,
            seed=seed,
            chunk_lines=cfg.chunk_lines,
            length_normalize=cfg.length_normalize,
        )
        model, _ = self_train(model, GoldDataset(tuple(train_pairs)), u_set, validation, st_cfg)
    if len(u_set) > 0:
        dcfg = DecodeConfig(
            beam_width=cfg.beam_width,
            chunk_lines=cfg.chunk_lines,
            length_normalize=cfg.length_normalize,
        )
        texts = make_pseudo_dataset(model, u_set, dcfg).clean_target_texts(alphabet)
    else:
        # no unannotated material: the gold training targets are the only
        # corrected text available for the lexicon
        texts = [t.text(alphabet) for _, t in train_pairs]
    return model, texts


def run_grid(
    gold: GoldDataset,
    unannotated: UnannotatedSet,
    alphabet: Alphabet,
    cfg: GridConfig = GridConfig(),
) -> list[CellResult]:
    cells: list[CellResult] = []
    for fold_idx, fold in enumerate(split_folds(gold, cfg.folds, cfg.fold_seed)):
        train_pairs = _subset(list(fold.train), cfg.gold_fraction, cfg.fold_seed + fold_idx)
        u_set = UnannotatedSet(
            sources=tuple(_subset(list(unannotated), cfg.unannotated_fraction, cfg.fold_seed + fold_idx))
        )
        test_golds = [t.text(alphabet) for _, t in fold.test]
        test_sources = [s for s, _ in fold.test]
        for seed in cfg.seeds:
            try:
                model, lex_texts = _fit_cell(train_pairs, fold.validation, u_set, alphabet, cfg, seed)
            except Exception as exc:  # record the failure on every dependent cell
                log.warning("fold %d seed %d: fit failed: %s", fold_idx, seed, exc)
                cells.extend(_failed_cells(cfg, fold_idx, seed, str(exc) or type(exc).__name__))
                continue
            vocab: set[str] = set()
            for t in lex_texts:
                vocab.update(alphabet.words(t))
            for variant in cfg.variants:
                try:
                    scorer = build_scorer(variant, lex_texts, alphabet, cfg.char_order)
                    build_error = ""
                except Exception as exc:
                    scorer, build_error = None, str(exc) or type(exc).__name__
                for lam in cfg.lams:
                    if build_error:
                        cells.append(
                            CellResult(fold_idx, seed, variant, lam, None, None, None, None, None, error=build_error)
                        )
                        continue
                    try:
                        dcfg = DecodeConfig(
                            beam_width=cfg.beam_width,
                            lam=lam,
                            use_lexicon=scorer is not None and lam > 0,
                            chunk_lines=cfg.chunk_lines,
                            length_normalize=cfg.length_normalize,
                        )
                        preds = [r.text(alphabet) for r in decode_many(model, test_sources, dcfg, scorer)]
                        rep = score_corpus(preds, test_golds, alphabet)
                        known, unknown, coverage = lexical_accuracy_split(preds, test_golds, vocab, alphabet)
                        cells.append(
                            CellResult(
                                fold_idx, seed, variant, lam,
                                rep.cer_percent, rep.wer_percent, known, unknown, coverage,
                            )
                        )
                    except Exception as exc:
                        log.warning(
                            "fold %d seed %d %s lambda=%g: decode failed: %s",
                            fold_idx, seed, variant, lam, exc,
                        )
                        cells.append(
                            CellResult(
                                fold_idx, seed, variant, lam, None, None, None, None, None,
                                error=str(exc) or type(exc).__name__,
                            )
                        )
    return cells


def _fmt(value: float | None, digits: int = 4) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def grid_rows(cells: list[CellResult]) -> list[str]:
    """Tab-separated report: one row per cell, then per-(variant, lambda) means."""
    out = ["fold\tseed\tvariant\tlambda\tcer\twer\tknown_acc\tunknown_acc\tcoverage\tstatus"]
    for c in cells:
        status = "ok" if c.ok else f"failed: {c.error}"
        out.append(
            f"{c.fold}\t{c.seed}\t{c.variant}\t{c.lam:g}\t{_fmt(c.cer, 2)}\t{_fmt(c.wer, 2)}"
            f"\t{_fmt(c.known_acc)}\t{_fmt(c.unknown_acc)}\t{_fmt(c.coverage)}\t{status}"
        )
    for variant, lam in sorted({(c.variant, c.lam) for c in cells}):
        ok = [c for c in cells if c.ok and c.variant == variant and c.lam == lam]
        if not ok:
            continue
        known = [c.known_acc for c in ok if c.known_acc is not None]
        unknown = [c.unknown_acc for c in ok if c.unknown_acc is not None]
        out.append(
            f"mean\t-\t{variant}\t{lam:g}\t{mean(c.cer for c in ok):.2f}\t{mean(c.wer for c in ok):.2f}"
            f"\t{_fmt(mean(known) if known else None)}\t{_fmt(mean(unknown) if unknown else None)}"
            f"\t{_fmt(mean(c.coverage for c in ok))}\tmean of {len(ok)}"
        )
    failed = sum(1 for c in cells if not c.ok)
    if failed:
        out.append(f"# warning: {failed} of {len(cells)} cells failed; means cover completed cells only")
    return out


# ---------------------------------------------------------------------------
# trend study: first pass vs base vs ablations vs combined


@dataclass(frozen=True)
class TrendConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    lams: tuple[float, ...] = (0.05, 0.1)
    iterations: int = 3
    train_lines: int = 300
    val_lines: int = 100
    test_lines: int = 200
    emb_dim: int = 32
    hidden_dim: int = 64
    attn_dim: int = 32
    base_epochs: int = 40
    anneal_epochs: int = 12
    lm_epochs: int = 1
    pseudo_epochs: int = 2
    finetune_epochs: int = 3
    learning_rate: float = 5e-3
    anneal_lr: float = 1e-3
    # pseudo-label fine-tuning needs a gentler step than supervised training,
    # otherwise the model entrenches its own confident errors and the lexical
    # term loses the headroom to flip them
    st_learning_rate: float = 5e-4
    batch_size: int = 16
    dropout: float = 0.1
    beam_width: int = 4
    char_order: int = 5
    chunk_lines: int = 64
    length_normalize: bool = True

    def __post_init__(self) -> None:
        if not self.seeds or not self.lams:
            raise ValueError("seeds and lams must be non-empty")
        if self.iterations < 1:
            raise ValueError("need at least one self-training iteration")


@dataclass(frozen=True)
class TrendRun:
    seed: int
    first_pass_wer: float
    base_wer: float
    self_only_wer: float
    lex_only_wer: float
    combined_wer: float
    base_cer: float
    combined_cer: float
    lex_lam: float
    combined_lam: float
    base_known_acc: float | None
    combined_known_acc: float | None


@dataclass(frozen=True)
class TrendSummary:
    runs: tuple[TrendRun, ...]

    def _mean(self, attr: str) -> float:
        return mean(getattr(r, attr) for r in self.runs)

    @property
    def mean_first_pass_wer(self) -> float:
        return self._mean("first_pass_wer")

    @property
    def mean_base_wer(self) -> float:
        return self._mean("base_wer")

    @property
    def mean_self_only_wer(self) -> float:
        return self._mean("self_only_wer")

    @property
    def mean_lex_only_wer(self) -> float:
        return self._mean("lex_only_wer")

    @property
    def mean_combined_wer(self) -> float:
        return self._mean("combined_wer")

    @property
    def mean_base_known_acc(self) -> float:
        return mean(r.base_known_acc for r in self.runs if r.base_known_acc is not None)

    @property
    def mean_combined_known_acc(self) -> float:
        return mean(r.combined_known_acc for r in self.runs if r.combined_known_acc is not None)

    def rows(self) -> list[str]:
        out = [
            "seed\tfirst_pass\tbase\tself_only\tlex_only\tcombined"
            "\tlex_lam\tcombined_lam\tbase_known\tcombined_known"
        ]
        for r in self.runs:
            out.append(
                f"{r.seed}\t{r.first_pass_wer:.2f}\t{r.base_wer:.2f}\t{r.self_only_wer:.2f}"
                f"\t{r.lex_only_wer:.2f}\t{r.combined_wer:.2f}\t{r.lex_lam:g}\t{r.combined_lam:g}"
                f"\t{_fmt(r.base_known_acc)}\t{_fmt(r.combined_known_acc)}"
            )
        out.append(
            f"mean\t{self.mean_first_pass_wer:.2f}\t{self.mean_base_wer:.2f}"
            f"\t{self.mean_self_only_wer:.2f}\t{self.mean_lex_only_wer:.2f}"
            f"\t{self.mean_combined_wer:.2f}\t-\t-"
            f"\t{_fmt(self.mean_base_known_acc)}\t{_fmt(self.mean_combined_known_acc)}"
        )
        return out


def _decode_texts(model, dataset, scorer, lam, cfg: TrendConfig) -> list[str]:
    dcfg = DecodeConfig(
        beam_width=cfg.beam_width,
        lam=lam,
        use_lexicon=scorer is not None and lam > 0,
        chunk_lines=cfg.chunk_lines,
        length_normalize=cfg.length_normalize,
    )
    sources = [s for s, _ in dataset]
    return [r.text(model.alphabet) for r in decode_many(model, sources, dcfg, scorer)]


def _tune_lam(model, val_set, lexicon: Lexicon | None, cfg: TrendConfig) -> float:
    """Pick the fusion weight with the lowest validation WER (ties keep the first)."""
    if lexicon is None:
        return 0.0
    golds = [t.text(model.alphabet) for _, t in val_set]
    best_lam, best_wer = cfg.lams[0], float("inf")
    for lam in cfg.lams:
        preds = _decode_texts(model, val_set, lexicon.scorer, lam, cfg)
        wer = score_corpus(preds, golds, model.alphabet).wer_percent
        if wer < best_wer:
            best_lam, best_wer = lam, wer
    return best_lam


def _fit_lexicon(model, unannotated, cfg: TrendConfig) -> Lexicon | None:
    dcfg = DecodeConfig(
        beam_width=cfg.beam_width,
        chunk_lines=cfg.chunk_lines,
        length_normalize=cfg.length_normalize,
    )
    pseudo = make_pseudo_dataset(model, unannotated, dcfg)
    return build_lexicon(pseudo.clean_target_texts(model.alphabet), model.alphabet, cfg.char_order)


def run_trend(
    gold: GoldDataset,
    unannotated: UnannotatedSet,
    alphabet: Alphabet,
    cfg: TrendConfig = TrendConfig(),
) -> TrendSummary:
    pairs = list(gold)
    need = cfg.train_lines + cfg.val_lines + cfg.test_lines
    if len(pairs) < need:
        raise ValueError(f"need {need} gold lines, got {len(pairs)}")
    train_set = GoldDataset(tuple(pairs[: cfg.train_lines]))
    val_set = GoldDataset(tuple(pairs[cfg.train_lines : cfg.train_lines + cfg.val_lines]))
    test_set = GoldDataset(tuple(pairs[cfg.train_lines + cfg.val_lines : need]))
    test_golds = [t.text(alphabet) for _, t in test_set]
    first_pass = score_corpus([s.text(alphabet) for s, _ in test_set], test_golds, alphabet)

    mcfg = ModelConfig(cfg.emb_dim, cfg.hidden_dim, cfg.attn_dim)
    runs: list[TrendRun] = []
    for seed in cfg.seeds:
        model = new_model(alphabet, mcfg, seed)
        train(
            model,
            list(train_set),
            TrainConfig(cfg.learning_rate, cfg.base_epochs, cfg.batch_size, cfg.dropout, seed=seed),
        )
        if cfg.anneal_epochs > 0:
            # second stage at a lower rate; the shifted seed keeps its batch
            # order independent of the first stage
            train(
                model,
                list(train_set),
                TrainConfig(
                    cfg.anneal_lr, cfg.anneal_epochs, cfg.batch_size, cfg.dropout, seed=seed + 1000
                ),
            )
        base_preds = _decode_texts(model, test_set, None, 0.0, cfg)
        base_rep = score_corpus(base_preds, test_golds, alphabet)

        base_lexicon = _fit_lexicon(model, unannotated, cfg)
        lex_lam = _tune_lam(model, val_set, base_lexicon, cfg)
        lex_scorer = base_lexicon.scorer if base_lexicon else None
        lex_preds = _decode_texts(model, test_set, lex_scorer, lex_lam, cfg)
        lex_rep = score_corpus(lex_preds, test_golds, alphabet)

        st_cfg = SelfTrainConfig(
            max_iterations=cfg.iterations,
            patience=cfg.iterations,
            lam=max(cfg.lams),
            dropout=cfg.dropout,
            lm_epochs=cfg.lm_epochs,
            pseudo_epochs=cfg.pseudo_epochs,
            finetune_epochs=cfg.finetune_epochs,
            learning_rate=cfg.st_learning_rate,
            batch_size=cfg.batch_size,
            beam_width=cfg.beam_width,
            char_order=cfg.char_order,
            seed=seed,
            chunk_lines=cfg.chunk_lines,
            length_normalize=cfg.length_normalize,
        )
        st_model, _ = self_train(copy.deepcopy(model), train_set, unannotated, val_set, st_cfg)
        self_preds = _decode_texts(st_model, test_set, None, 0.0, cfg)
        self_rep = score_corpus(self_preds, test_golds, alphabet)

        # the deployed system pairs the best checkpoint with a lexicon built
        # from its own corrected corpus
        st_lexicon = _fit_lexicon(st_model, unannotated, cfg)
        combined_lam = _tune_lam(st_model, val_set, st_lexicon, cfg)
        st_scorer = st_lexicon.scorer if st_lexicon else None
        combined_preds = _decode_texts(st_model, test_set, st_scorer, combined_lam, cfg)
        combined_rep = score_corpus(combined_preds, test_golds, alphabet)

        vocab = st_lexicon.word_lm.vocab if st_lexicon else set()
        base_known, _, _ = lexical_accuracy_split(base_preds, test_golds, vocab, alphabet)
        combined_known, _, _ = lexical_accuracy_split(combined_preds, test_golds, vocab, alphabet)

        runs.append(
            TrendRun(
                seed=seed,
                first_pass_wer=first_pass.wer_percent,
                base_wer=base_rep.wer_percent,
                self_only_wer=self_rep.wer_percent,
                lex_only_wer=lex_rep.wer_percent,
                combined_wer=combined_rep.wer_percent,
                base_cer=base_rep.cer_percent,
                combined_cer=combined_rep.cer_percent,
                lex_lam=lex_lam,
                combined_lam=combined_lam,
                base_known_acc=base_known,
                combined_known_acc=combined_known,
            )
        )
        log.info(
            "seed %d: first_pass %.2f base %.2f self %.2f lex %.2f combined %.2f",
            seed,
            first_pass.wer_percent,
            base_rep.wer_percent,
            self_rep.wer_percent,
            lex_rep.wer_percent,
            combined_rep.wer_percent,
        )
    return TrendSummary(runs=tuple(runs))
