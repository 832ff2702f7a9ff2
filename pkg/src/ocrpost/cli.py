"""Command-line front end.

Each subcommand is a thin wrapper over one library operation: ``train``,
``decode``, ``evaluate``, ``build-lm``, ``synth``, ``self-train``, and
``experiment``. Options can come from a flat ``key = value`` config file
with one section per subcommand; explicit command-line flags win over
config values. All reports are tab-separated with a header row.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

from .corpus import Alphabet, GoldDataset, load_parallel, load_sources, read_lines, write_lines
from .decoding import DecodeConfig, decode_file
from .experiments import GridConfig, TrendConfig, grid_rows, new_model, run_grid, run_trend
from .metrics import score_corpus
from .model import ModelConfig, TrainConfig, load_checkpoint, save_checkpoint, train
from .ngram import CharNgramLM, WordUnigramLM
from .selftrain import SelfTrainConfig, self_train
from .synthdata import SynthConfig, generate_corpus, load_corpus, packaged_corpus, write_corpus
from .wfsa import LexicalScorer, build_wfsa, determinize_minimize

log = logging.getLogger(__name__)

_BOOL = {
    "1": True, "true": True, "yes": True, "on": True,
    "0": False, "false": False, "no": False, "off": False,
}


class CliError(Exception):
    """User-facing failure; printed without a traceback."""


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip() != "")
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated integer list: {text!r}")


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in text.split(",") if part.strip() != "")
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated float list: {text!r}")


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip() != "")


def _require_files(*paths) -> None:
    """Fail before any work when an input path is absent."""
    missing = [str(p) for p in paths if p is not None and not Path(p).exists()]
    if missing:
        raise CliError("missing file: " + ", ".join(missing))


def _require_option(args: argparse.Namespace, *names: str) -> None:
    for name in names:
        if getattr(args, name) is None:
            raise CliError(f"missing required option --{name.replace('_', '-')}")


def _emit(lines, out_path) -> None:
    if out_path is None:
        for line in lines:
            print(line)
    else:
        write_lines(out_path, lines)


# ---------------------------------------------------------------- config file


def read_config(path: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, encoding="utf-8") as handle:
            parser.read_file(handle)
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}")
    except configparser.Error as exc:
        # configparser reports the offending line for syntax errors
        raise CliError(f"config error: {exc}")
    return parser


def apply_config(
    args: argparse.Namespace,
    actions: dict[str, argparse.Action],
    section: str,
    argv: list[str],
) -> None:
    """Fill options from a config section; flags already on argv win."""
    config = read_config(args.config)
    if not config.has_section(section):
        return
    for key, raw in config.items(section):
        option = "--" + key.replace("_", "-")
        action = actions.get(option)
        if action is None:
            raise CliError(f"config error: unknown key {key!r} in [{section}]")
        if option in argv:
            continue
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            value = _BOOL.get(raw.strip().lower())
            if value is None:
                raise CliError(f"config error: key {key!r} expects a boolean, got {raw!r}")
        else:
            try:
                value = (action.type or str)(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise CliError(f"config error: key {key!r}: {exc}")
        if action.choices is not None and value not in action.choices:
            raise CliError(
                f"config error: key {key!r} must be one of {sorted(action.choices)}"
            )
        setattr(args, action.dest, value)


# ----------------------------------------------------------------- subcommands


def cmd_train(args: argparse.Namespace) -> int:
    _require_option(args, "sources", "targets", "out")
    _require_files(args.sources, args.targets)
    gold, alphabet = load_parallel(args.sources, args.targets)
    model = new_model(
        alphabet,
        ModelConfig(args.emb_dim, args.hidden_dim, args.attn_dim),
        args.seed,
    )
    cfg = TrainConfig(
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        batch_size=args.batch_size,
        dropout=args.dropout,
        seed=args.seed,
    )
    train(model, list(gold), cfg)
    save_checkpoint(model, args.out)
    print(f"trained on {len(gold)} lines\tsaved {args.out}")
    return 0


def _load_scorer(prefix: str, alphabet: Alphabet) -> LexicalScorer:
    words_path = f"{prefix}.words"
    chars_path = f"{prefix}.chars"
    _require_files(words_path, chars_path)
    word_lm = WordUnigramLM.load(words_path)
    char_lm = CharNgramLM.load(chars_path, alphabet)
    wfsa = determinize_minimize(build_wfsa(word_lm, alphabet))
    return LexicalScorer(wfsa, char_lm)


def cmd_decode(args: argparse.Namespace) -> int:
    _require_option(args, "model", "input", "output")
    _require_files(args.model, args.input)
    model = load_checkpoint(args.model)
    scorer = None
    if args.lexicon is not None and args.lam > 0:
        scorer = _load_scorer(args.lexicon, model.alphabet)
    cfg = DecodeConfig(
        beam_width=args.beam,
        lam=args.lam if scorer is not None else 0.0,
        use_lexicon=scorer is not None,
        chunk_lines=args.chunk_lines,
        length_normalize=args.length_normalize,
    )
    results = decode_file(model, args.input, args.output, cfg, scorer)
    print(f"decoded {len(results)} lines\twrote {args.output}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    _require_option(args, "predictions", "gold")
    _require_files(args.predictions, args.gold)
    preds = read_lines(args.predictions)
    golds = read_lines(args.gold)
    if len(preds) != len(golds):
        raise CliError(
            f"line count mismatch: {len(preds)} predictions vs {len(golds)} gold"
        )
    alphabet = Alphabet.from_texts(preds + golds)
    report = score_corpus(preds, golds, alphabet)
    lines = [
        "metric\tvalue",
        f"cer\t{report.cer_percent:.2f}",
        f"wer\t{report.wer_percent:.2f}",
        f"char_edits\t{report.char_edits}",
        f"word_edits\t{report.word_edits}",
        f"ref_chars\t{report.ref_chars}",
        f"ref_words\t{report.ref_words}",
    ]
    _emit(lines, args.out)
    return 0


def cmd_build_lm(args: argparse.Namespace) -> int:
    _require_option(args, "texts", "out")
    _require_files(args.texts)
    texts = read_lines(args.texts)
    alphabet = Alphabet.from_texts(texts)
    if not any(alphabet.words(t) for t in texts):
        raise CliError("no word tokens in the text file")
    word_lm = WordUnigramLM.train(texts, alphabet)
    char_lm = CharNgramLM.train_words(texts, args.char_order, alphabet)
    word_lm.dump(f"{args.out}.words")
    char_lm.dump(f"{args.out}.chars")
    print(
        f"vocab {len(word_lm.vocab)}\torder {args.char_order}"
        f"\twrote {args.out}.words {args.out}.chars"
    )
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    _require_option(args, "out")
    cfg = SynthConfig(
        seed=args.seed,
        vocab_size=args.vocab_size,
        gold_lines=args.gold_lines,
        unannotated_lines=args.unannotated_lines,
        substitution_rate=args.substitution_rate,
        deletion_rate=args.deletion_rate,
        insertion_rate=args.insertion_rate,
    )
    corpus = generate_corpus(cfg)
    write_corpus(corpus, args.out, cfg)
    print(
        f"wrote {len(corpus.gold)} gold and {len(corpus.unannotated)} "
        f"unannotated lines to {args.out}"
    )
    return 0


def cmd_self_train(args: argparse.Namespace) -> int:
    _require_option(args, "model", "sources", "targets", "unannotated", "out")
    _require_files(args.model, args.sources, args.targets, args.unannotated)
    model = load_checkpoint(args.model)
    gold, _ = load_parallel(args.sources, args.targets, alphabet=model.alphabet)
    unannotated = load_sources(args.unannotated, model.alphabet)
    if not 0 < args.val_lines < len(gold):
        raise CliError(
            f"--val-lines must be in 1..{len(gold) - 1} to leave training lines"
        )
    pairs = list(gold)
    train_set = GoldDataset(tuple(pairs[: -args.val_lines]))
    val_set = GoldDataset(tuple(pairs[-args.val_lines :]))
    cfg = SelfTrainConfig(
        max_iterations=args.iterations,
        patience=args.patience,
        lam=args.lam,
        dropout=args.dropout,
        lm_epochs=args.lm_epochs,
        pseudo_epochs=args.pseudo_epochs,
        finetune_epochs=args.finetune_epochs,
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        beam_width=args.beam,
        char_order=args.char_order,
        seed=args.seed,
        chunk_lines=args.chunk_lines,
        length_normalize=args.length_normalize,
    )
    _, trace = self_train(model, train_set, unannotated, val_set, cfg, run_dir=args.out)
    lines = ["iteration\tval_wer\tval_cer\tpseudo_pairs\ttruncated\tlexicon_words"]
    for it in trace:
        lines.append(
            f"{it.iteration}\t{it.val_wer:.2f}\t{it.val_cer:.2f}"
            f"\t{it.pseudo_pairs}\t{it.truncated_pairs}\t{it.lexicon_words}"
        )
    for line in lines:
        print(line)
    print(f"artifacts in {args.out}")
    return 0


def _load_experiment_corpus(args: argparse.Namespace):
    if args.data is None:
        return packaged_corpus()
    _require_files(
        Path(args.data) / "gold_sources.txt",
        Path(args.data) / "gold_targets.txt",
        Path(args.data) / "unannotated.txt",
    )
    return load_corpus(args.data)


def cmd_experiment(args: argparse.Namespace) -> int:
    gold, unannotated, alphabet = _load_experiment_corpus(args)
    if args.mode == "grid":
        cfg = GridConfig(
            folds=args.folds,
            seeds=args.seeds,
            lams=args.lams,
            variants=args.variants,
            gold_fraction=args.gold_fraction,
            unannotated_fraction=args.unannotated_fraction,
            epochs=args.epochs,
            beam_width=args.beam,
            self_train_iterations=args.iterations,
        )
        cells = run_grid(gold, unannotated, alphabet, cfg)
        _emit(grid_rows(cells), args.out)
    else:
        cfg = TrendConfig(seeds=args.seeds, lams=args.lams, beam_width=args.beam)
        summary = run_trend(gold, unannotated, alphabet, cfg)
        _emit(summary.rows(), args.out)
    return 0


# ---------------------------------------------------------------------- parser


def _add_train(sub) -> argparse.ArgumentParser:
    p = sub.add_parser("train", help="fit a post-correction model on parallel lines")
    p.add_argument("--sources", help="first-pass OCR lines, one per line")
    p.add_argument("--targets", help="gold transcriptions, aligned by line")
    p.add_argument("--out", help="checkpoint path to write")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--emb-dim", type=int, default=64)
    p.add_argument("--hidden-dim", type=int, default=128)
    p.add_argument("--attn-dim", type=int, default=128)
    p.set_defaults(func=cmd_train)
    return p


def _add_decode(sub) -> argparse.ArgumentParser:
    p = sub.add_parser("decode", help="beam-decode a file of first-pass lines")
    p.add_argument("--model", help="checkpoint from the train command")
    p.add_argument("--input", help="lines to correct")
    p.add_argument("--output", help="corrected lines destination")
    p.add_argument("--lexicon", help="language model prefix from build-lm")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--beam", type=int, default=8)
    p.add_argument("--chunk-lines", type=int, default=32)
    p.add_argument("--length-normalize", action="store_true",
                   help="rank finished hypotheses by per-character score")
    p.set_defaults(func=cmd_decode)
    return p


def _add_evaluate(sub) -> argparse.ArgumentParser:
    p = sub.add_parser("evaluate", help="report CER and WER between two files")
    p.add_argument("--predictions", help="corrected lines")
    p.add_argument("--gold", help="reference lines, aligned by line")
    p.add_argument("--out", help="report destination (default stdout)")
    p.set_defaults(func=cmd_evaluate)
    return p


def _add_build_lm(sub) -> argparse.ArgumentParser:
    p = sub.add_parser("build-lm", help="train word and character language models")
    p.add_argument("--texts", help="clean text, one line per record")
    p.add_argument("--out", help="output prefix; writes <out>.words and <out>.chars")
    p.add_argument("--char-order", type=int, default=6)
    p.set_defaults(func=cmd_build_lm)
    return p


def _add_synth(sub) -> argparse.ArgumentParser:
    p = sub.add_parser("synth", help="generate a synthetic noisy corpus")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=20240)
    p.add_argument("--vocab-size", type=int, default=120)
    p.add_argument("--gold-lines", type=int, default=600)
    p.add_argument("--unannotated-lines", type=int, default=3200)
    p.add_argument("--substitution-rate", type=float, default=0.065)
    p.add_argument("--deletion-rate", type=float, default=0.01)
    p.add_argument("--insertion-rate", type=float, default=0.01)
    p.set_defaults(func=cmd_synth)
    return p


def _add_self_train(sub) -> argparse.ArgumentParser:
    p = sub.add_parser("self-train", help="iterative pseudo-labeling on unannotated lines")
    p.add_argument("--model", help="base checkpoint to start from")
    p.add_argument("--sources", help="gold first-pass lines")
    p.add_argument("--targets", help="gold transcriptions, aligned by line")
    p.add_argument("--unannotated", help="first-pass lines without transcriptions")
    p.add_argument("--out", help="run directory for checkpoints and manifest")
    p.add_argument("--val-lines", type=int, default=50,
                   help="gold lines held out (from the end) for checkpoint selection")
    p.add_argument("--iterations", type=int, default=5)
    p.add_argument("--patience", type=int, default=1)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--beam", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--lm-epochs", type=int, default=3)
    p.add_argument("--pseudo-epochs", type=int, default=3)
    p.add_argument("--finetune-epochs", type=int, default=5)
    p.add_argument("--char-order", type=int, default=6)
    p.add_argument("--chunk-lines", type=int, default=32)
    p.add_argument("--length-normalize", action="store_true")
    p.set_defaults(func=cmd_self_train)
    return p


def _add_experiment(sub) -> argparse.ArgumentParser:
    p = sub.add_parser("experiment", help="cross-validated grids and trend runs")
    p.add_argument("--mode", choices=("grid", "trend"), default="grid")
    p.add_argument("--data", help="corpus directory from synth (default: packaged corpus)")
    p.add_argument("--out", help="report destination (default stdout)")
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--seeds", type=_int_list, default=(0, 1, 2, 3, 4),
                   help="comma-separated seed list")
    p.add_argument("--lambdas", dest="lams", type=_float_list, default=(0.0, 0.05, 0.1),
                   help="comma-separated lexical weights")
    p.add_argument("--variants", type=_str_list, default=("word+char",),
                   help="comma-separated subset of word+char,word+uniform,char-only")
    p.add_argument("--gold-fraction", type=float, default=1.0)
    p.add_argument("--unannotated-fraction", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--iterations", type=int, default=0,
                   help="self-training iterations per grid cell")
    p.set_defaults(func=cmd_experiment)
    return p


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, dict[str, argparse.Action]]]:
    parser = argparse.ArgumentParser(
        prog="ocrpost",
        description="OCR post-correction with lexically-aware beam decoding",
        allow_abbrev=False,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    actions: dict[str, dict[str, argparse.Action]] = {}
    for adder in (
        _add_train,
        _add_decode,
        _add_evaluate,
        _add_build_lm,
        _add_synth,
        _add_self_train,
        _add_experiment,
    ):
        p = adder(sub)
        p.add_argument("--config", help="key = value file; flags override it")
        p.allow_abbrev = False
        name = p.prog.split()[-1]
        actions[name] = {
            option: action
            for action in p._actions
            for option in action.option_strings
            if option.startswith("--")
        }
    return parser, actions


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser, actions = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config is not None:
            apply_config(args, actions[args.command], args.command, argv)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("unhandled failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
