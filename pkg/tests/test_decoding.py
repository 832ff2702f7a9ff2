"""Beam search: fusion math, reductions, enumeration oracle, replay."""

import numpy as np
import pytest
import torch
from pytest import approx

from ocrpost.corpus import Alphabet, SourceSequence, TargetSequence
from ocrpost.decoding import (
    DecodeConfig,
    beam_search,
    decode_file,
    decode_many,
    joint_step_prob,
    replay_score,
    step_log_probs,
)
from ocrpost.model import ModelConfig, PostCorrectionModel, TrainConfig, train
from ocrpost.ngram import CharNgramLM, UniformCharLM, WordUnigramLM
from ocrpost.wfsa import CharOnlyScorer, LexicalScorer, build_wfsa, determinize_minimize

SMALL = ModelConfig(emb_dim=8, hidden_dim=12, attn_dim=8)


def make_model(alphabet: Alphabet, seed: int) -> PostCorrectionModel:
    torch.manual_seed(seed)
    model = PostCorrectionModel(alphabet, SMALL)
    model.eval()
    return model


@pytest.fixture(scope="module")
def dog_setup():
    alphabet = Alphabet.from_texts(["dog door cat rod x "])
    word_lm = WordUnigramLM.from_probabilities({"dog": 0.5, "door": 0.3, "cat": 0.15}, 0.05)
    wfsa = determinize_minimize(build_wfsa(word_lm, alphabet))
    char_lm = CharNgramLM.train_words(["dog door cat rod"], 3, alphabet)
    return alphabet, LexicalScorer(wfsa, char_lm)


def random_sources(alphabet: Alphabet, count: int, rng: np.random.Generator):
    chars = [c for c in alphabet.symbols if c != alphabet.eos_char]
    texts = [
        "".join(rng.choice(chars, size=rng.integers(2, 9)))
        for _ in range(count)
    ]
    return [SourceSequence.from_text(alphabet, t) for t in texts]


class TestConfig:
    def test_lambda_outside_unit_interval_rejected(self):
        with pytest.raises(ValueError):
            DecodeConfig(lam=-0.1)
        with pytest.raises(ValueError):
            DecodeConfig(lam=1.5)

    def test_zero_beam_rejected(self):
        with pytest.raises(ValueError):
            DecodeConfig(beam_width=0)


class TestJointStep:
    def test_lambda_zero_returns_neural_distribution_unchanged(self, dog_setup):
        _, scorer = dog_setup
        p = np.array([0.5, 0.3, 0.2])
        out = joint_step_prob(p, scorer, scorer.init(), 0.0)
        assert out is p

    @pytest.mark.parametrize("lam", [0.1, 0.5, 0.9, 1.0])
    def test_mixture_sums_to_one(self, dog_setup, lam):
        alphabet, scorer = dog_setup
        rng = np.random.default_rng(7)
        state = scorer.init()
        for _ in range(20):
            raw = rng.random(alphabet.size)
            p = raw / raw.sum()
            mixed = joint_step_prob(p, scorer, state, lam)
            assert mixed.sum() == approx(1.0, abs=1e-9)
            assert (mixed >= 0).all()
            state, _ = scorer.step(state, "d" if rng.random() < 0.5 else "o")

    def test_pure_lexical_prefers_word_starting_symbol(self, dog_setup):
        """With lam=1 a uniform neural arm cannot mask the lexicon."""
        alphabet, scorer = dog_setup
        uniform = np.full(alphabet.size, 1.0 / alphabet.size)
        mixed = joint_step_prob(uniform, scorer, scorer.init(), 1.0)
        assert mixed[alphabet.index("d")] > mixed[alphabet.index("x")]

    def test_cumulative_variant_decays_with_committed_cost(self, dog_setup):
        alphabet, scorer = dog_setup
        state = scorer.init()
        for ch in "dog":
            state, _ = scorer.step(state, ch)
        uniform = np.full(alphabet.size, 1.0 / alphabet.size)
        incr = joint_step_prob(uniform, scorer, state, 1.0, cumulative=False)
        cum = joint_step_prob(uniform, scorer, state, 1.0, cumulative=True)
        # committed cost shrinks every exp(-total), so after renormalization
        # the cumulative variant is still a distribution
        assert incr.sum() == approx(1.0, abs=1e-9)
        assert cum.sum() == approx(1.0, abs=1e-9)


class TestReductions:
    def test_lambda_zero_token_identical_to_plain_search(self, dog_setup):
        alphabet, scorer = dog_setup
        model = make_model(alphabet, 11)
        rng = np.random.default_rng(0)
        sources = random_sources(alphabet, 100, rng)
        cfg_plain = DecodeConfig(beam_width=4)
        cfg_fused = DecodeConfig(beam_width=4, lam=0.0, use_lexicon=True)
        plain = decode_many(model, sources, cfg_plain)
        fused = decode_many(model, sources, cfg_fused, scorer)
        assert [r.tokens for r in fused] == [r.tokens for r in plain]
        assert [r.score for r in fused] == [r.score for r in plain]

    def test_single_line_api_matches_batched(self, dog_setup):
        alphabet, scorer = dog_setup
        model = make_model(alphabet, 12)
        sources = random_sources(alphabet, 8, np.random.default_rng(1))
        cfg = DecodeConfig(beam_width=4, lam=0.3, use_lexicon=True)
        batched = decode_many(model, sources, cfg, scorer)
        single = [beam_search(model, s, cfg, scorer) for s in sources]
        assert [r.tokens for r in batched] == [r.tokens for r in single]

    def test_chunk_size_does_not_change_tokens(self, dog_setup):
        alphabet, scorer = dog_setup
        model = make_model(alphabet, 13)
        sources = random_sources(alphabet, 10, np.random.default_rng(2))
        a = decode_many(
            model, sources, DecodeConfig(beam_width=4, lam=0.3, use_lexicon=True, chunk_lines=3), scorer
        )
        b = decode_many(
            model, sources, DecodeConfig(beam_width=4, lam=0.3, use_lexicon=True, chunk_lines=32), scorer
        )
        assert [r.tokens for r in a] == [r.tokens for r in b]

    def test_empty_source_passes_through(self, dog_setup):
        alphabet, _ = dog_setup
        model = make_model(alphabet, 14)
        results = decode_many(
            model,
            [SourceSequence.from_text(alphabet, ""), SourceSequence.from_text(alphabet, "dog ")],
            DecodeConfig(beam_width=2),
        )
        assert results[0].tokens == ()
        assert results[0].score == 0.0
        assert not results[0].truncated
        assert len(results[1].tokens) > 0


def enumerate_best(model, source, cfg, scorer, alphabet, max_symbols):
    """Brute-force argmax over every EOS-terminated sequence."""
    eos = alphabet.eos_index
    symbols = [i for i in range(alphabet.size) if i != eos]
    best_tokens, best_score = None, -np.inf

    def walk(prefix, score, lex_state):
        nonlocal best_tokens, best_score
        probs = teacher_force(model, source, prefix)
        lex = lex_state
        total = score
        # closing the sequence here
        logp = step_log_probs(probs[len(prefix)], scorer, lex, cfg)
        closed = total + logp[eos]
        if closed > best_score:
            best_score = closed
            best_tokens = prefix + (eos,)
        if len(prefix) >= max_symbols:
            return
        for sym in symbols:
            nxt = lex
            if nxt is not None:
                nxt, _ = scorer.step(nxt, alphabet.char(sym))
            walk(prefix + (sym,), total + logp[sym], nxt)

    init = scorer.init() if (scorer is not None and cfg.use_lexicon and cfg.lam > 0) else None
    walk((), 0.0, init)
    return best_tokens, best_score


def teacher_force(model, source, tokens):
    """Per-step decoder distributions along a fixed emission path."""
    src = torch.tensor([list(source.chars)], dtype=torch.long)
    enc, enc_proj, mask, state = model.encode_projected(src, torch.tensor([len(source)]))
    coverage = torch.zeros_like(enc[..., 0])
    out = []
    y_prev = None
    for t in range(len(tokens) + 1):
        with torch.no_grad():
            p, state, _, coverage = model.decode_step(
                state, y_prev, enc, enc_proj, mask, coverage, src
            )
        out.append(p.double().numpy()[0])
        if t < len(tokens):
            y_prev = torch.tensor([tokens[t]], dtype=torch.long)
    return out


class TestExhaustive:
    @pytest.mark.parametrize("lam,seed", [(0.0, 21), (0.0, 22), (0.5, 23), (0.5, 24)])
    def test_wide_beam_equals_full_enumeration(self, lam, seed):
        alphabet = Alphabet.from_texts(["ab"])  # EOS, space?, a, b, unk
        word_lm = WordUnigramLM.from_probabilities({"ab": 0.6, "a": 0.3}, 0.1)
        # boundary set here is EOS only, so words end at end of line
        scorer = None
        if lam > 0:
            wfsa = determinize_minimize(build_wfsa(word_lm, alphabet))
            scorer = LexicalScorer(
                wfsa, CharNgramLM.train_words(["ab", "a", "b"], 2, alphabet)
            )
        model = make_model(alphabet, seed)
        source = SourceSequence.from_text(alphabet, "ab")
        # cap = 2*2 + 1 = 5 emissions, so at most 4 symbols before EOS
        cfg = DecodeConfig(
            beam_width=300, max_len_slack=1, lam=lam, use_lexicon=lam > 0
        )
        result = beam_search(model, source, cfg, scorer)
        want_tokens, want_score = enumerate_best(
            model, source, cfg, scorer, alphabet, max_symbols=4
        )
        assert not result.truncated
        assert result.tokens == want_tokens
        # forward passes run under different batch shapes, so scores agree
        # to float32 effects only
        assert result.score == approx(want_score, abs=1e-5)


class TestBeamWidth:
    @pytest.mark.parametrize("seed", [31, 32, 33])
    @pytest.mark.parametrize("lam", [0.0, 0.3])
    def test_wider_beam_never_scores_worse(self, dog_setup, seed, lam):
        alphabet, scorer = dog_setup
        model = make_model(alphabet, seed)
        source = random_sources(alphabet, 1, np.random.default_rng(seed))[0]
        cfgs = [
            DecodeConfig(beam_width=w, lam=lam, use_lexicon=lam > 0)
            for w in (1, 2, 4, 8)
        ]
        scores = [
            beam_search(model, source, c, scorer if lam > 0 else None).score
            for c in cfgs
        ]
        for narrow, wide in zip(scores, scores[1:]):
            # float32 batch-shape noise is the only allowed slack
            assert wide >= narrow - 1e-6


class TestReplay:
    @pytest.mark.parametrize("lam,cumulative", [(0.0, False), (0.4, False), (1.0, False), (0.4, True)])
    def test_stored_score_equals_replayed_sum(self, dog_setup, lam, cumulative):
        alphabet, scorer = dog_setup
        model = make_model(alphabet, 41)
        sources = random_sources(alphabet, 12, np.random.default_rng(4))
        cfg = DecodeConfig(
            beam_width=4,
            lam=lam,
            use_lexicon=lam > 0,
            lex_cumulative=cumulative,
            keep_step_probs=True,
        )
        sc = scorer if lam > 0 else None
        for result in decode_many(model, sources, cfg, sc):
            assert replay_score(alphabet, result, cfg, sc) == approx(
                result.score, abs=1e-9
            )

    def test_replay_requires_retained_distributions(self, dog_setup):
        alphabet, _ = dog_setup
        model = make_model(alphabet, 42)
        result = beam_search(
            model, SourceSequence.from_text(alphabet, "dog "), DecodeConfig(beam_width=2)
        )
        with pytest.raises(ValueError):
            replay_score(alphabet, result, DecodeConfig(beam_width=2))

    def test_truncated_partial_replays_too(self, dog_setup):
        alphabet, _ = dog_setup
        model = make_model(alphabet, 43)
        with torch.no_grad():
            model.out_proj.bias[alphabet.eos_index] = -1e9
        cfg = DecodeConfig(beam_width=2, keep_step_probs=True)
        result = beam_search(model, SourceSequence.from_text(alphabet, "dog "), cfg)
        assert result.truncated
        assert len(result.tokens) == 2 * 4 + 10
        assert replay_score(alphabet, result, cfg) == approx(result.score, abs=1e-9)


class TestCharOnlyFusion:
    def test_line_char_model_drives_decoding(self):
        alphabet = Alphabet.from_texts(["dog cat "])
        char_lm = CharNgramLM.train_lines(["dog cat", "dog dog"], 3, alphabet)
        scorer = CharOnlyScorer(char_lm, alphabet)
        model = make_model(alphabet, 51)
        cfg = DecodeConfig(beam_width=4, lam=0.5, use_lexicon=True, keep_step_probs=True)
        result = beam_search(model, SourceSequence.from_text(alphabet, "dog "), cfg, scorer)
        assert replay_score(alphabet, result, cfg, scorer) == approx(result.score, abs=1e-9)

    def test_uniform_unknown_model_is_flat(self):
        alphabet = Alphabet.from_texts(["dog cat "])
        scorer = CharOnlyScorer(UniformCharLM(alphabet), alphabet)
        scores = scorer.candidate_scores(scorer.init())
        assert np.allclose(scores, np.log(len(alphabet.symbols) + 1))


@pytest.fixture(scope="module")
def copy_setup():
    """A model trained to copy `ab ` sentences, plus a one-word lexicon.

    The lexicon prices word boundaries at zero cost from any boundary state,
    so an unnormalized joint search can end a line for free at every space.
    """
    alphabet = Alphabet.from_texts(["ab "])
    lines = ["ab ab ab ", "ab ab ", "ab ab ab ab "] * 6
    pairs = [
        (SourceSequence.from_text(alphabet, t), TargetSequence.from_text(alphabet, t))
        for t in lines
    ]
    torch.manual_seed(0)
    model = PostCorrectionModel(alphabet, SMALL)
    train(model, pairs, TrainConfig(learning_rate=5e-3, epochs=40, batch_size=4, seed=0))
    word_lm = WordUnigramLM.from_probabilities({"ab": 0.9}, 0.1)
    wfsa = determinize_minimize(build_wfsa(word_lm, alphabet))
    scorer = LexicalScorer(wfsa, CharNgramLM.train_words(["ab ab"], 2, alphabet))
    return alphabet, model, scorer


class TestLengthNormalization:
    def test_normalized_ranking_recovers_full_line(self, copy_setup):
        alphabet, model, scorer = copy_setup
        src = SourceSequence.from_text(alphabet, "ab ab ab ")
        raw = beam_search(
            model, src, DecodeConfig(beam_width=4, lam=0.5, use_lexicon=True), scorer
        )
        normed = beam_search(
            model,
            src,
            DecodeConfig(beam_width=4, lam=0.5, use_lexicon=True, length_normalize=True),
            scorer,
        )
        # free word exits let the raw ranking stop after the first boundary
        assert len(raw.tokens) < len(normed.tokens)
        assert normed.text(alphabet) == "ab ab ab "

    def test_flag_idle_without_lexical_pressure(self, copy_setup):
        alphabet, model, _ = copy_setup
        src = SourceSequence.from_text(alphabet, "ab ab ab ")
        plain = beam_search(model, src, DecodeConfig(beam_width=4))
        normed = beam_search(
            model, src, DecodeConfig(beam_width=4, length_normalize=True)
        )
        assert plain.tokens == normed.tokens
        assert plain.score == approx(normed.score, abs=1e-9)

    def test_reported_score_stays_unnormalized_total(self, copy_setup):
        alphabet, model, scorer = copy_setup
        src = SourceSequence.from_text(alphabet, "ab ab ")
        cfg = DecodeConfig(
            beam_width=4, lam=0.3, use_lexicon=True,
            length_normalize=True, keep_step_probs=True,
        )
        result = beam_search(model, src, cfg, scorer)
        assert replay_score(alphabet, result, cfg, scorer) == approx(result.score, abs=1e-9)


class TestFileRoundTrip:
    def test_decode_file_writes_one_line_per_source(self, tmp_path, dog_setup):
        alphabet, _ = dog_setup
        model = make_model(alphabet, 61)
        src_path = tmp_path / "in.txt"
        out_path = tmp_path / "out.txt"
        src_path.write_text("dog \ncat \n", encoding="utf-8")
        results = decode_file(model, src_path, out_path, DecodeConfig(beam_width=2))
        lines = out_path.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 2
        assert lines == [r.text(alphabet) for r in results]

    def test_score_column_round_trips(self, tmp_path, dog_setup):
        alphabet, _ = dog_setup
        model = make_model(alphabet, 62)
        src_path = tmp_path / "in.txt"
        out_path = tmp_path / "out.txt"
        src_path.write_text("dog \n", encoding="utf-8")
        results = decode_file(
            model, src_path, out_path, DecodeConfig(beam_width=2), with_scores=True
        )
        text, score = out_path.read_text(encoding="utf-8").splitlines()[0].rsplit("\t", 1)
        assert text == results[0].text(alphabet)
        assert float(score) == approx(results[0].score, abs=1e-6)
