"""Encoder-decoder network: shapes, distributions, gradients, training."""

import pytest
import torch

from ocrpost.corpus import Alphabet, SourceSequence, TargetSequence
from ocrpost.model import (
    ModelConfig,
    PostCorrectionModel,
    TrainConfig,
    TrainingError,
    alphabet_hash,
    lm_pretrain_decoder,
    lm_pretrain_encoder,
    load_checkpoint,
    make_batch,
    save_checkpoint,
    train,
)

TINY = ModelConfig(emb_dim=2, hidden_dim=3, attn_dim=2)
SMALL = ModelConfig(emb_dim=8, hidden_dim=12, attn_dim=8)


@pytest.fixture(scope="module")
def alphabet():
    return Alphabet.from_texts(["abcd "])


def tiny_model(alphabet, seed=0, config=TINY) -> PostCorrectionModel:
    torch.manual_seed(seed)
    model = PostCorrectionModel(alphabet, config)
    model.eval()
    return model


def encode_text(model, text):
    src = torch.tensor([[model.alphabet.index(c) for c in text]], dtype=torch.long)
    lengths = torch.tensor([len(text)])
    return src, lengths


def param_checksum(module) -> float:
    return float(sum(p.detach().abs().sum() for p in module.parameters()))


class TestEncoder:
    def test_single_char_shape(self, alphabet):
        model = tiny_model(alphabet)
        enc, mask, _ = model.encode(*encode_text(model, "a"))
        assert enc.shape == (1, 1, 2 * TINY.hidden_dim)
        assert mask.tolist() == [[True]]

    def test_deterministic_in_eval_mode(self, alphabet):
        model = tiny_model(alphabet)
        a, _, _ = model.encode(*encode_text(model, "abc"))
        b, _, _ = model.encode(*encode_text(model, "abc"))
        torch.testing.assert_close(a, b, rtol=0, atol=0)

    def test_empty_source_rejected(self, alphabet):
        model = tiny_model(alphabet)
        with pytest.raises(ValueError):
            model.encode(torch.zeros((1, 0), dtype=torch.long), torch.tensor([0]))

    def test_tied_weights_reversal_pairing(self, alphabet):
        """With tied directions, the backward states of "ab" are the forward
        states of "ba" in reverse position order."""
        model = tiny_model(alphabet)
        model.bwd_encoder.load_state_dict(model.fwd_encoder.state_dict())
        h = TINY.hidden_dim
        enc_ab, _, _ = model.encode(*encode_text(model, "ab"))
        enc_ba, _, _ = model.encode(*encode_text(model, "ba"))
        torch.testing.assert_close(enc_ab[0, 0, h:], enc_ba[0, 1, :h])
        torch.testing.assert_close(enc_ab[0, 1, h:], enc_ba[0, 0, :h])


def first_step(model, text):
    src, lengths = encode_text(model, text)
    enc, proj, mask, s0 = model.encode_projected(src, lengths)
    coverage = torch.zeros_like(enc[..., 0])
    return src, enc, proj, mask, s0, coverage


class TestDecodeStep:
    @torch.no_grad()
    def test_distributions_normalized(self, alphabet):
        model = tiny_model(alphabet)
        src, enc, proj, mask, s0, cov = first_step(model, "abc")
        p, _, attn, cov = model.decode_step(s0, None, enc, proj, mask, cov, src)
        assert p.min() >= 0
        assert float(p.sum()) == pytest.approx(1.0, abs=1e-6)
        assert attn.min() >= 0
        assert float(attn.sum()) == pytest.approx(1.0, abs=1e-6)

    @torch.no_grad()
    def test_coverage_accumulates_to_step_count(self, alphabet):
        model = tiny_model(alphabet)
        src, enc, proj, mask, state, cov = first_step(model, "abcd")
        y = None
        for step in range(5):
            p, state, _, cov = model.decode_step(state, y, enc, proj, mask, cov, src)
            y = p.argmax(dim=-1)
        assert float(cov.sum()) == pytest.approx(5.0, abs=1e-4)

    @torch.no_grad()
    def test_copy_gate_zero_reproduces_attention_scatter(self, alphabet):
        model = tiny_model(alphabet)
        with torch.no_grad():
            model.copy_gate.weight.zero_()
            model.copy_gate.bias.fill_(-500.0)  # sigmoid underflows to exactly 0
        src, enc, proj, mask, s0, cov = first_step(model, "aba")
        p, _, attn, _ = model.decode_step(s0, None, enc, proj, mask, cov, src)
        expected = torch.zeros_like(p)
        expected.scatter_add_(1, src, attn)
        torch.testing.assert_close(p, expected, rtol=0, atol=0)
        # mass lands on source characters only: 'a' gets positions 0 and 2
        a_idx = model.alphabet.index("a")
        torch.testing.assert_close(p[0, a_idx], attn[0, 0] + attn[0, 2])

    @torch.no_grad()
    def test_copy_gate_one_reproduces_generation(self, alphabet):
        model = tiny_model(alphabet)
        with torch.no_grad():
            model.copy_gate.weight.zero_()
            model.copy_gate.bias.fill_(500.0)
        src, enc, proj, mask, s0, cov = first_step(model, "ab")
        p, s_t, attn, _ = model.decode_step(s0, None, enc, proj, mask, cov, src)
        expected = torch.softmax(model.out_proj(s_t[0]), dim=-1)
        torch.testing.assert_close(p, expected, rtol=0, atol=0)

    @torch.no_grad()
    def test_attention_respects_padding_mask(self, alphabet):
        model = tiny_model(alphabet)
        pairs = [
            (SourceSequence.from_text(alphabet, "abcd"), TargetSequence.from_text(alphabet, "a")),
            (SourceSequence.from_text(alphabet, "ab"), TargetSequence.from_text(alphabet, "a")),
        ]
        src, src_len, _, _ = make_batch(pairs, alphabet)
        enc, proj, mask, s0 = model.encode_projected(src, src_len)
        cov = torch.zeros_like(enc[..., 0])
        _, _, attn, _ = model.decode_step(s0, None, enc, proj, mask, cov, src)
        assert float(attn[1, 2:].sum()) == 0.0


def batch_from_texts(alphabet, pairs):
    seqs = [
        (SourceSequence.from_text(alphabet, s), TargetSequence.from_text(alphabet, t))
        for s, t in pairs
    ]
    return make_batch(seqs, alphabet)


class TestTrainingLoss:
    def test_identity_attention_has_zero_penalties(self, alphabet):
        model = tiny_model(alphabet)
        step = {"t": 0}

        def forced_diagonal(s_h, enc, enc_proj, mask, coverage):
            attn = torch.zeros(enc.shape[0], enc.shape[1], dtype=enc.dtype)
            attn[:, step["t"]] = 1.0
            step["t"] += 1
            return attn, torch.bmm(attn.unsqueeze(1), enc).squeeze(1)

        model._attend = forced_diagonal
        src, src_len, tgt, tgt_len = batch_from_texts(alphabet, [("abc", "ab")])
        assert int(src_len[0]) == int(tgt_len[0]) == 3
        _, parts = model.training_loss(src, src_len, tgt, tgt_len, TrainConfig(epochs=0))
        assert parts["diag"] == 0.0
        assert parts["coverage"] == 0.0

    def test_anti_diagonal_attention_is_penalized(self, alphabet):
        model = tiny_model(alphabet)
        step = {"t": 0}

        def forced_antidiagonal(s_h, enc, enc_proj, mask, coverage):
            attn = torch.zeros(enc.shape[0], enc.shape[1], dtype=enc.dtype)
            attn[:, enc.shape[1] - 1 - step["t"]] = 1.0
            step["t"] += 1
            return attn, torch.bmm(attn.unsqueeze(1), enc).squeeze(1)

        model._attend = forced_antidiagonal
        src, src_len, tgt, tgt_len = batch_from_texts(alphabet, [("abc", "ab")])
        _, parts = model.training_loss(src, src_len, tgt, tgt_len, TrainConfig(epochs=0))
        assert parts["diag"] > 0.5

    def test_single_step_has_no_coverage_penalty(self, alphabet):
        model = tiny_model(alphabet)
        src, src_len, tgt, tgt_len = batch_from_texts(alphabet, [("ab", "")])
        assert int(tgt_len[0]) == 1  # EOS only
        _, parts = model.training_loss(src, src_len, tgt, tgt_len, TrainConfig(epochs=0))
        assert parts["coverage"] == 0.0

    @pytest.mark.parametrize(
        "alpha_diag,alpha_cov", [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]
    )
    def test_gradients_match_finite_differences(self, alphabet, alpha_diag, alpha_cov):
        """Central-difference oracle, double precision, <=500 parameters."""
        model = tiny_model(alphabet, seed=3).double()
        model.train()
        total_params = sum(p.numel() for p in model.parameters())
        assert total_params <= 500
        src, src_len, tgt, tgt_len = batch_from_texts(
            alphabet, [("abc", "abd"), ("da", "da")]
        )
        cfg = TrainConfig(alpha_diag=alpha_diag, alpha_cov=alpha_cov)

        def loss_value() -> float:
            loss, _ = model.training_loss(src, src_len, tgt, tgt_len, cfg)
            return float(loss.detach())

        model.zero_grad()
        model.training_loss(src, src_len, tgt, tgt_len, cfg)[0].backward()
        eps = 1e-5
        worst = 0.0
        for param in model.parameters():
            grad = param.grad
            flat = param.data.view(-1)
            gflat = grad.view(-1) if grad is not None else torch.zeros_like(flat)
            for i in range(flat.numel()):
                keep = float(flat[i])
                flat[i] = keep + eps
                up = loss_value()
                flat[i] = keep - eps
                down = loss_value()
                flat[i] = keep
                fd = (up - down) / (2 * eps)
                # floor keeps truncation noise on vanishing gradients out of
                # the relative error; real mistakes show up orders larger
                denom = max(abs(fd) + abs(float(gflat[i])), 1e-6)
                worst = max(worst, abs(fd - float(gflat[i])) / denom)
        assert worst < 1e-4


class TestTrain:
    def make_pairs(self, alphabet):
        texts = ["ab cd", "abcd", "dc ba", "a b c", "dd aa", "cab", "bad", "cad db"]
        return [
            (
                SourceSequence.from_text(alphabet, t),
                TargetSequence.from_text(alphabet, t),
            )
            for t in texts
        ]

    def test_loss_decreases_on_memorization(self, alphabet):
        model = tiny_model(alphabet, seed=1, config=SMALL)
        cfg = TrainConfig(epochs=60, seed=0, batch_size=4, learning_rate=5e-3)
        trace = train(model, self.make_pairs(alphabet), cfg)
        assert len(trace) == 60
        assert trace[-1] < trace[0] * 0.5

    def test_zero_epochs_changes_nothing(self, alphabet):
        model = tiny_model(alphabet, seed=2)
        before = param_checksum(model)
        trace = train(model, self.make_pairs(alphabet), TrainConfig(epochs=0))
        assert trace == []
        assert param_checksum(model) == before

    def test_seeded_training_is_reproducible(self, alphabet):
        results = []
        for _ in range(2):
            model = tiny_model(alphabet, seed=5)
            train(model, self.make_pairs(alphabet), TrainConfig(epochs=3, seed=9, dropout=0.1))
            results.append(param_checksum(model))
        assert results[0] == results[1]

    def test_nan_loss_raises_training_error(self, alphabet):
        model = tiny_model(alphabet, seed=1)
        with torch.no_grad():
            model.out_proj.bias[0] = float("nan")
        with pytest.raises(TrainingError) as err:
            train(model, self.make_pairs(alphabet), TrainConfig(epochs=1))
        assert err.value.epoch == 0

    def test_empty_dataset_rejected(self, alphabet):
        with pytest.raises(ValueError):
            train(tiny_model(alphabet), [], TrainConfig(epochs=1))

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(dropout=1.0)
        with pytest.raises(ValueError):
            TrainConfig(alpha_diag=-0.1)


class TestLmPretrain:
    def sources(self, alphabet, texts):
        return [SourceSequence.from_text(alphabet, t) for t in texts]

    def targets(self, alphabet, texts):
        return [TargetSequence.from_text(alphabet, t) for t in texts]

    def test_encoder_pretrain_touches_only_forward_half(self, alphabet):
        model = tiny_model(alphabet, seed=4, config=SMALL)
        before = {
            "bwd": param_checksum(model.bwd_encoder),
            "dec": param_checksum(model.decoder_cell),
            "out": param_checksum(model.out_proj),
            "emb": param_checksum(model.embedding),
            "fwd": param_checksum(model.fwd_encoder),
        }
        trace = lm_pretrain_encoder(
            model,
            self.sources(alphabet, ["abab abab"] * 6),
            TrainConfig(epochs=60, seed=1, learning_rate=5e-3),
        )
        assert param_checksum(model.bwd_encoder) == before["bwd"]
        assert param_checksum(model.decoder_cell) == before["dec"]
        assert param_checksum(model.out_proj) == before["out"]
        assert param_checksum(model.embedding) != before["emb"]
        assert param_checksum(model.fwd_encoder) != before["fwd"]
        # repeated corpus: per-character log loss heads toward zero
        assert trace[-1] < trace[0] * 0.5

    def test_decoder_pretrain_touches_only_decoder_cell(self, alphabet):
        model = tiny_model(alphabet, seed=4, config=SMALL)
        before = {
            "fwd": param_checksum(model.fwd_encoder),
            "bwd": param_checksum(model.bwd_encoder),
            "attn": param_checksum(model.attn_v),
            "out": param_checksum(model.out_proj),
            "dec": param_checksum(model.decoder_cell),
        }
        lm_pretrain_decoder(
            model, self.targets(alphabet, ["abab abab"] * 6), TrainConfig(epochs=5, seed=1)
        )
        assert param_checksum(model.fwd_encoder) == before["fwd"]
        assert param_checksum(model.bwd_encoder) == before["bwd"]
        assert param_checksum(model.attn_v) == before["attn"]
        assert param_checksum(model.out_proj) == before["out"]
        assert param_checksum(model.decoder_cell) != before["dec"]

    def test_zero_epochs_unchanged(self, alphabet):
        model = tiny_model(alphabet, seed=6)
        before = param_checksum(model)
        lm_pretrain_encoder(model, self.sources(alphabet, ["ab"]), TrainConfig(epochs=0))
        assert param_checksum(model) == before


class TestCheckpoint:
    def test_round_trip_preserves_parameters(self, tmp_path, alphabet):
        model = tiny_model(alphabet, seed=7)
        save_checkpoint(model, tmp_path / "m.pt")
        back = load_checkpoint(tmp_path / "m.pt")
        assert back.alphabet.symbols == alphabet.symbols
        for (ka, a), (kb, b) in zip(
            model.state_dict().items(), back.state_dict().items()
        ):
            assert ka == kb
            torch.testing.assert_close(a, b, rtol=0, atol=0)

    def test_load_then_save_idempotent(self, tmp_path, alphabet):
        model = tiny_model(alphabet, seed=8)
        save_checkpoint(model, tmp_path / "a.pt")
        again = load_checkpoint(tmp_path / "a.pt")
        save_checkpoint(again, tmp_path / "b.pt")
        final = load_checkpoint(tmp_path / "b.pt")
        for a, b in zip(again.state_dict().values(), final.state_dict().values()):
            torch.testing.assert_close(a, b, rtol=0, atol=0)

    def test_alphabet_mismatch_rejected(self, tmp_path, alphabet):
        model = tiny_model(alphabet)
        save_checkpoint(model, tmp_path / "m.pt")
        other = Alphabet.from_texts(["xyz "])
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "m.pt", other)

    def test_hash_is_order_sensitive(self, alphabet):
        other = Alphabet.from_texts(["dcba "])
        assert alphabet_hash(alphabet) == alphabet_hash(other)  # same symbol set
        third = Alphabet.from_texts(["abce "])
        assert alphabet_hash(alphabet) != alphabet_hash(third)
