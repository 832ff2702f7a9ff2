"""Character-level attention encoder-decoder with a copy mechanism.

Encoder: embeddings into two unidirectional LSTMs (forward and backward kept
separate so the forward half can be pretrained alone). Decoder: additive
attention over encoder states with coverage as an extra input, an LSTM cell
fed [embedding; context], a softmax projection of the cell state, and a
scalar copy gate mixing generation with attention mass scattered onto the
source characters. Training is teacher-forced; the loss couples cross
entropy with a diagonal attention penalty and a coverage penalty.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

from .corpus import DEFAULT_BOUNDARY, Alphabet, SourceSequence, TargetSequence

torch.set_num_threads(1)  # bitwise-stable results on one core


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class ModelConfig:
    emb_dim: int = 64
    hidden_dim: int = 128
    attn_dim: int = 128
    coverage_in_attention: bool = True


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    dropout: float = 0.0
    alpha_diag: float = 1.0
    alpha_cov: float = 1.0
    clip_norm: float = 5.0
    seed: int = 0
    diag_band: float = 0.15

    def __post_init__(self) -> None:
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.alpha_diag < 0 or self.alpha_cov < 0:
            raise ValueError("loss weights must be non-negative")


def _flip_padded(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Reverse each sequence within its true length, leaving padding in place."""
    batch, time = x.shape[:2]
    pos = torch.arange(time).unsqueeze(0).expand(batch, time)
    lens = lengths.unsqueeze(1)
    idx = torch.where(pos < lens, lens - 1 - pos, pos)
    return x.gather(1, idx.unsqueeze(-1).expand_as(x))


class PostCorrectionModel(nn.Module):
    def __init__(self, alphabet: Alphabet, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.alphabet = alphabet
        self.config = config
        vocab = len(alphabet)
        e, h, a = config.emb_dim, config.hidden_dim, config.attn_dim
        self.embedding = nn.Embedding(vocab, e)
        self.fwd_encoder = nn.LSTM(e, h, batch_first=True)
        self.bwd_encoder = nn.LSTM(e, h, batch_first=True)
        self.bridge_h = nn.Linear(2 * h, h)
        self.bridge_c = nn.Linear(2 * h, h)
        self.decoder_cell = nn.LSTMCell(e + 2 * h, h)
        self.attn_enc = nn.Linear(2 * h, a, bias=True)
        self.attn_dec = nn.Linear(h, a, bias=False)
        self.attn_cov = nn.Linear(1, a, bias=False)
        self.attn_v = nn.Linear(a, 1, bias=False)
        self.out_proj = nn.Linear(h, vocab)
        self.copy_gate = nn.Linear(h + 2 * h + e, 1)
        self.start_emb = nn.Parameter(torch.zeros(e))
        self.dropout = nn.Dropout(0.0)

    def set_dropout(self, p: float) -> None:
        self.dropout.p = p

    # -- encoder ----------------------------------------------------------

    def encode(
        self, sources: torch.Tensor, lengths: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
        """Returns (states [B,N,2H], mask [B,N], initial decoder state)."""
        if (lengths < 1).any():
            raise ValueError("cannot encode an empty source sequence")
        emb = self.dropout(self.embedding(sources))
        fwd, _ = self.fwd_encoder(emb)
        bwd_in = _flip_padded(emb, lengths)
        bwd_rev, _ = self.bwd_encoder(bwd_in)
        bwd = _flip_padded(bwd_rev, lengths)
        states = torch.cat([fwd, bwd], dim=-1)
        batch, time = sources.shape
        mask = torch.arange(time).unsqueeze(0) < lengths.unsqueeze(1)
        last = (lengths - 1).view(-1, 1, 1).expand(batch, 1, fwd.shape[-1])
        summary = torch.cat([fwd.gather(1, last).squeeze(1), bwd[:, 0]], dim=-1)
        s0 = (torch.tanh(self.bridge_h(summary)), self.bridge_c(summary))
        return states, mask, s0

    # -- decoder ----------------------------------------------------------

    def _attend(
        self,
        s_h: torch.Tensor,
        enc: torch.Tensor,
        enc_proj: torch.Tensor,
        mask: torch.Tensor,
        coverage: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        query = self.attn_dec(s_h).unsqueeze(1)
        feats = enc_proj + query
        if self.config.coverage_in_attention:
            feats = feats + self.attn_cov(coverage.unsqueeze(-1))
        scores = self.attn_v(torch.tanh(feats)).squeeze(-1)
        scores = scores.masked_fill(~mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        context = torch.bmm(attn.unsqueeze(1), enc).squeeze(1)
        return attn, context

    def decode_step(
        self,
        s_prev: tuple[torch.Tensor, torch.Tensor],
        y_prev: torch.Tensor | None,
        enc: torch.Tensor,
        enc_proj: torch.Tensor,
        mask: torch.Tensor,
        coverage: torch.Tensor,
        sources: torch.Tensor,
    ) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor], torch.Tensor, torch.Tensor]:
        """One teacher-forced or search step; returns (p, state, attention, coverage)."""
        batch = enc.shape[0]
        if y_prev is None:
            emb = self.start_emb.unsqueeze(0).expand(batch, -1)
        else:
            emb = self.embedding(y_prev)
        emb = self.dropout(emb)
        attn, context = self._attend(s_prev[0], enc, enc_proj, mask, coverage)
        s_t = self.decoder_cell(torch.cat([emb, context], dim=-1), s_prev)
        gen = torch.softmax(self.out_proj(self.dropout(s_t[0])), dim=-1)
        gate = torch.sigmoid(
            self.copy_gate(torch.cat([s_t[0], context, emb], dim=-1))
        )
        copy = torch.zeros_like(gen)
        copy.scatter_add_(1, sources, attn * mask)
        p = gate * gen + (1.0 - gate) * copy
        return p, s_t, attn, coverage + attn

    def encode_projected(
        self, sources: torch.Tensor, lengths: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
        """encode() plus the precomputed attention projection of the states."""
        enc, mask, s0 = self.encode(sources, lengths)
        return enc, self.attn_enc(enc), mask, s0

    # -- losses -----------------------------------------------------------

    def training_loss(
        self,
        sources: torch.Tensor,
        src_lengths: torch.Tensor,
        targets: torch.Tensor,
        tgt_lengths: torch.Tensor,
        cfg: TrainConfig,
    ) -> tuple[torch.Tensor, dict[str, float]]:
        """Teacher-forced loss over a padded batch.

        Cross entropy, attention mass outside the relative diagonal band, and
        min(attention, accumulated coverage), all summed then divided by the
        number of real target tokens.
        """
        enc, enc_proj, mask, state = self.encode_projected(sources, src_lengths)
        batch, n = sources.shape
        t_max = int(tgt_lengths.max())
        coverage = torch.zeros_like(enc[..., 0])
        y_prev = None
        ce = torch.zeros((), dtype=enc.dtype)
        diag = torch.zeros((), dtype=enc.dtype)
        cov_pen = torch.zeros((), dtype=enc.dtype)
        positions = torch.arange(n, dtype=enc.dtype).unsqueeze(0)
        rel_src = positions / src_lengths.unsqueeze(1).to(enc.dtype)
        for t in range(t_max):
            active = (t < tgt_lengths).to(enc.dtype)
            p, state, attn, new_coverage = self.decode_step(
                state, y_prev, enc, enc_proj, mask, coverage, sources
            )
            gold = targets[:, t].clamp_min(0)
            token_logp = torch.log(p.gather(1, gold.unsqueeze(1)).squeeze(1).clamp_min(1e-12))
            ce = ce - (token_logp * active).sum()
            rel_tgt = t / tgt_lengths.to(enc.dtype)
            off_band = (rel_src - rel_tgt.unsqueeze(1)).abs() > cfg.diag_band
            diag = diag + ((attn * off_band) * active.unsqueeze(1)).sum()
            cov_pen = cov_pen + (
                torch.minimum(attn, coverage) * active.unsqueeze(1)
            ).sum()
            coverage = new_coverage
            y_prev = gold
        tokens = tgt_lengths.sum().to(enc.dtype)
        loss = (ce + cfg.alpha_diag * diag + cfg.alpha_cov * cov_pen) / tokens
        parts = {
            "ce": float(ce.detach() / tokens),
            "diag": float(diag.detach() / tokens),
            "coverage": float(cov_pen.detach() / tokens),
        }
        return loss, parts


def make_batch(
    pairs: Sequence[tuple[SourceSequence, TargetSequence]], alphabet: Alphabet
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pad a list of pairs into source/target index tensors plus lengths.

    Empty sources are padded to length 1 of unk so the encoder always sees
    one position; their true length stays recorded via the attention mask.
    """
    srcs = [list(s.chars) if len(s) else [alphabet.unk_index] for s, _ in pairs]
    tgts = [list(t.chars) for _, t in pairs]
    n = max(len(s) for s in srcs)
    t_max = max(len(t) for t in tgts)
    src = torch.full((len(pairs), n), alphabet.unk_index, dtype=torch.long)
    tgt = torch.full((len(pairs), t_max), -1, dtype=torch.long)
    for i, (s, t) in enumerate(zip(srcs, tgts)):
        src[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        tgt[i, : len(t)] = torch.tensor(t, dtype=torch.long)
    src_len = torch.tensor([len(s) for s in srcs], dtype=torch.long)
    tgt_len = torch.tensor([len(t) for t in tgts], dtype=torch.long)
    return src, src_len, tgt, tgt_len


def train(
    model: PostCorrectionModel,
    pairs: Sequence[tuple[SourceSequence, TargetSequence]],
    cfg: TrainConfig,
) -> list[float]:
    """Teacher-forced training; returns the per-epoch mean loss trace."""
    if not pairs:
        raise ValueError("empty training set")
    torch.manual_seed(cfg.seed)
    model.set_dropout(cfg.dropout)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    order = list(range(len(pairs)))
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        random.Random(cfg.seed * 100_003 + epoch).shuffle(order)
        total, batches = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            chunk = [pairs[i] for i in order[lo : lo + cfg.batch_size]]
            src, src_len, tgt, tgt_len = make_batch(chunk, model.alphabet)
            optimizer.zero_grad()
            loss, _ = model.training_loss(src, src_len, tgt, tgt_len, cfg)
            if not torch.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}", epoch)
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            optimizer.step()
            total += float(loss.detach())
            batches += 1
        trace.append(total / batches)
    model.eval()
    model.set_dropout(0.0)
    return trace


def _lm_pretrain(
    model: PostCorrectionModel,
    sequences: Sequence[Sequence[int]],
    cfg: TrainConfig,
    part: str,
) -> list[float]:
    """Next-character objective on one half of the model plus a throwaway head."""
    sequences = [s for s in sequences if len(s) > 0]
    if not sequences:
        raise ValueError("empty pretraining corpus")
    torch.manual_seed(cfg.seed)
    h = model.config.hidden_dim
    head = nn.Linear(h, len(model.alphabet))
    head.train()
    if part == "encoder":
        params = [
            {"params": model.embedding.parameters()},
            {"params": model.fwd_encoder.parameters()},
            {"params": head.parameters()},
        ]
    else:
        params = [
            {"params": model.embedding.parameters()},
            {"params": model.decoder_cell.parameters()},
            {"params": head.parameters()},
        ]
    model.set_dropout(cfg.dropout)
    model.train()
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
    order = list(range(len(sequences)))
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        random.Random(cfg.seed * 100_019 + epoch).shuffle(order)
        total, batches = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            chunk = [sequences[i] for i in order[lo : lo + cfg.batch_size]]
            n = max(len(s) for s in chunk)
            ids = torch.zeros((len(chunk), n), dtype=torch.long)
            tgt = torch.full((len(chunk), n), -1, dtype=torch.long)
            for i, s in enumerate(chunk):
                ids[i, : len(s)] = torch.tensor(list(s), dtype=torch.long)
                tgt[i, : len(s)] = torch.tensor(list(s), dtype=torch.long)
            emb = model.dropout(model.embedding(ids))
            # shift right: predict every char from its strict prefix
            shifted = torch.cat([torch.zeros_like(emb[:, :1]), emb[:, :-1]], dim=1)
            if part == "encoder":
                out, _ = model.fwd_encoder(shifted)
            else:
                zero_ctx = torch.zeros(
                    (len(chunk), 2 * h), dtype=emb.dtype
                )
                state = (
                    torch.zeros((len(chunk), h), dtype=emb.dtype),
                    torch.zeros((len(chunk), h), dtype=emb.dtype),
                )
                outs = []
                for t in range(n):
                    state = model.decoder_cell(
                        torch.cat([shifted[:, t], zero_ctx], dim=-1), state
                    )
                    outs.append(state[0])
                out = torch.stack(outs, dim=1)
            logits = head(model.dropout(out))
            loss = nn.functional.cross_entropy(
                logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), ignore_index=-1
            )
            if not torch.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}", epoch)
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_([p for g in params for p in g["params"]], cfg.clip_norm)
            optimizer.step()
            total += float(loss.detach())
            batches += 1
        trace.append(total / batches)
    model.eval()
    model.set_dropout(0.0)
    return trace


def lm_pretrain_encoder(
    model: PostCorrectionModel, sources: Sequence[SourceSequence], cfg: TrainConfig
) -> list[float]:
    return _lm_pretrain(model, [s.chars for s in sources], cfg, "encoder")


def lm_pretrain_decoder(
    model: PostCorrectionModel, targets: Sequence[TargetSequence], cfg: TrainConfig
) -> list[float]:
    return _lm_pretrain(model, [t.chars for t in targets], cfg, "decoder")


CHECKPOINT_VERSION = 1


def alphabet_hash(alphabet: Alphabet) -> str:
    blob = chr(0).join(alphabet.symbols).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(model: PostCorrectionModel, path: str | Path) -> None:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "alphabet_hash": alphabet_hash(model.alphabet),
            "symbols": list(model.alphabet.symbols),
            "extra_boundary": sorted(
                model.alphabet.boundary_symbols - set(DEFAULT_BOUNDARY)
            ),
            "config": {
                "emb_dim": model.config.emb_dim,
                "hidden_dim": model.config.hidden_dim,
                "attn_dim": model.config.attn_dim,
                "coverage_in_attention": model.config.coverage_in_attention,
            },
            "state": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path: str | Path, alphabet: Alphabet | None = None) -> PostCorrectionModel:
    blob = torch.load(path, weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {blob.get('version')}")
    if alphabet is None:
        alphabet = Alphabet.from_symbols(blob["symbols"], blob.get("extra_boundary", []))
    if alphabet_hash(alphabet) != blob["alphabet_hash"]:
        raise ValueError("checkpoint was built with a different alphabet")
    model = PostCorrectionModel(alphabet, ModelConfig(**blob["config"]))
    model.load_state_dict(blob["state"])
    model.eval()
    return model
