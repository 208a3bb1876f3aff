"""Shared torch building blocks and the single-file checkpoint format."""

from __future__ import annotations

import math
from pathlib import Path

import torch
import torch.nn as nn

from .errors import DecodeError, ValidationError

CHECKPOINT_FORMAT = 1


def set_determinism(seed: int, threads: int = 1):
    """Pin torch seeds and thread count so reruns are bit-identical."""
    torch.manual_seed(seed)
    torch.set_num_threads(threads)


def mlp(sizes: list[int], activation=nn.LeakyReLU, layer_norm: bool = False) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            if layer_norm:
                layers.append(nn.LayerNorm(sizes[i + 1]))
            layers.append(activation())
    return nn.Sequential(*layers)


class TinySeq2Seq(nn.Module):
    """Small encoder-decoder transformer for closed-vocabulary translation."""

    def __init__(
        self,
        src_vocab: int,
        tgt_vocab: int,
        d_model: int = 64,
        enc_heads: int = 8,
        dec_heads: int = 4,
        ff_dim: int = 32,
        dropout: float = 0.15,
        max_len: int = 64,
        pad_id: int = 0,
        bos_id: int = 1,
        eos_id: int = 2,
    ):
        super().__init__()
        self.pad_id, self.bos_id, self.eos_id = pad_id, bos_id, eos_id
        self.max_len = max_len
        self.src_embed = nn.Embedding(src_vocab, d_model, padding_idx=pad_id)
        self.tgt_embed = nn.Embedding(tgt_vocab, d_model, padding_idx=pad_id)
        self.src_pos = nn.Embedding(max_len, d_model)
        self.tgt_pos = nn.Embedding(max_len, d_model)
        enc_layer = nn.TransformerEncoderLayer(
            d_model, enc_heads, ff_dim, dropout, activation="relu", batch_first=True
        )
        dec_layer = nn.TransformerDecoderLayer(
            d_model, dec_heads, ff_dim, dropout, activation="relu", batch_first=True
        )
        self.encoder = nn.TransformerEncoder(enc_layer, num_layers=1)
        self.decoder = nn.TransformerDecoder(dec_layer, num_layers=1)
        self.out = nn.Linear(d_model, tgt_vocab)

    def _positions(self, n: int, device) -> torch.Tensor:
        if n > self.max_len:
            raise ValidationError(f"sequence length {n} exceeds max_len {self.max_len}")
        return torch.arange(n, device=device)

    def encode(self, src: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        pos = self._positions(src.shape[1], src.device)
        mask = src.eq(self.pad_id)
        memory = self.encoder(self.src_embed(src) + self.src_pos(pos), src_key_padding_mask=mask)
        return memory, mask

    def forward(self, src: torch.Tensor, tgt_in: torch.Tensor) -> torch.Tensor:
        memory, src_mask = self.encode(src)
        pos = self._positions(tgt_in.shape[1], tgt_in.device)
        causal = torch.triu(
            torch.ones(tgt_in.shape[1], tgt_in.shape[1], dtype=torch.bool, device=tgt_in.device),
            diagonal=1,
        )
        h = self.decoder(
            self.tgt_embed(tgt_in) + self.tgt_pos(pos),
            memory,
            tgt_mask=causal,
            tgt_key_padding_mask=tgt_in.eq(self.pad_id),
            memory_key_padding_mask=src_mask,
        )
        return self.out(h)

    @torch.no_grad()
    def greedy_decode(self, src_ids: list[int], max_len: int | None = None) -> list[int]:
        """Decode until the end token; overflow raises DecodeError."""
        self.eval()
        max_len = max_len or self.max_len
        src = torch.tensor([src_ids], dtype=torch.long)
        memory, src_mask = self.encode(src)
        out_ids: list[int] = []
        tgt = torch.tensor([[self.bos_id]], dtype=torch.long)
        for _ in range(max_len):
            pos = self._positions(tgt.shape[1], tgt.device)
            causal = torch.triu(
                torch.ones(tgt.shape[1], tgt.shape[1], dtype=torch.bool), diagonal=1
            )
            h = self.decoder(
                self.tgt_embed(tgt) + self.tgt_pos(pos),
                memory,
                tgt_mask=causal,
                memory_key_padding_mask=src_mask,
            )
            nxt = int(self.out(h[:, -1]).argmax(dim=-1))
            if nxt == self.eos_id:
                return out_ids
            out_ids.append(nxt)
            tgt = torch.cat([tgt, torch.tensor([[nxt]])], dim=1)
        raise DecodeError(f"no end token within {max_len} steps")


def train_seq2seq(
    model: TinySeq2Seq,
    pairs: list[tuple[list[int], list[int]]],
    epochs: int,
    batch_size: int,
    lr: float,
    rng,
    log_every: int = 0,
) -> float:
    """Teacher-forced cross-entropy over (src token ids, tgt token ids) pairs.

    Returns the mean loss of the final epoch.
    """
    if not pairs:
        raise ValidationError("no training pairs")
    for src, tgt in pairs:
        if len(src) > model.max_len or len(tgt) + 1 > model.max_len:
            raise ValidationError("training pair exceeds max sequence length")
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    ce = nn.CrossEntropyLoss(ignore_index=model.pad_id)
    model.train()
    last = math.nan
    n = len(pairs)
    for _ in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for i in range(0, n, batch_size):
            batch = [pairs[j] for j in order[i : i + batch_size]]
            src_len = max(len(s) for s, _ in batch)
            tgt_len = max(len(t) for _, t in batch) + 1
            src = torch.full((len(batch), src_len), model.pad_id, dtype=torch.long)
            tin = torch.full((len(batch), tgt_len), model.pad_id, dtype=torch.long)
            tout = torch.full((len(batch), tgt_len), model.pad_id, dtype=torch.long)
            for bi, (s, t) in enumerate(batch):
                src[bi, : len(s)] = torch.tensor(s)
                tin[bi, 0] = model.bos_id
                tin[bi, 1 : len(t) + 1] = torch.tensor(t)
                tout[bi, : len(t)] = torch.tensor(t)
                tout[bi, len(t)] = model.eos_id
            logits = model(src, tin)
            loss = ce(logits.reshape(-1, logits.shape[-1]), tout.reshape(-1))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            count += 1
        last = total / max(count, 1)
    model.eval()
    return last


def save_checkpoint(path: str | Path, kind: str, config: dict, model: nn.Module, extra: dict | None = None):
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "kind": kind,
        "config": config,
        "state": model.state_dict(),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise ValidationError(
            f"checkpoint format {payload.get('format_version')} not supported"
        )
    return payload
