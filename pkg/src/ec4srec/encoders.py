"""Sequence encoders (self-attention, GRU, Caser-style CNN) behind one recommender module.

All encoders take left-padded id matrices. Item embeddings are tied between input
and output, so the score of item ``v`` for a sequence is ``h_u . E[v]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .data import MASK, N_RESERVED, PAD

logger = logging.getLogger(__name__)

FLOAT_MIN = -1e9


class UnsupportedOperation(RuntimeError):
    pass


@dataclass
class EncoderSpec:
    kind: str = "self-attention"  # self-attention | recurrent | convolutional
    d: int = 64
    layers: int = 2
    heads: int = 2
    max_len: int = 50
    dropout: float = 0.2
    conv_heights: tuple[int, ...] = (1, 2, 3, 4)
    conv_channels: int = 4

    def __post_init__(self):
        if self.kind not in ENCODERS:
            raise ValueError(f"unknown encoder kind {self.kind!r}; expected one of {sorted(ENCODERS)}")
        if self.d <= 0:
            raise ValueError("d must be positive")
        if self.kind == "self-attention" and self.d % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide d ({self.d})")
        self.conv_heights = tuple(int(h) for h in self.conv_heights)


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = d // heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, queries, keys, attn_mask):
        B, L, d = queries.shape

        def split(x):
            return x.view(B, L, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q(queries)), split(self.k(keys)), split(self.v(keys))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~attn_mask[:, None], FLOAT_MIN)
        weights = torch.softmax(scores, dim=-1)
        out = self.dropout(weights) @ v
        out = out.transpose(1, 2).reshape(B, L, d)
        return self.out(out), weights


class SelfAttentionBlock(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.attn_norm = nn.LayerNorm(d, eps=1e-8)
        self.attn = MultiHeadAttention(d, heads, dropout)
        self.ffn_norm = nn.LayerNorm(d, eps=1e-8)
        self.ffn = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Dropout(dropout), nn.Linear(d, d), nn.Dropout(dropout))

    def forward(self, x, attn_mask, keep):
        q = self.attn_norm(x)
        a, weights = self.attn(q, x, attn_mask)
        x = q + a
        x = self.ffn_norm(x)
        x = (x + self.ffn(x)) * keep
        return x, weights


class SelfAttentionEncoder(nn.Module):
    """SASRec-style causal transformer. Positions are counted back from the
    most recent item, which makes the output independent of left-padding."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.pos = nn.Embedding(spec.max_len, spec.d)
        self.emb_dropout = nn.Dropout(spec.dropout)
        self.blocks = nn.ModuleList(SelfAttentionBlock(spec.d, spec.heads, spec.dropout) for _ in range(spec.layers))
        self.final_norm = nn.LayerNorm(spec.d, eps=1e-8)

    def forward(self, emb, valid, return_attention=False):
        B, L, _ = emb.shape
        pos_ids = torch.arange(L - 1, -1, -1, device=emb.device).clamp(max=self.pos.num_embeddings - 1)
        keep = valid[..., None].to(emb.dtype)
        x = self.emb_dropout(emb + self.pos(pos_ids)[None]) * keep
        causal = torch.tril(torch.ones(L, L, dtype=torch.bool, device=emb.device))
        attn_mask = causal[None] & valid[:, None, :]
        weights = None
        for block in self.blocks:
            x, weights = block(x, attn_mask, keep)
        h = self.final_norm(x[:, -1])
        if return_attention:
            return h, weights[:, :, -1, :]
        return h


class RecurrentEncoder(nn.Module):
    """GRU4Rec-style encoder; the final hidden state over the real items is h_u."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.emb_dropout = nn.Dropout(spec.dropout)
        self.gru = nn.GRU(spec.d, spec.d, num_layers=spec.layers, batch_first=True,
                          dropout=spec.dropout if spec.layers > 1 else 0.0)
        self.proj = nn.Linear(spec.d, spec.d)

    def forward(self, emb, valid):
        B, L, d = emb.shape
        lengths = valid.sum(1)
        # left-padded -> right-padded so packing starts at the first real item
        shift = (torch.arange(L, device=emb.device)[None] + (L - lengths)[:, None]) % L
        emb = torch.gather(emb, 1, shift[..., None].expand(B, L, d))
        packed = nn.utils.rnn.pack_padded_sequence(
            self.emb_dropout(emb), lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        _, h_n = self.gru(packed)
        return self.proj(h_n[-1])


class ConvolutionalEncoder(nn.Module):
    """Caser-style encoder over the last ``max_len`` positions: horizontal filters of
    several heights (max-pooled) and one vertical filter bank, followed by a dense layer.
    The user-embedding term of the original model is omitted (no user features)."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.window = spec.max_len
        self.heights = [h for h in spec.conv_heights if h <= self.window]
        n_h, n_v = spec.conv_channels, spec.conv_channels
        self.horizontal = nn.ModuleList(nn.Conv2d(1, n_h, (h, spec.d)) for h in self.heights)
        self.vertical = nn.Conv2d(1, n_v, (self.window, 1))
        self.dropout = nn.Dropout(spec.dropout)
        self.fc = nn.Linear(n_v * spec.d + n_h * len(self.heights), spec.d)

    def forward(self, emb, valid):
        B, L, d = emb.shape
        emb = emb * valid[..., None].to(emb.dtype)
        if L >= self.window:
            emb = emb[:, L - self.window:]
        else:
            emb = F.pad(emb, (0, 0, self.window - L, 0))
        x = emb[:, None]  # (B, 1, W, d)
        out_v = self.vertical(x).reshape(B, -1)
        out_h = [F.relu(conv(x).squeeze(3)).max(dim=2).values for conv in self.horizontal]
        z = torch.cat([out_v, *out_h], dim=1)
        return F.relu(self.fc(self.dropout(z)))


ENCODERS = {
    "self-attention": SelfAttentionEncoder,
    "recurrent": RecurrentEncoder,
    "convolutional": ConvolutionalEncoder,
}


class SequenceRecommender(nn.Module):
    def __init__(self, spec: EncoderSpec, vocab_size: int):
        super().__init__()
        self.spec = spec
        self.vocab_size = vocab_size
        self.item_emb = nn.Embedding(vocab_size, spec.d, padding_idx=PAD)
        self.encoder = ENCODERS[spec.kind](spec)
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module):
        if isinstance(module, (nn.Linear, nn.Embedding)):
            module.weight.data.normal_(0.0, 0.02)
            if isinstance(module, nn.Linear) and module.bias is not None:
                module.bias.data.zero_()
            if isinstance(module, nn.Embedding) and module.padding_idx is not None:
                module.weight.data[module.padding_idx].zero_()
        elif isinstance(module, nn.LayerNorm):
            module.bias.data.zero_()
            module.weight.data.fill_(1.0)

    @property
    def item_table(self) -> torch.Tensor:
        return self.item_emb.weight

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        return self.item_emb(ids)

    def encode_embedded(self, emb: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """Encode already-embedded inputs (B, L, d); rows without real items map to zero."""
        has_items = valid.any(dim=1)
        if bool(has_items.all()):
            return self.encoder(emb, valid)
        logger.warning("%d all-padding rows encoded as zero vectors", int((~has_items).sum()))
        h = emb.new_zeros(emb.shape[0], self.spec.d)
        if bool(has_items.any()):
            h = h.index_put((has_items.nonzero().squeeze(1),), self.encoder(emb[has_items], valid[has_items]))
        return h

    def encode(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.numel() and (int(ids.max()) >= self.vocab_size or int(ids.min()) < 0):
            raise IndexError("item id out of range for the embedding table")
        return self.encode_embedded(self.embed(ids), ids != PAD)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.encode(ids)

    def logits(self, h: torch.Tensor) -> torch.Tensor:
        """Scores over the real items only; column j is item j + N_RESERVED."""
        return h @ self.item_table[N_RESERVED:].T

    def target_score(self, ids: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        """Pre-softmax score f(seq, target) used by the explanation methods."""
        return (self.encode(ids) * self.item_emb(targets)).sum(-1)

    def target_score_embedded(self, emb, valid, targets):
        return (self.encode_embedded(emb, valid) * self.item_emb(targets)).sum(-1)

    def attention_weights(self, ids: torch.Tensor) -> torch.Tensor:
        """Last-layer attention of the final position, averaged over heads; (B, L)."""
        if self.spec.kind != "self-attention":
            raise UnsupportedOperation(f"attention weights need a self-attention encoder, not {self.spec.kind!r}")
        valid = ids != PAD
        _, weights = self.encoder(self.embed(ids), valid, return_attention=True)
        return heads_mean(weights, valid)


def heads_mean(weights: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Average per-head weights (B, H, L) and zero padding positions exactly."""
    return weights.mean(dim=1) * valid.to(weights.dtype)


def score_items(h: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """Dot-product scores over the full vocabulary with reserved ids set to -inf."""
    if h.shape[-1] != table.shape[-1]:
        raise ValueError(f"dimension mismatch: h has {h.shape[-1]}, table has {table.shape[-1]}")
    scores = h @ table.T
    scores[..., :N_RESERVED] = float("-inf")
    return scores


def predict_next(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Top-k ids by descending score; equal scores keep ascending id order."""
    n_real = scores.shape[-1] - N_RESERVED
    if k > n_real:
        raise ValueError(f"k={k} exceeds the {n_real} real items")
    order = torch.sort(scores, dim=-1, descending=True, stable=True).indices
    return order[..., :k]


__all__ = [
    "EncoderSpec",
    "SequenceRecommender",
    "UnsupportedOperation",
    "score_items",
    "predict_next",
    "heads_mean",
    "MASK",
]
