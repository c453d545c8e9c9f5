"""Shared transformer building blocks: attention, feed-forward, positions."""

import math

import torch
import torch.nn as nn


def sinusoidal_positions(length, dim, dtype=torch.float32):
    """Fixed sine/cosine position table of shape (length, dim).

    Even feature indices carry sin, odd indices cos, with the classic
    10000^(2i/dim) frequency spacing. Deterministic function of (length, dim).
    """
    position = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    half = torch.arange(0, dim, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * half / dim)
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * freq)
    table[:, 1::2] = torch.cos(position * freq[: dim // 2])
    return table.to(dtype)


class MultiHeadAttention(nn.Module):
    """Multi-head scaled dot-product attention with separate q/k/v/out maps.

    Key/value inputs may live in a different dimension than queries
    (``kv_dim``); outputs are always in ``dim``. ``forward`` can return the
    per-head attention weights, which are row-stochastic by construction.
    """

    def __init__(self, dim, num_heads, kv_dim=None, dropout=0.0):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        kv_dim = dim if kv_dim is None else kv_dim
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(kv_dim, dim)
        self.v_proj = nn.Linear(kv_dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query, key, value, mask=None, return_weights=False):
        """Attend queries (B, Lq, dim) over keys/values (B, Lk, kv_dim).

        ``mask`` is a bool tensor broadcastable to (Lq, Lk); True entries are
        blocked with -inf before the softmax.
        """
        bsz, q_len, _ = query.shape
        k_len = key.shape[1]

        def split(x):
            return x.view(bsz, -1, self.num_heads, self.head_dim).transpose(1, 2)

        q = split(self.q_proj(query))
        k = split(self.k_proj(key))
        v = split(self.v_proj(value))
        scores = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        if mask is not None:
            scores = scores.masked_fill(mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        attended = torch.matmul(self.dropout(weights), v)
        attended = attended.transpose(1, 2).reshape(bsz, q_len, self.dim)
        out = self.out_proj(attended)
        if return_weights:
            return out, weights
        return out


class FeedForward(nn.Module):
    """Two linear layers around a GELU, widened by ``expansion``."""

    def __init__(self, dim, expansion=4, dropout=0.0):
        super().__init__()
        hidden = dim * expansion
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.act = nn.GELU()
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.dropout(self.act(self.fc1(x))))


class EncoderLayer(nn.Module):
    """Pre-norm transformer encoder layer (self-attention + feed-forward)."""

    def __init__(self, dim, num_heads, ffn_expansion=4, dropout=0.0):
        super().__init__()
        self.norm_attn = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads, dropout=dropout)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_expansion, dropout=dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        h = self.norm_attn(x)
        x = x + self.dropout(self.attn(h, h, h))
        x = x + self.dropout(self.ffn(self.norm_ffn(x)))
        return x


def causal_mask(length, device=None):
    """Bool (length, length) mask, True above the diagonal (blocked future)."""
    return torch.triu(torch.ones(length, length, dtype=torch.bool, device=device), diagonal=1)
