"""Autoregressive transformer report decoder.

Teacher-forced training consumes [SOS]-prefixed queries under a causal
mask; inference decodes greedily from [SOS] until [EOS] or the length
bound, with argmax ties broken toward the lowest token id.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .data import EOS_ID, PAD_ID, SOS_ID
from .errors import ConfigError
from .layers import FeedForward, MultiHeadAttention, causal_mask, sinusoidal_positions

PROB_EPS = 1e-12


@dataclass
class DecoderConfig:
    num_layers: int = 3
    model_dim: int = 64
    num_heads: int = 4
    max_length: int = 60
    vocab_size: int | None = None
    ffn_expansion: int = 4
    dropout: float = 0.0

    def validate(self):
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(f"decoder.model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.max_length < 2:
            raise ConfigError(f"decoder.max_length must be >= 2, got {self.max_length}")
        if self.num_layers < 1:
            raise ConfigError("decoder.num_layers must be >= 1")
        return self


@dataclass
class GenerationResult:
    """Greedy decode output: the full token sequence (including [SOS] and a
    terminal [EOS] when one was produced), the per-step distributions over
    the vocabulary, and what ended the loop."""

    tokens: list
    step_distributions: torch.Tensor
    terminated_by: str

    @property
    def content_ids(self):
        return [t for t in self.tokens if t not in (SOS_ID, EOS_ID, PAD_ID)]


class DecoderLayer(nn.Module):
    """Pre-norm decoder block: masked self-attention, cross-attention over
    the visual memory, feed-forward."""

    def __init__(self, dim, num_heads, ffn_expansion, dropout):
        super().__init__()
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, num_heads, dropout=dropout)
        self.norm_cross = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, num_heads, dropout=dropout)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_expansion, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, memory, mask):
        h = self.norm_self(x)
        x = x + self.dropout(self.self_attn(h, h, h, mask=mask))
        x = x + self.dropout(self.cross_attn(self.norm_cross(x), memory, memory))
        x = x + self.dropout(self.ffn(self.norm_ffn(x)))
        return x


class ReportDecoder(nn.Module):
    def __init__(self, config: DecoderConfig):
        super().__init__()
        config.validate()
        if config.vocab_size is None:
            raise ConfigError("decoder.vocab_size must be set before building the decoder")
        self.config = config
        dim = config.model_dim
        self.embed = nn.Embedding(config.vocab_size, dim)
        self.register_buffer("positions", sinusoidal_positions(config.max_length, dim), persistent=False)
        self.layers = nn.ModuleList(
            DecoderLayer(dim, config.num_heads, config.ffn_expansion, config.dropout)
            for _ in range(config.num_layers)
        )
        self.final_norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, config.vocab_size)
        # keep initial logits near zero so untrained predictions are
        # approximately uniform over the vocabulary
        nn.init.normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    def decode_teacher_forced(self, memory, query_ids):
        """Per-position next-token distributions (B, L, V) for a query under
        the causal mask. Position i sees query positions <= i and the whole
        visual memory."""
        if query_ids.dim() == 1:
            query_ids = query_ids.unsqueeze(0)
        length = query_ids.shape[1]
        if length > self.config.max_length:
            raise ValueError(f"query length {length} exceeds max_length {self.config.max_length}")
        x = self.embed(query_ids) * math.sqrt(self.config.model_dim)
        x = x + self.positions[:length].to(x.dtype)
        mask = causal_mask(length, device=query_ids.device)
        for layer in self.layers:
            x = layer(x, memory, mask)
        logits = self.head(self.final_norm(x))
        return torch.softmax(logits, dim=-1)

    @torch.no_grad()
    def generate(self, memory):
        """Greedy decode for a single memory (1, Nv, D).

        Starts from [SOS], appends the argmax token each step (lowest id wins
        ties), and stops on [EOS] or after max_length - 1 steps.
        """
        if self.training:
            raise RuntimeError("generate requires evaluation mode; call .eval() first")
        if memory.shape[0] != 1:
            raise ValueError(f"generate decodes one sample at a time, got batch {memory.shape[0]}")
        ids = [SOS_ID]
        distributions = []
        terminated_by = "max_length"
        for _ in range(self.config.max_length - 1):
            query = torch.tensor([ids], dtype=torch.long, device=memory.device)
            probs = self.decode_teacher_forced(memory, query)[0, -1]
            distributions.append(probs)
            next_id = int(torch.argmax(probs).item())
            ids.append(next_id)
            if next_id == EOS_ID:
                terminated_by = "eos"
                break
        return GenerationResult(ids, torch.stack(distributions), terminated_by)


def sequence_cross_entropy(probs, targets, pad_id=PAD_ID, eps=PROB_EPS):
    """Mean per-sequence cross entropy of predicted distributions.

    ``probs`` is (B, L, V), ``targets`` (B, L); positions whose target is
    ``pad_id`` are excluded, and each sequence is normalized by its own
    number of supervised positions before averaging over the batch. Target
    probabilities are clamped at ``eps``; the number of clamped positions is
    returned so callers can flag it.

    Returns (loss, num_clamped).
    """
    if probs.shape[:2] != targets.shape:
        raise ValueError(f"probs {tuple(probs.shape[:2])} and targets {tuple(targets.shape)} disagree")
    picked = probs.gather(2, targets.unsqueeze(-1)).squeeze(-1)
    mask = targets != pad_id
    if not mask.any():
        raise ValueError("no supervised positions: every target is padding")
    num_clamped = int(((picked <= eps) & mask).sum().item())
    log_p = torch.log(picked.clamp_min(eps))
    per_seq = -(log_p * mask).sum(dim=1) / mask.sum(dim=1).clamp_min(1)
    return per_seq.mean(), num_clamped
