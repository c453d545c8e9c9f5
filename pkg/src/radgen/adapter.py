"""Coupled uni- and cross-modal adapter over the frozen backbone features.

Each of the three stages runs, per modality: dimension reduction with a
residual chain from the previous stage, self-attention, cross-attention
against the other modality's reduced features followed by a feed-forward,
and dimension recovery added back onto the untouched backbone features.
Recovery projections start at zero, so a fresh adapter is exactly the
identity on both modalities.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import NUM_SCALES, FeatureMap, TokenFeatures
from .errors import ConfigError
from .layers import FeedForward, MultiHeadAttention


@dataclass
class AdapterConfig:
    adapter_dim: int = 64
    num_heads: int = 4
    ffn_expansion: int = 4
    dropout_rate: float = 0.0
    num_stages: int = NUM_SCALES

    def validate(self):
        if self.adapter_dim % self.num_heads != 0:
            raise ConfigError(
                f"adapter.adapter_dim {self.adapter_dim} not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"adapter.dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.num_stages != NUM_SCALES:
            raise ConfigError(f"adapter.num_stages must be {NUM_SCALES}")
        return self


@dataclass
class AdaptedFeatures:
    """Adapter outputs, shape-identical to the backbone features that produced
    them. ``intermediates`` optionally retains the per-stage internals
    (reduced, self-attended, cross-attended tensors) for inspection."""

    visual: list
    textual: list
    intermediates: list | None = None


def _flatten_grid(x):
    bsz, ch, h, w = x.shape
    return x.flatten(2).transpose(1, 2), (h, w)


def _unflatten_grid(x, hw):
    h, w = hw
    return x.transpose(1, 2).reshape(x.shape[0], x.shape[2], h, w)


class AdapterStage(nn.Module):
    """One scale/block of the adapter pipeline."""

    def __init__(self, visual_channels, text_dim, config: AdapterConfig):
        super().__init__()
        dim = config.adapter_dim
        self.down_visual = nn.Conv2d(visual_channels, dim, 1)
        self.down_text = nn.Linear(text_dim, dim)
        self.norm_sa_visual = nn.LayerNorm(dim)
        self.norm_sa_text = nn.LayerNorm(dim)
        self.self_attn_visual = MultiHeadAttention(dim, config.num_heads)
        self.self_attn_text = MultiHeadAttention(dim, config.num_heads)
        self.norm_q_visual = nn.LayerNorm(dim)
        self.norm_q_text = nn.LayerNorm(dim)
        self.norm_kv_visual = nn.LayerNorm(dim)
        self.norm_kv_text = nn.LayerNorm(dim)
        self.cross_attn_visual = MultiHeadAttention(dim, config.num_heads)
        self.cross_attn_text = MultiHeadAttention(dim, config.num_heads)
        self.ffn_visual = FeedForward(dim, config.ffn_expansion, config.dropout_rate)
        self.ffn_text = FeedForward(dim, config.ffn_expansion, config.dropout_rate)
        self.up_visual = nn.ConvTranspose2d(dim, visual_channels, 1)
        self.up_text = nn.Linear(dim, text_dim)
        # recovery starts at zero so the stage is the identity at init
        nn.init.zeros_(self.up_visual.weight)
        nn.init.zeros_(self.up_visual.bias)
        nn.init.zeros_(self.up_text.weight)
        nn.init.zeros_(self.up_text.bias)

    def down(self, features, prev=None):
        """Reduce one stage's features, chaining the previous stage's output.

        Visual grids are reduced channel-wise (1x1 conv) and the previous
        reduced grid is average-resampled to this stage's resolution before
        the add; text blocks are reduced with a linear map and added as is.
        """
        if isinstance(features, FeatureMap):
            reduced = self.down_visual(features.data)
            if prev is not None:
                if prev.dim() != 4:
                    raise ValueError(f"previous visual stage must be a grid, got shape {tuple(prev.shape)}")
                reduced = reduced + F.adaptive_avg_pool2d(prev, reduced.shape[2:])
            return reduced
        if isinstance(features, TokenFeatures):
            reduced = self.down_text(features.data)
            if prev is not None:
                if prev.shape != reduced.shape:
                    raise ValueError(
                        f"previous text stage shape {tuple(prev.shape)} != {tuple(reduced.shape)}"
                    )
                reduced = reduced + prev
            return reduced
        raise TypeError(f"expected FeatureMap or TokenFeatures, got {type(features).__name__}")

    def self_attend(self, reduced, return_weights=False):
        """Self-attention in the reduced space. Grids are flattened to
        row-major position sequences and restored afterwards."""
        if not torch.isfinite(reduced).all():
            raise ValueError("non-finite values in self-attention input")
        grid_hw = None
        seq = reduced
        if reduced.dim() == 4:
            seq, grid_hw = _flatten_grid(reduced)
            attn, norm = self.self_attn_visual, self.norm_sa_visual
        else:
            attn, norm = self.self_attn_text, self.norm_sa_text
        h = norm(seq)
        out, weights = attn(h, h, h, return_weights=True)
        if grid_hw is not None:
            out = _unflatten_grid(out, grid_hw)
        if return_weights:
            return out, weights
        return out

    def cross_attend(self, query, key_value, query_modality, kv_modality, return_weights=False):
        """Cross-attention from one modality's self-attended features onto the
        other's reduced features, followed by the feed-forward."""
        if query_modality == kv_modality:
            raise ValueError(f"cross-attention requires distinct modalities, got {query_modality!r} twice")
        grid_hw = None
        q_seq = query
        if query.dim() == 4:
            q_seq, grid_hw = _flatten_grid(query)
        kv_seq = key_value
        if key_value.dim() == 4:
            kv_seq, _ = _flatten_grid(key_value)
        if query_modality == "visual":
            attn, ffn = self.cross_attn_visual, self.ffn_visual
            q_norm, kv_norm = self.norm_q_visual, self.norm_kv_text
        else:
            attn, ffn = self.cross_attn_text, self.ffn_text
            q_norm, kv_norm = self.norm_q_text, self.norm_kv_visual
        kv = kv_norm(kv_seq)
        out, weights = attn(q_norm(q_seq), kv, kv, return_weights=True)
        out = ffn(out)
        if grid_hw is not None:
            out = _unflatten_grid(out, grid_hw)
        if return_weights:
            return out, weights
        return out

    def up_inject(self, cross_attended, original):
        """Recover the backbone dimension and add onto the original features."""
        if isinstance(original, FeatureMap):
            recovered = self.up_visual(cross_attended)
            if recovered.shape != original.data.shape:
                raise ValueError(
                    f"recovered shape {tuple(recovered.shape)} != original {tuple(original.data.shape)}"
                )
            # deconv output is channels_last on CPU; restore the standard
            # layout so downstream convs run the same kernels as on the
            # untouched backbone features
            return FeatureMap(original.scale_index, (recovered + original.data).contiguous())
        recovered = self.up_text(cross_attended)
        if recovered.shape != original.data.shape:
            raise ValueError(
                f"recovered shape {tuple(recovered.shape)} != original {tuple(original.data.shape)}"
            )
        return TokenFeatures(original.block_index, recovered + original.data)

    def forward(self, fmap, tfeat, prev_visual=None, prev_text=None):
        reduced_v = self.down(fmap, prev_visual)
        reduced_t = self.down(tfeat, prev_text)
        sa_v = self.self_attend(reduced_v)
        sa_t = self.self_attend(reduced_t)
        ca_v = self.cross_attend(sa_v, reduced_t, "visual", "text")
        ca_t = self.cross_attend(sa_t, reduced_v, "text", "visual")
        out_v = self.up_inject(ca_v, fmap)
        out_t = self.up_inject(ca_t, tfeat)
        internals = {
            "reduced_visual": reduced_v,
            "reduced_text": reduced_t,
            "self_attended_visual": sa_v,
            "self_attended_text": sa_t,
            "cross_attended_visual": ca_v,
            "cross_attended_text": ca_t,
        }
        return out_v, out_t, internals


class CrossModalAdapter(nn.Module):
    """Three chained adapter stages over the backbone's scales and blocks."""

    def __init__(self, visual_channels, text_dim, config: AdapterConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.stages = nn.ModuleList(
            AdapterStage(ch, text_dim, config) for ch in visual_channels
        )

    def forward(self, visual, textual, return_intermediates=False):
        if len(visual) != NUM_SCALES or len(textual) != NUM_SCALES:
            raise ValueError(
                f"adapter expects {NUM_SCALES} visual scales and {NUM_SCALES} text blocks, "
                f"got {len(visual)} and {len(textual)}"
            )
        out_visual, out_textual, intermediates = [], [], []
        prev_v = prev_t = None
        for stage, fmap, tfeat in zip(self.stages, visual, textual):
            out_v, out_t, internals = stage(fmap, tfeat, prev_v, prev_t)
            prev_v = internals["reduced_visual"]
            prev_t = internals["reduced_text"]
            out_visual.append(out_v)
            out_textual.append(out_t)
            if return_intermediates:
                intermediates.append(internals)
        return AdaptedFeatures(out_visual, out_textual, intermediates if return_intermediates else None)

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())
