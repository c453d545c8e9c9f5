"""Text-modulated multi-scale fusion into a visual token sequence.

Adapted feature grids are projected to the middle scale's resolution,
modulated by the global text vector through single-key cross-attention
(with a residual path, since a one-element key makes the attention weights
identically 1), concatenated and reduced 1x1, enriched with normalized
x/y coordinate channels through a 3x3 conv, and finally run through a
small transformer over the spatial positions to produce decoder memory.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import NUM_SCALES
from .errors import ConfigError
from .layers import EncoderLayer, MultiHeadAttention, sinusoidal_positions


@dataclass
class FusionConfig:
    channels: int = 32
    num_heads: int = 4
    vit_depth: int = 3
    ffn_expansion: int = 4
    dropout: float = 0.0
    token_dim: int = 64

    def validate(self):
        if self.channels % self.num_heads != 0:
            raise ConfigError(f"fusion.channels {self.channels} not divisible by num_heads {self.num_heads}")
        if self.token_dim % self.num_heads != 0:
            raise ConfigError(f"fusion.token_dim {self.token_dim} not divisible by num_heads {self.num_heads}")
        if self.vit_depth < 1:
            raise ConfigError("fusion.vit_depth must be >= 1")
        return self


def coordinate_grid(height, width, dtype=torch.float32):
    """(2, H, W) grid of coordinates in [-1, 1]: channel 0 varies along x
    (width), channel 1 along y (height). Pure function of the shape."""
    xs = torch.linspace(-1.0, 1.0, width, dtype=dtype)
    ys = torch.linspace(-1.0, 1.0, height, dtype=dtype)
    grid_x = xs.unsqueeze(0).expand(height, width)
    grid_y = ys.unsqueeze(1).expand(height, width)
    return torch.stack([grid_x, grid_y], dim=0)


class MultiScaleFusion(nn.Module):
    """Fuses the three adapted visual scales under global-text modulation."""

    def __init__(self, visual_channels, global_dim, config: FusionConfig):
        super().__init__()
        config.validate()
        self.config = config
        c1, c2, c3 = visual_channels
        ch = config.channels
        # project every scale to the middle scale's resolution
        self.scale_projections = nn.ModuleList([
            nn.Conv2d(c1, ch, 3, stride=2, padding=1),
            nn.Conv2d(c2, ch, 1),
            nn.ConvTranspose2d(c3, ch, 2, stride=2),
        ])
        self.norm_modulate = nn.LayerNorm(ch)
        self.modulate_attn = MultiHeadAttention(ch, config.num_heads, kv_dim=global_dim)
        # modulation starts as the identity on the projected features; the
        # text path grows in during training (same anchor as the adapter)
        nn.init.zeros_(self.modulate_attn.out_proj.weight)
        nn.init.zeros_(self.modulate_attn.out_proj.bias)
        self.fuse_conv = nn.Conv2d(NUM_SCALES * ch, ch, 1)
        self.coord_conv = nn.Conv2d(ch + 2, ch, 3, padding=1)
        self.token_embed = nn.Linear(ch, config.token_dim)
        self.vit_layers = nn.ModuleList(
            EncoderLayer(config.token_dim, config.num_heads, config.ffn_expansion, config.dropout)
            for _ in range(config.vit_depth)
        )
        self.final_norm = nn.LayerNorm(config.token_dim)

    def modulate(self, fmap, text_global, return_weights=False):
        """Project one scale to the unified resolution and modulate it with
        the global text vector as a length-1 key/value sequence."""
        proj = self.scale_projections[fmap.scale_index - 1](fmap.data)
        bsz, ch, h, w = proj.shape
        seq = proj.flatten(2).transpose(1, 2)
        kv = text_global.unsqueeze(1)
        attended, weights = self.modulate_attn(self.norm_modulate(seq), kv, kv, return_weights=True)
        out = (seq + attended).transpose(1, 2).reshape(bsz, ch, h, w)
        if return_weights:
            return out, weights
        return out

    def fuse_scales(self, m1, m2, m3):
        """Concatenate the modulated scales channel-wise and reduce 1x1."""
        if not (m1.shape[2:] == m2.shape[2:] == m3.shape[2:]):
            raise ValueError(
                f"modulated scales disagree spatially: {tuple(m1.shape[2:])}, "
                f"{tuple(m2.shape[2:])}, {tuple(m3.shape[2:])}"
            )
        return self.fuse_conv(torch.cat([m1, m2, m3], dim=1))

    def add_coordinates(self, fused):
        """Concatenate the coordinate grid and reduce back with a 3x3 conv."""
        bsz, _, h, w = fused.shape
        coords = coordinate_grid(h, w, dtype=fused.dtype).to(fused.device)
        coords = coords.unsqueeze(0).expand(bsz, -1, -1, -1)
        return self.coord_conv(torch.cat([fused, coords], dim=1))

    def to_token_sequence(self, fused):
        """Flatten the grid to H*W tokens and run the transformer encoder."""
        bsz, ch, h, w = fused.shape
        tokens = self.token_embed(fused.flatten(2).transpose(1, 2))
        tokens = tokens + sinusoidal_positions(h * w, self.config.token_dim).to(
            dtype=tokens.dtype, device=tokens.device
        )
        for layer in self.vit_layers:
            tokens = layer(tokens)
        return self.final_norm(tokens)

    def forward(self, visual, text_global):
        if len(visual) != NUM_SCALES:
            raise ValueError(f"fusion expects {NUM_SCALES} scales, got {len(visual)}")
        modulated = [self.modulate(fmap, text_global) for fmap in visual]
        fused = self.fuse_scales(*modulated)
        located = self.add_coordinates(fused)
        return self.to_token_sequence(located)

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())
