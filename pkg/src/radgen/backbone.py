"""Frozen dual-encoder backbone contract.

Exposes multi-scale image features, three sequential text feature blocks,
and a global text vector. Two interchangeable implementations share one
architecture: ``stand_in`` (randomly initialized, desk scale) and
``pretrained`` (same layers, weights read from an archive on disk). The
backbone is frozen by default; unfreezing is reserved for the
``no_pretrained`` ablation.
"""

import pickle
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, DataError
from .layers import EncoderLayer, sinusoidal_positions

NUM_SCALES = 3
NUM_TEXT_BLOCKS = 3
WEIGHT_ARCHIVE_FORMAT = "dual-encoder-weights-v1"


@dataclass
class FeatureMap:
    """One visual feature grid: batched tensor (B, C, H, W) plus its scale index."""

    scale_index: int
    data: torch.Tensor

    def __post_init__(self):
        if self.scale_index not in (1, 2, 3):
            raise ValueError(f"scale_index must be 1..3, got {self.scale_index}")
        if self.data.dim() != 4:
            raise ValueError(f"feature map must be (B, C, H, W), got shape {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError(f"non-finite values in feature map at scale {self.scale_index}")

    @property
    def channels(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[2]

    @property
    def width(self):
        return self.data.shape[3]


@dataclass
class TokenFeatures:
    """One text feature block: batched tensor (B, N, D) plus its block index."""

    block_index: int
    data: torch.Tensor

    def __post_init__(self):
        if self.block_index not in (1, 2, 3):
            raise ValueError(f"block_index must be 1..3, got {self.block_index}")
        if self.data.dim() != 3:
            raise ValueError(f"token features must be (B, N, D), got shape {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError(f"non-finite values in token features at block {self.block_index}")

    @property
    def num_tokens(self):
        return self.data.shape[1]

    @property
    def dim(self):
        return self.data.shape[2]


def validate_feature_pyramid(maps):
    """Check the multi-scale invariants: spatial dims halve, channels grow."""
    if len(maps) != NUM_SCALES:
        raise ValueError(f"expected {NUM_SCALES} feature maps, got {len(maps)}")
    for i, fmap in enumerate(maps, start=1):
        if fmap.scale_index != i:
            raise ValueError(f"scale indices must ascend 1..3, got {fmap.scale_index} at position {i}")
    for prev, cur in zip(maps, maps[1:]):
        if cur.height != prev.height // 2 or cur.width != prev.width // 2:
            raise ValueError(
                f"spatial dims must halve between scales: {prev.height}x{prev.width} -> {cur.height}x{cur.width}"
            )
        if cur.channels <= prev.channels:
            raise ValueError(f"channels must strictly increase: {prev.channels} -> {cur.channels}")


@dataclass
class BackboneConfig:
    """Architecture and freezing policy for the dual encoder.

    ``num_tokens`` is the text sequence length fed to the encoder: the query
    form of a report ([SOS] + content tokens, padded), i.e. max report
    length including [SOS].
    """

    variant: str = "stand_in"
    frozen: bool = True
    weight_path: str | None = None
    in_channels: int = 1
    image_size: int = 64
    channels: tuple = (8, 16, 32)
    dim: int = 32
    global_dim: int = 32
    num_tokens: int = 23
    text_heads: int = 4
    text_ffn_expansion: int = 4
    vocab_size: int | None = None
    conv_bias: bool = True

    def validate(self):
        if self.variant not in ("stand_in", "pretrained"):
            raise ConfigError(f"backbone.variant must be stand_in or pretrained, got {self.variant!r}")
        if self.variant == "pretrained" and not self.weight_path:
            raise ConfigError("backbone.variant=pretrained requires backbone.weight_path")
        if not self.frozen and self.variant == "pretrained":
            raise ConfigError("frozen=false is only valid for the stand_in variant (no_pretrained ablation)")
        if len(self.channels) != NUM_SCALES:
            raise ConfigError(f"backbone.channels must list {NUM_SCALES} values")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigError(f"backbone.channels must strictly increase, got {self.channels}")
        if self.image_size % 16 != 0:
            raise ConfigError(f"backbone.image_size must be a multiple of 16, got {self.image_size}")
        if self.dim % self.text_heads != 0:
            raise ConfigError(f"backbone.dim {self.dim} not divisible by text_heads {self.text_heads}")
        return self


class ConvImageEncoder(nn.Module):
    """Strided conv stack: a stem plus three stages, each halving the grid.
    Stage i emits (B, channels[i], H / 2^{i+1}, W / 2^{i+1})."""

    def __init__(self, in_channels, channels, bias=True):
        super().__init__()
        c1, c2, c3 = channels
        self.stem = nn.Conv2d(in_channels, c1, 3, stride=2, padding=1, bias=bias)
        self.stage1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1, bias=bias)
        self.stage2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1, bias=bias)
        self.stage3 = nn.Conv2d(c2, c3, 3, stride=2, padding=1, bias=bias)
        self.act = nn.GELU()

    def forward(self, images):
        x = self.act(self.stem(images))
        f1 = self.act(self.stage1(x))
        f2 = self.act(self.stage2(f1))
        f3 = self.act(self.stage3(f2))
        return [f1, f2, f3]


class TransformerTextEncoder(nn.Module):
    """Three-block transformer over token embeddings.

    Emits the hidden states after each block and a global vector taken from
    the last non-pad position of the final block, layer-normalized and
    linearly projected.
    """

    def __init__(self, vocab_size, num_tokens, dim, num_heads, global_dim, ffn_expansion=4, pad_id=2):
        super().__init__()
        self.pad_id = pad_id
        self.embed = nn.Embedding(vocab_size, dim)
        self.register_buffer("positions", sinusoidal_positions(num_tokens, dim), persistent=False)
        self.blocks = nn.ModuleList(
            EncoderLayer(dim, num_heads, ffn_expansion) for _ in range(NUM_TEXT_BLOCKS)
        )
        self.final_norm = nn.LayerNorm(dim)
        self.global_proj = nn.Linear(dim, global_dim)

    def forward(self, ids):
        x = self.embed(ids) + self.positions[: ids.shape[1]].to(self.embed.weight.dtype)
        states = []
        for block in self.blocks:
            x = block(x)
            states.append(x)
        non_pad = ids != self.pad_id
        last = non_pad.float().cumsum(dim=1).argmax(dim=1)
        pooled = states[-1][torch.arange(ids.shape[0]), last]
        global_vec = self.global_proj(self.final_norm(pooled))
        return states, global_vec


class DualEncoderBackbone(nn.Module):
    """Image and text encoders under one freezing policy."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        if config.vocab_size is None:
            raise ConfigError("backbone.vocab_size must be set before building the backbone")
        self.config = config
        self.image_encoder = ConvImageEncoder(config.in_channels, config.channels, bias=config.conv_bias)
        self.text_encoder = TransformerTextEncoder(
            config.vocab_size,
            config.num_tokens,
            config.dim,
            config.text_heads,
            config.global_dim,
            config.text_ffn_expansion,
        )
        if config.variant == "pretrained":
            self.load_weight_archive(config.weight_path)
        self.set_frozen(config.frozen)

    def set_frozen(self, frozen):
        self.frozen = frozen
        for param in self.parameters():
            param.requires_grad_(not frozen)

    def encode_image(self, images):
        """Extract the three-scale feature pyramid from (B, C, H, W) images.

        A single (C, H, W) image is treated as a batch of one.
        """
        if images.dim() == 3:
            images = images.unsqueeze(0)
        expected = (self.config.in_channels, self.config.image_size, self.config.image_size)
        if tuple(images.shape[1:]) != expected:
            raise ValueError(f"image shape mismatch: expected {expected}, got {tuple(images.shape[1:])}")
        if not torch.isfinite(images).all():
            raise ValueError("non-finite values in input image")
        feats = self.image_encoder(images)
        maps = [FeatureMap(i + 1, f) for i, f in enumerate(feats)]
        validate_feature_pyramid(maps)
        return maps

    def encode_text(self, ids):
        """Encode (B, N) token ids into three blocks plus the global vector."""
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        if ids.shape[1] != self.config.num_tokens:
            raise ValueError(
                f"token sequence length mismatch: expected {self.config.num_tokens}, got {ids.shape[1]}"
            )
        oov = ids >= self.config.vocab_size
        if oov.any():
            pos = oov.nonzero(as_tuple=False)[0].tolist()
            raise IndexError(
                f"token id {ids[pos[0], pos[1]].item()} at position {tuple(pos)} "
                f"exceeds vocabulary size {self.config.vocab_size}"
            )
        states, global_vec = self.text_encoder(ids)
        blocks = [TokenFeatures(i + 1, s) for i, s in enumerate(states)]
        return blocks, global_vec

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())

    def save_weight_archive(self, path):
        """Write all weights to a single archive of named tensors plus a manifest."""
        tensors = {}
        manifest = {}
        for name, param in self.state_dict().items():
            key = f"t{len(tensors)}"
            manifest[name] = key
            tensors[key] = param.detach().cpu().numpy()
        payload = {"format": WEIGHT_ARCHIVE_FORMAT, "manifest": manifest, "tensors": tensors}
        with open(path, "wb") as fh:
            pickle.dump(payload, fh, protocol=4)

    def load_weight_archive(self, path):
        """Load weights, validating presence and shape of every tensor first."""
        try:
            with open(path, "rb") as fh:
                payload = pickle.load(fh)
        except FileNotFoundError:
            raise DataError(f"backbone weight archive not found: {path}") from None
        if not isinstance(payload, dict) or payload.get("format") != WEIGHT_ARCHIVE_FORMAT:
            raise DataError(f"not a backbone weight archive: {path}")
        manifest, tensors = payload["manifest"], payload["tensors"]
        state = self.state_dict()
        loaded = {}
        for name, param in state.items():
            if name not in manifest:
                raise DataError(f"weight archive missing tensor for {name!r}")
            arr = tensors[manifest[name]]
            if tuple(arr.shape) != tuple(param.shape):
                raise DataError(
                    f"weight archive shape mismatch for {name!r}: "
                    f"archive {tuple(arr.shape)}, model {tuple(param.shape)}"
                )
            loaded[name] = torch.from_numpy(np.asarray(arr)).to(param.dtype)
        self.load_state_dict(loaded)
