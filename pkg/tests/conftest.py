import pytest
import torch

from radgen.adapter import AdapterConfig
from radgen.backbone import BackboneConfig
from radgen.decoder import DecoderConfig
from radgen.fusion import FusionConfig


def desk_configs(vocab_size=30, max_length=24):
    """The synthetic-preset architecture at desk scale."""
    backbone = BackboneConfig(vocab_size=vocab_size, num_tokens=max_length - 1)
    adapter = AdapterConfig(adapter_dim=32, num_heads=4)
    fusion = FusionConfig(channels=32, vit_depth=2, token_dim=64)
    decoder = DecoderConfig(num_layers=2, model_dim=64, num_heads=4,
                            max_length=max_length, vocab_size=vocab_size)
    return backbone, adapter, fusion, decoder


def tiny_configs(vocab_size=12, max_length=9):
    """Minimal config (text dim 16, 8 query tokens) for gradient checks."""
    backbone = BackboneConfig(
        vocab_size=vocab_size, num_tokens=max_length - 1, image_size=32,
        channels=(4, 8, 12), dim=16, global_dim=16, text_heads=2,
    )
    adapter = AdapterConfig(adapter_dim=8, num_heads=2)
    fusion = FusionConfig(channels=8, num_heads=2, vit_depth=1, token_dim=16)
    decoder = DecoderConfig(num_layers=1, model_dim=16, num_heads=2,
                            max_length=max_length, vocab_size=vocab_size)
    return backbone, adapter, fusion, decoder


@pytest.fixture(autouse=True)
def _fixed_seed():
    torch.manual_seed(1234)
    yield
