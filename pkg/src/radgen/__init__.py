"""Radiology report generation with cross-modal adapters on a frozen
dual-encoder backbone."""

from .adapter import AdaptedFeatures, AdapterConfig, CrossModalAdapter
from .backbone import BackboneConfig, DualEncoderBackbone, FeatureMap, TokenFeatures
from .config import RunConfig, load_run_config, merge_config_tree
from .data import DatasetConfig, Vocabulary, encode_report, decode_ids, generate_synthetic_corpus, tokenize
from .decoder import DecoderConfig, GenerationResult, ReportDecoder, sequence_cross_entropy
from .fusion import FusionConfig, MultiScaleFusion, coordinate_grid
from .metrics import ScoreReport, bleu, meteor, rouge_l, score_corpus
from .trainer import TrainConfig, Trainer, ReportGenerationModel, assemble

__version__ = "0.1.0"

__all__ = [
    "AdaptedFeatures",
    "AdapterConfig",
    "BackboneConfig",
    "CrossModalAdapter",
    "DatasetConfig",
    "DecoderConfig",
    "DualEncoderBackbone",
    "FeatureMap",
    "FusionConfig",
    "GenerationResult",
    "MultiScaleFusion",
    "ReportDecoder",
    "ReportGenerationModel",
    "RunConfig",
    "ScoreReport",
    "TokenFeatures",
    "TrainConfig",
    "Trainer",
    "Vocabulary",
    "assemble",
    "bleu",
    "coordinate_grid",
    "decode_ids",
    "encode_report",
    "generate_synthetic_corpus",
    "load_run_config",
    "merge_config_tree",
    "meteor",
    "rouge_l",
    "score_corpus",
    "sequence_cross_entropy",
    "tokenize",
]
