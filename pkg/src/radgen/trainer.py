"""End-to-end model assembly, training loop, checkpointing, and evaluation.

The full model wires backbone -> adapter -> fusion -> decoder. During
training the teacher sequence feeds both the text encoder and the decoder
query; at inference the multimodal memory is computed once per image from
the bare [SOS] prompt and the decoder generates greedily against it.

Checkpoints are plain pickles of numpy-converted tensor namespaces plus
the config snapshot, vocabulary, optimizer state, and RNG states, so
identical runs produce byte-identical files.
"""

import json
import logging
import pickle
import random
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn

from .adapter import CrossModalAdapter
from .backbone import BackboneConfig, DualEncoderBackbone
from .data import (
    PAD_ID,
    SOS_ID,
    encode_report,
    decode_ids,
    image_tensor,
    split_examples,
    tokenize,
)
from .decoder import ReportDecoder, sequence_cross_entropy
from .errors import ConfigError, DataError, NumericError
from .fusion import MultiScaleFusion
from .metrics import score_corpus

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "radgen-checkpoint-v1"
ABLATIONS = ("none", "no_adapter", "no_pretrained")


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-5
    weight_decay: float = 0.0
    dropout: float = 0.1
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    ablation: str = "none"
    grad_clip: float = 5.0

    def validate(self):
        if self.optimizer != "adam":
            raise ConfigError(f"train.optimizer must be adam, got {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ConfigError("train.learning_rate must be positive")
        if self.weight_decay < 0 or self.dropout < 0 or self.dropout >= 1:
            raise ConfigError("train.weight_decay must be >= 0 and train.dropout in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("train.batch_size and train.epochs must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"train.ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        return self


class ReportGenerationModel(nn.Module):
    """Frozen dual encoder + adapter (optional) + fusion + report decoder."""

    def __init__(self, backbone, adapter, fusion, decoder, max_length):
        super().__init__()
        self.backbone = backbone
        self.adapter = adapter
        self.fusion = fusion
        self.decoder = decoder
        self.max_length = max_length

    @property
    def num_query_tokens(self):
        return self.max_length - 1

    def prompt_ids(self, device=None):
        """The inference-time text input: [SOS] followed by padding."""
        ids = torch.full((1, self.num_query_tokens), PAD_ID, dtype=torch.long, device=device)
        ids[0, 0] = SOS_ID
        return ids

    def encode(self, images, text_ids):
        """Multimodal memory (B, Nv, D) from images and a text sequence."""
        visual = self.backbone.encode_image(images)
        textual, text_global = self.backbone.encode_text(text_ids)
        if self.adapter is not None:
            adapted = self.adapter(visual, textual)
            visual = adapted.visual
        return self.fusion(visual, text_global)

    def forward(self, images, query_ids):
        """Teacher-forced next-token distributions (B, L, V)."""
        memory = self.encode(images, query_ids)
        return self.decoder.decode_teacher_forced(memory, query_ids)

    def generate(self, image):
        """Greedy report generation for one image tensor (C, H, W)."""
        memory = self.encode(image, self.prompt_ids())
        return self.decoder.generate(memory)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def component_parameters(self):
        """Named trainable-parameter groups, for the partition check and the
        checkpoint namespaces."""
        groups = {
            "backbone": list(self.backbone.parameters()),
            "fusion": list(self.fusion.parameters()),
            "decoder": list(self.decoder.parameters()),
        }
        if self.adapter is not None:
            groups["adapter"] = list(self.adapter.parameters())
        return groups

    def check_trainable_partition(self):
        """Trainable set must equal adapter + fusion + decoder, plus the
        backbone exactly when it is unfrozen."""
        trainable = {id(p) for p in self.trainable_parameters()}
        expected = set()
        groups = self.component_parameters()
        for name, params in groups.items():
            if name == "backbone" and self.backbone.frozen:
                continue
            expected.update(id(p) for p in params)
        if trainable != expected:
            raise RuntimeError("trainable parameter set does not match component partition")
        return {name: sum(p.numel() for p in params) for name, params in groups.items()}


def assemble(ablation, backbone_cfg, adapter_cfg, fusion_cfg, decoder_cfg):
    """Build the model for one ablation switch.

    ``no_adapter`` bypasses the adapter entirely; ``no_pretrained`` swaps in
    a randomly initialized, unfrozen stand-in backbone.
    """
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
    backbone_cfg.validate()
    decoder_cfg.validate()
    if ablation == "no_pretrained":
        backbone_cfg = BackboneConfig(**{**asdict(backbone_cfg), "variant": "stand_in",
                                         "weight_path": None, "frozen": False})
    backbone = DualEncoderBackbone(backbone_cfg)
    adapter = None
    if ablation != "no_adapter":
        adapter = CrossModalAdapter(backbone_cfg.channels, backbone_cfg.dim, adapter_cfg)
    fusion = MultiScaleFusion(backbone_cfg.channels, backbone_cfg.global_dim, fusion_cfg)
    decoder = ReportDecoder(decoder_cfg)
    return ReportGenerationModel(backbone, adapter, fusion, decoder, decoder_cfg.max_length)


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def _to_numpy_tree(obj):
    if isinstance(obj, torch.Tensor):
        return {"__tensor__": obj.detach().cpu().numpy()}
    if isinstance(obj, dict):
        return {k: _to_numpy_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_to_numpy_tree(v) for v in obj)
    return obj


def _from_numpy_tree(obj):
    if isinstance(obj, dict):
        if set(obj) == {"__tensor__"}:
            return torch.from_numpy(np.asarray(obj["__tensor__"]))
        return {k: _from_numpy_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_from_numpy_tree(v) for v in obj)
    return obj


def rng_states():
    return {
        "torch": torch.get_rng_state().numpy(),
        "numpy": np.random.get_state(),
        "python": random.getstate(),
    }


def restore_rng_states(states):
    torch.set_rng_state(torch.from_numpy(np.asarray(states["torch"])))
    np.random.set_state(states["numpy"])
    random.setstate(states["python"])


def save_checkpoint(path, model, vocab, config_snapshot, epoch=0, best_metric=None,
                    optimizer=None, rng=None):
    """Write a checkpoint with separable per-component tensor namespaces."""
    namespaces = {
        "backbone": _to_numpy_tree(dict(model.backbone.state_dict())),
        "fusion": _to_numpy_tree(dict(model.fusion.state_dict())),
        "decoder": _to_numpy_tree(dict(model.decoder.state_dict())),
    }
    if model.adapter is not None:
        namespaces["adapter"] = _to_numpy_tree(dict(model.adapter.state_dict()))
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model": namespaces,
        "vocab": vocab.tokens[4:],
        "config": config_snapshot,
        "epoch": epoch,
        "best_metric": best_metric,
        "optimizer": _to_numpy_tree(optimizer.state_dict()) if optimizer is not None else None,
        "rng": rng,
    }
    with open(path, "wb") as fh:
        pickle.dump(payload, fh, protocol=4)


def read_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            payload = pickle.load(fh)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"not a radgen checkpoint: {path}")
    return payload


def load_model_state(model, payload):
    model.backbone.load_state_dict(_from_numpy_tree(payload["model"]["backbone"]))
    model.fusion.load_state_dict(_from_numpy_tree(payload["model"]["fusion"]))
    model.decoder.load_state_dict(_from_numpy_tree(payload["model"]["decoder"]))
    if model.adapter is not None:
        if "adapter" not in payload["model"]:
            raise RuntimeError("checkpoint has no adapter namespace but the model expects one")
        model.adapter.load_state_dict(_from_numpy_tree(payload["model"]["adapter"]))
    return model


class Trainer:
    """Single-stream optimization over a prepared corpus."""

    def __init__(self, model, config: TrainConfig, vocab, examples, max_length,
                 image_root=None, log_path=None, config_snapshot=None):
        config.validate()
        self.model = model
        self.config = config
        self.vocab = vocab
        self.examples = examples
        self.max_length = max_length
        self.image_root = image_root
        self.log_path = log_path
        self.config_snapshot = config_snapshot or {}
        self.optimizer = torch.optim.Adam(
            model.trainable_parameters(),
            lr=config.learning_rate,
            weight_decay=config.weight_decay,
        )
        self.epoch = 0
        self.global_step = 0
        self.best_metric = None
        self.best_val_loss = None

    def _log(self, record):
        if self.log_path is not None:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")

    def _batch_tensors(self, batch):
        images = torch.stack([image_tensor(e, self.image_root) for e in batch])
        ids = torch.tensor(
            [encode_report(e.report, self.vocab, self.max_length) for e in batch],
            dtype=torch.long,
        )
        return images, ids[:, :-1], ids[:, 1:]

    def train_step(self, batch):
        """One optimizer step on a list of examples; returns the loss value."""
        self.model.train()
        images, query, target = self._batch_tensors(batch)
        probs = self.model(images, query)
        loss, clamped = sequence_cross_entropy(probs, target, pad_id=PAD_ID)
        if clamped:
            logger.warning("clamped %d zero target probabilities", clamped)
            self._log({"event": "clamped_probabilities", "count": clamped,
                       "batch": [e.example_id for e in batch]})
        if not torch.isfinite(loss):
            raise NumericError(
                f"non-finite loss at step {self.global_step} on batch "
                f"{[e.example_id for e in batch]}"
            )
        self.optimizer.zero_grad()
        loss.backward()
        if self.config.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.trainable_parameters(), self.config.grad_clip)
        self.optimizer.step()
        self.global_step += 1
        return float(loss.item())

    def _epoch_batches(self, split="train"):
        examples = split_examples(self.examples, split)
        order = torch.randperm(len(examples)).tolist()
        size = self.config.batch_size
        for start in range(0, len(order), size):
            yield [examples[i] for i in order[start : start + size]]

    def validation_loss(self, split="val"):
        self.model.eval()
        examples = split_examples(self.examples, split)
        total, count = 0.0, 0
        with torch.no_grad():
            for start in range(0, len(examples), self.config.batch_size):
                batch = examples[start : start + self.config.batch_size]
                images, query, target = self._batch_tensors(batch)
                probs = self.model(images, query)
                loss, _ = sequence_cross_entropy(probs, target, pad_id=PAD_ID)
                total += float(loss.item()) * len(batch)
                count += len(batch)
        return total / count

    def evaluate(self, split):
        """Greedy-decode a split and score it against the truncated references."""
        self.model.eval()
        examples = split_examples(self.examples, split)
        candidates, references, ids = [], [], []
        with torch.no_grad():
            for example in examples:
                image = image_tensor(example, self.image_root)
                result = self.model.generate(image)
                candidates.append(decode_ids(result.tokens, self.vocab).split())
                references.append(tokenize(example.report)[: self.max_length - 2])
                ids.append(example.example_id)
        return score_corpus(candidates, references, example_ids=ids)

    def train(self, checkpoint_dir=None, select_metric="bleu_4"):
        """Full loop: per-epoch training, validation-selected best checkpoint
        (BLEU-4, ties broken by lower validation loss), resumable last state."""
        counts = self.model.check_trainable_partition()
        trainable = sum(p.numel() for p in self.model.trainable_parameters())
        header = {
            "event": "start",
            "config": self.config_snapshot,
            "learning_rate": self.config.learning_rate,
            "weight_decay": self.config.weight_decay,
            "dropout": self.config.dropout,
            "batch_size": self.config.batch_size,
            "trainable_parameters": trainable,
            "component_parameters": counts,
        }
        self._log(header)
        logger.info("training: %d trainable parameters (%s)", trainable, counts)
        has_val = any(e.split == "val" for e in self.examples)
        while self.epoch < self.config.epochs:
            self.epoch += 1
            epoch_loss, batches = 0.0, 0
            for batch in self._epoch_batches():
                loss = self.train_step(batch)
                epoch_loss += loss
                batches += 1
                self._log({"epoch": self.epoch, "step": self.global_step, "loss": loss,
                           "lr": self.config.learning_rate})
            mean_loss = epoch_loss / max(batches, 1)
            improved = False
            if has_val:
                report = self.evaluate("val")
                val_bleu4 = report.bleu[3]
                val_loss = self.validation_loss("val")
                if (self.best_metric is None or val_bleu4 > self.best_metric
                        or (val_bleu4 == self.best_metric and self.best_val_loss is not None
                            and val_loss < self.best_val_loss)):
                    self.best_metric = val_bleu4
                    self.best_val_loss = val_loss
                    improved = True
                self._log({"epoch": self.epoch, "train_loss": mean_loss,
                           "val_bleu_4": val_bleu4, "val_loss": val_loss, "best": improved})
            if checkpoint_dir is not None:
                if improved or not has_val:
                    save_checkpoint(
                        f"{checkpoint_dir}/best.ckpt", self.model, self.vocab,
                        self.config_snapshot, self.epoch, self.best_metric,
                    )
                save_checkpoint(
                    f"{checkpoint_dir}/last.ckpt", self.model, self.vocab,
                    self.config_snapshot, self.epoch, self.best_metric,
                    optimizer=self.optimizer, rng=rng_states(),
                )
        return self

    def resume(self, path):
        """Restore model, optimizer, epoch counter, and RNG streams."""
        payload = read_checkpoint(path)
        load_model_state(self.model, payload)
        if payload.get("optimizer") is not None:
            self.optimizer.load_state_dict(_from_numpy_tree(payload["optimizer"]))
        self.epoch = payload["epoch"]
        self.best_metric = payload.get("best_metric")
        if payload.get("rng") is not None:
            restore_rng_states(payload["rng"])
        return self
