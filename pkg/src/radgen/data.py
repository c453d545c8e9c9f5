"""Corpus handling: tokenization, vocabulary, report encoding, the bundled
synthetic corpus, and manifest files for real datasets.

Reports are lowercased, punctuation-stripped except sentence periods, and
whitespace-tokenized. Vocabulary ids are frequency-descending with
alphabetical tie-breaks after the four reserved markers.
"""

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError

SOS_TOKEN, EOS_TOKEN, PAD_TOKEN, UNK_TOKEN = "[SOS]", "[EOS]", "[PAD]", "[UNK]"
SOS_ID, EOS_ID, PAD_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = (SOS_TOKEN, EOS_TOKEN, PAD_TOKEN, UNK_TOKEN)

SPLITS = ("train", "val", "test")

SYNTHETIC_IMAGE_SIZE = 64
_SHAPES = ("circle", "cross", "square", "triangle")
_SIZES = ("small", "large")
_VPOS = ("upper", "lower")
_HPOS = ("left", "right")
_SIZE_RADIUS = {"small": 6, "large": 12}


def tokenize(text):
    """Lowercase, drop punctuation except periods (kept as their own token),
    split on whitespace."""
    text = text.lower()
    text = re.sub(r"[^a-z0-9.\s]", " ", text)
    text = text.replace(".", " . ")
    return text.split()


class Vocabulary:
    """Token <-> id map with fixed reserved markers at ids 0..3.

    Content tokens get ids 4.. in build order; only tokens whose corpus
    frequency is strictly greater than ``min_frequency`` are retained.
    """

    def __init__(self, content_tokens, min_frequency=None):
        self.min_frequency = min_frequency
        self._tokens = list(RESERVED_TOKENS) + list(content_tokens)
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise DataError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, token_streams, min_frequency):
        """Build from one or more token streams (consolidation = counting
        over their concatenation)."""
        counts = Counter()
        for stream in token_streams:
            counts.update(stream)
        if not counts:
            raise DataError("cannot build a vocabulary from an empty corpus")
        retained = [t for t, c in counts.items() if c > min_frequency and t not in RESERVED_TOKENS]
        retained.sort(key=lambda t: (-counts[t], t))
        return cls(retained, min_frequency)

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._ids

    @property
    def tokens(self):
        return list(self._tokens)

    def id_for(self, token):
        return self._ids.get(token, UNK_ID)

    def token_for(self, token_id):
        return self._tokens[token_id]

    def save(self, path):
        """One content token per line; id = line number + reserved count."""
        with open(path, "w", encoding="utf-8") as fh:
            for token in self._tokens[len(RESERVED_TOKENS):]:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                lines = [line.strip() for line in fh if line.strip()]
        except FileNotFoundError:
            raise DataError(f"vocabulary file not found: {path}") from None
        return cls(lines)


def encode_report(text, vocab, max_length):
    """[SOS] + token ids (+[UNK] for unknowns) + [EOS], truncated to keep the
    report prefix and always end with [EOS], padded to exactly max_length."""
    tokens = tokenize(text)[: max_length - 2]
    ids = [SOS_ID] + [vocab.id_for(t) for t in tokens] + [EOS_ID]
    ids.extend([PAD_ID] * (max_length - len(ids)))
    return ids

def decode_ids(ids, vocab):
    """Token ids back to text; markers are stripped and decoding stops at the
    first [EOS]."""
    words = []
    for token_id in ids:
        if token_id == EOS_ID:
            break
        if token_id in (SOS_ID, PAD_ID):
            continue
        words.append(vocab.token_for(int(token_id)))
    return " ".join(words)


@dataclass
class CorpusExample:
    """One image/report pair. ``image`` is either a synthetic parameter dict
    or a file path (relative to the corpus root)."""

    example_id: str
    image: dict | str
    report: str
    split: str


@dataclass
class DatasetConfig:
    name: str = "synthetic"
    max_length: int = 24
    min_frequency: int = 3
    consolidate_vocab: bool = False
    manifest_path: str | None = None
    extra_manifests: list = field(default_factory=list)
    synthetic_size: int = 100
    synthetic_seed: int = 7

    def validate(self):
        if self.name not in ("iu_xray", "mimic_cxr", "synthetic"):
            raise ConfigError(f"data.name must be iu_xray, mimic_cxr or synthetic, got {self.name!r}")
        if self.max_length < 4:
            raise ConfigError(f"data.max_length must be >= 4, got {self.max_length}")
        if self.min_frequency < 0:
            raise ConfigError("data.min_frequency must be >= 0")
        if self.name != "synthetic" and not self.manifest_path:
            raise ConfigError(f"data.name={self.name} requires data.manifest_path")
        return self


def _report_for(combo):
    return (
        f"there is a {combo['size']} {combo['shape']} in the "
        f"{combo['vpos']} {combo['hpos']} region . no other findings ."
    )


def render_synthetic_image(params):
    """Deterministic 8-bit grayscale raster of one parametric shape."""
    side = SYNTHETIC_IMAGE_SIZE
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64)
    radius = float(_SIZE_RADIUS[params["size"]])
    cy = side // 4 if params["vpos"] == "upper" else 3 * side // 4
    cx = side // 4 if params["hpos"] == "left" else 3 * side // 4
    cy += params.get("jitter_y", 0)
    cx += params.get("jitter_x", 0)
    dx, dy = xs - cx, ys - cy
    shape = params["shape"]
    if shape == "circle":
        mask = dx**2 + dy**2 <= radius**2
    elif shape == "square":
        mask = (np.abs(dx) <= radius * 0.9) & (np.abs(dy) <= radius * 0.9)
    elif shape == "triangle":
        drop = dy + radius  # distance below the apex
        mask = (drop >= 0) & (drop <= 2 * radius) & (np.abs(dx) <= drop / 2)
    elif shape == "cross":
        arm = radius / 3.0
        mask = ((np.abs(dx) <= arm) & (np.abs(dy) <= radius)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= radius)
        )
    else:
        raise ValueError(f"unknown shape {shape!r}")
    image = np.zeros((side, side), dtype=np.uint8)
    image[mask] = 255
    return image


def generate_synthetic_corpus(seed, size):
    """Deterministic corpus of shape images and matching template reports.

    Attribute combinations are partitioned across splits before sampling, so
    no report text is shared between train/val/test. Splits are a fixed
    70/10/20 of ``size``.
    """
    if size < 10:
        raise ValueError(f"synthetic corpus size must be >= 10, got {size}")
    rng = np.random.default_rng(seed)
    combos = [
        {"shape": sh, "size": sz, "vpos": vp, "hpos": hp}
        for sh in _SHAPES
        for sz in _SIZES
        for vp in _VPOS
        for hp in _HPOS
    ]
    order = rng.permutation(len(combos))
    combos = [combos[i] for i in order]
    pools = {
        "train": combos[:22],
        "val": combos[22:25],
        "test": combos[25:],
    }
    n_train = int(size * 0.7)
    n_val = int(size * 0.1)
    counts = {"train": n_train, "val": n_val, "test": size - n_train - n_val}
    examples = []
    for split in SPLITS:
        pool = pools[split]
        for i in range(counts[split]):
            combo = pool[i % len(pool)]
            jitter = rng.integers(-3, 4, size=2)
            params = dict(combo, jitter_x=int(jitter[0]), jitter_y=int(jitter[1]))
            examples.append(
                CorpusExample(
                    example_id=f"{split}-{i:04d}",
                    image=params,
                    report=_report_for(combo),
                    split=split,
                )
            )
    return examples


def load_image_array(example, root=None):
    """8-bit grayscale pixels for an example, rendered or read from disk."""
    if isinstance(example.image, dict):
        return render_synthetic_image(example.image)
    path = Path(root or ".") / example.image
    if not path.exists():
        raise DataError(f"image for example {example.example_id!r} not found: {path}")
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


def image_tensor(example, root=None):
    """Float (1, H, W) tensor in [0, 1], identical whether the image comes
    from the renderer or from a saved file."""
    array = load_image_array(example, root)
    return torch.from_numpy(array.astype(np.float32) / 255.0).unsqueeze(0)


def write_manifest(examples, path):
    records = [
        {"id": e.example_id, "image_path": e.image, "report": e.report, "split": e.split}
        for e in examples
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_manifest(path):
    try:
        with open(path, encoding="utf-8") as fh:
            records = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from None
    examples = []
    for rec in records:
        missing = {"id", "image_path", "report", "split"} - set(rec)
        if missing:
            raise DataError(f"manifest record {rec.get('id', '?')!r} missing fields {sorted(missing)}")
        if rec["split"] not in SPLITS:
            raise DataError(f"example {rec['id']!r} has unknown split {rec['split']!r}")
        examples.append(CorpusExample(rec["id"], rec["image_path"], rec["report"], rec["split"]))
    return examples


def validate_corpus(examples, root=None):
    """Check split tags and that every referenced image resolves."""
    if not examples:
        raise DataError("corpus is empty")
    for example in examples:
        if isinstance(example.image, str):
            path = Path(root or ".") / example.image
            if not path.exists():
                raise DataError(f"image for example {example.example_id!r} not found: {path}")
    return examples


def split_examples(examples, split):
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}; expected one of {SPLITS}")
    selected = [e for e in examples if e.split == split]
    if not selected:
        raise DataError(f"split {split!r} is empty")
    return selected
