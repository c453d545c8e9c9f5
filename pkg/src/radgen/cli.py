"""Command-line entry point: prepare / train / generate / evaluate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure during compute.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as data_mod
from .config import RunConfig, load_run_config, merge_config_tree
from .data import (
    CorpusExample,
    Vocabulary,
    decode_ids,
    image_tensor,
    load_manifest,
    split_examples,
    tokenize,
    validate_corpus,
    write_manifest,
)
from .errors import ConfigError, DataError, NumericError
from .metrics import score_corpus
from .trainer import (
    Trainer,
    assemble,
    load_model_state,
    read_checkpoint,
    seed_everything,
)

logger = logging.getLogger("radgen")

VOCAB_FILE = "vocab.txt"
MANIFEST_FILE = "manifest.json"


def _prepared_paths(config: RunConfig):
    run_dir = config.run_dir
    return run_dir, run_dir / "corpus" / MANIFEST_FILE, run_dir / VOCAB_FILE


def _token_streams(examples):
    for example in examples:
        if example.split == "train":
            yield tokenize(example.report)


def cmd_prepare(config: RunConfig):
    """Materialize the corpus (synthetic render or manifest validation) and
    build the vocabulary from training-split reports."""
    run_dir, manifest_path, vocab_path = _prepared_paths(config)
    corpus_dir = manifest_path.parent
    corpus_dir.mkdir(parents=True, exist_ok=True)

    if config.data.name == "synthetic":
        examples = data_mod.generate_synthetic_corpus(config.data.synthetic_seed, config.data.synthetic_size)
        image_dir = corpus_dir / "images"
        image_dir.mkdir(exist_ok=True)
        from PIL import Image

        materialized = []
        for example in examples:
            array = data_mod.render_synthetic_image(example.image)
            rel = f"images/{example.example_id}.png"
            Image.fromarray(array, mode="L").save(image_dir / f"{example.example_id}.png")
            materialized.append(
                CorpusExample(example.example_id, rel, example.report, example.split)
            )
        examples = materialized
    else:
        examples = load_manifest(config.data.manifest_path)
        validate_corpus(examples, root=Path(config.data.manifest_path).parent)
        for example in examples:
            src = Path(config.data.manifest_path).parent / example.image
            example.image = str(src.resolve())
    write_manifest(examples, manifest_path)

    streams = list(_token_streams(examples))
    if config.data.consolidate_vocab:
        for extra in config.data.extra_manifests:
            streams.extend(_token_streams(load_manifest(extra)))
    vocab = Vocabulary.build(streams, config.data.min_frequency)
    vocab.save(vocab_path)
    logger.info("prepared %d examples, vocabulary size %d -> %s", len(examples), len(vocab), run_dir)
    print(f"prepared corpus: {len(examples)} examples, vocabulary size {len(vocab)}")
    return 0


def _load_prepared(config: RunConfig):
    run_dir, manifest_path, vocab_path = _prepared_paths(config)
    if not manifest_path.exists() or not vocab_path.exists():
        raise DataError(
            f"run {run_dir} is not prepared (missing {MANIFEST_FILE} or {VOCAB_FILE}); "
            f"run 'radgen prepare' first"
        )
    examples = load_manifest(manifest_path)
    vocab = Vocabulary.load(vocab_path)
    return examples, vocab, manifest_path.parent


def _build_model(config: RunConfig, vocab):
    config.backbone.vocab_size = len(vocab)
    config.decoder.vocab_size = len(vocab)
    config.adapter.dropout_rate = config.train.dropout
    config.fusion.dropout = config.train.dropout
    config.decoder.dropout = config.train.dropout
    return assemble(
        config.train.ablation, config.backbone, config.adapter, config.fusion, config.decoder
    )


def cmd_train(config: RunConfig, resume=False):
    examples, vocab, image_root = _load_prepared(config)
    seed_everything(config.train.seed)
    model = _build_model(config, vocab)
    run_dir = config.run_dir
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / "train_log.jsonl"
    if not resume and log_path.exists():
        log_path.unlink()
    trainer = Trainer(
        model,
        config.train,
        vocab,
        examples,
        config.data.max_length,
        image_root=image_root,
        log_path=log_path,
        config_snapshot=config.to_dict(),
    )
    if resume:
        trainer.resume(ckpt_dir / "last.ckpt")
    trainer.train(checkpoint_dir=str(ckpt_dir))
    print(f"trained {trainer.epoch} epochs; checkpoints in {ckpt_dir}")
    return 0


def _model_from_checkpoint(path):
    payload = read_checkpoint(path)
    config = merge_config_tree(payload["config"])
    vocab = Vocabulary(payload["vocab"])
    model = _build_model(config, vocab)
    load_model_state(model, payload)
    model.eval()
    return model, vocab, config


def cmd_generate(checkpoint, image=None, split=None, out=None):
    model, vocab, config = _model_from_checkpoint(checkpoint)
    if (image is None) == (split is None):
        raise ConfigError("generate needs exactly one of --image or --split")
    if image is not None:
        path = Path(image)
        if not path.exists():
            raise DataError(f"image not found: {path}")
        example = CorpusExample("cli-image", str(path), "", "test")
        text = decode_ids(model.generate(image_tensor(example)).tokens, vocab)
        if out:
            Path(out).write_text(text + "\n", encoding="utf-8")
        print(text)
        return 0
    examples, vocab_prepared, image_root = _load_prepared(config)
    records = []
    for example in split_examples(examples, split):
        result = model.generate(image_tensor(example, image_root))
        records.append({"id": example.example_id, "text": decode_ids(result.tokens, vocab)})
    payload = "\n".join(json.dumps(r) for r in records) + "\n"
    if out:
        Path(out).write_text(payload, encoding="utf-8")
    else:
        sys.stdout.write(payload)
    return 0


def cmd_evaluate(checkpoint, split, out_dir=None):
    model, vocab, config = _model_from_checkpoint(checkpoint)
    examples, _, image_root = _load_prepared(config)
    selected = split_examples(examples, split)
    candidates, references, ids = [], [], []
    for example in selected:
        result = model.generate(image_tensor(example, image_root))
        candidates.append(decode_ids(result.tokens, vocab).split())
        references.append(tokenize(example.report)[: config.data.max_length - 2])
        ids.append(example.example_id)
    report = score_corpus(candidates, references, example_ids=ids)
    out_dir = Path(out_dir) if out_dir else config.run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"scores_{split}.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    table = report.format_table()
    (out_dir / f"scores_{split}.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="radgen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("prepare", "train"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config field, e.g. train.epochs=5")
    sub.choices["train"].add_argument("--resume", action="store_true",
                                      help="continue from the last checkpoint")

    g = sub.add_parser("generate")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--image", help="single image file")
    g.add_argument("--split", help="decode a whole prepared split")
    g.add_argument("--out", help="output file (default: stdout)")

    e = sub.add_parser("evaluate")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", required=True)
    e.add_argument("--out-dir", help="directory for score files (default: run dir)")
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "prepare":
            return cmd_prepare(load_run_config(args.config, args.overrides))
        if args.command == "train":
            return cmd_train(load_run_config(args.config, args.overrides), resume=args.resume)
        if args.command == "generate":
            return cmd_generate(args.checkpoint, image=args.image, split=args.split, out=args.out)
        if args.command == "evaluate":
            return cmd_evaluate(args.checkpoint, args.split, out_dir=args.out_dir)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return 2
    except DataError as exc:
        logger.error("data error: %s", exc)
        return 3
    except NumericError as exc:
        logger.error("numeric failure: %s", exc)
        return 4


if __name__ == "__main__":
    sys.exit(main())
