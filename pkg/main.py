#!/usr/bin/env python3
"""
caftdesk - hierarchical image-text alignment at desk scale
Generates synthetic corpora, trains the two-tower model and its ablations,
evaluates retrieval and grounding, and exports attention heatmaps.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from src.checkpoint import (
    CheckpointError,
    checkpoint_load,
    checkpoint_save,
    restore_model,
)
from src.config import (
    PRESETS,
    VARIANTS,
    Config,
    ConfigError,
    config_digest,
    parse_config_file,
    parse_overrides,
    resolve_run_config,
)
from src.evaluation import (
    GroundingError,
    GroundingResult,
    evaluate,
    export_heatmap,
    ground_queries,
    iou,
    mass_inside,
    otsu_threshold,
)
from src.imageio import ImageFormatError, read_pgm, read_ppm
from src.model import CaftModel
from src.synthdata import corpus_split, generate, read_corpus, write_corpus
from src.tensor import NumericalError, no_grad
from src.text import Vocabulary, build_hierarchy, words_of
from src.training import Trainer
from src.vision import ImageCache, encode_image

CHECKPOINT_NAME = "checkpoint.bin"
METRICS_NAME = "metrics.csv"

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5


def setup_logging(config: Config) -> None:
    """Setup logging configuration based on environment settings."""
    log_level = getattr(logging, config.log_level.upper())

    logging.basicConfig(
        level=log_level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stdout)],
    )

    logger = logging.getLogger(__name__)
    logger.debug(f"Logging configured at {config.log_level} level")


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def alpha_list(text: str) -> List[float]:
    try:
        alphas = [float(part) for part in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"malformed alpha list: {text!r}")
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise argparse.ArgumentTypeError(f"alphas must lie in [0, 1]: {text!r}")
    return alphas


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caftdesk", description=__doc__.strip())
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen", help="generate a synthetic corpus")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--count", type=positive_int, required=True)
    gen.add_argument("--canvas", type=int, default=32)
    gen.add_argument("--out", required=True)
    gen.set_defaults(handler=cmd_gen)

    def add_config_flags(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", help="flat key = value settings file")
        sub.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE",
            help="override one setting (repeatable)",
        )

    train = commands.add_parser("train", help="train a model on a corpus")
    train.add_argument("--data", required=True)
    train.add_argument("--preset", choices=PRESETS)
    train.add_argument("--variant", choices=VARIANTS)
    train.add_argument("--seed", type=int)
    train.add_argument("--out", required=True)
    train.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    add_config_flags(train)
    train.set_defaults(handler=cmd_train)

    ev = commands.add_parser("eval", help="evaluate retrieval and grounding")
    ev.add_argument("--data", required=True)
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--alphas", type=alpha_list, default=[0.0])
    ev.add_argument("--report", required=True)
    ev.add_argument("--heatmaps", metavar="DIR", help="export heatmap and mask PGMs")
    add_config_flags(ev)
    ev.set_defaults(handler=cmd_eval)

    ground = commands.add_parser("ground", help="ground text in one image")
    ground.add_argument("--ckpt", required=True)
    ground.add_argument("--image", required=True)
    query = ground.add_mutually_exclusive_group(required=True)
    query.add_argument("--text", help="a single query sentence")
    query.add_argument("--caption", help="a long caption, grounded chunk by chunk")
    ground.add_argument("--out", required=True)
    ground.add_argument("--truth-mask", help="PGM mask to score the result against")
    ground.set_defaults(handler=cmd_ground)
    return parser


def cmd_gen(args: argparse.Namespace, config: Config) -> int:
    samples = generate(args.seed, args.count, args.canvas, config.max_parallel_jobs)
    write_corpus(args.out, samples)
    vocab = Vocabulary.load(str(Path(args.out) / "vocab.txt"))
    print(f"samples={len(samples)} vocabulary={len(vocab)}")
    return 0


def _settings(args: argparse.Namespace):
    file_settings = parse_config_file(args.config) if args.config else None
    return file_settings, parse_overrides(args.set)


def _check_vocab(checkpoint_vocab: List[str], vocab: Vocabulary) -> None:
    if checkpoint_vocab != vocab.tokens:
        raise CheckpointError("corpus vocabulary differs from the checkpoint's")


def _check_canvas(samples, canvas: int) -> None:
    for sample in samples:
        if sample.image.shape[:2] != (canvas, canvas):
            raise ConfigError(
                f"sample {sample.sample_id} is {sample.image.shape[0]}px, "
                f"model canvas is {canvas}"
            )


def cmd_train(args: argparse.Namespace, config: Config) -> int:
    logger = logging.getLogger(__name__)
    samples, vocab = read_corpus(args.data)
    file_settings, overrides = _settings(args)
    overrides.update(variant=args.variant, seed=args.seed)
    out = Path(args.out)

    if args.resume:
        checkpoint = checkpoint_load(args.resume)
        _check_vocab(checkpoint.vocab, vocab)
        run_config = resolve_run_config(
            args.preset, file_settings, overrides, base=checkpoint.run_config
        )
        model, state = restore_model(checkpoint, run_config)
        logger.info(f"Resuming from {args.resume} at step {state.step}")
    else:
        run_config = resolve_run_config(args.preset, file_settings, overrides)
        model_config = run_config.model.model_copy(update={"vocab_size": len(vocab)})
        run_config = run_config.model_copy(update={"model": model_config})
        model = CaftModel(model_config, run_config.train.seed, run_config.train.variant)
        state = None
    run_config.log_resolved()
    _check_canvas(samples, run_config.model.canvas)

    train_set, _ = corpus_split(
        samples, run_config.train.train_fraction, run_config.train.seed
    )
    cache = ImageCache(
        run_config.model, run_config.train.variant, config.max_parallel_jobs
    )
    cache.warm(train_set)
    trainer = Trainer(
        model, run_config, train_set, vocab, cache, state, str(out / METRICS_NAME)
    )
    state = trainer.train()
    checkpoint_save(str(out / CHECKPOINT_NAME), state, run_config, vocab.tokens)
    print(f"steps={state.step} checkpoint={out / CHECKPOINT_NAME}")
    return 0


def cmd_eval(args: argparse.Namespace, config: Config) -> int:
    checkpoint = checkpoint_load(args.ckpt)
    file_settings, overrides = _settings(args)
    run_config = resolve_run_config(
        None, file_settings, overrides, base=checkpoint.run_config
    )
    if config_digest(run_config.model) != config_digest(checkpoint.run_config.model):
        raise CheckpointError(f"{args.ckpt}: model configuration does not match")
    run_config.log_resolved()
    samples, vocab = read_corpus(args.data)
    _check_vocab(checkpoint.vocab, vocab)
    _check_canvas(samples, run_config.model.canvas)
    model, _ = restore_model(checkpoint, run_config)
    _, test_set = corpus_split(
        samples, run_config.train.train_fraction, run_config.train.seed
    )
    cache = ImageCache(
        run_config.model, run_config.train.variant, config.max_parallel_jobs
    )
    report = evaluate(
        model,
        vocab,
        test_set,
        args.alphas,
        cache=cache,
        max_workers=config.max_parallel_jobs,
        heatmap_dir=args.heatmaps,
    )
    report.write(args.report)
    print(f"queries={report.queries} miou={report.miou:.6f} report={args.report}")
    return 0


def cmd_ground(args: argparse.Namespace, config: Config) -> int:
    if args.text is not None and not words_of(args.text):
        raise GroundingError("--text must contain at least one word")
    if args.caption is not None and not words_of(args.caption):
        raise GroundingError("--caption must contain at least one word")
    checkpoint = checkpoint_load(args.ckpt)
    checkpoint.run_config.log_resolved()
    model, _ = restore_model(checkpoint)
    vocab = Vocabulary(checkpoint.vocab)
    image = read_ppm(args.image)
    canvas = model.config.canvas
    if image.shape[:2] != (canvas, canvas):
        raise ImageFormatError(
            f"{args.image}: expected a {canvas}x{canvas} image, got {image.shape[:2]}"
        )
    truth = read_pgm(args.truth_mask) > 0.5 if args.truth_mask else None

    if args.text is not None:
        names, texts = ["query"], [args.text]
    else:
        hierarchy = build_hierarchy(
            args.caption, vocab, model.config.num_chunks, model.config.context_length
        )
        chunk_texts = hierarchy.chunk_texts()
        valid = [i for i in range(len(chunk_texts)) if hierarchy.chunk_mask[i]]
        names = [f"chunk{i}" for i in valid]
        texts = [chunk_texts[i] for i in valid]

    with no_grad():
        encoded = encode_image(image, model.vision, model.config)
    heatmaps = ground_queries(texts, encoded, model, vocab)
    for name, text, heatmap in zip(names, texts, heatmaps):
        mask, degenerate = otsu_threshold(heatmap)
        result = GroundingResult(name, heatmap, mask, degenerate)
        export_heatmap(args.out, name, result)
        line = f"{name} degenerate={int(degenerate)}"
        if truth is not None:
            line += f" mass_inside={mass_inside(heatmap, truth):.6f}"
            line += f" iou={iou(mask, truth):.6f}"
        print(f"{line} text={text!r}")
    return 0


def run(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv``, run one command, and return its exit code."""
    try:
        config = Config()
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    setup_logging(config)
    logger = logging.getLogger(__name__)

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else 0

    try:
        return args.handler(args, config)
    except CheckpointError as e:
        logger.error(f"Checkpoint incompatible: {e}")
        return EXIT_CHECKPOINT
    except NumericalError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERIC
    except OSError as e:
        logger.error(f"I/O failure: {e}")
        return EXIT_IO
    except (ConfigError, ValueError) as e:
        logger.error(f"Invalid request: {e}")
        return EXIT_USAGE


def main():
    """Main application entry point."""
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
