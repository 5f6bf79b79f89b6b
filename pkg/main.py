#!/usr/bin/env python
# Copyright 2024 Tarkan Al-Kazily

import argparse
import dataclasses
import json
import logging
import sys

import putri
import putri.data
import putri.pruning
import putri.report
import putri.serialization
import utils.files

logger = logging.getLogger("putri.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class ArgumentParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with EXIT_USAGE."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def add_data_args(parser: argparse.ArgumentParser, seed_flag: str = "--data-seed"):
    parser.add_argument("--seq-len", type=int, default=128, help="Tokens per sequence")
    parser.add_argument("--n-seqs", type=int, default=32, help="Sequences per data set")
    parser.add_argument(seed_flag, type=int, default=0, help="Window offset seed")


def add_prune_args(parser: argparse.ArgumentParser):
    parser.add_argument("--model", "-m", type=str, help="Model file", required=True)
    parser.add_argument("--calib", "-c", type=str, help="Calibration corpus", required=True)
    parser.add_argument(
        "--eval-data",
        type=str,
        action="append",
        help="Held-out corpus, repeat for several (default: --calib)",
    )
    add_data_args(parser)
    parser.add_argument(
        "--eval-seed", type=int, default=1, help="Window seed of the held-out sets"
    )
    parser.add_argument("--alpha", type=float, default=1.5, help="Attention/FFN split")
    parser.add_argument("--p-min", type=int, default=1, help="Minimum FFN nodes per layer")
    parser.add_argument(
        "--heads-per-iteration", type=int, help="Grouped heads removed per round"
    )
    parser.add_argument(
        "--score-sequences", type=int, default=1, help="Sequences per head score"
    )
    parser.add_argument("--ridge", type=float, default=0.0, help="Initial solver ridge")
    parser.add_argument("--workers", type=int, default=1, help="Scoring threads")


def parse_args(argv=None):
    """
    Returns:
    - args context parsed from the CLI
    """
    parser = ArgumentParser(description="Structured pruning of toy GQA transformers")
    parser.add_argument(
        "--verbose", "-v", action="count", default=0, help="-v for info, -vv for debug"
    )

    subparsers = parser.add_subparsers(title="subcommands", dest="subcommand", required=True)
    make_parser = subparsers.add_parser(
        "make-toy",
        description="Create (and optionally train) a fixture model",
    )
    make_parser.add_argument(
        "--config",
        type=str,
        default="tiny",
        help=f"Preset {putri.get_preset_names()} or YAML config file",
    )
    make_parser.add_argument("--seed", type=int, default=0, help="Weight seed")
    make_parser.add_argument("--train-steps", type=int, default=0, help="SGD steps")
    make_parser.add_argument("--lr", type=float, default=0.1, help="SGD learning rate")
    make_parser.add_argument("--corpus", type=str, help="Training corpus")
    make_parser.add_argument(
        "--diagnostic",
        choices=["uniform"],
        help="uniform: zero lm_head so every logit is equal",
    )
    make_parser.add_argument("--out", "-o", type=str, help="Model file", required=True)

    prune_parser = subparsers.add_parser(
        "prune",
        description="Prune a model to a target sparsity",
    )
    add_prune_args(prune_parser)
    prune_parser.add_argument(
        "--sparsity", "-s", type=float, help="Target sparsity", required=True
    )
    prune_parser.add_argument("--no-ffn-update", action="store_true", help="Skip refit")
    prune_parser.add_argument(
        "--parallel-update", action="store_true", help="Taps from the unpruned model"
    )
    prune_parser.add_argument(
        "--full-attention", action="store_true", help="Remove whole attention blocks"
    )
    prune_parser.add_argument("--out", "-o", type=str, help="Pruned model file", required=True)
    prune_parser.add_argument("--report", "-r", type=str, help="JSON report", required=True)
    prune_parser.add_argument("--summary-csv", type=str, help="CSV summary row")
    prune_parser.add_argument(
        "--timing", action="store_true", help="Include wall-clock seconds in the report"
    )

    eval_parser = subparsers.add_parser(
        "eval-ppl",
        description="Measure corpus perplexity",
    )
    eval_parser.add_argument("--model", "-m", type=str, help="Model file", required=True)
    eval_parser.add_argument(
        "--data", "-d", type=str, action="append", help="Corpus, repeatable", required=True
    )
    add_data_args(eval_parser, seed_flag="--seed")

    ablate_parser = subparsers.add_parser(
        "ablate",
        description="Sweep the pipeline ablations over sparsities and seeds",
    )
    add_prune_args(ablate_parser)
    ablate_parser.add_argument(
        "--sparsities", type=float, nargs="+", help="Target sparsities", required=True
    )
    ablate_parser.add_argument(
        "--seeds", type=int, nargs="+", help="Calibration seeds", required=True
    )
    ablate_parser.add_argument(
        "--variants",
        nargs="+",
        choices=list(putri.pruning.ABLATION_VARIANTS),
        default=list(putri.pruning.ABLATION_VARIANTS),
        help="Variants to run",
    )
    ablate_parser.add_argument("--out-csv", type=str, help="CSV output", required=True)

    inspect_parser = subparsers.add_parser(
        "inspect",
        description="Print model structure",
    )
    inspect_parser.add_argument("--model", "-m", type=str, help="Model file", required=True)
    inspect_parser.add_argument("--json", action="store_true", help="Print JSON")

    return parser.parse_args(argv)


def prune_config(args, **overrides) -> putri.PruneConfig:
    values = dict(
        target_sparsity=getattr(args, "sparsity", 0.0),
        alpha=args.alpha,
        p_min=args.p_min,
        heads_per_iteration=args.heads_per_iteration,
        score_sequences=args.score_sequences,
        ridge=args.ridge,
        no_ffn_update=getattr(args, "no_ffn_update", False),
        parallel_update=getattr(args, "parallel_update", False),
        full_attention=getattr(args, "full_attention", False),
        workers=args.workers,
    )
    values.update(overrides)
    return putri.PruneConfig(**values)


def load_eval_sets(args, vocab_size: int) -> dict[str, putri.CalibrationSet]:
    paths = args.eval_data or [args.calib]
    return {
        path: putri.load_corpus(
            path, args.seq_len, args.n_seqs, args.eval_seed, vocab_size=vocab_size
        )
        for path in paths
    }


def cmd_make_toy(args) -> int:
    config = putri.presets.resolve_config(args.config)
    if args.train_steps > 0 and args.corpus is None:
        raise putri.ConfigError("--train-steps needs --corpus")

    model = putri.init_random(config, args.seed)
    if args.train_steps > 0:
        stream, _ = putri.data.read_tokens(args.corpus, config.vocab_size)
        result = putri.train_toy(model, stream, args.train_steps, args.lr, args.seed)
        print(f"training loss {result.initial_loss:.4f} -> {result.final_loss:.4f}")
        model = result.model
        window = min(64, config.max_context + 1)
        loss = putri.train.evaluate_loss(model, stream, window, 16, args.seed + 1)
        print(f"corpus loss {loss:.4f}")
    if args.diagnostic == "uniform":
        model = dataclasses.replace(model, lm_head=model.lm_head * 0.0)

    ffn, attn = putri.count_prunable_params(model)
    utils.files.write_output(args.out, putri.serialization.serialize(model))
    print(f"F={ffn} A={attn}")
    print(f"digest {putri.digest(model)}")
    return EXIT_OK


def cmd_prune(args) -> int:
    model = putri.load(args.model)
    vocab = model.config.vocab_size
    calib = putri.load_corpus(
        args.calib, args.seq_len, args.n_seqs, args.data_seed, vocab_size=vocab
    )
    logger.debug(
        "First calibration window: %r", putri.data.decode_bytes(calib.sequences[0][:64])
    )
    eval_sets = load_eval_sets(args, vocab)
    config = prune_config(args)
    provenance = {
        "model": args.model,
        "model_digest": utils.files.file_digest(args.model),
        "calib": args.calib,
        "data_seed": args.data_seed,
        "eval_seed": args.eval_seed,
        "seq_len": args.seq_len,
        "n_seqs": args.n_seqs,
    }

    status = EXIT_OK
    try:
        pruned, report = putri.putri(model, calib, eval_sets, config, provenance)
    except putri.PutriError as e:
        logger.error("Pruning failed: %s", e)
        print(f"pruning failed: {e}", file=sys.stderr)
        pruned = None
        report = putri.pruning.failed_report(model, config, e, provenance)
        status = EXIT_RUNTIME

    utils.files.write_output(
        args.report, putri.report.canonical_json(report, include_timing=args.timing) + "\n"
    )
    if args.summary_csv:
        utils.files.write_output(args.summary_csv, putri.report.summary_csv(report))
    if pruned is None:
        return status

    utils.files.write_output(args.out, putri.serialization.serialize(pruned))
    logger.info("Pipeline took %.2fs", report.wall_clock_seconds)
    row = putri.report.summary_row(report)
    print(
        f"target {row['target_sparsity']} achieved {row['achieved_sparsity']} "
        f"ppl {row['ppl_before']} -> {row['ppl_after']}"
    )
    return status


def cmd_eval_ppl(args) -> int:
    model = putri.load(args.model)
    for path in args.data:
        data = putri.load_corpus(
            path, args.seq_len, args.n_seqs, args.seed, vocab_size=model.config.vocab_size
        )
        result = putri.perplexity(model, data.sequences)
        if len(args.data) == 1:
            print(result)
        else:
            print(f"{path} {result}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    model = putri.load(args.model)
    vocab = model.config.vocab_size
    calib_sets = {
        seed: putri.load_corpus(args.calib, args.seq_len, args.n_seqs, seed, vocab_size=vocab)
        for seed in args.seeds
    }
    eval_set = next(iter(load_eval_sets(args, vocab).values()))
    rows = putri.pruning.ablation_sweep(
        model,
        calib_sets,
        eval_set,
        args.sparsities,
        prune_config(args),
        variants=args.variants,
        workers=args.workers,
    )
    utils.files.write_output(args.out_csv, putri.report.ablation_csv(rows))
    succeeded = sum(1 for row in rows if row.error is None)
    print(f"{succeeded}/{len(rows)} runs succeeded")
    return EXIT_OK if succeeded else EXIT_RUNTIME


def cmd_inspect(args) -> int:
    model = putri.load(args.model)
    summary = putri.serialization.describe(model)
    if args.json:
        print(json.dumps(summary, sort_keys=True))
        return EXIT_OK

    for key, value in summary["config"].items():
        print(f"{key:<12} {value}")
    print("layer  kv_live  ff_live")
    for layer in summary["layers"]:
        print(f"{layer['layer']:>5}  {layer['kv_live']:>7}  {layer['ff_live']:>7}")
    params = summary["params"]
    print(f"F={params['ffn']} A={params['attn']} total={params['total']}")
    print(f"digest {summary['digest']}")
    return EXIT_OK


COMMANDS = {
    "make-toy": cmd_make_toy,
    "prune": cmd_prune,
    "eval-ppl": cmd_eval_ppl,
    "ablate": cmd_ablate,
    "inspect": cmd_inspect,
}


def main(args) -> int:
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    # basicConfig is a no-op once the root logger has handlers
    logging.getLogger().setLevel(level)
    logger.info("Resolved configuration: %s", json.dumps(vars(args), sort_keys=True))

    try:
        return COMMANDS[args.subcommand](args)
    except putri.ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (putri.PutriError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main(parse_args()))
