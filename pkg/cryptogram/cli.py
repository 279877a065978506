#  Command-line driver: corpus ingestion, training, decryption and analysis.
#
#  python -m cryptogram.cli ingest quotes.txt --out-dir corpus
#  python -m cryptogram.cli train --config configs/smoke.json --out-dir runs/smoke
#  python -m cryptogram.cli decrypt --checkpoint runs/smoke/checkpoints/step_0000200.pt "RJ HRIF, ..."
#  python -m cryptogram.cli analyze eval --checkpoint ... --data corpus/test.jsonl --out-dir runs/smoke
#
#  Exit codes: 0 success, 2 configuration or usage error, 1 runtime error.

import argparse
import json
import logging
import os
import sys

import torch

from cryptogram.checkpoint import load_checkpoint
from cryptogram.cipher import ALPHABET
from cryptogram.config import RUN_LAYOUT, SCHEMA_PATH, RunManifest, load_run_config
from cryptogram.corpus import (
    MAX_RECORD_LEN,
    MIN_RECORD_LEN,
    SEGMENTS_PER_LANGUAGE,
    CorpusCleaner,
    build_segments,
    read_corpus_file,
    read_records,
    split,
    write_records,
)
from cryptogram.errors import ConfigError
from cryptogram.evaluation import (
    FrequencyRankDecoder,
    ModelDecoder,
    encrypt_records,
    evaluate,
    letter_error_profile,
    load_letter_frequencies,
    throughput_bench,
)
from cryptogram.interpret import (
    ProbeSpec,
    early_exit_curve,
    early_exit_table,
    export_attention,
    probe_similarity_matrix,
    recover_key,
    render_early_exit_table,
    train_layer_probes,
)
from cryptogram.trainer import Trainer, pool_label, run_generalization_suite


logger = logging.getLogger("cryptogram")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
ANALYZE_TASKS = ("eval", "early-exit", "probe", "attn", "letter-profile", "bench")


class UsageError(Exception):
    pass


def cmd_ingest(args) -> int:
    rows = []
    for path in args.paths:
        rows.extend(read_corpus_file(path))
    if args.segments:
        # clean line by line without length bounds, then join into segments
        cleaner = CorpusCleaner(1, sys.maxsize, accent_folding=True)
        report = cleaner.report
        segments = build_segments(cleaner.clean(rows), args.segments, args.per_language_cap, report)
        records = []
        for segment in segments:
            if segment.length > args.max_len:
                report.record_drop("too_long")
            else:
                records.append(segment)
        report.length_histogram.clear()
        for record in records:
            report.record_kept(record.length)
        report.records_kept = len(records)
        logger.info(f"built {len(records)} segments of at least {args.segments} symbols")
    else:
        cleaner = CorpusCleaner(args.min_len, args.max_len, args.accent_folding)
        records = cleaner.clean(rows)
        report = cleaner.report
    if not records:
        raise UsageError("ingest produced no records")
    train, test = split(records, args.train_frac, args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    write_records(train, os.path.join(args.out_dir, "train.jsonl"))
    write_records(test, os.path.join(args.out_dir, "test.jsonl"))
    report.write(os.path.join(args.out_dir, "ingest_report.json"))
    return EXIT_OK


def _train_overrides(args):
    return {
        "model.size_tag": args.size,
        "train.steps": args.steps,
        "train.batch_size": args.batch_size,
        "train.lr": args.lr,
        "train.seed": args.seed,
        "train.cipher_pool_size": args.pool_size,
        "train.head": args.head,
        "train.precision": args.precision,
        "train.device": args.device,
        "data.corpus_dir": args.data_dir,
    }


def _parse_pool_sizes(text):
    sizes = []
    for item in text.split(","):
        item = item.strip()
        if item in ("unlimited", "none"):
            sizes.append(None)
        elif item.isdigit() and int(item) > 0:
            sizes.append(int(item))
        else:
            raise UsageError(f"--pool-sizes: bad entry {item!r}")
    return sizes


def cmd_train(args) -> int:
    run_config = load_run_config(args.config, _train_overrides(args))
    train_records = read_records(run_config.data.train_path)
    test_records = read_records(run_config.data.test_path) if os.path.exists(run_config.data.test_path) else []
    manifest = RunManifest.create(run_config, " ".join(sys.argv))
    manifest.write(args.out_dir)
    if args.pool_sizes:
        sizes = _parse_pool_sizes(args.pool_sizes)
        logger.info(f"generalization suite over pool sizes {[pool_label(s) for s in sizes]}")
        run_generalization_suite(sizes, run_config.train, train_records, test_records, args.out_dir, progress=True)
        return EXIT_OK
    trainer = Trainer(run_config.train, train_records, test_records, args.out_dir, progress=True)
    if args.resume:
        trainer.resume(None if args.resume == "latest" else args.resume)
    trainer.run()
    logger.info(f"finished at step {trainer.step}; metrics in {trainer.metrics_path}")
    return EXIT_OK


def _read_ciphertext(args) -> str:
    if args.file:
        with open(args.file, encoding="utf-8") as fp:
            text = fp.read().strip()
    else:
        text = (args.text or "").strip()
    return _check_ciphertext(text, "decrypt")


def _check_ciphertext(text: str, command: str) -> str:
    if not text:
        raise UsageError(f"{command}: empty input")
    if text != text.upper():
        logger.info(f"{command}: input upper-cased")
        text = text.upper()
    if not ALPHABET.in_vocabulary(text):
        bad = sorted({ch for ch in text if not ALPHABET.in_vocabulary(ch)})
        raise UsageError(f"{command}: symbols out of vocabulary: {bad}")
    return text


def cmd_decrypt(args) -> int:
    text = _read_ciphertext(args)
    model = load_checkpoint(args.checkpoint).model
    if len(text) > model.config.context_len:
        raise UsageError(
            f"decrypt: input of {len(text)} symbols exceeds context length {model.config.context_len}"
        )
    if model.is_bijective:
        recovered = recover_key(model, text)
        print(recovered.decoded)
        print(f"key: {recovered.key.to_string()}")
        if args.key_dir:
            recovered.write(args.key_dir)
        if recovered.unconstrained:
            print(f"unconstrained: {''.join(recovered.unconstrained)}")
    else:
        result = model.decode(torch.as_tensor(ALPHABET.encode(text)))
        print(ALPHABET.decode(result.predictions[0].tolist()))
    return EXIT_OK


def _analysis_dir(args):
    out = os.path.join(args.out_dir, RUN_LAYOUT["analysis"])
    os.makedirs(out, exist_ok=True)
    return out


def _test_records(args):
    if not args.data:
        raise UsageError(f"analyze {args.task}: --data is required")
    records = read_records(args.data)
    return records[: args.limit] if args.limit else records


def _probe_training_records(args):
    path = args.train_data or os.path.join(os.path.dirname(os.path.abspath(args.data)), "train.jsonl")
    if not os.path.exists(path):
        raise UsageError(f"analyze probe: probe training records {path} not found, pass --train-data")
    records = read_records(path)
    return records[: args.train_limit] if args.train_limit else records


def _sample_text(args, records):
    if args.text:
        return _check_ciphertext(args.text.strip(), f"analyze {args.task}")
    _, ciphertexts, _ = encrypt_records(records[:1], args.seed)
    return ALPHABET.decode(ciphertexts[0])


def _write_json(path, payload):
    with open(path, "w") as fp:
        json.dump(payload, fp, indent=2)
    logger.info(f"wrote {path}")


def cmd_analyze(args) -> int:
    if args.task not in ANALYZE_TASKS:
        raise UsageError(f"analyze: unknown task {args.task!r}")
    model = load_checkpoint(args.checkpoint, args.device).model.to(args.device)
    out_dir = _analysis_dir(args)

    if args.task == "eval":
        records = _test_records(args)
        report = evaluate(ModelDecoder(model, args.batch_size, args.device), records, args.seed)
        report.write(os.path.join(out_dir, "eval"))
        baseline = evaluate(FrequencyRankDecoder(load_letter_frequencies(args.freq_table)), records, args.seed)
        baseline.write(os.path.join(out_dir, "eval_frequency_baseline"))
        logger.info(f"model: {report.summary()['aggregates']}")
        logger.info(f"frequency baseline: {baseline.summary()['aggregates']}")
    elif args.task == "early-exit":
        records = _test_records(args)
        text = _sample_text(args, records)
        table = early_exit_table(model, text)
        print(render_early_exit_table(table, text))
        table.to_csv(os.path.join(out_dir, "early_exit_table.csv"), index=False)
        curve = early_exit_curve(model, records, args.seed, args.batch_size)
        curve.to_csv(os.path.join(out_dir, "early_exit_curve.csv"), index=False)
        logger.info(f"wrote early exit table and curve to {out_dir}")
    elif args.task == "probe":
        records = _test_records(args)
        layers = "all" if args.layers == "all" else [int(x) for x in args.layers.split(",")]
        spec = ProbeSpec(kind=args.kind, steps=args.probe_steps, seed=args.seed)
        # probes are fit on training records and scored on the held-out ones
        probes = train_layer_probes(model, _probe_training_records(args), spec, layers, args.seed)
        similarity = probe_similarity_matrix(model, probes, records, cipher_seed=args.seed)
        similarity.write(out_dir, f"probe_similarity_{args.kind}", long_csv=args.plot_data)
    elif args.task == "attn":
        text = _sample_text(args, [] if args.text else _test_records(args))
        export_attention(model, text).write(out_dir, long_csv=args.plot_data)
    elif args.task == "letter-profile":
        records = _test_records(args)
        profile = letter_error_profile(
            ModelDecoder(model, args.batch_size, args.device), records, load_letter_frequencies(args.freq_table), args.seed
        )
        profile.write(os.path.join(out_dir, "letter_profile.csv"))
        if profile.undefined:
            logger.warning("letter profile undefined (no letter errors); wrote zeros")
    elif args.task == "bench":
        result = throughput_bench(model, args.n, args.len, args.repeats, args.batch_size, args.device)
        _write_json(os.path.join(out_dir, "bench.json"), result.as_dict())
        print(
            f"{result.letters_per_second:,.0f} letters/s "
            f"({result.mean_seconds:.3f} +- {result.std_seconds:.3f} s per {args.n}x{args.len})"
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cryptogram",
        description="Train and analyze single-pass substitution cipher solvers.",
        epilog=f"Config file schema: {SCHEMA_PATH}",
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    ingest = sub.add_parser("ingest", help="clean and split a text corpus")
    ingest.add_argument("paths", nargs="+", help=".txt (one record per line) or .jsonl with text/lang")
    ingest.add_argument("--out-dir", required=True)
    ingest.add_argument("--min-len", type=int, default=MIN_RECORD_LEN)
    ingest.add_argument("--max-len", type=int, default=MAX_RECORD_LEN)
    ingest.add_argument("--segments", type=int, default=None, help="build segments of this many symbols instead")
    ingest.add_argument("--per-language-cap", type=int, default=SEGMENTS_PER_LANGUAGE)
    ingest.add_argument("--accent-folding", action="store_true")
    ingest.add_argument("--train-frac", type=float, default=0.975)
    ingest.add_argument("--seed", type=int, default=0)
    ingest.set_defaults(func=cmd_ingest)

    train = sub.add_parser("train", help="train a model")
    train.add_argument("--config", default=None, help="JSON run config")
    train.add_argument("--out-dir", required=True)
    train.add_argument("--size", default=None, help="model size tag, e.g. 0.5M or 3.4M")
    train.add_argument("--steps", type=int, default=None)
    train.add_argument("--batch-size", type=int, default=None)
    train.add_argument("--lr", type=float, default=None)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--pool-size", type=int, default=None, help="train on a fixed pool of ciphers")
    train.add_argument("--pool-sizes", default=None, help="comma list for the generalization suite, e.g. 1,10,unlimited")
    train.add_argument("--head", choices=("standard", "bijective"), default=None)
    train.add_argument("--precision", choices=("fp32", "bf16"), default=None)
    train.add_argument("--device", default=None)
    train.add_argument("--data-dir", default=None, help="directory holding train.jsonl/test.jsonl")
    train.add_argument("--resume", default=None, help="checkpoint path, or 'latest'")
    train.set_defaults(func=cmd_train)

    decrypt = sub.add_parser("decrypt", help="decrypt one ciphertext")
    decrypt.add_argument("--checkpoint", required=True)
    decrypt.add_argument("text", nargs="?", default=None)
    decrypt.add_argument("--file", default=None)
    decrypt.add_argument("--key-dir", default=None, help="bijective head: write key.txt and key_matrix.csv here")
    decrypt.set_defaults(func=cmd_decrypt)

    analyze = sub.add_parser("analyze", help="evaluation and interpretability reports")
    analyze.add_argument("task", help="one of " + ", ".join(ANALYZE_TASKS))
    analyze.add_argument("--checkpoint", required=True)
    analyze.add_argument("--out-dir", required=True)
    analyze.add_argument("--data", default=None, help="test records (.jsonl)")
    analyze.add_argument("--limit", type=int, default=None)
    analyze.add_argument("--train-data", default=None, help="probe training records (default: train.jsonl next to --data)")
    analyze.add_argument("--train-limit", type=int, default=10000, help="probe training records to use")
    analyze.add_argument("--seed", type=int, default=0)
    analyze.add_argument("--device", default="cpu")
    analyze.add_argument("--batch-size", type=int, default=100)
    analyze.add_argument("--text", default=None, help="ciphertext for early-exit / attn")
    analyze.add_argument("--freq-table", default=None, help="letter,frequency CSV")
    analyze.add_argument("--kind", choices=("linear", "mlp"), default="linear")
    analyze.add_argument("--layers", default="all")
    analyze.add_argument("--probe-steps", type=int, default=5000)
    analyze.add_argument("--n", type=int, default=1000)
    analyze.add_argument("--len", type=int, default=300)
    analyze.add_argument("--repeats", type=int, default=50)
    analyze.add_argument("--plot-data", action="store_true", help="also write long-format tables")
    analyze.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        logger.error(str(e))
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"{type(e).__name__}: {e}")
        logger.debug("traceback", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
