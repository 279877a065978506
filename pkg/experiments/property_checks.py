#!/usr/bin/env python3
"""
Full-size property checks that are too slow for the unit suite:

  sinkhorn      1000 random 26x26 matrices, 50 rounds, max row/col deviation < 1e-4
  assignment    hard_assignment == exhaustive search, n = 2..7, 1000 matrices each
  consistency   bijective head: no letter collisions; both heads: pooling contract
  early-exit    last-layer early exit is bitwise equal to normal decoding
  metrics       SER, n-gram cosine and bootstrap against direct re-implementations

A trained checkpoint can be passed for the model checks, otherwise freshly
initialized models with random weights are used.
"""

import argparse
import math
import sys
import time
from collections import Counter

import numpy as np
import torch

from cryptogram.backbone import ModelConfig
from cryptogram.checkpoint import load_checkpoint
from cryptogram.cipher import ALPHABET, LETTERS, symbol_error_rate
from cryptogram.corpus import TextRecord, read_records
from cryptogram.evaluation import ModelDecoder, evaluate
from cryptogram.heads import CipherSolver, brute_force_assignment, hard_assignment, sinkhorn
from cryptogram.interpret import early_exit, ngram_cosine
from cryptogram.stats import bootstrap_ser


def random_records(count, rng, min_len=20, max_len=300):
    records = []
    for _ in range(count):
        words = []
        length = rng.integers(min_len, max_len + 1)
        while sum(len(w) + 1 for w in words) < length:
            words.append("".join(rng.choice(list(LETTERS), rng.integers(1, 9))))
        records.append(TextRecord.of((" ".join(words) + ".")[:length]))
    return records


def random_model(head, seed=0):
    torch.manual_seed(seed)
    model = CipherSolver(ModelConfig.preset("0.5M"), head)
    with torch.no_grad():
        for param in model.backbone.parameters():
            param.normal_(0.0, 0.1)
    return model.eval()


def check_sinkhorn(args):
    gen = torch.Generator().manual_seed(args.seed)
    X = torch.randn(1000, 26, 26, generator=gen, dtype=torch.float64)
    S = sinkhorn(X, 50)
    worst = max((S.sum(-1) - 1).abs().max().item(), (S.sum(-2) - 1).abs().max().item())
    return worst < 1e-4, f"max deviation {worst:.2e}"


def check_assignment(args):
    rng = np.random.default_rng(args.seed)
    mismatches = 0
    for n in range(2, 8):
        for _ in range(1000):
            X = rng.normal(size=(n, n))
            mismatches += not np.array_equal(hard_assignment(X).values, brute_force_assignment(X).values)
    return mismatches == 0, f"{mismatches} mismatches over 6000 matrices"


def check_consistency(args, records):
    parts = []
    ok = True
    for head in ("bijective", "standard"):
        model = args.model if args.model is not None and args.model.head_type.name == head else random_model(head)
        report = evaluate(ModelDecoder(model, 100), records, args.seed)
        ok &= report.pooling_violations == 0
        if head == "bijective":
            ok &= report.bijectivity_violations == 0
        parts.append(f"{head}: {report.bijectivity_violations} collisions, {report.pooling_violations} pooling")
    return ok, f"{len(records)} sequences; " + "; ".join(parts)


def check_early_exit(args, records):
    model = args.model if args.model is not None else random_model("standard")
    n_layers = model.config.n_layers
    differing = 0
    for record in records[:100]:
        tokens = torch.as_tensor(ALPHABET.encode(record.text))
        exit_preds = early_exit(model, tokens, n_layers).predictions
        differing += not torch.equal(exit_preds, model.decode(tokens).predictions)
    return differing == 0, f"{differing} of 100 sequences differ"


def reference_cosine(a, b, n):
    ca = Counter(a[i : i + n] for i in range(len(a) - n + 1))
    cb = Counter(b[i : i + n] for i in range(len(b) - n + 1))
    dot = sum(ca[k] * cb[k] for k in ca)
    norm = math.sqrt(sum(v * v for v in ca.values())) * math.sqrt(sum(v * v for v in cb.values()))
    return dot / norm if norm else 0.0


def check_metrics(args):
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(100):
        length = int(rng.integers(1, 40))
        a = "".join(rng.choice(list("ABC ."), length))
        b = "".join(rng.choice(list("ABC ."), length))
        ser = sum(x != y for x, y in zip(a, b)) / length
        worst = max(worst, abs(symbol_error_rate(a, b) - ser))
        n = int(rng.integers(1, 4))
        worst = max(worst, abs(ngram_cosine(a, b, n) - reference_cosine(a, b, n)))
        values = rng.random(int(rng.integers(1, 20)))
        seed = int(rng.integers(1 << 30))
        result = bootstrap_ser(values, 50, np.random.default_rng(seed))
        weights = np.random.default_rng(seed).standard_exponential((50, values.size))
        means = np.array([w @ values / w.sum() for w in weights])
        worst = max(worst, abs(result.mean - means.mean()), abs(result.std - means.std()))
    return worst <= 1e-12, f"max difference {worst:.1e}"


def main():
    parser = argparse.ArgumentParser(description="full-size property checks")
    parser.add_argument("--checkpoint", default=None)
    parser.add_argument("--data", default=None, help="test records (.jsonl); random text when omitted")
    parser.add_argument("--n-sequences", type=int, default=10000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    args.model = load_checkpoint(args.checkpoint).model if args.checkpoint else None
    if args.data:
        records = read_records(args.data)[: args.n_sequences]
    else:
        records = random_records(args.n_sequences, np.random.default_rng(args.seed))

    checks = [
        ("sinkhorn", lambda: check_sinkhorn(args)),
        ("assignment", lambda: check_assignment(args)),
        ("consistency", lambda: check_consistency(args, records)),
        ("early-exit", lambda: check_early_exit(args, records)),
        ("metrics", lambda: check_metrics(args)),
    ]
    failed = 0
    for name, check in checks:
        start = time.time()
        ok, detail = check()
        failed += not ok
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({time.time() - start:.1f}s)")
    sys.exit(1 if failed else 0)


if __name__ == "__main__":
    main()
