#!/usr/bin/env python3
"""
Checks the desk-scale results written by run_experiments.sh:

  - the standard-head 3.4M model beats the frequency-rank baseline on
    sequences of at least 128 symbols by a factor of 2 or more
  - final validation accuracy is ordered unlimited > 10 > 1 across the
    generalization suite pool sizes
  - the pooling contract held for both heads, and the bijective head never
    mapped two cipher letters onto one plaintext letter

The standard and bijective runs are also compared side by side, and the
key read off the bijective head is scored against the true key. Those two
lines are reported, not enforced.

Exits 1 if any check fails.
"""

import argparse
import json
import os
import sys

import pandas as pd

from cryptogram.cipher import CipherMapping, invert


LONG_BIN = ">=128"
BASELINE_FACTOR = 2.0
POOL_ORDER = ["1", "10", "unlimited"]
STANDARD_RUN = "desk_3.4M"
BIJECTIVE_RUN = "desk_3.4M_bijective"


def read_summary(path):
    with open(os.path.join(path, "summary.json")) as fp:
        return json.load(fp)


def analysis_dir(results_dir, run):
    return os.path.join(results_dir, run, "analysis")


def check_baseline(results_dir):
    d = analysis_dir(results_dir, STANDARD_RUN)
    model = read_summary(os.path.join(d, "eval"))
    baseline = read_summary(os.path.join(d, "eval_frequency_baseline"))
    model_ser = model["aggregates"].get(LONG_BIN)
    baseline_ser = baseline["aggregates"].get(LONG_BIN)
    if model_ser is None or baseline_ser is None:
        return False, f"no test sequences in the {LONG_BIN} bin"
    ok = model_ser["mean"] * BASELINE_FACTOR <= baseline_ser["mean"]
    return ok, f"SER {LONG_BIN}: model {model_ser['mean']:.4f}, frequency baseline {baseline_ser['mean']:.4f}"


def check_pooling(results_dir):
    counts = {
        run: read_summary(os.path.join(analysis_dir(results_dir, run), "eval"))["pooling_violations"]
        for run in (STANDARD_RUN, BIJECTIVE_RUN)
    }
    ok = all(count == 0 for count in counts.values())
    return ok, ", ".join(f"{run}: {count} pooling violations" for run, count in counts.items())


def check_bijectivity(results_dir):
    standard = read_summary(os.path.join(analysis_dir(results_dir, STANDARD_RUN), "eval"))
    bijective = read_summary(os.path.join(analysis_dir(results_dir, BIJECTIVE_RUN), "eval"))
    ok = bijective["bijectivity_violations"] == 0
    return ok, (
        f"bijective head {bijective['bijectivity_violations']} collisions, "
        f"standard head {standard['bijectivity_violations']} (reported)"
    )


def final_val_acc(generalization_csv):
    table = pd.read_csv(generalization_csv, dtype={"pool_size": str})
    val = table[table["metric"] == "val_acc"]
    last = val.sort_values("step").groupby("pool_size").tail(1)
    return dict(zip(last["pool_size"], last["value"]))


def check_ordering(results_dir):
    accs = final_val_acc(os.path.join(results_dir, "generalization_0.5M", "generalization.csv"))
    missing = [p for p in POOL_ORDER if p not in accs]
    if missing:
        return False, f"missing pool sizes {missing}"
    values = [accs[p] for p in POOL_ORDER]
    ok = all(a < b for a, b in zip(values, values[1:]))
    return ok, "final val_acc " + ", ".join(f"{p}: {accs[p]:.4f}" for p in POOL_ORDER)


def compare_heads(results_dir):
    rows = []
    for run in (STANDARD_RUN, BIJECTIVE_RUN):
        aggregates = read_summary(os.path.join(analysis_dir(results_dir, run), "eval"))["aggregates"]
        cells = [
            f"{name} " + ("n/a" if agg is None else f"{agg['mean']:.4f} +- {agg['std']:.4f}")
            for name, agg in sorted(aggregates.items())
        ]
        rows.append(f"{run}: " + ", ".join(cells))
    return "; ".join(rows)


def score_recovered_key(results_dir):
    key_dir = os.path.join(analysis_dir(results_dir, BIJECTIVE_RUN), "key")
    with open(os.path.join(key_dir, "key.txt")) as fp:
        recovered = invert(CipherMapping.from_string(fp.read().strip()))
    with open(os.path.join(key_dir, "true_encryption_key.txt")) as fp:
        truth = CipherMapping.from_string(fp.read().strip())
    correct = sum(a == b for a, b in zip(recovered.to_string(), truth.to_string()))
    return f"{correct}/26 letters of the encryption key recovered ({recovered.to_string()} vs {truth.to_string()})"


def main():
    parser = argparse.ArgumentParser(description="desk-scale acceptance checks")
    parser.add_argument("results_dir", help="experiments/results")
    args = parser.parse_args()

    checks = [
        ("beats frequency baseline x2", lambda: check_baseline(args.results_dir)),
        ("pooling consistency", lambda: check_pooling(args.results_dir)),
        ("bijectivity", lambda: check_bijectivity(args.results_dir)),
        ("pool size ordering", lambda: check_ordering(args.results_dir)),
    ]
    failed = 0
    for name, check in checks:
        try:
            ok, detail = check()
        except FileNotFoundError as e:
            ok, detail = False, f"missing result file {e.filename}"
        failed += not ok
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")

    for name, report in (("base vs bijective SER", compare_heads), ("key recovery", score_recovered_key)):
        try:
            print(f"[INFO] {name}: {report(args.results_dir)}")
        except FileNotFoundError as e:
            print(f"[INFO] {name}: missing result file {e.filename}")
    sys.exit(1 if failed else 0)


if __name__ == "__main__":
    main()
