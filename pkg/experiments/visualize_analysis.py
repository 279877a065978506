#!/usr/bin/env python3
"""
Analysis report visualization: error counts by length, probe similarity,
letter error profile, attention maps and the recovered key matrix.

Every chart is drawn only when its input file exists in the analysis
directory, so partial runs still plot.
"""

import argparse
import os

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns

# Style settings
try:
    plt.style.use('seaborn-v0_8')
except OSError:
    plt.style.use('seaborn')
sns.set_palette("husl")

BIN_ORDER = ["<32", "32-64", "64-128", "128-256", ">=256"]


def save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches='tight')
    plt.close(fig)
    print(f"saved {path}")


def create_error_charts(eval_dir, baseline_dir, out_path):
    """Error-count heatmap per length bin and median SER against the baseline."""
    histogram = pd.read_csv(os.path.join(eval_dir, "error_histogram.csv"))
    bins = pd.read_csv(os.path.join(eval_dir, "bins.csv"))

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(18, 6))

    max_errors = min(int(histogram["errors"].max()), 30)
    clipped = histogram.assign(errors=histogram["errors"].clip(upper=max_errors))
    grid = clipped.pivot_table(index="bin", columns="errors", values="count", aggfunc="sum", fill_value=0)
    grid = grid.reindex([b for b in BIN_ORDER if b in grid.index])
    sns.heatmap(grid, cmap="rocket_r", annot=grid.shape[1] <= 15, fmt="d", ax=ax1)
    ax1.set_title(f'Sequences by Error Count (last column: {max_errors}+)', fontsize=14, fontweight='bold')
    ax1.set_xlabel('Symbol errors per sequence')
    ax1.set_ylabel('Length bin')

    x = np.arange(len(bins))
    ax2.errorbar(x, bins["median"], yerr=[bins["median"] - bins["p16"], bins["p84"] - bins["median"]],
                 fmt='o-', capsize=5, label='model')
    if os.path.exists(os.path.join(baseline_dir, "bins.csv")):
        baseline = pd.read_csv(os.path.join(baseline_dir, "bins.csv"))
        ax2.plot(x, baseline["median"], 's--', label='frequency baseline')
    ax2.set_xticks(x)
    ax2.set_xticklabels(bins["bin"])
    ax2.set_title('Median SER by Length (16th-84th percentile)', fontsize=14, fontweight='bold')
    ax2.set_xlabel('Length bin')
    ax2.set_ylabel('SER')
    ax2.legend()

    save(fig, out_path)


def create_probe_charts(matrix_path, deltas_path, out_path):
    """Similarity of probe decodings to plaintext n-gram statistics per layer."""
    matrix = pd.read_csv(matrix_path, index_col="layer")
    deltas = pd.read_csv(deltas_path, index_col="layer")

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(16, 7))
    sns.heatmap(matrix, cmap="viridis", vmin=0, vmax=1, annot=True, fmt=".2f", ax=ax1)
    ax1.set_title('N-gram Cosine Similarity to Plaintext', fontsize=14, fontweight='bold')
    ax1.set_xlabel('n')
    ax1.set_ylabel('Layer')

    sns.heatmap(deltas.iloc[1:], cmap="coolwarm", center=0, annot=True, fmt=".2f", ax=ax2)
    ax2.set_title('Change from Previous Layer', fontsize=14, fontweight='bold')
    ax2.set_xlabel('n')
    ax2.set_ylabel('Layer')

    save(fig, out_path)


def create_letter_profile_chart(profile_path, out_path):
    profile = pd.read_csv(profile_path)
    colors = ['#ff6b6b' if v > 0 else '#4ecdc4' for v in profile["profile"]]

    fig, ax = plt.subplots(figsize=(14, 5))
    ax.bar(profile["letter"], profile["profile"], color=colors)
    ax.axhline(0, color='black', linewidth=0.8)
    ax.set_title('Relative Letter Error (error share minus frequency)', fontsize=14, fontweight='bold')
    ax.set_xlabel('Plaintext letter')
    ax.set_ylabel('Relative error')

    save(fig, out_path)


def create_attention_charts(attention_path, text, out_path, max_maps=16):
    maps = np.load(attention_path)
    n_layers, n_heads = maps.shape[:2]
    shown = [(layer, head) for layer in range(n_layers) for head in range(n_heads)][:max_maps]
    cols = min(4, len(shown))
    rows = int(np.ceil(len(shown) / cols))

    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 4 * rows), squeeze=False)
    labels = list(text) if text and len(text) == maps.shape[-1] else False
    for ax, (layer, head) in zip(axes.flat, shown):
        sns.heatmap(maps[layer, head], cmap="Blues", cbar=False, square=True,
                    xticklabels=labels, yticklabels=labels, ax=ax)
        ax.set_title(f'Layer {layer + 1}, Head {head + 1}', fontweight='bold')
    for ax in list(axes.flat)[len(shown):]:
        ax.axis('off')

    save(fig, out_path)


def create_key_heatmap(matrix_path, out_path):
    matrix = pd.read_csv(matrix_path, index_col="cipher")

    fig, ax = plt.subplots(figsize=(10, 9))
    sns.heatmap(matrix, cmap="magma", square=True, ax=ax)
    for row, col in enumerate(matrix.to_numpy().argmax(1)):
        ax.add_patch(plt.Rectangle((col, row), 1, 1, fill=False, edgecolor="cyan", linewidth=1.5))
    ax.set_title('Bijective Head Scores (row maxima outlined)', fontsize=14, fontweight='bold')
    ax.set_xlabel('Plaintext letter')
    ax.set_ylabel('Ciphertext letter')

    save(fig, out_path)


def main():
    parser = argparse.ArgumentParser(description="plot analysis reports")
    parser.add_argument("analysis_dir", help="<run>/analysis directory")
    parser.add_argument("--text", default=None, help="ciphertext the attention maps were taken on")
    parser.add_argument("--key-dir", default=None, help="directory holding key_matrix.csv (decrypt --key-dir)")
    args = parser.parse_args()

    d = args.analysis_dir
    path = lambda *parts: os.path.join(d, *parts)

    if os.path.exists(path("eval", "error_histogram.csv")):
        create_error_charts(path("eval"), path("eval_frequency_baseline"), path("errors.png"))
    for kind in ("linear", "mlp"):
        prefix = f"probe_similarity_{kind}"
        if os.path.exists(path(f"{prefix}.csv")):
            create_probe_charts(path(f"{prefix}.csv"), path(f"{prefix}_deltas.csv"), path(f"{prefix}.png"))
    if os.path.exists(path("letter_profile.csv")):
        create_letter_profile_chart(path("letter_profile.csv"), path("letter_profile.png"))
    if os.path.exists(path("attention.npy")):
        create_attention_charts(path("attention.npy"), args.text, path("attention.png"))
    key_dir = args.key_dir or d
    if os.path.exists(os.path.join(key_dir, "key_matrix.csv")):
        create_key_heatmap(os.path.join(key_dir, "key_matrix.csv"), path("key_matrix.png"))


if __name__ == "__main__":
    main()
