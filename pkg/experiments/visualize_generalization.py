#!/usr/bin/env python3
"""
Cipher pool generalization - training loss and validation accuracy curves
"""

import argparse
import os

import matplotlib.pyplot as plt
import pandas as pd
import seaborn as sns

# Style settings
try:
    plt.style.use('seaborn-v0_8')
except OSError:
    plt.style.use('seaborn')
sns.set_palette("husl")


def pool_order(labels):
    # numeric pool sizes first, ascending, then unlimited
    numeric = sorted(int(x) for x in labels if x != "unlimited")
    return [str(x) for x in numeric] + (["unlimited"] if "unlimited" in labels else [])


def create_generalization_charts(table, out_path):
    """Loss and validation accuracy against steps, one line per pool size."""
    order = pool_order(table["pool_size"].unique())

    fig, (ax1, ax2, ax3) = plt.subplots(1, 3, figsize=(20, 6))

    loss = table[table["metric"] == "loss"].copy()
    loss["smoothed"] = loss.groupby("pool_size")["value"].transform(lambda s: s.rolling(25, min_periods=1).mean())
    sns.lineplot(data=loss, x="step", y="smoothed", hue="pool_size", hue_order=order, ax=ax1)
    ax1.set_title('Training Loss (rolling mean, 25 steps)', fontsize=14, fontweight='bold')
    ax1.set_ylabel('Cross-entropy')
    ax1.set_xlabel('Step')

    val = table[table["metric"] == "val_acc"]
    sns.lineplot(data=val, x="step", y="value", hue="pool_size", hue_order=order, marker="o", ax=ax2)
    ax2.set_title('Validation Accuracy on Unseen Ciphers', fontsize=14, fontweight='bold')
    ax2.set_ylabel('1 - SER')
    ax2.set_xlabel('Step')

    final = val.sort_values("step").groupby("pool_size").tail(1).set_index("pool_size").reindex(order)
    bars = ax3.bar(final.index, final["value"])
    ax3.set_title('Final Validation Accuracy by Pool Size', fontsize=14, fontweight='bold')
    ax3.set_ylabel('1 - SER')
    ax3.set_xlabel('Cipher pool size')
    for bar, value in zip(bars, final["value"]):
        ax3.annotate(f'{value:.3f}', xy=(bar.get_x() + bar.get_width() / 2, value),
                     xytext=(0, 3), textcoords="offset points", ha='center', fontweight='bold')

    plt.tight_layout()
    plt.savefig(out_path, dpi=150, bbox_inches='tight')
    plt.close(fig)
    print(f"saved {out_path}")


def main():
    parser = argparse.ArgumentParser(description="plot generalization suite curves")
    parser.add_argument("run_dir", help="directory holding generalization.csv")
    args = parser.parse_args()

    table = pd.read_csv(os.path.join(args.run_dir, "generalization.csv"), dtype={"pool_size": str})
    create_generalization_charts(table, os.path.join(args.run_dir, "generalization.png"))


if __name__ == "__main__":
    main()
