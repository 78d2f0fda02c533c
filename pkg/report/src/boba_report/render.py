"""Rendering operations: PCA bar, comparison table, loss-ratio curve.

Input schemas are the simulator's CSV outputs, validated byte-for-byte on
the header line; any mismatch is a hard error. Each figure is written as
SVG with the underlying numbers alongside as CSV, so results are diffable
without image comparison.
"""

from __future__ import annotations

import os
import re

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

ROUNDS_HEADER = ("round,agr,attack,seed,eta,train_loss,test_acc,"
                 "grad_err,trsvd_calls,accepted_count")
PCA_HEADER = "component,variance_fraction"
LOSS_RATIO_HEADER = "round,loss_alt,loss_es"

# a ratio may sit a few ulps below 1 when the two optimizers found the
# same selection; anything lower is corrupt input
RATIO_SLACK = 1e-9


class SchemaError(ValueError):
    """Input file header does not match the simulator schema."""


class DataError(ValueError):
    """Well-formed input carrying impossible values."""


def _check_header(path, expected):
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
    if header != expected:
        raise SchemaError(
            f"{path}: header {header!r} does not match expected {expected!r}")


def load_rounds(paths) -> pd.DataFrame:
    if not paths:
        raise SchemaError("need at least one rounds CSV")
    frames = []
    for path in paths:
        _check_header(path, ROUNDS_HEADER)
        frames.append(pd.read_csv(path))
    return pd.concat(frames, ignore_index=True)


def load_summaries(paths) -> pd.DataFrame:
    """Parse line-oriented key=value summary files into one row each."""
    rows = []
    for path in paths:
        row = {}
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if "=" not in line:
                    raise SchemaError(f"{path}: expected key=value, got {line!r}")
                key, value = line.split("=", 1)
                row[key] = value
        for key in ("agr", "attack", "seed"):
            if key not in row:
                raise SchemaError(f"{path}: summary missing {key!r}")
        rows.append(row)
    return pd.DataFrame(rows)


def render_pca_bar(path, out_dir) -> pd.DataFrame:
    """Bar chart of variance fraction per component, table re-emitted."""
    _check_header(path, PCA_HEADER)
    table = pd.read_csv(path)
    if table.empty:
        raise DataError(f"{path}: no component rows")
    if not np.isclose(table["variance_fraction"].sum(), 1.0, atol=1e-6):
        raise DataError(f"{path}: variance fractions sum to "
                        f"{table['variance_fraction'].sum()!r}, expected 1")
    os.makedirs(out_dir, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(table["component"], table["variance_fraction"], color="#4878a8")
    ax.set_xlabel("principal component")
    ax.set_ylabel("variance fraction")
    ax.set_title("Honest-gradient variance concentration")
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "pca.svg"))
    plt.close(fig)
    table.to_csv(os.path.join(out_dir, "pca_table.csv"), index=False)
    return table


def _final_rounds(rounds: pd.DataFrame) -> pd.DataFrame:
    idx = rounds.groupby(["agr", "attack", "seed"])["round"].idxmax()
    return rounds.loc[idx]


def _mrd_per_run(summaries: pd.DataFrame) -> pd.Series | None:
    """Max recall drop per run, against the average/no-attack run of the
    same seed. None when no reference runs are present."""
    recall_cols = sorted(
        (c for c in summaries.columns if re.fullmatch(r"final_recall_\d+", c)),
        key=lambda c: int(c.rsplit("_", 1)[1]))
    ref = summaries[(summaries["agr"] == "average")
                    & (summaries["attack"] == "none")]
    if not recall_cols or ref.empty:
        return None
    ref_by_seed = {row["seed"]: row[recall_cols].astype(float).to_numpy()
                   for _, row in ref.iterrows()}
    drops = []
    for _, row in summaries.iterrows():
        base = ref_by_seed.get(row["seed"])
        if base is None:
            drops.append(np.nan)
            continue
        cur = row[recall_cols].astype(float).to_numpy()
        diff = base - cur
        diff = diff[~np.isnan(diff)]
        drops.append(max(0.0, float(diff.max())) if diff.size else np.nan)
    return pd.Series(drops, index=summaries.index)


def render_comparison_table(rounds_paths, summary_paths, out_dir) -> pd.DataFrame:
    """Accuracy (and MRD when summaries are given) as mean (s.d.) over
    seeds, one row per aggregation rule, one column per attack, plus a
    worst-case column = minimum mean accuracy over attacks."""
    rounds = load_rounds(rounds_paths)
    final = _final_rounds(rounds)
    stats = (final.groupby(["agr", "attack"])["test_acc"]
             .agg(acc_mean="mean", acc_sd=lambda s: float(np.std(s)))
             .reset_index())

    if summary_paths:
        summaries = load_summaries(summary_paths)
        mrd = _mrd_per_run(summaries)
        if mrd is not None:
            summaries = summaries.assign(mrd=mrd)
            summaries["seed"] = summaries["seed"].astype(int)
            mrd_stats = (summaries.groupby(["agr", "attack"])["mrd"]
                         .agg(mrd_mean="mean", mrd_sd=lambda s: float(np.std(s)))
                         .reset_index())
            stats = stats.merge(mrd_stats, on=["agr", "attack"], how="left")

    attacks = [a for a in stats["attack"].unique() if a != "none"]
    worst = (stats[stats["attack"].isin(attacks)] if attacks else stats)
    wst = worst.groupby("agr")["acc_mean"].min().rename("wst").reset_index()
    stats = stats.merge(wst, on="agr", how="left")

    os.makedirs(out_dir, exist_ok=True)
    stats.to_csv(os.path.join(out_dir, "comparison.csv"), index=False)

    acc = stats.pivot(index="agr", columns="attack", values=["acc_mean", "acc_sd"])
    lines = []
    columns = (["none"] if "none" in stats["attack"].values else []) + attacks
    lines.append("| AGR | " + " | ".join(columns) + " | Wst |")
    lines.append("|" + "---|" * (len(columns) + 2))
    for agr in sorted(stats["agr"].unique()):
        cells = []
        for attack in columns:
            try:
                m = acc.loc[agr, ("acc_mean", attack)]
                s = acc.loc[agr, ("acc_sd", attack)]
                cells.append(f"{m:.3f} ({s:.3f})")
            except KeyError:
                cells.append("-")
        w = stats.loc[stats["agr"] == agr, "wst"].iloc[0]
        lines.append(f"| {agr} | " + " | ".join(cells) + f" | {w:.3f} |")
    with open(os.path.join(out_dir, "comparison.md"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return stats


def render_loss_ratio(path, out_dir) -> pd.DataFrame:
    """Per-round ratio of alternating to exhaustive trimmed loss.

    The exhaustive optimum is a lower bound, so a ratio below 1 can only
    come from corrupt input and is rejected."""
    _check_header(path, LOSS_RATIO_HEADER)
    table = pd.read_csv(path)
    if table.empty:
        raise DataError(f"{path}: no loss rows")
    ratio = table["loss_alt"] / table["loss_es"]
    if (ratio < 1.0 - RATIO_SLACK).any():
        bad = int(table.loc[ratio.idxmin(), "round"])
        raise DataError(
            f"{path}: loss ratio {ratio.min():.6g} < 1 at round {bad}; the "
            f"exhaustive loss is a lower bound, input is corrupt")
    out = table.assign(ratio=ratio)
    os.makedirs(out_dir, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(out["round"], out["ratio"], marker="o", markersize=3)
    ax.axhline(1.0, color="grey", linewidth=0.8, linestyle="--")
    ax.set_xlabel("round")
    ax.set_ylabel("loss ratio (alternating / exhaustive)")
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "loss_ratio.svg"))
    plt.close(fig)
    out.to_csv(os.path.join(out_dir, "loss_ratio_table.csv"), index=False)
    return out
