"""Static SVG figures from run and sweep CSVs."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["svg.hashsalt"] = "pessim-drive"
_SVG_META = {"Date": None, "Creator": None}


class CsvFormatError(ValueError):
    pass


def read_table(path, numeric=()):
    """Header and rows of a CSV file; columns in ``numeric`` are parsed as floats.

    Raises CsvFormatError naming the offending line on ragged rows or bad numbers,
    and when there are no data rows.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvFormatError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            rec = dict(zip(header, row))
            for col in numeric:
                if col not in rec:
                    raise CsvFormatError(f"{path}: missing column {col!r}")
                try:
                    rec[col] = float(rec[col])
                except ValueError:
                    raise CsvFormatError(f"{path}:{line_no}: column {col!r} is not a number: {rec[col]!r}") from None
            rows.append(rec)
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    return header, rows


def band(series):
    """Mean and population standard deviation across equally long series."""
    arr = np.asarray(series, dtype=np.float64)
    return arr.mean(axis=0), arr.std(axis=0)


def _save(fig, out):
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return out


def line_with_band(curves: dict, out, xlabel="episode", ylabel="utility"):
    """``curves`` maps a label to a list of per-seed series; draws mean lines with mean +/- std bands."""
    if not curves:
        raise CsvFormatError("nothing to plot")
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, series in curves.items():
        mean, std = band(series)
        x = np.arange(len(mean))
        ax.plot(x, mean, label=str(label))
        if len(series) > 1:
            ax.fill_between(x, mean - std, mean + std, alpha=0.25)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(curves) > 1:
        ax.legend()
    return _save(fig, out)


def box_plot(groups: dict, out, xlabel, ylabel="utility"):
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = list(groups)
    ax.boxplot([groups[k] for k in labels])
    ax.set_xticks(range(1, len(labels) + 1), [str(k) for k in labels])
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    return _save(fig, out)


def scatter(x, y, out, xlabel, ylabel):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(x, y, s=12)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    return _save(fig, out)


def plot_utilities(paths, out):
    """One band over several per-seed ``utility.csv`` files."""
    series = []
    for p in paths:
        _, rows = read_table(p, numeric=("episode", "utility"))
        series.append([r["utility"] for r in sorted(rows, key=lambda r: r["episode"])])
    n = min(len(s) for s in series)
    return line_with_band({"utility": [s[:n] for s in series]}, out)


def plot_sweep(path, out):
    """Mean +/- std lines per swept value from a ``sweep.csv``."""
    header, rows = read_table(path, numeric=("episode", "utility_mean", "utility_std"))
    param = header[0]
    fig, ax = plt.subplots(figsize=(6, 4))
    for value in dict.fromkeys(r[param] for r in rows):
        sel = sorted((r for r in rows if r[param] == value), key=lambda r: r["episode"])
        x = np.array([r["episode"] for r in sel])
        m = np.array([r["utility_mean"] for r in sel])
        s = np.array([r["utility_std"] for r in sel])
        ax.plot(x, m, label=f"{param}={value}")
        ax.fill_between(x, m - s, m + s, alpha=0.2)
    ax.set_xlabel("episode")
    ax.set_ylabel("utility")
    ax.legend()
    return _save(fig, out)


def plot_overhead(paths, out):
    """Scatter of clique cover number against communication range over all episodes."""
    xs, ys = [], []
    for p in paths:
        _, rows = read_table(p, numeric=("d", "chi_bar"))
        xs += [r["d"] for r in rows]
        ys += [r["chi_bar"] for r in rows]
    return scatter(xs, ys, out, "communication range d (m)", "clique cover number")


def plot_files(paths, out_dir) -> list[Path]:
    """Pick a figure type from each file's header and write SVGs into ``out_dir``."""
    out_dir = Path(out_dir)
    groups: dict = {"utility": [], "overhead": [], "sweep": []}
    for p in paths:
        with open(p, newline="") as fh:
            header = next(csv.reader(fh), [])
        if "utility_mean" in header:
            groups["sweep"].append(p)
        elif "chi_bar" in header:
            groups["overhead"].append(p)
        elif "utility" in header:
            groups["utility"].append(p)
        else:
            raise CsvFormatError(f"{p}: unrecognized columns {header}")
    made = []
    if groups["utility"]:
        made.append(plot_utilities(groups["utility"], out_dir / "utility.svg"))
    if groups["overhead"]:
        made.append(plot_overhead(groups["overhead"], out_dir / "clique_cover.svg"))
    for k, p in enumerate(groups["sweep"]):
        made.append(plot_sweep(p, out_dir / f"sweep_{k}.svg"))
    return made
