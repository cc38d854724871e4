"""Render the exported panel data files to PNG figures.

Consumes the plain CSVs written by ``bench.export_figures``; any tool could
plot them, this module is the bundled matplotlib path used by the CLI.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .bench import PANEL_FILES  # noqa: E402

PANEL_TITLES = {
    "a": "True vs inferred ability (adaptive)",
    "b": "True vs inferred ability (random designs)",
    "c": "True vs inferred ability (non-adaptive)",
    "d": "Single-episode design trace",
    "e": "Design gap to true ability by trial",
    "f": "Training curves (eval MSE, mean +/- 1 std)",
}


def _read_csv(path: Path) -> tuple[list[str], list[list[float]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(x) for x in row] for row in reader]
    return header, rows


def _columns(rows: list[list[float]], n: int) -> list[list[float]]:
    return [[row[i] for row in rows] for i in range(n)]


def _render_scatter(path: Path, out: Path, title: str) -> None:
    _, rows = _read_csv(path)
    fig, ax = plt.subplots(figsize=(4.2, 4.2))
    if rows:
        x, y = _columns(rows, 2)
        lim = max(max(map(abs, x)), max(map(abs, y)), 1.0) * 1.05
        ax.plot([-lim, lim], [-lim, lim], color="0.7", lw=1, zorder=1)
        ax.scatter(x, y, s=6, alpha=0.35, zorder=2)
        ax.set_xlim(-lim, lim)
        ax.set_ylim(-lim, lim)
    ax.set_xlabel("true ability")
    ax.set_ylabel("inferred ability")
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)


def _render_trace(path: Path, out: Path, title: str) -> None:
    _, rows = _read_csv(path)
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    if rows:
        t, design, administered, ability = _columns(rows, 4)
        ax.plot(t, design, "o-", label="requested design")
        ax.plot(t, administered, "s--", label="administered item")
        ax.axhline(ability[0], color="0.4", lw=1, label="true ability (sigmoid midpoint)")
        ax.legend(fontsize=8)
    ax.set_xlabel("trial")
    ax.set_ylabel("difficulty")
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)


def _render_gap(path: Path, out: Path, title: str) -> None:
    _, rows = _read_csv(path)
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    if rows:
        t, requested, administered = _columns(rows, 3)
        ax.plot(t, requested, "o-", label="|requested - ability|")
        ax.plot(t, administered, "s--", label="|administered - ability|")
        ax.legend(fontsize=8)
        ax.set_ylim(bottom=0)
    ax.set_xlabel("trial")
    ax.set_ylabel("mean absolute gap")
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)


def _render_curves(path: Path, out: Path, title: str) -> None:
    _, rows = _read_csv(path)
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    if rows:
        update, mean, std = _columns(rows, 3)
        lo = [m - s for m, s in zip(mean, std)]
        hi = [m + s for m, s in zip(mean, std)]
        ax.plot(update, mean, lw=1.2)
        ax.fill_between(update, lo, hi, alpha=0.25)
        ax.set_ylim(bottom=0)
    ax.set_xlabel("update")
    ax.set_ylabel("final-step MSE")
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)


_RENDERERS = {
    "a": _render_scatter,
    "b": _render_scatter,
    "c": _render_scatter,
    "d": _render_trace,
    "e": _render_gap,
    "f": _render_curves,
}


def render_panels(data_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Render every panel CSV found in ``data_dir``; returns written paths."""
    data = Path(data_dir)
    out = Path(out_dir) if out_dir is not None else data
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for panel, filename in PANEL_FILES.items():
        src = data / filename
        if not src.is_file():
            continue
        dst = out / (src.stem + ".png")
        _RENDERERS[panel](src, dst, PANEL_TITLES[panel])
        written.append(dst)
    return written
