"""Dependency-free figure output: PGM and SVG heatmaps, box-plot and histogram tables."""
import csv
from pathlib import Path

import numpy as np

from ..metrics import five_number_summary


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if np.isnan(v) else repr(float(v))


def _write_matrix_csv(path, matrix, row_label="row"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([row_label] + [str(j) for j in range(matrix.shape[1])])
        for i, row in enumerate(matrix):
            w.writerow([i] + [_fmt(v) for v in row])


def write_matrix_csv(path, matrix, row_label="row"):
    _write_matrix_csv(path, np.asarray(matrix, dtype=np.float64), row_label)


def _gray_levels(matrix, vmax=1.0):
    m = np.nan_to_num(np.asarray(matrix, dtype=np.float64), nan=0.0)
    return np.clip(np.rint(m / vmax * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, levels):
    """Binary (P5) graymap, one pixel per matrix cell, maxval 255."""
    levels = np.asarray(levels, dtype=np.uint8)
    h, w = levels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(levels.tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def write_svg(path, levels, cell=6, title=None):
    """One ``<rect>`` per cell, grey value as fill. Rows top to bottom."""
    levels = np.asarray(levels, dtype=np.uint8)
    h, w = levels.shape
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * cell}" height="{h * cell}" '
        f'viewBox="0 0 {w * cell} {h * cell}" shape-rendering="crispEdges">'
    ]
    if title:
        out.append(f"<title>{title}</title>")
    out.append(f'<rect width="{w * cell}" height="{h * cell}" fill="#000000"/>')
    for i in range(h):
        for j in range(w):
            g = int(levels[i, j])
            if g:
                out.append(
                    f'<rect x="{j * cell}" y="{i * cell}" width="{cell}" height="{cell}" '
                    f'fill="#{g:02x}{g:02x}{g:02x}"/>'
                )
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def emit_heatmap(matrix, path, title=None):
    """Write ``<path>.pgm``, ``<path>.svg`` and ``<path>.csv`` for a matrix of values in [0, 1].

    Rows are source points, columns perturbation indices; missing (NaN) cells render black.
    """
    path = Path(path)
    matrix = np.asarray(matrix, dtype=np.float64)
    levels = _gray_levels(matrix)
    write_pgm(path.with_suffix(".pgm"), levels)
    write_svg(path.with_suffix(".svg"), levels, title=title)
    _write_matrix_csv(path.with_suffix(".csv"), matrix, row_label="source")
    return [path.with_suffix(s) for s in (".pgm", ".svg", ".csv")]


def emit_count_heatmap(counts, path, title=None):
    """Log-scaled rendering of a count matrix (zero counts black), plus exact CSV."""
    path = Path(path)
    counts = np.asarray(counts, dtype=np.float64)
    scaled = np.log1p(counts)
    top = scaled.max()
    levels = _gray_levels(scaled / top if top > 0 else scaled)
    write_pgm(path.with_suffix(".pgm"), levels)
    write_svg(path.with_suffix(".svg"), levels, title=title)
    _write_matrix_csv(path.with_suffix(".csv"), counts.astype(np.int64), row_label="bin")
    return [path.with_suffix(s) for s in (".pgm", ".svg", ".csv")]


def boxplot_rows(matrix):
    rows = []
    for p, row in enumerate(np.asarray(matrix, dtype=np.float64)):
        if np.all(np.isnan(row)):
            continue
        rows.append((p, *five_number_summary(row)))
    return rows


def emit_boxplot_data(matrix, path):
    """Per-source min, Q1, median, Q3, max (linear-interpolation quantiles) as CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "min", "q1", "median", "q3", "max"])
        for row in boxplot_rows(matrix):
            w.writerow([row[0]] + [repr(v) for v in row[1:]])
    return Path(path)
