"""Figures as self-contained SVG files, each written next to the CSV it draws.

The SVG builder is deliberately small: axes with ticks, polylines,
markers, bars and colored cells.  Every figure function writes
``<stem>.csv`` (the plotted numbers) and ``<stem>.svg``.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

log = logging.getLogger(__name__)

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")


def _fmt(v):
    return f"{v:.2f}"


def _tick_label(v):
    return f"{v:.3g}"


class Panel:
    """One set of axes placed at (x0, y0) with the given pixel size."""

    def __init__(self, x0, y0, width, height, xlim, ylim, title="", xlabel="", ylabel=""):
        self.x0, self.y0, self.w, self.h = x0, y0, width, height
        self.xlim = self._pad(xlim)
        self.ylim = self._pad(ylim)
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.items = []

    @staticmethod
    def _pad(lim):
        lo, hi = float(lim[0]), float(lim[1])
        if not (np.isfinite(lo) and np.isfinite(hi)):
            return (0.0, 1.0)
        if hi <= lo:
            span = abs(lo) * 0.05 or 0.5
            return (lo - span, hi + span)
        return (lo, hi)

    def px(self, x):
        return self.x0 + (np.asarray(x, dtype=float) - self.xlim[0]) / (self.xlim[1] - self.xlim[0]) * self.w

    def py(self, y):
        return self.y0 + self.h - (np.asarray(y, dtype=float) - self.ylim[0]) / (self.ylim[1] - self.ylim[0]) * self.h

    def line(self, x, y, color=PALETTE[0], width=1.0, dash=None):
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        ok = np.isfinite(x) & np.isfinite(y)
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(self.px(x[ok]), self.py(y[ok])))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.items.append(f'<polyline fill="none" stroke="{color}" stroke-width="{width}"{extra} points="{pts}"/>')

    def points(self, x, y, color=PALETTE[0], r=1.5, opacity=0.6):
        for a, b in zip(self.px(x), self.py(y)):
            if np.isfinite(a) and np.isfinite(b):
                self.items.append(f'<circle cx="{_fmt(a)}" cy="{_fmt(b)}" r="{r}" fill="{color}" fill-opacity="{opacity}"/>')

    def bars(self, edges, heights, color=PALETTE[0], opacity=0.6):
        base = self.py(max(self.ylim[0], 0.0))
        for lo, hi, v in zip(edges[:-1], edges[1:], heights):
            x1, x2, top = self.px(lo), self.px(hi), self.py(v)
            self.items.append(f'<rect x="{_fmt(x1)}" y="{_fmt(min(top, base))}" width="{_fmt(max(x2 - x1, 0.1))}" '
                              f'height="{_fmt(abs(base - top))}" fill="{color}" fill-opacity="{opacity}"/>')

    def cells(self, matrix):
        m = np.asarray(matrix, dtype=float)
        vmax = float(np.nanmax(np.abs(m))) or 1.0
        nr, nc = m.shape
        cw, ch = self.w / nc, self.h / nr
        for i in range(nr):
            for j in range(nc):
                v = m[i, j] / vmax
                # diverging blue-white-red
                if v >= 0:
                    rgb = (255, int(255 * (1 - v)), int(255 * (1 - v)))
                else:
                    rgb = (int(255 * (1 + v)), int(255 * (1 + v)), 255)
                self.items.append(f'<rect x="{_fmt(self.x0 + j * cw)}" y="{_fmt(self.y0 + i * ch)}" width="{_fmt(cw)}" '
                                  f'height="{_fmt(ch)}" fill="rgb({rgb[0]},{rgb[1]},{rgb[2]})"/>')

    def render(self, axes=True):
        out = []
        if axes:
            out.append(f'<rect x="{_fmt(self.x0)}" y="{_fmt(self.y0)}" width="{_fmt(self.w)}" height="{_fmt(self.h)}" '
                       'fill="none" stroke="#333" stroke-width="0.8"/>')
            for v in np.linspace(*self.xlim, 5):
                x = self.px(v)
                out.append(f'<line x1="{_fmt(x)}" y1="{_fmt(self.y0 + self.h)}" x2="{_fmt(x)}" '
                           f'y2="{_fmt(self.y0 + self.h + 4)}" stroke="#333"/>')
                out.append(f'<text x="{_fmt(x)}" y="{_fmt(self.y0 + self.h + 15)}" font-size="9" '
                           f'text-anchor="middle">{_tick_label(v)}</text>')
            for v in np.linspace(*self.ylim, 5):
                y = self.py(v)
                out.append(f'<line x1="{_fmt(self.x0 - 4)}" y1="{_fmt(y)}" x2="{_fmt(self.x0)}" y2="{_fmt(y)}" stroke="#333"/>')
                out.append(f'<text x="{_fmt(self.x0 - 6)}" y="{_fmt(y + 3)}" font-size="9" '
                           f'text-anchor="end">{_tick_label(v)}</text>')
        if self.title:
            out.append(f'<text x="{_fmt(self.x0 + self.w / 2)}" y="{_fmt(self.y0 - 6)}" font-size="11" '
                       f'text-anchor="middle">{escape(self.title)}</text>')
        if self.xlabel:
            out.append(f'<text x="{_fmt(self.x0 + self.w / 2)}" y="{_fmt(self.y0 + self.h + 28)}" font-size="10" '
                       f'text-anchor="middle">{escape(self.xlabel)}</text>')
        if self.ylabel:
            cx, cy = self.x0 - 38, self.y0 + self.h / 2
            out.append(f'<text x="{_fmt(cx)}" y="{_fmt(cy)}" font-size="10" text-anchor="middle" '
                       f'transform="rotate(-90 {_fmt(cx)} {_fmt(cy)})">{escape(self.ylabel)}</text>')
        return out + self.items


class Figure:
    def __init__(self, width, height, title=""):
        self.width, self.height, self.title = width, height, title
        self.panels = []
        self.extra = []

    def add(self, panel):
        self.panels.append(panel)
        return panel

    def legend(self, x, y, labels, colors):
        for i, (lab, col) in enumerate(zip(labels, colors)):
            yy = y + 14 * i
            self.extra.append(f'<line x1="{x}" y1="{yy}" x2="{x + 18}" y2="{yy}" stroke="{col}" stroke-width="2"/>')
            self.extra.append(f'<text x="{x + 22}" y="{yy + 4}" font-size="10">{escape(str(lab))}</text>')

    def to_svg(self):
        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
                 f'viewBox="0 0 {self.width} {self.height}" font-family="sans-serif">',
                 f'<rect width="{self.width}" height="{self.height}" fill="white"/>']
        if self.title:
            parts.append(f'<text x="{self.width / 2}" y="16" font-size="13" text-anchor="middle">{escape(self.title)}</text>')
        for p in self.panels:
            parts.extend(p.render(axes=not getattr(p, "bare", False)))
        parts.extend(self.extra)
        parts.append("</svg>")
        return "\n".join(parts) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_svg(), encoding="utf-8")


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _grid(n, cols):
    cols = min(cols, n)
    return cols, int(np.ceil(n / cols))


def _lim(a):
    a = np.asarray(a, dtype=float)
    a = a[np.isfinite(a)]
    return (float(a.min()), float(a.max())) if a.size else (0.0, 1.0)


# ----------------------------------------------------------------------------
# figures


def trace_plot(chains, out_dir, stem="trace"):
    """Draw-by-draw traces per parameter, one color per chain."""
    out_dir = Path(out_dir)
    names = list(chains[0].names)
    rows = [(c, i, *row) for c, ch in enumerate(chains) for i, row in enumerate(ch.draws)]
    write_csv(out_dir / f"{stem}.csv", ["chain", "draw", *names], rows)
    cols, nrows = _grid(len(names), 2)
    fig = Figure(40 + cols * 330, 40 + nrows * 170, "Traces")
    for j, name in enumerate(names):
        r, c = divmod(j, cols)
        allv = np.concatenate([ch.draws[:, j] for ch in chains])
        p = fig.add(Panel(70 + c * 330, 50 + r * 170, 260, 110, (0, max(ch.n_draws for ch in chains) - 1),
                          _lim(allv), name, "draw"))
        for k, ch in enumerate(chains):
            p.line(np.arange(ch.n_draws), ch.draws[:, j], PALETTE[k % len(PALETTE)], 0.6)
    fig.save(out_dir / f"{stem}.svg")
    return [out_dir / f"{stem}.csv", out_dir / f"{stem}.svg"]


def histogram_plot(chains, out_dir, stem="posterior_hist", bins=30):
    """Pooled marginal histograms (density scale)."""
    out_dir = Path(out_dir)
    names = list(chains[0].names)
    draws = np.concatenate([ch.draws for ch in chains])
    rows = []
    cols, nrows = _grid(len(names), 3)
    fig = Figure(40 + cols * 240, 40 + nrows * 170, "Posterior marginals")
    for j, name in enumerate(names):
        dens, edges = np.histogram(draws[:, j], bins=bins, density=True)
        rows += [(name, edges[i], edges[i + 1], dens[i]) for i in range(bins)]
        r, c = divmod(j, cols)
        p = fig.add(Panel(60 + c * 240, 50 + r * 170, 180, 110, (edges[0], edges[-1]), (0, dens.max()), name))
        p.bars(edges, dens)
    write_csv(out_dir / f"{stem}.csv", ["parameter", "bin_low", "bin_high", "density"], rows)
    fig.save(out_dir / f"{stem}.svg")
    return [out_dir / f"{stem}.csv", out_dir / f"{stem}.svg"]


def pairs_plot(chains, out_dir, stem="pairs", max_points=500, names=None):
    """Scatter grid of every parameter pair, histograms on the diagonal."""
    out_dir = Path(out_dir)
    all_names = list(chains[0].names)
    names = list(names) if names else all_names[: min(len(all_names), 6)]
    idx = [all_names.index(n) for n in names]
    draws = np.concatenate([ch.draws for ch in chains])[:, idx]
    keep = np.unique(np.linspace(0, len(draws) - 1, min(max_points, len(draws))).astype(int))
    sub = draws[keep]
    write_csv(out_dir / f"{stem}.csv", list(names), sub.tolist())
    d = len(names)
    size = 120
    fig = Figure(60 + d * (size + 20), 60 + d * (size + 20), "Pairwise posterior")
    lims = [_lim(sub[:, j]) for j in range(d)]
    for i in range(d):
        for j in range(d):
            x0, y0 = 50 + j * (size + 20), 40 + i * (size + 20)
            if i == j:
                dens, edges = np.histogram(sub[:, j], bins=20, density=True)
                p = fig.add(Panel(x0, y0, size, size, lims[j], (0, dens.max()), names[j]))
                p.bars(edges, dens)
            else:
                p = fig.add(Panel(x0, y0, size, size, lims[j], lims[i]))
                p.points(sub[:, j], sub[:, i], r=1.0, opacity=0.4)
    fig.save(out_dir / f"{stem}.svg")
    return [out_dir / f"{stem}.csv", out_dir / f"{stem}.svg"]


def covariance_heatmap(matrix, out_dir, stem="covariance"):
    out_dir = Path(out_dir)
    m = np.asarray(matrix, dtype=float)
    rows = [(i, j, m[i, j]) for i in range(m.shape[0]) for j in range(m.shape[1])]
    write_csv(out_dir / f"{stem}.csv", ["row", "col", "value"], rows)
    fig = Figure(460, 460, "Covariance")
    p = fig.add(Panel(40, 40, 380, 380, (0, m.shape[1]), (0, m.shape[0])))
    p.bare = True
    p.cells(m)
    fig.save(out_dir / f"{stem}.svg")
    return [out_dir / f"{stem}.csv", out_dir / f"{stem}.svg"]


def overlay_plot(times, locations, observed, predictions: dict, out_dir, stem="overlay"):
    """Observed series (markers) against one or more predicted series per location.

    ``observed`` and each prediction have shape (L, T).
    """
    out_dir = Path(out_dir)
    observed = np.asarray(observed, dtype=float)
    labels = list(predictions)
    rows = []
    for li, loc in enumerate(locations):
        for ti, t in enumerate(times):
            rows.append((loc, t, observed[li, ti], *(np.asarray(predictions[k])[li, ti] for k in labels)))
    write_csv(out_dir / f"{stem}.csv", ["location", "time", "observed", *labels], rows)
    L = len(locations)
    fig = Figure(40 + L * 300, 260, "Prediction vs observation")
    allv = np.concatenate([observed.ravel(), *(np.asarray(v).ravel() for v in predictions.values())])
    for li, loc in enumerate(locations):
        p = fig.add(Panel(70 + li * 300, 50, 230, 150, _lim(times), _lim(allv), str(loc), "time"))
        p.points(times, observed[li], "#000000", 2.0, 0.8)
        for k, lab in enumerate(labels):
            p.line(times, np.asarray(predictions[lab])[li], PALETTE[k % len(PALETTE)], 1.4)
    fig.legend(80, 235, labels, [PALETTE[k % len(PALETTE)] for k in range(len(labels))])
    fig.save(out_dir / f"{stem}.svg")
    return [out_dir / f"{stem}.csv", out_dir / f"{stem}.svg"]


def error_distribution_plot(errors: dict, out_dir, stem="errors", bins=30):
    """Overlaid histograms of error samples, e.g. ``{"prior": e0, "posterior": e1}``."""
    out_dir = Path(out_dir)
    labels = list(errors)
    allv = np.concatenate([np.ravel(errors[k]) for k in labels])
    edges = np.histogram_bin_edges(allv[np.isfinite(allv)], bins=bins)
    rows, hists = [], {}
    for lab in labels:
        dens, _ = np.histogram(np.ravel(errors[lab]), bins=edges, density=True)
        hists[lab] = dens
        rows += [(lab, edges[i], edges[i + 1], dens[i]) for i in range(bins)]
    write_csv(out_dir / f"{stem}.csv", ["source", "bin_low", "bin_high", "density"], rows)
    fig = Figure(420, 280, "Error distribution (observation - prediction)")
    p = fig.add(Panel(70, 50, 320, 170, (edges[0], edges[-1]), (0, max(h.max() for h in hists.values())),
                      xlabel="error"))
    for k, lab in enumerate(labels):
        p.bars(edges, hists[lab], PALETTE[k % len(PALETTE)], 0.45)
    fig.legend(80, 262, labels, [PALETTE[k % len(PALETTE)] for k in range(len(labels))])
    fig.save(out_dir / f"{stem}.svg")
    return [out_dir / f"{stem}.csv", out_dir / f"{stem}.svg"]


# ----------------------------------------------------------------------------
# directory-level report


def build_report(artifacts, out_dir) -> dict:
    """Render every figure the artifacts allow; list what was missing.

    Looks for ``chains/chains.csv``, ``cov/*.csv``, ``cases/*.csv`` with
    ``validation/predictions/*.csv`` and ``validation/errors.csv`` under
    ``artifacts`` (a directory path).  Returns ``{"written": [...],
    "missing": [...]}`` with paths relative to ``out_dir``.
    """
    from .core import read_grid_csv
    from .covest import load_covariance
    from .sampler import read_chains

    artifacts, out_dir = Path(artifacts), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written, missing = [], []
    chains_path = artifacts / "chains" / "chains.csv"
    if chains_path.exists():
        chains = read_chains(chains_path)
        written += trace_plot(chains, out_dir)
        written += histogram_plot(chains, out_dir)
        hyper = [n for n in chains[0].names if n.startswith(("mu_", "sigma_"))]
        written += pairs_plot(chains, out_dir, names=hyper[:6] or None)
    else:
        missing.append("chains/chains.csv")
    cov_files = sorted((artifacts / "cov").glob("*.csv")) if (artifacts / "cov").is_dir() else []
    if cov_files:
        for f in cov_files:
            written += covariance_heatmap(load_covariance(f).matrix, out_dir, f"covariance_{f.stem}")
    else:
        missing.append("cov/*.csv")
    pred_dir = artifacts / "validation" / "predictions"
    pred_files = sorted(pred_dir.glob("*.csv")) if pred_dir.is_dir() else []
    if pred_files:
        for f in pred_files:
            obs_path = artifacts / "cases" / f"{f.stem}.csv"
            if not obs_path.exists():
                missing.append(f"cases/{f.stem}.csv")
                continue
            obs = read_grid_csv(obs_path)
            with open(f, newline="", encoding="utf-8") as fh:
                rdr = list(csv.reader(fh))
            labels = rdr[0][2:]
            data = np.array([[float(v) for v in r[2:]] for r in rdr[1:]])
            L, T = len(obs.locations), len(obs.times)
            preds = {lab: data[:, k].reshape(L, T) for k, lab in enumerate(labels)}
            written += overlay_plot(obs.times, obs.locations, obs.values, preds, out_dir, f"overlay_{f.stem}")
    else:
        missing.append("validation/predictions/*.csv")
    err_path = artifacts / "validation" / "errors.csv"
    if err_path.exists():
        with open(err_path, newline="", encoding="utf-8") as fh:
            rdr = list(csv.DictReader(fh))
        groups = {}
        for r in rdr:
            groups.setdefault(f"{r['split']}:{r['source']}", []).append(float(r["error"]))
        written += error_distribution_plot(groups, out_dir)
    else:
        missing.append("validation/errors.csv")
    for m in missing:
        log.warning("report: missing artifact %s", m)
    index = {"written": sorted(str(p.relative_to(out_dir)) for p in written), "missing": missing}
    with open(out_dir / "index.json", "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
    return index
