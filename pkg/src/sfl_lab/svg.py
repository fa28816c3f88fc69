"""Minimal SVG writers for sample scatters and metric curves."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf"]


def _color(c):
    return PALETTE[int(c) % len(PALETTE)]


class _Frame:
    def __init__(self, xs, ys, width, height, pad=40):
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        self.x0, self.x1 = float(xs.min()), float(xs.max())
        self.y0, self.y1 = float(ys.min()), float(ys.max())
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 == self.y0:
            self.y1 = self.y0 + 1.0
        self.w, self.h, self.pad = width, height, pad

    def px(self, x):
        return self.pad + (x - self.x0) / (self.x1 - self.x0) * (self.w - 2 * self.pad)

    def py(self, y):
        return self.h - self.pad - (y - self.y0) / (self.y1 - self.y0) * (self.h - 2 * self.pad)


def _document(width, height, body, title):
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n'
        f'<rect width="100%" height="100%" fill="white"/>\n'
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" '
        f'font-size="14">{escape(title)}</text>\n' + "".join(body) + "</svg>\n"
    )


def scatter(path, real_x, real_y, fake_x, fake_y, title="", size=480):
    """Real points as hollow circles, generated points filled, coloured by class."""
    allx = np.concatenate([real_x, fake_x])
    frame = _Frame(allx[:, 0], allx[:, 1], size, size)
    body = []
    for (a, b), c in zip(real_x, real_y):
        body.append(f'<circle cx="{frame.px(a):.2f}" cy="{frame.py(b):.2f}" r="2.2" fill="none" '
                    f'stroke="{_color(c)}" stroke-width="0.6"/>\n')
    for (a, b), c in zip(fake_x, fake_y):
        body.append(f'<circle cx="{frame.px(a):.2f}" cy="{frame.py(b):.2f}" r="1.6" fill="{_color(c)}"/>\n')
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(_document(size, size, body, title))


def line_plot(path, series, title="", ylabel="FID", width=640, height=400):
    """``series`` maps a name to ``(epochs, values)``; one polyline per name."""
    xs = np.concatenate([np.asarray(e, float) for e, _ in series.values()])
    ys = np.concatenate([np.asarray(v, float) for _, v in series.values()])
    frame = _Frame(xs, ys, width, height, pad=50)
    body = [
        f'<line x1="{frame.pad}" y1="{height - frame.pad}" x2="{width - frame.pad}" y2="{height - frame.pad}" stroke="black"/>\n',
        f'<line x1="{frame.pad}" y1="{frame.pad}" x2="{frame.pad}" y2="{height - frame.pad}" stroke="black"/>\n',
        f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle" font-family="sans-serif" font-size="12">epoch</text>\n',
        f'<text x="14" y="{height / 2:.1f}" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 14 {height / 2:.1f})" text-anchor="middle">{escape(ylabel)}</text>\n',
        f'<text x="{frame.pad - 4}" y="{frame.py(frame.y1) + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="10">{frame.y1:.4g}</text>\n',
        f'<text x="{frame.pad - 4}" y="{frame.py(frame.y0) + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="10">{frame.y0:.4g}</text>\n',
    ]
    for i, (name, (epochs, values)) in enumerate(series.items()):
        pts = " ".join(f"{frame.px(e):.2f},{frame.py(v):.2f}" for e, v in zip(epochs, values))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{_color(i)}" stroke-width="1.5"/>\n')
        body.append(f'<text x="{width - frame.pad + 4}" y="{frame.pad + 14 * i}" font-family="sans-serif" '
                    f'font-size="11" fill="{_color(i)}">{escape(str(name))}</text>\n')
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(_document(width, height, body, title))
