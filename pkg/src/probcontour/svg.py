"""SVG rendering of predictions: image, contours and confidence ellipses."""
from __future__ import annotations

import colorsys
import math

import numpy as np

from .inference import PredictiveDistribution, confidence_ellipse, vertex_marginal

REFERENCE_COLOR = "#ff0000"
MEAN_COLOR = "#00ffff"
SAMPLE_COLOR = "#0000ff"


def _f(x: float) -> str:
    return f"{x:.4f}".rstrip("0").rstrip(".") if x != 0 else "0"


def hue_color(angle: float) -> str:
    """Map a major-axis angle in [0, pi) to a fully saturated hue."""
    r, g, b = colorsys.hsv_to_rgb((angle / math.pi) % 1.0, 1.0, 1.0)
    return "#{:02x}{:02x}{:02x}".format(round(r * 255), round(g * 255), round(b * 255))


def _polyline(contour, scale: float, color: str, width: float, opacity: float = 1.0) -> str:
    pts = np.asarray(contour, dtype=np.float64).reshape(-1, 2) * scale
    coords = " ".join(f"{_f(x)},{_f(y)}" for x, y in pts)
    extra = f' stroke-opacity="{_f(opacity)}"' if opacity < 1 else ""
    return f'<polygon points="{coords}" fill="none" stroke="{color}" stroke-width="{_f(width)}"{extra}/>'


def render_svg(
    dist: PredictiveDistribution,
    image: np.ndarray | None = None,
    reference=None,
    samples=None,
    levels=(0.30, 0.95, 0.999),
    every: int = 2,
    scale: float = 8.0,
) -> str:
    """Layered SVG 1.1 document.

    Layers: grayscale raster, sampled contours (blue), reference (red), mean
    (cyan), then one ellipse per level for every ``every``-th vertex, stroked
    with a hue encoding the major-axis direction.
    """
    if image is not None:
        image = np.asarray(image)
        h, w = image.shape
    else:
        pts = dist.mean.reshape(-1, 2)
        w, h = int(math.ceil(pts[:, 0].max())) + 1, int(math.ceil(pts[:, 1].max())) + 1
    W, H = w * scale, h * scale
    out = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{_f(W)}" height="{_f(H)}" '
        f'viewBox="0 0 {_f(W)} {_f(H)}">',
    ]
    if image is not None:
        img = image.astype(np.float64)
        lo, hi = img.min(), img.max()
        grey = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
        out.append('<g id="image" shape-rendering="crispEdges">')
        for r in range(h):
            for c in range(w):
                v = int(round(grey[r, c] * 255))
                out.append(
                    f'<rect x="{_f(c * scale)}" y="{_f(r * scale)}" width="{_f(scale)}" height="{_f(scale)}" '
                    f'fill="#{v:02x}{v:02x}{v:02x}"/>'
                )
        out.append("</g>")
    if samples is not None and len(samples):
        out.append('<g id="samples">')
        out += [_polyline(s, scale, SAMPLE_COLOR, 1.0, 0.6) for s in np.atleast_2d(samples)]
        out.append("</g>")
    if reference is not None:
        out.append('<g id="reference">' + _polyline(reference, scale, REFERENCE_COLOR, 1.5) + "</g>")
    out.append('<g id="mean">' + _polyline(dist.mean, scale, MEAN_COLOR, 1.5) + "</g>")
    out.append('<g id="ellipses" fill="none">')
    for i in range(0, dist.vertex_count, max(1, int(every))):
        m, cov = vertex_marginal(dist, i)
        for level in levels:
            e = confidence_ellipse(m, cov, level)
            cx, cy = e.center * scale
            deg = math.degrees(e.angle)
            out.append(
                f'<ellipse data-vertex="{i}" data-level="{_f(level)}" cx="{_f(cx)}" cy="{_f(cy)}" '
                f'rx="{_f(e.semi_axes[0] * scale)}" ry="{_f(e.semi_axes[1] * scale)}" '
                f'transform="rotate({_f(deg)} {_f(cx)} {_f(cy)})" stroke="{hue_color(e.angle)}" stroke-width="1"/>'
            )
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
