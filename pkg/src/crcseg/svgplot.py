"""Self-contained SVG charts (no renderer dependency, diffable output)."""

from __future__ import annotations

from pathlib import Path

W, H = 640, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 30, 50, 60
PLOT_W = W - MARGIN_L - MARGIN_R
PLOT_H = H - MARGIN_T - MARGIN_B

PALETTE = ("#2266bb", "#cc5522", "#339955", "#aa3388", "#887711", "#116677")


def _axis_range(values) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.08 * (hi - lo)
    return lo - pad, hi + pad


def _svg_header(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="13">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="24" text-anchor="middle" font-size="16">{title}</text>',
    ]


def _axes(parts: list[str], xlabel: str, ylabel: str) -> None:
    x0, y0 = MARGIN_L, MARGIN_T + PLOT_H
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + PLOT_W}" y2="{y0}" stroke="black"/>')
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{MARGIN_T}" stroke="black"/>')
    parts.append(f'<text x="{x0 + PLOT_W / 2}" y="{H - 14}" text-anchor="middle">{xlabel}</text>')
    parts.append(f'<text x="18" y="{MARGIN_T + PLOT_H / 2}" text-anchor="middle" '
                 f'transform="rotate(-90 18 {MARGIN_T + PLOT_H / 2})">{ylabel}</text>')


def _yticks(parts: list[str], ylo: float, yhi: float) -> None:
    for i in range(5):
        v = ylo + (yhi - ylo) * i / 4
        y = MARGIN_T + PLOT_H * (1 - i / 4)
        parts.append(f'<line x1="{MARGIN_L - 4}" y1="{y:.1f}" x2="{MARGIN_L}" '
                     f'y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{MARGIN_L - 8}" y="{y + 4:.1f}" '
                     f'text-anchor="end">{v:.3f}</text>')


def line_chart(series: dict[str, list[tuple[float, float]]], title: str,
               xlabel: str, ylabel: str) -> str:
    """One polyline per named series; points are (x, y) pairs."""
    if not series or all(not pts for pts in series.values()):
        raise ValueError("line_chart needs at least one non-empty series")
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    xlo, xhi = _axis_range(xs)
    ylo, yhi = _axis_range(ys)

    def px(x): return MARGIN_L + PLOT_W * (x - xlo) / (xhi - xlo)
    def py(y): return MARGIN_T + PLOT_H * (1 - (y - ylo) / (yhi - ylo))

    parts = _svg_header(title)
    _axes(parts, xlabel, ylabel)
    _yticks(parts, ylo, yhi)
    for x in sorted(set(xs)):
        parts.append(f'<text x="{px(x):.1f}" y="{MARGIN_T + PLOT_H + 18}" '
                     f'text-anchor="middle">{x:g}</text>')
    for i, (name, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in sorted(pts))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                     f'stroke-width="2"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" '
                         f'fill="{color}"/>')
        ly = MARGIN_T + 16 * i
        parts.append(f'<rect x="{W - MARGIN_R - 150}" y="{ly}" width="12" '
                     f'height="12" fill="{color}"/>')
        parts.append(f'<text x="{W - MARGIN_R - 132}" y="{ly + 11}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def bar_chart(labels: list[str], values: list[float], title: str,
              xlabel: str, ylabel: str) -> str:
    if not labels:
        raise ValueError("bar_chart needs at least one bar")
    ylo = min(0.0, min(values))
    yhi = max(values)
    if yhi == ylo:
        yhi = ylo + 1.0
    yhi *= 1.08

    def py(y): return MARGIN_T + PLOT_H * (1 - (y - ylo) / (yhi - ylo))

    parts = _svg_header(title)
    _axes(parts, xlabel, ylabel)
    _yticks(parts, ylo, yhi)
    n = len(labels)
    slot = PLOT_W / n
    width = slot * 0.6
    for i, (label, v) in enumerate(zip(labels, values)):
        x = MARGIN_L + slot * i + (slot - width) / 2
        color = PALETTE[i % len(PALETTE)]
        parts.append(f'<rect x="{x:.1f}" y="{py(v):.1f}" width="{width:.1f}" '
                     f'height="{py(ylo) - py(v):.1f}" fill="{color}"/>')
        parts.append(f'<text x="{x + width / 2:.1f}" y="{py(v) - 5:.1f}" '
                     f'text-anchor="middle">{v:.3f}</text>')
        parts.append(f'<text x="{x + width / 2:.1f}" y="{MARGIN_T + PLOT_H + 18}" '
                     f'text-anchor="middle">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def save_svg(svg: str, path: Path | str) -> None:
    Path(path).write_text(svg + "\n")
