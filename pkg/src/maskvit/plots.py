"""Self-contained SVG convergence plots.

The SVG is assembled by hand from fixed-precision coordinates so the same
inputs always produce byte-identical output, with no external resources.
"""

from __future__ import annotations

WIDTH, HEIGHT = 640, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 60, 160, 20, 45

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#e377c2", "#7f7f7f")


def _fmt(x):
    return f"{x:.2f}"


def convergence_svg(runs):
    """Render accuracy-vs-epoch polylines.

    `runs` is a list of dicts with keys: label, epochs (list of ints),
    accuracy (list of floats), activation_epoch (int or None, drawn as a
    dashed vertical marker).
    """
    if not runs:
        raise ValueError("no runs to plot")
    max_epoch = max(max(r["epochs"]) for r in runs)
    min_epoch = min(min(r["epochs"]) for r in runs)
    lo = min(min(r["accuracy"]) for r in runs)
    hi = max(max(r["accuracy"]) for r in runs)
    pad = max(0.02, (hi - lo) * 0.08)
    lo, hi = max(0.0, lo - pad), min(1.0, hi + pad)
    if hi <= lo:
        lo, hi = lo - 0.05, lo + 0.05

    plot_w = WIDTH - MARGIN_L - MARGIN_R
    plot_h = HEIGHT - MARGIN_T - MARGIN_B
    span_e = max(1, max_epoch - min_epoch)

    def sx(epoch):
        return MARGIN_L + plot_w * (epoch - min_epoch) / span_e

    def sy(acc):
        return MARGIN_T + plot_h * (1.0 - (acc - lo) / (hi - lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{plot_w}" height="{plot_h}" '
        'fill="none" stroke="#333" stroke-width="1"/>',
    ]

    # y ticks
    for i in range(6):
        acc = lo + (hi - lo) * i / 5
        y = sy(acc)
        parts.append(f'<line x1="{MARGIN_L - 4}" y1="{_fmt(y)}" x2="{MARGIN_L}" '
                     f'y2="{_fmt(y)}" stroke="#333"/>')
        parts.append(f'<text x="{MARGIN_L - 8}" y="{_fmt(y + 4)}" font-size="11" '
                     f'font-family="monospace" text-anchor="end">{acc:.3f}</text>')
    # x ticks
    n_ticks = min(10, span_e)
    for i in range(n_ticks + 1):
        epoch = min_epoch + round(span_e * i / n_ticks)
        x = sx(epoch)
        parts.append(f'<line x1="{_fmt(x)}" y1="{MARGIN_T + plot_h}" x2="{_fmt(x)}" '
                     f'y2="{MARGIN_T + plot_h + 4}" stroke="#333"/>')
        parts.append(f'<text x="{_fmt(x)}" y="{MARGIN_T + plot_h + 18}" font-size="11" '
                     f'font-family="monospace" text-anchor="middle">{epoch}</text>')
    parts.append(f'<text x="{MARGIN_L + plot_w // 2}" y="{HEIGHT - 8}" font-size="12" '
                 'font-family="monospace" text-anchor="middle">epoch</text>')
    parts.append(f'<text x="16" y="{MARGIN_T + plot_h // 2}" font-size="12" '
                 'font-family="monospace" text-anchor="middle" '
                 f'transform="rotate(-90 16 {MARGIN_T + plot_h // 2})">test accuracy</text>')

    for i, run in enumerate(runs):
        color = PALETTE[i % len(PALETTE)]
        points = " ".join(f"{_fmt(sx(e))},{_fmt(sy(a))}"
                          for e, a in zip(run["epochs"], run["accuracy"]))
        parts.append(f'<polyline points="{points}" fill="none" stroke="{color}" '
                     'stroke-width="1.5"/>')
        act = run.get("activation_epoch")
        if act is not None:
            x = _fmt(sx(act))
            parts.append(f'<line x1="{x}" y1="{MARGIN_T}" x2="{x}" '
                         f'y2="{MARGIN_T + plot_h}" stroke="{color}" '
                         'stroke-width="1" stroke-dasharray="4,3" opacity="0.6"/>')
        ly = MARGIN_T + 14 + 16 * i
        lx = WIDTH - MARGIN_R + 10
        parts.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{lx + 24}" y="{ly}" font-size="11" '
                     f'font-family="monospace">{run["label"]}</text>')

    parts.append("</svg>")
    return "\n".join(parts) + "\n"
