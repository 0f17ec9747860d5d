"""SVG figures: uncertainty heatmaps over 2D inputs and reliability diagrams.

Output bytes are reproducible: fixed svg hash salt, no date metadata, Agg backend.
"""

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

SVG_RC = {
    "svg.hashsalt": "gemkit",
    "svg.fonttype": "none",
    "font.size": 8,
    "axes.linewidth": 0.6,
    "xtick.major.width": 0.6,
    "ytick.major.width": 0.6,
}

LABELS = {"entropy": "predictive entropy", "mi": "mutual information", "alpha0": r"$\alpha_0$",
          "energy": "energy"}


def _svg_bytes(fig):
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()


def heatmap_svg(grid, points=None, labels=None, ood_points=None, title=None):
    """Raster of grid.values (brighter = larger) with optional scatter overlays."""
    with plt.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(3.6, 3.0))
        extent = (grid.xs[0], grid.xs[-1], grid.ys[0], grid.ys[-1])
        im = ax.imshow(grid.values, origin="lower", extent=extent, aspect="auto", cmap="magma",
                       interpolation="nearest")
        if points is not None:
            pts = np.asarray(points)
            c = None if labels is None else np.asarray(labels)
            ax.scatter(pts[:, 0], pts[:, 1], c=c, s=1.5, cmap="coolwarm", linewidths=0, alpha=0.7)
        if ood_points is not None:
            o = np.asarray(ood_points)
            ax.scatter(o[:, 0], o[:, 1], c="white", s=1.5, linewidths=0, alpha=0.7)
        ax.set_xlim(extent[0], extent[1])
        ax.set_ylim(extent[2], extent[3])
        ax.set_xlabel("$x_1$")
        ax.set_ylabel("$x_2$")
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax, label=LABELS.get(grid.score, grid.score), shrink=0.85)
        fig.tight_layout()
        return _svg_bytes(fig)


def reliability_svg(bins, title=None):
    """Bar reliability diagram from metrics.ece_bins rows."""
    with plt.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(3.0, 3.0))
        width = bins[0][1] - bins[0][0]
        lows = [b[0] for b in bins]
        accs = [b[3] if b[4] else 0.0 for b in bins]
        confs = [b[2] if b[4] else 0.0 for b in bins]
        ax.bar(lows, accs, width=width, align="edge", color="#4c72b0", edgecolor="k", linewidth=0.4,
               label="accuracy")
        ax.bar(lows, np.subtract(confs, accs), bottom=accs, width=width, align="edge", color="#dd8452",
               alpha=0.5, edgecolor="none", label="gap")
        ax.plot([0, 1], [0, 1], "k--", lw=0.6)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("confidence")
        ax.set_ylabel("accuracy")
        ax.legend(frameon=False, loc="upper left")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _svg_bytes(fig)
