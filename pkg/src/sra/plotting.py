"""Figures written next to the text reports."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.5,
    "lines.markersize": 5,
    "savefig.dpi": 120,
}


def plot_rd_curves(curves, path, title=None):
    """Rate-PSNR plot. ``curves`` maps a label to ``[(bitrate_kbps, psnr_db), ...]``.

    Lossless points (infinite PSNR) are skipped.
    """
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.6))
        for label, pts in curves.items():
            pts = sorted((r, q) for r, q in pts if q != float("inf"))
            if pts:
                ax.plot([r for r, _ in pts], [q for _, q in pts], "o-", label=label)
        ax.set_xlabel("bitrate (kbps)")
        ax.set_ylabel("Y-PSNR (dB)")
        if title:
            ax.set_title(title)
        if ax.lines:
            ax.legend(loc="lower right", frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_stage_times(timings, path, title=None):
    """Stacked bar per run of wall-clock seconds per stage.

    ``timings`` maps run label to ``{stage: seconds}``.
    """
    stages = sorted({s for t in timings.values() for s in t})
    labels = list(timings)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.6))
        bottom = [0.0] * len(labels)
        for s in stages:
            vals = [timings[l].get(s, 0.0) for l in labels]
            ax.bar(labels, vals, bottom=bottom, label=s)
            bottom = [b + v for b, v in zip(bottom, vals)]
        ax.set_ylabel("seconds")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False, fontsize=8)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_loss_history(totals, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.6))
        ax.semilogy(range(len(totals)), totals, "-")
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
