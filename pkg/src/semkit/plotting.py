"""Matplotlib figures for match runs, written as deterministic SVG."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

PANEL_GAP = 16
_RC = {
    "svg.hashsalt": "semkit",
    "svg.fonttype": "none",
    "font.size": 8,
    "axes.titlesize": 9,
}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def panel_background(arr) -> np.ndarray:
    """Grayscale image for a panel: the image itself, or descriptor norms."""
    a = np.asarray(arr, dtype=float)
    if a.ndim == 3:
        a = np.linalg.norm(a, axis=-1)
    lo, hi = float(a.min()), float(a.max())
    return (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)


def match_figure(path, bg_ref, bg_src, size_ref, size_src, ref_pts, src_pts, confidence,
                 bands=None, title=None) -> None:
    """Side-by-side panels with one line per match, colored by confidence.

    ``size_*`` is ``(H, W)`` in image pixels; backgrounds are stretched to
    fit.  ``bands`` maps a query index to ``(query_px, cell_rects)`` where
    each rect is ``(cell_index, x0, y0, size)`` in source pixels.  Every
    match line carries the id ``match-k`` and every band cell the id
    ``band-q-cell-c``.
    """
    (Hr, Wr), (Hs, Ws) = size_ref, size_src
    off = Wr + PANEL_GAP
    ref_pts = np.asarray(ref_pts, dtype=float).reshape(-1, 2)
    src_pts = np.asarray(src_pts, dtype=float).reshape(-1, 2)
    conf = np.asarray(confidence, dtype=float).reshape(-1)
    with plt.rc_context(_RC):
        width = (off + Ws) / 72.0
        fig, ax = plt.subplots(figsize=(max(width, 4.0), max(Hr, Hs) / 72.0 + 0.5))
        ax.imshow(bg_ref, cmap="gray", vmin=0, vmax=1, extent=(-0.5, Wr - 0.5, Hr - 0.5, -0.5),
                  interpolation="nearest")
        ax.imshow(bg_src, cmap="gray", vmin=0, vmax=1,
                  extent=(off - 0.5, off + Ws - 0.5, Hs - 0.5, -0.5), interpolation="nearest")
        cmap = plt.get_cmap("viridis")
        for k in range(len(ref_pts)):
            (x1, y1), (x2, y2) = ref_pts[k], src_pts[k]
            ax.plot([x1, x2 + off], [y1, y2], color=cmap(float(np.clip(conf[k], 0, 1))),
                    lw=0.6, gid=f"match-{k}")
        for q, (qpt, rects) in sorted((bands or {}).items()):
            ax.plot([qpt[0]], [qpt[1]], "o", ms=3, color="tab:red", gid=f"query-{q}")
            for c, x0, y0, s in rects:
                ax.add_patch(Rectangle((x0 + off, y0), s, s, lw=0, fc="tab:red", alpha=0.25,
                                       gid=f"band-{q}-cell-{c}"))
        ax.set_xlim(-0.5, off + Ws - 0.5)
        ax.set_ylim(max(Hr, Hs) - 0.5, -0.5)
        ax.set_axis_off()
        if title:
            ax.set_title(title)
        fig.tight_layout(pad=0.2)
        _save(fig, path)


def iteration_figure(path, rows) -> None:
    """Per-iteration anchors, band validity, precision and pose error."""
    it = [r["iteration"] for r in rows]
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, 3, figsize=(9, 2.6))
        axes[0].plot(it, [r["anchors"] for r in rows], "o-")
        axes[0].set_ylabel("anchors")
        axes[1].plot(it, [r["band_validity_pct"] for r in rows], "o-", label="band validity %")
        prec = [r.get("gt_precision") for r in rows]
        if all(p is not None for p in prec):
            axes[1].plot(it, [100 * p for p in prec], "s--", label="GT-cell precision %")
        axes[1].set_ylim(-5, 105)
        axes[1].legend(frameon=False)
        for key, mk in (("rot_err_deg", "o-"), ("trans_err_deg", "s--")):
            vals = [np.nan if r.get(key) is None else r[key] for r in rows]
            if not np.all(np.isnan(vals)):
                axes[2].plot(it, vals, mk, label=key.split("_")[0])
        axes[2].set_ylabel("pose error (deg)")
        if axes[2].lines:
            axes[2].legend(frameon=False)
        for ax in axes:
            ax.set_xlabel("iteration")
            ax.set_xticks(it)
        fig.tight_layout()
        _save(fig, path)
