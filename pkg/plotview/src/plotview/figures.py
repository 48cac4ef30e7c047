"""Static figures: tripod scatters, mapped-vs-target comparison, loss curves.

These renderers never recompute metrics; every number shown is read from
the run's summary files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .manifest import (RunManifest, ManifestError, read_points_csv,
                       read_train_log, read_summary)

_SCATTER_STYLE = dict(s=4, alpha=0.6, linewidths=0)


def _scatter3d(ax, pts, title, color):
    ax.scatter(pts[:, 0], pts[:, 1], pts[:, 2], c=color, **_SCATTER_STYLE)
    ax.set_title(title)
    ax.set_xlabel("x0")
    ax.set_ylabel("x1")
    ax.set_zlabel("x2")


def plot_tripod(manifest: RunManifest, out_image) -> dict:
    """Source / reference / target 3D scatters in one figure.

    The reference panel is the rigid image of the source (congruent up to
    rotation); the target panel is its non-rigid deformation.
    """
    clouds = {
        "source": read_points_csv(manifest.source),
        "reference (rigid image)": read_points_csv(manifest.reference),
        "target (sheared)": read_points_csv(manifest.target),
    }
    fig = plt.figure(figsize=(13, 4.5))
    for k, ((title, pts), color) in enumerate(
            zip(clouds.items(), ("tab:blue", "tab:green", "tab:red"))):
        ax = fig.add_subplot(1, 3, k + 1, projection="3d")
        _scatter3d(ax, pts, title, color)
    fig.tight_layout()
    fig.savefig(out_image, dpi=130)
    plt.close(fig)
    return {"out_image": str(out_image), "panels": list(clouds)}


def plot_comparison(manifest: RunManifest, out_image, losses_out=None) -> dict:
    """Three panels (ground-truth target, composed map output, direct map
    output), each mapped panel annotated with its run's evaluation
    divergence from summary.json; optionally a loss-curve figure with one
    line per loop tag.
    """
    for key in ("composed", "direct"):
        if key not in manifest.panels:
            raise ManifestError(f"manifest panels lack {key!r}; run both training "
                                f"modes and re-export")
    for mode in ("composition", "direct"):
        if mode not in manifest.summaries:
            raise ManifestError(f"manifest lacks the {mode!r} summary")

    target = read_points_csv(manifest.panels["target"])
    composed = read_points_csv(manifest.panels["composed"])
    direct = read_points_csv(manifest.panels["direct"])
    annotations = {
        "composed": read_summary(manifest.summaries["composition"])["eval_divergence"],
        "direct": read_summary(manifest.summaries["direct"])["eval_divergence"],
    }

    fig = plt.figure(figsize=(13, 4.5))
    panels = [
        ("ground truth target", target, "tab:red", None),
        ("composed map output", composed, "tab:purple", annotations["composed"]),
        ("direct map output", direct, "tab:orange", annotations["direct"]),
    ]
    for k, (title, pts, color, value) in enumerate(panels):
        ax = fig.add_subplot(1, 3, k + 1, projection="3d")
        label = title if value is None else f"{title}\ndivergence = {value!r}"
        _scatter3d(ax, pts, label, color)
    fig.tight_layout()
    fig.savefig(out_image, dpi=130)
    plt.close(fig)

    result = {"out_image": str(out_image), "annotations": annotations,
              "panel_order": [p[0] for p in panels]}

    if losses_out is not None:
        loops_drawn = []
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for mode, log_path in sorted(manifest.train_logs.items()):
            for loop, series in read_train_log(log_path).items():
                ax.plot(series["iteration"], series["total_loss"],
                        label=f"{mode}:{loop}", alpha=0.8)
                loops_drawn.append(f"{mode}:{loop}")
        ax.set_xlabel("iteration")
        ax.set_ylabel("total loss")
        ax.set_yscale("log")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(losses_out, dpi=130)
        plt.close(fig)
        result["losses_out"] = str(losses_out)
        result["loss_curves"] = loops_drawn
    return result
