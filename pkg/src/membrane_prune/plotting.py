"""Figure rendering for the report path (Agg backend, PNG output)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    "savefig.dpi": 120,
}

# PNG metadata pinned so identical figures give identical bytes
_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, metadata=_META, bbox_inches="tight")
    plt.close(fig)


def plot_ordering_curves(curves, path, title="Cumulative loss of ordered features"):
    """2x2 grid, one panel per prunable layer.

    ``curves`` maps layer -> {label: losses}; step numbers start at 1.
    """
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 2, figsize=(7.5, 5.5))
        for ax, (layer, series) in zip(axes.ravel(), curves.items()):
            for label, losses in series.items():
                steps = np.arange(1, len(losses) + 1)
                style = "--" if label.startswith("random") else "-"
                ax.plot(steps, losses, style, label=label)
            ax.set_title(f"{layer} layer")
            ax.set_xlabel("features discarded")
            ax.set_ylabel("loss")
            ax.legend(frameon=False)
        fig.suptitle(title)
        fig.tight_layout()
        _save(fig, path)


def plot_segmentations(image, results, path):
    """Probability map (left) and thresholded segmentation (right) per network.

    ``results`` is a list of ``(name, probability_map, segmentation)``.
    """
    rows = len(results)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows + 1, 2, figsize=(5.0, 2.5 * (rows + 1)), squeeze=False)
        axes[0, 0].imshow(image, cmap="gray", vmin=0, vmax=1)
        axes[0, 0].set_title("input")
        axes[0, 1].axis("off")
        for row, (name, pmap, seg) in enumerate(results, start=1):
            axes[row, 0].imshow(pmap, cmap="magma", vmin=0, vmax=1)
            axes[row, 0].set_title(f"{name}: probability")
            axes[row, 1].imshow(seg, cmap="gray", vmin=0, vmax=1)
            axes[row, 1].set_title(f"{name}: segmentation")
        for ax in axes.ravel():
            ax.set_xticks([])
            ax.set_yticks([])
        fig.tight_layout()
        _save(fig, path)


def plot_history(history, path, title="training"):
    it = [h["iteration"] for h in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(it, [h["train_loss"] for h in history], label="train loss")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        twin = ax.twinx()
        twin.plot(it, [h["val_accuracy"] for h in history], color="C1", label="val accuracy")
        twin.set_ylabel("accuracy")
        ax.set_title(title)
        fig.legend(loc="center right", frameon=False)
        fig.tight_layout()
        _save(fig, path)
