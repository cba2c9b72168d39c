"""Matplotlib figures written next to the CSV/JSON artifacts."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 110,
    "savefig.bbox": "tight",
}


def _save(fig, path, note=""):
    fig.savefig(path, metadata={"Description": note} if str(path).endswith(".png") else None)
    plt.close(fig)
    return path


def _topdown(ax, xyz, **kw):
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    return ax.scatter(xyz[:, 0], xyz[:, 1], s=4, linewidths=0, **kw)


def plot_keep_scores(xyz, keep, selected, path, title="", note=""):
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.6))
        sc = _topdown(a, xyz, c=keep, cmap="viridis", vmin=0, vmax=1)
        fig.colorbar(sc, ax=a, label="keep probability")
        a.set_title("keep probability")
        sel = np.asarray(selected, dtype=bool)
        _topdown(b, xyz[~sel], c="0.85")
        _topdown(b, xyz[sel], c="tab:red")
        b.set_title(f"selected tokens ({sel.sum()})")
        if title:
            fig.suptitle(title)
        return _save(fig, path, note)


def plot_wca_row(xyz, weights, query_xyz, path, title="", note=""):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.4, 3.8))
        sc = _topdown(ax, xyz, c=weights, cmap="Reds")
        ax.scatter([query_xyz[0]], [query_xyz[1]], marker="*", s=120, c="gold", edgecolors="k")
        fig.colorbar(sc, ax=ax, label="attention weight")
        ax.set_title(title or "WCA-map row")
        return _save(fig, path, note)


def plot_prediction(xyz, pred, labels, path, class_names=None, note=""):
    with plt.rc_context(STYLE):
        fig, (a, b, c) = plt.subplots(1, 3, figsize=(11, 3.6))
        k = max(int(np.max(pred)), int(np.max(labels))) + 1
        _topdown(a, xyz, c=labels, cmap="tab10", vmin=0, vmax=max(9, k - 1))
        a.set_title("ground truth")
        _topdown(b, xyz, c=pred, cmap="tab10", vmin=0, vmax=max(9, k - 1))
        b.set_title("prediction")
        wrong = np.asarray(pred) != np.asarray(labels)
        _topdown(c, xyz, c=np.where(wrong, 1.0, 0.0), cmap="coolwarm", vmin=0, vmax=1)
        c.set_title(f"errors ({wrong.sum()})")
        return _save(fig, path, note)


def plot_training_curve(rows, path, note=""):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ep = [r["epoch"] for r in rows]
        ax.plot(ep, [r["train_loss"] for r in rows], "k-", label="train loss")
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax2 = ax.twinx()
        ax2.plot(ep, [r["eval_oa"] for r in rows], "tab:blue", label="eval OA")
        ax2.plot(ep, [r["eval_miou"] for r in rows], "tab:orange", label="eval mIoU")
        ax2.set_ylabel("%")
        ax2.set_ylim(0, 100)
        fig.legend(loc="center right", frameon=False)
        return _save(fig, path, note)


def plot_ablation(rows, path, note=""):
    with plt.rc_context(STYLE):
        names = [r["variant"] for r in rows]
        x = np.arange(len(names))
        fig, ax = plt.subplots(figsize=(max(5, 0.7 * len(names)), 3.4))
        for off, key, label in ((-0.27, "oa", "OA"), (0, "miou", "mIoU"), (0.27, "avg_f1", "avg F1")):
            ax.bar(x + off, [r[key] for r in rows], width=0.27, label=label)
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=40, ha="right")
        ax.set_ylabel("%")
        ax.legend(frameon=False, ncols=3)
        return _save(fig, path, note)


def plot_confusion(counts, class_names, path, note=""):
    counts = np.asarray(counts, dtype=np.float64)
    col = counts.sum(0, keepdims=True)
    norm = 100.0 * counts / np.where(col > 0, col, 1.0)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1 + 0.6 * len(class_names), 0.8 + 0.6 * len(class_names)))
        ax.imshow(norm, cmap="Blues", vmin=0, vmax=100)
        for i in range(norm.shape[0]):
            for j in range(norm.shape[1]):
                ax.text(j, i, f"{norm[i, j]:.1f}", ha="center", va="center", fontsize=7,
                        color="w" if norm[i, j] > 60 else "k")
        ax.set_xticks(range(len(class_names)))
        ax.set_xticklabels(class_names, rotation=40, ha="right")
        ax.set_yticks(range(len(class_names)))
        ax.set_yticklabels(class_names)
        ax.set_xlabel("true label")
        ax.set_ylabel("prediction")
        return _save(fig, path, note)
