"""Report figures.  Uses the non-interactive Agg backend and strips the
software tag from PNG metadata so reruns give byte-identical files."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PNG_METADATA = {"Software": None}


def _save(fig, path):
    fig.savefig(path, format="png", dpi=100, metadata=PNG_METADATA)
    plt.close(fig)


def loss_curve_figure(path, curve, title="ID loss"):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(range(len(curve)), curve, color="tab:blue", lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("mean loss")
    ax.set_title(title)
    if len(curve) and min(curve) > 0:
        ax.set_yscale("log")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def ap_figure(path, report):
    ths = [th for th, _ in report.per_threshold]
    aps = [ap for _, ap in report.per_threshold]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar([f"{th:.2f}" for th in ths], aps, color="tab:green")
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("AP")
    ax.set_title(f"mAP {report.mAP:.4f}  id_switches {report.id_switches}")
    ax.tick_params(axis="x", labelrotation=45)
    fig.tight_layout()
    _save(fig, path)
