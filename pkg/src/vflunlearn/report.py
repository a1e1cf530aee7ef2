"""Figure rendering. Every plot goes straight to a PNG file next to the
delimited output; nothing opens a window (Agg backend, chosen at call time
so importing the package never drags the GUI stack in)."""

from __future__ import annotations

from pathlib import Path


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def render_run_figures(out_dir: Path, trace, records) -> list[Path]:
    plt = _plt()
    fig_dir = Path(out_dir) / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    written = []

    if trace:
        rounds = [r.round_no for r in trace]
        fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
        axes[0].plot(rounds, [r.loss_forget for r in trace], label="forgetting loss")
        axes[0].plot(rounds, [r.loss_retain for r in trace], label="retention loss")
        axes[0].set_yscale("log")
        axes[0].set_ylabel("loss")
        axes[0].legend()
        axes[0].set_title("unlearning rounds")
        axes[1].plot(rounds, [r.cosine for r in trace], color="tab:purple")
        axes[1].axhline(0.0, color="gray", lw=0.8)
        axes[1].set_ylabel("cos(g_f, g_r)")
        axes[1].set_xlabel("round")
        fig.tight_layout()
        path = fig_dir / "unlearn_trace.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    if records:
        names = [r.variant for r in records]
        x = range(len(names))
        fig, ax = plt.subplots(figsize=(7, 4))
        width = 0.35
        ax.bar([i - width / 2 for i in x], [r.clean_acc for r in records],
               width, label="clean accuracy")
        ax.bar([i + width / 2 for i in x], [r.backdoor_success for r in records],
               width, label="backdoor success")
        ax.set_xticks(list(x), names)
        ax.set_ylabel("percent")
        ax.set_ylim(0, 105)
        ax.legend()
        ax.set_title("model variants")
        fig.tight_layout()
        path = fig_dir / "variant_metrics.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def render_sweep_figure(out_dir: Path, param: str, rows: list[dict]) -> Path:
    plt = _plt()
    fig_dir = Path(out_dir) / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    values = [r["value"] for r in rows]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.plot(values, [r["clean_acc"] for r in rows], "o-", label="clean accuracy")
    ax.plot(values, [r["backdoor_success"] for r in rows], "s-", label="backdoor success")
    if param == "alpha":
        ax.set_xscale("log")
    ax.set_xlabel(param)
    ax.set_ylabel("percent")
    ax.set_ylim(0, 105)
    ax.legend()
    ax.set_title(f"sensitivity to {param}")
    fig.tight_layout()
    path = fig_dir / f"sweep_{param}.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_ablation_figure(out_dir: Path, rows: list[dict]) -> Path:
    plt = _plt()
    fig_dir = Path(out_dir) / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    names = [r["mode"] for r in rows]
    x = range(len(names))
    fig, ax = plt.subplots(figsize=(6.5, 4))
    width = 0.35
    ax.bar([i - width / 2 for i in x], [r["clean_acc"] for r in rows],
           width, label="clean accuracy")
    ax.bar([i + width / 2 for i in x], [r["backdoor_success"] for r in rows],
           width, label="backdoor success")
    ax.set_xticks(list(x), names)
    ax.set_ylabel("percent")
    ax.set_ylim(0, 105)
    ax.legend()
    ax.set_title("update-rule ablation")
    fig.tight_layout()
    path = fig_dir / "ablation.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
