"""Figure rendering for training runs and CER evaluations.

Everything draws through the Agg backend straight to files; nothing here
opens a window.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def parse_step_lines(log_lines):
    """Step log lines -> dict of aligned series (step, lr, losses, grad_norm)."""
    series = {"step": [], "lr": [], "loss": [], "ctc_loss": [],
              "aed_loss": [], "grad_norm": []}
    for line in log_lines:
        parts = line.split()
        if len(parts) != 6 or not parts[0].isdigit():
            continue
        series["step"].append(int(parts[0]))
        for key, raw in zip(("lr", "loss", "ctc_loss", "aed_loss", "grad_norm"),
                            parts[1:]):
            series[key].append(float(raw))
    return series


def plot_training_curves(log_lines, out_path, history=None):
    """Loss components and learning rate against optimizer step."""
    series = parse_step_lines(log_lines)
    fig, (ax_loss, ax_lr) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    ax_loss.plot(series["step"], series["loss"], label="hybrid")
    ax_loss.plot(series["step"], series["ctc_loss"], label="ctc", alpha=0.7)
    ax_loss.plot(series["step"], series["aed_loss"], label="attention", alpha=0.7)
    if history:
        steps = series["step"]
        last = steps[-1] if steps else 0
        marks = [rec.dev_loss for rec in history]
        # spread epoch markers across the step axis they were measured after
        xs = [last * (i + 1) / len(marks) for i in range(len(marks))]
        ax_loss.plot(xs, marks, "o", label="dev loss")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(loc="upper right")
    ax_lr.plot(series["step"], series["lr"], color="tab:green")
    ax_lr.set_ylabel("learning rate")
    ax_lr.set_xlabel("optimizer step")
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def plot_cer_histogram(per_utt_cers, out_path, corpus_cer=None):
    """Distribution of per-utterance character error rates."""
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.hist(per_utt_cers, bins=20, color="tab:blue", edgecolor="black")
    if corpus_cer is not None:
        ax.axvline(corpus_cer, color="tab:red", linestyle="--",
                   label=f"corpus CER {corpus_cer:.4f}")
        ax.legend()
    ax.set_xlabel("per-utterance CER")
    ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path
