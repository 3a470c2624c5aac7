"""Training objectives: CTC via the log-space forward algorithm, label-smoothed
cross-entropy for the decoder branch, and their convex combination."""

from __future__ import annotations

import numpy as np

from .tensor import NEG_FILL, Tensor, concat, logaddexp


class UnalignableError(ValueError):
    """Label sequence cannot be aligned to the available frames."""


def ctc_loss(log_probs: Tensor, labels, valid_frames=None) -> Tensor:
    """Negative log-likelihood of ``labels`` under per-frame class log-probs.

    ``log_probs`` is [T×C] with class 0 reserved for blank; ``labels`` are
    column indices, each >= 1.  The forward algorithm runs over the
    blank-interleaved extended sequence entirely in log space, so the result
    stays differentiable through the tape.

    Raises UnalignableError when the label needs more frames than available
    (longer than T counting mandatory blanks between repeated labels).
    """
    T_total, n_classes = log_probs.shape
    T = T_total if valid_frames is None else int(valid_frames)
    if not 0 <= T <= T_total:
        raise ValueError(f"valid_frames {T} outside [0, {T_total}]")
    labels = [int(l) for l in labels]
    for l in labels:
        if not 1 <= l < n_classes:
            raise ValueError(f"label {l} outside [1, {n_classes})")
    L = len(labels)
    required = L + sum(1 for i in range(1, L) if labels[i] == labels[i - 1])
    if T < max(required, 1):
        raise UnalignableError(
            f"{L} labels need at least {max(required, 1)} frames, got {T}")

    ext = np.zeros(2 * L + 1, dtype=np.int64)
    ext[1::2] = labels
    S = ext.size
    emit = log_probs[:T][:, ext]  # [T×S]

    # states reachable at t=0: leading blank and the first label
    start = np.full(S, NEG_FILL)
    start[: min(2, S)] = 0.0
    alpha = emit[0] + start

    # skip transition s-2 -> s allowed into a label that differs from the
    # previous label (blanks and repeats must pass through s-1)
    skip_ok = np.zeros(S, dtype=bool)
    skip_ok[3::2] = ext[3::2] != ext[1:-2:2]
    skip_off = np.where(skip_ok, 0.0, NEG_FILL)

    nf1 = Tensor([NEG_FILL])
    nf2 = Tensor([NEG_FILL, NEG_FILL])
    for t in range(1, T):
        stay = alpha
        if S > 1:
            step = concat([nf1, alpha[:S - 1]], axis=0)
            stay = logaddexp(stay, step)
        if S > 2:
            skip = concat([nf2, alpha[:S - 2]], axis=0)
            stay = logaddexp(stay, skip + skip_off)
        alpha = emit[t] + stay

    if S == 1:
        total = alpha.sum()
    else:
        total = logaddexp(alpha[S - 1:S], alpha[S - 2:S - 1]).sum()
    return -total


def label_smoothed_ce(logits: Tensor, targets, smoothing: float,
                      pad_id=None) -> Tensor:
    """Cross-entropy against targets smoothed to 1-eps / eps/(V-1), averaged
    over non-pad positions."""
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    L, V = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (L,):
        raise ValueError(f"expected {L} targets, got shape {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ValueError(f"target id outside [0, {V}): {targets.min()}..{targets.max()}")
    smooth = np.full((L, V), smoothing / (V - 1))
    smooth[np.arange(L), targets] = 1.0 - smoothing
    valid = np.ones(L) if pad_id is None else (targets != pad_id).astype(np.float64)
    n_valid = valid.sum()
    if n_valid == 0:
        raise ValueError("no non-pad target positions")
    per_pos = -(logits.log_softmax(axis=-1) * smooth).sum(axis=-1)
    return (per_pos * (valid / n_valid)).sum()


def hybrid_loss(ctc, aed, lam: float):
    """Convex combination lam·ctc + (1-lam)·aed."""
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must be in (0, 1), got {lam}")
    return ctc * lam + aed * (1.0 - lam)


def hybrid_utterance_loss(model, feats: Tensor, tokens, lam: float,
                          smoothing: float, training: bool = False, rng=None,
                          feat_mask=None):
    """Run one utterance through both branches.

    Returns (total, ctc, aed) scalar tensors.  Vocabulary id t maps to CTC
    class t+1 (class 0 is blank); the decoder sees sos + tokens and is scored
    against tokens + eos.
    """
    enc, mask = model.encode(feats, feat_mask, training, rng)
    ctc = ctc_loss(model.ctc_log_probs(enc), [t + 1 for t in tokens],
                   int(np.count_nonzero(mask)))
    cfg = model.config
    logits = model.decode_forward(enc, mask, [cfg.sos_id] + list(tokens),
                                  training, rng)
    aed = label_smoothed_ce(logits, list(tokens) + [cfg.eos_id], smoothing)
    return hybrid_loss(ctc, aed, lam), ctc, aed
