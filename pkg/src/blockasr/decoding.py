"""Inference: CTC greedy decoding, CTC prefix beam search, two-pass attention
rescoring, and character error rate.

Log-prob matrices arrive in CTC class space (column 0 blank, column c is
vocabulary id c-1); all returned token sequences are vocabulary ids.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import Tensor, no_grad

NEG_INF = float("-inf")


@dataclass
class Hypothesis:
    tokens: tuple
    ctc_score: float
    attention_score: Optional[float] = None
    combined_score: Optional[float] = None


def _as_array(log_probs) -> np.ndarray:
    return log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)


def ctc_greedy(log_probs) -> list:
    """Per-frame argmax, collapse repeats, drop blanks.

    Argmax ties break toward the lower class index (numpy convention), so the
    result is deterministic.
    """
    lp = _as_array(log_probs)
    best = lp.argmax(axis=1)
    out = []
    prev = -1
    for c in best:
        if c != prev and c != 0:
            out.append(int(c) - 1)
        prev = c
    return out


def ctc_prefix_beam_search(log_probs, beam_size: int) -> list:
    """N-best prefixes with CTC scores.

    Tracks per prefix the log-probability of ending in blank and in the last
    token; each frame only the top ``beam_size`` classes are expanded.  Ties
    break by score descending then prefix ascending, so output order is
    reproducible bit for bit.
    """
    if beam_size < 1:
        raise ValueError(f"beam_size must be >= 1, got {beam_size}")
    lp = _as_array(log_probs)
    # prefix (class-space tuple) -> [log P(ending blank), log P(ending non-blank)]
    cur = {(): (0.0, NEG_INF)}
    for frame in lp:
        # stable argsort on the negated row: ties fall to the lower class id
        top = np.argsort(-frame, kind="stable")[:beam_size]
        nxt = {}
        for prefix, (pb, pnb) in cur.items():
            for s in top:
                s = int(s)
                logp = float(frame[s])
                if s == 0:
                    b, nb = nxt.get(prefix, (NEG_INF, NEG_INF))
                    nxt[prefix] = (np.logaddexp(b, np.logaddexp(pb, pnb) + logp), nb)
                elif prefix and s == prefix[-1]:
                    # same symbol: extend the non-blank path in place...
                    b, nb = nxt.get(prefix, (NEG_INF, NEG_INF))
                    nxt[prefix] = (b, np.logaddexp(nb, pnb + logp))
                    # ...or start a new run from the blank-ending path
                    longer = prefix + (s,)
                    b, nb = nxt.get(longer, (NEG_INF, NEG_INF))
                    nxt[longer] = (b, np.logaddexp(nb, pb + logp))
                else:
                    longer = prefix + (s,)
                    b, nb = nxt.get(longer, (NEG_INF, NEG_INF))
                    nxt[longer] = (b, np.logaddexp(nb, np.logaddexp(pb, pnb) + logp))
        # repeat extensions seeded from an empty blank slot carry no mass; drop them
        alive = {p: s for p, s in nxt.items()
                 if not np.isneginf(np.logaddexp(s[0], s[1]))}
        ranked = sorted(alive.items(),
                        key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0]))
        cur = dict(ranked[:beam_size])
    hyps = [Hypothesis(tokens=tuple(c - 1 for c in prefix),
                       ctc_score=float(np.logaddexp(pb, pnb)))
            for prefix, (pb, pnb) in cur.items()]
    hyps.sort(key=lambda h: (-h.ctc_score, h.tokens))
    return hyps


def attention_rescore(model, enc, enc_mask, nbest, lam: float) -> Hypothesis:
    """Second pass: teacher-force each hypothesis through the decoder and pick
    the best lam·ctc + (1-lam)·attention score.

    Ties break toward the higher ctc score, then the shorter hypothesis.
    """
    if not nbest:
        raise ValueError("attention rescoring needs a non-empty n-best list")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    sos, eos = model.config.sos_id, model.config.eos_id
    rescored = []
    with no_grad():
        for hyp in nbest:
            tokens = list(hyp.tokens)
            logits = model.decode_forward(enc, enc_mask, [sos] + tokens)
            lp = logits.log_softmax(axis=-1).data
            targets = tokens + [eos]
            att = float(lp[np.arange(len(targets)), targets].sum())
            rescored.append(Hypothesis(
                tokens=tuple(tokens),
                ctc_score=hyp.ctc_score,
                attention_score=att,
                combined_score=lam * hyp.ctc_score + (1.0 - lam) * att,
            ))
    rescored.sort(key=lambda h: (-h.combined_score, -h.ctc_score, len(h.tokens)))
    return rescored[0]


def edit_distance(a, b) -> int:
    """Levenshtein distance with unit costs, rolling single-row DP."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1,          # deletion
                           cur[j - 1] + 1,       # insertion
                           prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def character_error_rate(hyp, ref) -> float:
    return edit_distance(hyp, ref) / max(1, len(list(ref)))


def corpus_cer(pairs) -> float:
    """Total edits over total reference length across (hyp, ref) pairs."""
    edits = 0
    total = 0
    for hyp, ref in pairs:
        ref = list(ref)
        edits += edit_distance(hyp, ref)
        total += len(ref)
    return edits / max(1, total)


def decode_utterance(model, feats, beam_size: int, lam: float,
                     feat_mask=None) -> Hypothesis:
    """Full two-pass decode of one utterance."""
    with no_grad():
        enc, mask = model.encode(feats, feat_mask)
        nbest = ctc_prefix_beam_search(model.ctc_log_probs(enc).data[:int(mask.sum())],
                                       beam_size)
    return attention_rescore(model, enc, mask, nbest, lam)
