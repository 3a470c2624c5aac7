"""Optimization recipe: warmup schedule, Adam, clipping, accumulation,
feature masking augmentation, and best-K checkpoint averaging."""

import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import load_checkpoint, save_checkpoint
from .decoding import character_error_rate, corpus_cer, ctc_greedy
from .losses import UnalignableError, hybrid_utterance_loss
from .tensor import ShapeError, Tensor, no_grad


@dataclass
class TrainConfig:
    peak_lr: float = 0.002
    warmup_steps: int = 500
    clip_norm: float = 5.0
    accum_steps: int = 4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    epochs: int = 10
    batch_size: int = 4
    average_best_k: int = 5
    specaug_enabled: bool = True
    specaug_F: int = 10
    specaug_T: int = 50
    specaug_mF: int = 2
    specaug_mT: int = 2
    sampler: str = "random"
    seed: int = 0

    def validate(self):
        if self.peak_lr <= 0 or self.clip_norm <= 0 or self.adam_eps <= 0:
            raise ValueError("peak_lr, clip_norm and adam_eps must be positive")
        if self.warmup_steps < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("warmup_steps, epochs and batch_size must be >= 1")
        if self.accum_steps < 1:
            raise ValueError("accum_steps must be >= 1")
        if self.average_best_k < 1:
            raise ValueError("average_best_k must be >= 1")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0.0 < b < 1.0:
                raise ValueError("adam betas must lie in (0, 1)")
        for v in (self.specaug_F, self.specaug_T,
                  self.specaug_mF, self.specaug_mT):
            if v < 0:
                raise ValueError("augmentation parameters must be nonnegative")
        if self.sampler not in ("random", "sorted"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        return self


def lr_schedule(step, peak_lr, warmup):
    """Linear ramp to peak_lr at step == warmup, then inverse-sqrt decay."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    return peak_lr * min(step / warmup, math.sqrt(warmup / step))


class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    def __init__(self, named_params):
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in named_params}


def adam_step(named_params, grads, state, lr,
              betas=(0.9, 0.98), eps=1e-9):
    """One bias-corrected Adam update, in place on the parameter arrays."""
    if len(named_params) != len(grads):
        raise ShapeError("parameter/gradient count mismatch")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for (name, p), g in zip(named_params, grads):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, "
                             f"parameter is {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def global_grad_norm(grads):
    total = 0.0
    for g in grads:
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return math.sqrt(total)


def clip_global_norm(grads, max_norm=5.0):
    """Scale the whole gradient list so its joint L2 norm is at most max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_grad_norm(grads)
    if norm <= max_norm:
        return [np.asarray(g, dtype=np.float64) for g in grads]
    scale = max_norm / norm
    return [np.asarray(g, dtype=np.float64) * scale for g in grads]


def spec_augment(feats, cfg: TrainConfig, rng):
    """Zero out mF random frequency bands and mT random time spans on a copy.

    Widths are drawn uniformly in [0, F] and [0, min(T, length)]; a band
    wider than the axis is clamped so a position always exists.
    """
    out = np.array(feats, dtype=np.float64, copy=True)
    T, D = out.shape
    for _ in range(cfg.specaug_mF):
        w = int(rng.integers(0, min(cfg.specaug_F, D) + 1))
        if w == 0:
            continue
        f0 = int(rng.integers(0, D - w + 1))
        out[:, f0:f0 + w] = 0.0
    for _ in range(cfg.specaug_mT):
        w = int(rng.integers(0, min(cfg.specaug_T, T) + 1))
        if w == 0:
            continue
        t0 = int(rng.integers(0, T - w + 1))
        out[t0:t0 + w, :] = 0.0
    return out


def random_batches(n, batch_size, rng):
    """Uniform draws without replacement, chunked; last batch may be short."""
    order = rng.permutation(n)
    return [list(order[i:i + batch_size]) for i in range(0, n, batch_size)]


def sorted_batches(lengths, batch_size, rng):
    """Length-sorted packing; batch order is then shuffled."""
    order = np.argsort(np.asarray(lengths), kind="stable")
    chunks = [list(order[i:i + batch_size]) for i in range(0, len(order), batch_size)]
    perm = rng.permutation(len(chunks))
    return [chunks[i] for i in perm]


@dataclass
class EpochRecord:
    epoch: int
    checkpoint_path: Optional[str]
    dev_loss: float
    dev_cer: float


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    log_lines: list = field(default_factory=list)
    steps: int = 0


def _greedy_cer(model, dataset):
    pairs = []
    with no_grad():
        for utt_id, feats, tokens in dataset:
            enc, mask = model.encode(Tensor(feats))
            lp = model.ctc_log_probs(enc).data
            lp = lp[:int(np.asarray(mask).sum())]
            hyp = ctc_greedy(lp)
            pairs.append((hyp, tokens))
    return corpus_cer(pairs)


def _dev_metrics(model, dev_set, lam, smoothing, emit):
    losses = []
    for utt_id, feats, tokens in dev_set:
        try:
            with no_grad():
                total, _, _ = hybrid_utterance_loss(
                    model, Tensor(feats), tokens, lam, smoothing, training=False)
            losses.append(total.item())
        except UnalignableError:
            emit(f"warning: skipping unalignable dev utterance {utt_id}")
    dev_loss = float(np.mean(losses)) if losses else float("nan")
    return dev_loss, _greedy_cer(model, dev_set)


def train_loop(model, train_set, dev_set, cfg: TrainConfig, *,
               lam=0.3, smoothing=0.1, out_dir=None, log_fn=None,
               max_steps=None, probe_every=0, probe_fn=None):
    """Run the full recipe; returns per-step log lines and per-epoch records.

    Each optimizer step consumes accum_steps micro-batches: their mean losses
    are backpropagated onto one accumulated tape, the summed gradients are
    divided by the number of contributing micro-batches, clipped, and applied
    at the scheduled rate. Unalignable utterances are skipped with a warning.
    probe_fn(model, step), when given, is called every probe_every steps and
    may return True to stop early.
    """
    if not train_set or not dev_set:
        raise ValueError("train and dev sets must be non-empty")
    cfg.validate()
    result = TrainResult()

    def emit(line):
        result.log_lines.append(line)
        if log_fn is not None:
            log_fn(line)

    batch_rng = np.random.default_rng(cfg.seed)
    aug_rng = np.random.default_rng(cfg.seed + 1)
    drop_rng = np.random.default_rng(cfg.seed + 2)

    named = model.named_parameters()
    state = AdamState(named)
    step = 0

    for epoch in range(1, cfg.epochs + 1):
        if cfg.sampler == "sorted":
            lengths = [len(feats) for _, feats, _ in train_set]
            batches = sorted_batches(lengths, cfg.batch_size, batch_rng)
        else:
            batches = random_batches(len(train_set), cfg.batch_size, batch_rng)

        for start in range(0, len(batches), cfg.accum_steps):
            window = batches[start:start + cfg.accum_steps]
            model.zero_grad()
            used = 0
            tot_sum = ctc_sum = aed_sum = 0.0
            for batch in window:
                losses = []
                for idx in batch:
                    utt_id, feats, tokens = train_set[idx]
                    if cfg.specaug_enabled:
                        feats = spec_augment(feats, cfg, aug_rng)
                    try:
                        total, ctc, aed = hybrid_utterance_loss(
                            model, Tensor(feats), tokens, lam, smoothing,
                            training=True, rng=drop_rng)
                    except UnalignableError:
                        emit(f"warning: skipping unalignable utterance {utt_id}")
                        continue
                    losses.append((total, ctc, aed))
                if not losses:
                    continue
                micro = losses[0][0]
                for t, _, _ in losses[1:]:
                    micro = micro + t
                micro = micro / len(losses)
                micro.backward()
                used += 1
                tot_sum += micro.item()
                ctc_sum += sum(c.item() for _, c, _ in losses) / len(losses)
                aed_sum += sum(a.item() for _, _, a in losses) / len(losses)

            step += 1
            lr = lr_schedule(step, cfg.peak_lr, cfg.warmup_steps)
            denom = max(used, 1)
            grads = [p.grad_or_zeros() / denom for _, p in named]
            norm = global_grad_norm(grads)
            grads = clip_global_norm(grads, cfg.clip_norm)
            adam_step(named, grads, state, lr,
                      betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)
            emit(f"{step} {lr:.8f} {tot_sum / denom:.6f} "
                 f"{ctc_sum / denom:.6f} {aed_sum / denom:.6f} {norm:.6f}")
            result.steps = step

            if probe_every and probe_fn is not None and step % probe_every == 0:
                if probe_fn(model, step):
                    return result
            if max_steps is not None and step >= max_steps:
                return result

        dev_loss, dev_cer = _dev_metrics(model, dev_set, lam, smoothing, emit)
        ckpt_path = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            ckpt_path = os.path.join(out_dir, f"epoch{epoch:03d}.ckpt")
            save_checkpoint(ckpt_path, named)
        emit(f"epoch {epoch} dev_loss {dev_loss:.6f} dev_cer {dev_cer:.4f}")
        result.history.append(EpochRecord(epoch, ckpt_path, dev_loss, dev_cer))

    return result


def average_checkpoints(paths):
    """Mean parameter set over checkpoints; K identical inputs reproduce
    their values bit for bit (the mean is computed as p0 + sum(p_i - p0)/K)."""
    if not paths:
        raise ValueError("need at least one checkpoint")
    base = load_checkpoint(paths[0])
    if len(paths) == 1:
        return base
    acc = {name: np.zeros_like(arr) for name, arr in base.items()}
    for path in paths[1:]:
        other = load_checkpoint(path)
        if set(other) != set(base):
            raise ValueError(f"{path}: parameter names differ from {paths[0]}")
        for name, arr in other.items():
            if arr.shape != base[name].shape:
                raise ShapeError(f"{path}: parameter {name!r} shape {arr.shape} "
                                 f"!= {base[name].shape}")
            acc[name] += arr - base[name]
    return {name: base[name] + acc[name] / len(paths) for name in base}


def select_best_checkpoints(history, k):
    """Paths of the k best epochs by dev loss, ties to the earlier epoch."""
    scored = [(rec.dev_loss, rec.epoch, rec.checkpoint_path)
              for rec in history if rec.checkpoint_path is not None]
    scored.sort()
    return [path for _, _, path in scored[:k]]
