"""Command-line surface: train / decode / eval-cer / grad-check /
param-count / synth-data.

Every config-driven subcommand accepts --config FILE plus any number of
"--key value" overrides for RunConfig fields; the effective configuration is
echoed before work starts. Unknown subcommands or keys exit nonzero with
usage text.
"""

import argparse
import os
import sys

import numpy as np

from .config import RunConfig, build_run_config, echo_config
from .data import (
    load_dataset,
    load_checkpoint,
    load_into_model,
    read_hypotheses,
    save_checkpoint,
    synth_dataset,
    write_hypotheses,
)
from .decoding import character_error_rate, corpus_cer, decode_utterance
from .gradcheck import grad_check_model
from .model import ASRModel, ensemble_parameter_delta
from .reporting import plot_cer_histogram, plot_training_curves
from .tensor import Tensor
from .training import (
    average_checkpoints,
    select_best_checkpoints,
    train_loop,
)

USAGE = """usage: blockasr <subcommand> [--config FILE] [--key value ...]

subcommands:
  train        fit a model on train_manifest, checkpoint per epoch
  decode       two-pass decode eval_manifest with a checkpoint
  eval-cer     score a hypothesis file against reference tokens
  grad-check   finite-difference audit of every parameter gradient
  param-count  parameter total and ensemble delta for a config
  synth-data   generate a synthetic corpus (own flags, see -h)
"""


def parse_overrides(rest):
    """['--key', 'value', '--k=v', ...] -> {key: raw value}."""
    out = {}
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--") or len(tok) <= 2:
            raise ValueError(f"expected --key value overrides, got {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            i += 1
            if i >= len(rest):
                raise ValueError(f"missing value for --{key}")
            val = rest[i]
        out[key] = val
        i += 1
    return out


def load_config(args, rest) -> RunConfig:
    cfg = build_run_config(args.config, parse_overrides(rest))
    for line in echo_config(cfg):
        print(line)
    return cfg


def _resolve(path, out_dir):
    return path if os.path.isabs(path) else os.path.join(out_dir, path)


def _require(cfg, *names):
    for name in names:
        if not getattr(cfg, name):
            raise ValueError(f"config key {name!r} must be set for this subcommand")


def cmd_train(args, rest):
    cfg = load_config(args, rest)
    _require(cfg, "train_manifest", "dev_manifest", "out_dir")
    train_set = load_dataset(cfg.train_manifest, vocab_size=cfg.vocab_size)
    dev_set = load_dataset(cfg.dev_manifest, vocab_size=cfg.vocab_size)
    model = ASRModel(cfg.model_config(), np.random.default_rng(cfg.seed))
    os.makedirs(cfg.out_dir, exist_ok=True)
    result = train_loop(model, train_set, dev_set, cfg.train_config(),
                        lam=cfg.ctc_weight, smoothing=cfg.label_smoothing,
                        out_dir=cfg.out_dir, log_fn=print)
    log_path = os.path.join(cfg.out_dir, "train_log.txt")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(result.log_lines) + "\n")
    best = select_best_checkpoints(result.history, cfg.average_best_k)
    if best:
        avg = average_checkpoints(best)
        avg_path = os.path.join(cfg.out_dir, "averaged.ckpt")
        save_checkpoint(avg_path, list(avg.items()))
        print(f"averaged {len(best)} best checkpoints into {avg_path}")
    fig = plot_training_curves(result.log_lines,
                               os.path.join(cfg.out_dir, "training_curves.png"),
                               history=result.history)
    print(f"training curves written to {fig}")
    print(f"training log written to {log_path}")
    return 0


def cmd_decode(args, rest):
    cfg = load_config(args, rest)
    _require(cfg, "checkpoint", "eval_manifest", "out_dir")
    model = ASRModel(cfg.model_config(), np.random.default_rng(cfg.seed))
    load_into_model(model, load_checkpoint(cfg.checkpoint))
    data = load_dataset(cfg.eval_manifest, vocab_size=cfg.vocab_size)
    rows = []
    for utt_id, feats, _tokens in data:
        hyp = decode_utterance(model, Tensor(feats), beam_size=cfg.beam_size,
                               lam=cfg.decode_ctc_weight)
        rows.append((utt_id, list(hyp.tokens), hyp.combined_score))
    os.makedirs(cfg.out_dir, exist_ok=True)
    out_path = _resolve(cfg.decode_output, cfg.out_dir)
    write_hypotheses(out_path, rows)
    print(f"wrote {len(rows)} hypotheses to {out_path}")
    return 0


def cmd_eval_cer(args, rest):
    cfg = load_config(args, rest)
    _require(cfg, "eval_manifest", "out_dir")
    refs = {utt_id: tokens for utt_id, _feats, tokens
            in load_dataset(cfg.eval_manifest, vocab_size=cfg.vocab_size)}
    hyp_path = _resolve(cfg.decode_output, cfg.out_dir)
    hyps = read_hypotheses(hyp_path)
    seen = set()
    pairs = []
    per_utt = []
    report = []
    for utt_id, tokens, _score in hyps:
        if utt_id not in refs:
            raise ValueError(f"hypothesis for unknown utterance {utt_id!r}")
        seen.add(utt_id)
        cer = character_error_rate(tokens, refs[utt_id])
        per_utt.append(cer)
        pairs.append((tokens, refs[utt_id]))
        report.append(f"{utt_id}\t{cer:.4f}")
    missing = sorted(set(refs) - seen)
    if missing:
        raise ValueError(f"no hypothesis for utterance(s): {', '.join(missing)}")
    overall = corpus_cer(pairs)
    os.makedirs(cfg.out_dir, exist_ok=True)
    report_path = os.path.join(cfg.out_dir, "cer_report.txt")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(report) + "\n")
        fh.write(f"corpus_cer\t{overall:.4f}\n")
    fig = plot_cer_histogram(per_utt, os.path.join(cfg.out_dir, "cer_hist.png"),
                             corpus_cer=overall)
    print(f"per-utterance report written to {report_path}")
    print(f"CER histogram written to {fig}")
    print(f"corpus_cer {overall:.4f}")
    return 0


def cmd_grad_check(args, rest):
    cfg = load_config(args, rest)
    report = grad_check_model(cfg.model_config(), seed=cfg.seed,
                              lam=cfg.ctc_weight, smoothing=cfg.label_smoothing,
                              sample=args.sample)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 1


def cmd_param_count(args, rest):
    cfg = load_config(args, rest)
    model_cfg = cfg.model_config()
    model = ASRModel(model_cfg, np.random.default_rng(cfg.seed))
    enc_blocks, dec_blocks = model_cfg.participating_blocks()
    print(f"total_parameters {model.count_parameters()}")
    print(f"ensemble_parameter_delta {ensemble_parameter_delta(model_cfg)}")
    print(f"participating_blocks {enc_blocks} {dec_blocks}")
    return 0


def cmd_synth_data(args, _rest):
    manifest = synth_dataset(args.out_dir, args.n_utts, args.vocab_size,
                             seed=args.seed, feat_dim=args.feat_dim,
                             min_tokens=args.min_tokens,
                             max_tokens=args.max_tokens)
    print(f"manifest written to {manifest}")
    return 0


def build_parser():
    # argparse prepends "usage: " itself, so hand it the bare form
    parser = argparse.ArgumentParser(prog="blockasr",
                                     usage=USAGE.removeprefix("usage: "))
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("train", "decode", "eval-cer", "param-count"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)

    p = sub.add_parser("grad-check")
    p.add_argument("--config", default=None)
    p.add_argument("--sample", type=int, default=None,
                   help="check only N random coordinates per parameter")

    p = sub.add_parser("synth-data")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-utts", type=int, default=50)
    p.add_argument("--vocab-size", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feat-dim", type=int, default=8)
    p.add_argument("--min-tokens", type=int, default=3)
    p.add_argument("--max-tokens", type=int, default=8)
    return parser


COMMANDS = {
    "train": cmd_train,
    "decode": cmd_decode,
    "eval-cer": cmd_eval_cer,
    "grad-check": cmd_grad_check,
    "param-count": cmd_param_count,
    "synth-data": cmd_synth_data,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on unknown subcommand and has already printed
        # the full usage block; just surface the code
        return exc.code or 0
    try:
        return COMMANDS[args.command](args, rest)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(USAGE, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
