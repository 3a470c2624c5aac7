"""Flat key=value run configuration shared by every CLI subcommand.

A config file holds one "key = value" pair per line ('#' comments allowed);
command-line "--key value" pairs override file values. Unknown keys are
rejected by name. Every field has a default, so an empty config is valid.
"""

from dataclasses import dataclass, fields

from .model import ModelConfig
from .training import TrainConfig


@dataclass
class RunConfig:
    # model
    num_encoder_blocks: int = 12
    num_decoder_blocks: int = 6
    d_model: int = 256
    heads: int = 4
    d_ffn: int = 2048
    conv_kernel: int = 15
    feat_dim: int = 80
    vocab_size: int = 4233
    dropout: float = 0.1
    ensemble_mode: str = "none"
    se_bottleneck_ratio: int = 1
    encoder_block_range: int = -1
    decoder_block_range: int = -1
    decoder_pos_mode: str = "relative"
    # optimization
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
    # loss
    ctc_weight: float = 0.3
    label_smoothing: float = 0.1
    # decoding
    beam_size: int = 10
    decode_ctc_weight: float = 0.5
    # paths
    train_manifest: str = ""
    dev_manifest: str = ""
    eval_manifest: str = ""
    checkpoint: str = ""
    decode_output: str = "decode.txt"
    out_dir: str = "run"

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_encoder_blocks=self.num_encoder_blocks,
            num_decoder_blocks=self.num_decoder_blocks,
            d_model=self.d_model, heads=self.heads, d_ffn=self.d_ffn,
            conv_kernel=self.conv_kernel, feat_dim=self.feat_dim,
            vocab_size=self.vocab_size, dropout=self.dropout,
            ensemble_mode=self.ensemble_mode,
            se_bottleneck_ratio=self.se_bottleneck_ratio,
            encoder_block_range=self.encoder_block_range,
            decoder_block_range=self.decoder_block_range,
            decoder_pos_mode=self.decoder_pos_mode)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            peak_lr=self.peak_lr, warmup_steps=self.warmup_steps,
            clip_norm=self.clip_norm, accum_steps=self.accum_steps,
            adam_beta1=self.adam_beta1, adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps, epochs=self.epochs,
            batch_size=self.batch_size, average_best_k=self.average_best_k,
            specaug_enabled=self.specaug_enabled, specaug_F=self.specaug_F,
            specaug_T=self.specaug_T, specaug_mF=self.specaug_mF,
            specaug_mT=self.specaug_mT, sampler=self.sampler, seed=self.seed)


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _convert(key, raw):
    kind = _FIELDS[key]
    raw = raw.strip()
    try:
        if kind == "bool" or kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if kind == "int" or kind is int:
            return int(raw)
        if kind == "float" or kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {kind}")


def parse_config_file(path):
    """File -> {key: raw string}; malformed lines reported with line numbers."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"config line {lineno}: expected key = value, "
                                 f"got {line.rstrip()!r}")
            key, raw = stripped.split("=", 1)
            out[key.strip()] = raw.strip()
    return out


def build_run_config(file_path=None, overrides=None) -> RunConfig:
    """Defaults <- file <- overrides, rejecting unknown keys at each layer."""
    merged = {}
    if file_path:
        merged.update(parse_config_file(file_path))
    if overrides:
        merged.update(overrides)
    unknown = [k for k in merged if k not in _FIELDS]
    if unknown:
        raise ValueError("unknown config key(s): " + ", ".join(sorted(unknown)))
    kwargs = {k: _convert(k, v) for k, v in merged.items()}
    return RunConfig(**kwargs)


def echo_config(cfg: RunConfig):
    """Deterministic 'key = value' lines in declaration order."""
    return [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(RunConfig)]
