"""Conformer-encoder / transformer-decoder speech recognizer whose encoder and
decoder stacks can fuse every block's output through a learned ensemble.

Two ensemble flavors:
  * weighted sum: one learnable scalar per block, optionally softmax-constrained;
  * squeeze-excitation: per-block gates from a two-layer bottleneck over each
    block's global mean activation.

Models process one utterance at a time ([T×D] features, one token list);
batching is a list of utterances whose losses are averaged, which matches
padded batching exactly because masks keep padding out of every statistic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    ConvSubsampler,
    DepthwiseConv1d,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    RelPosSelfAttention,
    causal_mask,
    dropout,
    glu,
    sinusoidal_encoding,
)
from .tensor import ShapeError, Tensor, concat

ENSEMBLE_MODES = ("none", "base", "base_softmax", "se")
POS_MODES = ("relative", "absolute")


@dataclass
class ModelConfig:
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
    # how many trailing blocks feed the ensemble; 0 disables that side
    encoder_block_range: int = -1  # -1 means all blocks
    decoder_block_range: int = -1
    decoder_pos_mode: str = "relative"

    def __post_init__(self):
        if self.encoder_block_range < 0:
            self.encoder_block_range = self.num_encoder_blocks
        if self.decoder_block_range < 0:
            self.decoder_block_range = self.num_decoder_blocks
        self.validate()

    def validate(self):
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.ensemble_mode not in ENSEMBLE_MODES:
            raise ValueError(f"ensemble_mode must be one of {ENSEMBLE_MODES}, "
                             f"got {self.ensemble_mode!r}")
        if self.decoder_pos_mode not in POS_MODES:
            raise ValueError(f"decoder_pos_mode must be one of {POS_MODES}, "
                             f"got {self.decoder_pos_mode!r}")
        if self.conv_kernel % 2 == 0:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0 <= self.encoder_block_range <= self.num_encoder_blocks:
            raise ValueError(f"encoder_block_range {self.encoder_block_range} outside "
                             f"[0, {self.num_encoder_blocks}]")
        if not 0 <= self.decoder_block_range <= self.num_decoder_blocks:
            raise ValueError(f"decoder_block_range {self.decoder_block_range} outside "
                             f"[0, {self.num_decoder_blocks}]")
        if self.ensemble_mode == "se":
            r = self.se_bottleneck_ratio
            for c in self.participating_blocks():
                if c > 0 and c % r != 0:
                    raise ValueError(f"block count {c} not divisible by ratio {r}")
        if self.vocab_size < 5:
            raise ValueError(f"vocab_size must be >= 5, got {self.vocab_size}")

    def participating_blocks(self):
        """(encoder, decoder) block counts feeding the ensembles; (0,0) when off."""
        if self.ensemble_mode == "none":
            return (0, 0)
        return (self.encoder_block_range, self.decoder_block_range)

    @property
    def sos_id(self) -> int:
        return self.vocab_size - 2

    @property
    def eos_id(self) -> int:
        return self.vocab_size - 1


def _build_ensemble(mode: str, n_blocks: int, ratio: int, rng):
    if mode == "none" or n_blocks == 0:
        return None
    if mode == "base":
        return BaseWSBO(n_blocks, softmax_constrained=False)
    if mode == "base_softmax":
        return BaseWSBO(n_blocks, softmax_constrained=True)
    return SEWSBO(n_blocks, ratio, rng)


class BaseWSBO(Module):
    """Weighted sum of block outputs with one scalar per block.

    Raw mode starts at the plain average (alpha = 1/C); softmax mode starts
    at zeros, which the softmax maps to the same uniform weighting.
    """

    def __init__(self, n_blocks: int, softmax_constrained: bool):
        if n_blocks < 1:
            raise ValueError("ensemble needs at least one block")
        init = np.zeros(n_blocks) if softmax_constrained else np.full(n_blocks, 1.0 / n_blocks)
        self.alpha = Tensor(init, requires_grad=True)
        self.softmax_constrained = softmax_constrained
        self.n_blocks = n_blocks

    def weights(self) -> Tensor:
        return self.alpha.softmax(axis=0) if self.softmax_constrained else self.alpha

    def __call__(self, outputs, mask=None) -> Tensor:
        _check_outputs(outputs, self.n_blocks)
        w = self.weights()
        acc = outputs[0] * w[0:1]
        for i in range(1, self.n_blocks):
            acc = acc + outputs[i] * w[i:i + 1]
        return acc


class SEWSBO(Module):
    """Squeeze-excitation gating over block outputs.

    Each block's output is reduced to its global mean over valid positions,
    the C means pass through a bias-free bottleneck (relu then sigmoid), and
    the resulting per-block gates scale the summed outputs.
    """

    def __init__(self, n_blocks: int, ratio: int, rng):
        if n_blocks < 1:
            raise ValueError("ensemble needs at least one block")
        if n_blocks % ratio != 0:
            raise ValueError(f"block count {n_blocks} not divisible by ratio {ratio}")
        hidden = n_blocks // ratio
        limit = 1.0 / np.sqrt(n_blocks)
        self.W1 = Tensor(rng.uniform(-limit, limit, size=(hidden, n_blocks)),
                         requires_grad=True)
        self.W2 = Tensor(rng.uniform(-limit, limit, size=(n_blocks, hidden)),
                         requires_grad=True)
        self.n_blocks = n_blocks

    def squeeze(self, outputs, mask=None) -> Tensor:
        """Per-block global mean over valid frames -> [C]."""
        _check_outputs(outputs, self.n_blocks)
        n = outputs[0].shape[0] if mask is None else int(np.count_nonzero(mask))
        return concat([y[:n].mean().reshape(1) for y in outputs], axis=0)

    def excite(self, z: Tensor) -> Tensor:
        """Bottleneck gates s = sigmoid(W2 relu(W1 z)) -> [C], each in (0,1)."""
        if z.shape != (self.n_blocks,):
            raise ShapeError(f"expected squeeze vector of {self.n_blocks}, got {z.shape}")
        h = (self.W1 @ z.reshape(self.n_blocks, 1)).relu()
        return (self.W2 @ h).sigmoid().reshape(self.n_blocks)

    def __call__(self, outputs, mask=None) -> Tensor:
        s = self.excite(self.squeeze(outputs, mask))
        acc = outputs[0] * s[0:1]
        for i in range(1, self.n_blocks):
            acc = acc + outputs[i] * s[i:i + 1]
        return acc


def _check_outputs(outputs, expected: int):
    if len(outputs) == 0:
        raise ValueError("ensemble got an empty output list")
    if len(outputs) != expected:
        raise ShapeError(f"ensemble expects {expected} block outputs, got {len(outputs)}")
    shape = outputs[0].shape
    for y in outputs[1:]:
        if y.shape != shape:
            raise ShapeError(f"block outputs disagree in shape: {shape} vs {y.shape}")


class FeedForward(Module):
    def __init__(self, d_model: int, d_ffn: int, p: float, rng, activation: str = "swish"):
        self.linear1 = Linear(d_model, d_ffn, rng)
        self.linear2 = Linear(d_ffn, d_model, rng)
        self.p = p
        self.activation = activation

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        h = self.linear1(x)
        h = h.swish() if self.activation == "swish" else h.relu()
        h = dropout(h, self.p, training, rng)
        return dropout(self.linear2(h), self.p, training, rng)


class ConvModule(Module):
    """Pointwise expand -> GLU -> depthwise conv -> norm -> swish -> pointwise."""

    def __init__(self, d_model: int, kernel: int, p: float, rng):
        self.pointwise1 = Linear(d_model, 2 * d_model, rng)
        self.depthwise = DepthwiseConv1d(d_model, kernel, rng)
        self.norm = LayerNorm(d_model)
        self.pointwise2 = Linear(d_model, d_model, rng)
        self.p = p

    def __call__(self, x: Tensor, mask=None, training: bool = False, rng=None) -> Tensor:
        h = glu(self.pointwise1(x))
        if mask is not None:
            # padding must not bleed through the depthwise receptive field
            h = h * np.asarray(mask, dtype=np.float64)[:, None]
        h = self.norm(self.depthwise(h)).swish()
        return dropout(self.pointwise2(h), self.p, training, rng)


class ConformerBlock(Module):
    """Half-step FFN, self-attention, convolution, half-step FFN, each stage
    wrapped as y = LN(x + module(x))."""

    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.d_model
        self.ffn1 = FeedForward(d, cfg.d_ffn, cfg.dropout, rng)
        self.norm1 = LayerNorm(d)
        self.attn = RelPosSelfAttention(d, cfg.heads, rng)
        self.norm2 = LayerNorm(d)
        self.conv = ConvModule(d, cfg.conv_kernel, cfg.dropout, rng)
        self.norm3 = LayerNorm(d)
        self.ffn2 = FeedForward(d, cfg.d_ffn, cfg.dropout, rng)
        self.norm4 = LayerNorm(d)
        self.p = cfg.dropout

    def __call__(self, x: Tensor, mask=None, training: bool = False, rng=None) -> Tensor:
        x = self.norm1(x + self.ffn1(x, training, rng) * 0.5)
        att = dropout(self.attn(x, mask), self.p, training, rng)
        x = self.norm2(x + att)
        x = self.norm3(x + self.conv(x, mask, training, rng))
        return self.norm4(x + self.ffn2(x, training, rng) * 0.5)


class TransformerDecoderBlock(Module):
    """Causal self-attention, cross-attention over the encoder output, FFN;
    post-norm wrapping and a full-step FFN."""

    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.d_model
        if cfg.decoder_pos_mode == "relative":
            self.self_attn = RelPosSelfAttention(d, cfg.heads, rng)
        else:
            self.self_attn = MultiHeadAttention(d, cfg.heads, rng)
        self.norm1 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, cfg.heads, rng)
        self.norm2 = LayerNorm(d)
        self.ffn = FeedForward(d, cfg.d_ffn, cfg.dropout, rng, activation="relu")
        self.norm3 = LayerNorm(d)
        self.p = cfg.dropout
        self.pos_mode = cfg.decoder_pos_mode

    def __call__(self, x: Tensor, memory: Tensor, memory_mask=None,
                 training: bool = False, rng=None) -> Tensor:
        L = x.shape[0]
        cm = causal_mask(L)
        if self.pos_mode == "relative":
            sa = self.self_attn(x, cm)
        else:
            sa = self.self_attn(x, x, cm)
        x = self.norm1(x + dropout(sa, self.p, training, rng))
        ca = self.cross_attn(x, memory, memory_mask)
        x = self.norm2(x + dropout(ca, self.p, training, rng))
        return self.norm3(x + self.ffn(x, training, rng))


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.subsampler = ConvSubsampler(cfg.feat_dim, cfg.d_model, rng)
        self.blocks = [ConformerBlock(cfg, rng) for _ in range(cfg.num_encoder_blocks)]
        self.ensemble = _build_ensemble(cfg.ensemble_mode,
                                        cfg.participating_blocks()[0],
                                        cfg.se_bottleneck_ratio, rng)
        self.p = cfg.dropout
        self.n_ensemble = cfg.participating_blocks()[0]

    def __call__(self, feats: Tensor, feat_mask=None, training: bool = False, rng=None):
        x, mask = self.subsampler(feats, feat_mask)
        x = dropout(x, self.p, training, rng)
        outputs = []
        for block in self.blocks:
            x = block(x, mask, training, rng)
            outputs.append(x)
        if self.ensemble is not None:
            x = self.ensemble(outputs[-self.n_ensemble:], mask)
        return x, mask, outputs


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.embed = Embedding(cfg.vocab_size, cfg.d_model, rng)
        self.blocks = [TransformerDecoderBlock(cfg, rng)
                       for _ in range(cfg.num_decoder_blocks)]
        self.ensemble = _build_ensemble(cfg.ensemble_mode,
                                        cfg.participating_blocks()[1],
                                        cfg.se_bottleneck_ratio, rng)
        self.output_proj = Linear(cfg.d_model, cfg.vocab_size, rng)
        self.pos_mode = cfg.decoder_pos_mode
        self.d_model = cfg.d_model
        self.n_ensemble = cfg.participating_blocks()[1]

    def __call__(self, tokens, memory: Tensor, memory_mask=None,
                 training: bool = False, rng=None):
        tokens = np.asarray(tokens, dtype=np.int64)
        x = self.embed(tokens)
        if self.pos_mode == "absolute":
            x = x + sinusoidal_encoding(len(tokens), self.d_model).data
        outputs = []
        for block in self.blocks:
            x = block(x, memory, memory_mask, training, rng)
            outputs.append(x)
        if self.ensemble is not None:
            x = self.ensemble(outputs[-self.n_ensemble:])
        return self.output_proj(x), outputs


class ASRModel(Module):
    """Encoder-decoder recognizer with a CTC head on the encoder output.

    The CTC head projects to vocab_size + 1 classes: class 0 is blank and
    class c is vocabulary id c - 1.
    """

    def __init__(self, cfg: ModelConfig, rng=None):
        cfg.validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        self.ctc_proj = Linear(cfg.d_model, cfg.vocab_size + 1, rng)
        self.config = cfg

    def encode(self, feats: Tensor, feat_mask=None, training: bool = False, rng=None):
        """[T×D] features -> (ensembled encoder output [T'×d_model], out mask)."""
        x, mask, _ = self.encoder(feats, feat_mask, training, rng)
        return x, mask

    def decode_forward(self, enc: Tensor, enc_mask, tokens,
                       training: bool = False, rng=None) -> Tensor:
        """Teacher-forced decoder pass: tokens (starting with sos) -> [L×V] logits."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size == 0:
            raise ValueError("decoder needs at least the start token")
        logits, _ = self.decoder(tokens, enc, enc_mask, training, rng)
        return logits

    def ctc_log_probs(self, enc: Tensor) -> Tensor:
        """Per-frame log-probabilities over blank + vocabulary, [T'×(V+1)]."""
        return self.ctc_proj(enc).log_softmax(axis=-1)


def ensemble_parameter_delta(cfg: ModelConfig) -> int:
    """Learnable scalars added by the configured ensemble over mode 'none'.

    Closed-form count (one scalar per block for the weighted sum; the two
    bias-free bottleneck matrices for squeeze-excitation), so it is cheap at
    any model size.  Cross-checked against constructed models in the tests.
    """
    enc, dec = cfg.participating_blocks()
    if cfg.ensemble_mode == "none":
        return 0
    if cfg.ensemble_mode in ("base", "base_softmax"):
        return enc + dec
    r = cfg.se_bottleneck_ratio
    return 2 * enc * enc // r + 2 * dec * dec // r


def toy_config(ensemble_mode: str = "none", **overrides) -> ModelConfig:
    """Small configuration used across the test suite and grad checks."""
    base = dict(num_encoder_blocks=2, num_decoder_blocks=2, d_model=16, heads=2,
                d_ffn=32, conv_kernel=15, feat_dim=8, vocab_size=8, dropout=0.1,
                ensemble_mode=ensemble_mode)
    base.update(overrides)
    return ModelConfig(**base)
