"""Neural building blocks: linear/norm/embedding layers, the convolution
pieces of the encoder, and relative-position / standard multi-head attention.

Layers are plain classes holding ``Tensor`` parameters; calling them runs the
forward pass on a single utterance.  Masks are boolean numpy arrays (True =
valid) and are assumed prefix-valid, matching right-padded batches.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    NEG_FILL,
    ShapeError,
    Tensor,
    accumulate_grad,
    make_node,
    gather_rows,
    pad,
    zero_grad,
)


class Module:
    """Base for anything owning parameters, directly or through children.

    Parameters are discovered by walking instance attributes in creation
    order, so the dotted names and their ordering are deterministic for a
    given architecture.  Lists of child modules contribute their index to
    the dotted path (``blocks.0.ffn1.linear1.weight``).
    """

    def named_parameters(self):
        out = []
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((name, value))
            elif isinstance(value, Module):
                out.extend((f"{name}.{sub}", p) for sub, p in value.named_parameters())
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend((f"{name}.{i}.{sub}", p)
                                   for sub, p in item.named_parameters())
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def count_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        zero_grad(self.parameters())


class Linear(Module):
    """Affine map x·Wᵀ + b with glorot-uniform weight init."""

    def __init__(self, d_in: int, d_out: int, rng, bias: bool = True):
        limit = math.sqrt(6.0 / (d_in + d_out))
        self.weight = Tensor(rng.uniform(-limit, limit, size=(d_out, d_in)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None
        self.d_in = d_in
        self.d_out = d_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"linear expects last dim {self.d_in}, got {x.shape}")
        out = x @ self.weight.transpose(1, 0)
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    """Standardize the last axis, then scale and shift."""

    def __init__(self, d: int, eps: float = 1e-12):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps
        self.d = d

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d:
            raise ShapeError(f"layer norm expects last dim {self.d}, got {x.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered * (var + self.eps) ** -0.5 * self.gamma + self.beta


class Embedding(Module):
    """Token id -> row of a learned table, scaled by sqrt(d)."""

    def __init__(self, vocab_size: int, d: int, rng):
        self.table = Tensor(rng.normal(0.0, d ** -0.5, size=(vocab_size, d)),
                            requires_grad=True)
        self.scale = math.sqrt(d)

    def __call__(self, ids) -> Tensor:
        return gather_rows(self.table, ids) * self.scale


def dropout(x: Tensor, p: float, training: bool, rng=None) -> Tensor:
    """Inverted dropout: zero with prob p, scale survivors by 1/(1-p).

    Identity when not training or p == 0; rng is the explicit source of the
    mask so runs are reproducible.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(np.float64)
    return x * (keep / (1.0 - p))


def glu(x: Tensor) -> Tensor:
    """Gated linear unit: first half of the last axis gated by sigmoid of the second."""
    d = x.shape[-1]
    if d % 2 != 0:
        raise ShapeError(f"glu needs an even last dim, got {d}")
    half = d // 2
    return x[..., :half] * x[..., half:].sigmoid()


def depthwise_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 1-D convolution over time, zero same-padding.

    x: [T×d], kernel: [d×k] with k odd; output keeps shape [T×d].
    """
    T, d = x.shape
    dk, k = kernel.shape
    if dk != d:
        raise ShapeError(f"kernel channels {dk} do not match input channels {d}")
    if k % 2 == 0:
        raise ShapeError(f"kernel length must be odd, got {k}")
    wing = (k - 1) // 2
    xp = np.pad(x.data, ((wing, wing), (0, 0)))
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[j:j + T] * kernel.data[:, j]

    def bw(node):
        g = node.grad
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[j:j + T] += g * kernel.data[:, j]
            accumulate_grad(x, gxp[wing:wing + T])
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for j in range(k):
                gk[:, j] = (g * xp[j:j + T]).sum(axis=0)
            accumulate_grad(kernel, gk)

    return make_node(out, (x, kernel), bw)


class DepthwiseConv1d(Module):
    def __init__(self, channels: int, k: int, rng):
        if k % 2 == 0:
            raise ShapeError(f"kernel length must be odd, got {k}")
        limit = 1.0 / math.sqrt(k)
        self.kernel = Tensor(rng.uniform(-limit, limit, size=(channels, k)),
                             requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return depthwise_conv1d(x, self.kernel)


def conv2d_3x3_stride2(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Valid 3×3 stride-2 convolution: [c_in×H×W] -> [c_out×H'×W'].

    Output lengths are H' = (H-3)//2 + 1, which equals (H-1)//2 for H >= 3.
    """
    c_in, H, W = x.shape
    c_out = kernel.shape[0]
    if kernel.shape[1] != c_in:
        raise ShapeError(f"kernel expects {kernel.shape[1]} input channels, got {c_in}")
    if H < 3 or W < 3:
        raise ShapeError(f"input {H}x{W} smaller than the 3x3 kernel")
    Ho = (H - 3) // 2 + 1
    Wo = (W - 3) // 2 + 1
    taps = [(a, b, slice(a, a + 2 * Ho - 1, 2), slice(b, b + 2 * Wo - 1, 2))
            for a in range(3) for b in range(3)]
    out = np.broadcast_to(bias.data[:, None, None], (c_out, Ho, Wo)).copy()
    for a, b, rs, cs in taps:
        out += np.einsum("chw,oc->ohw", x.data[:, rs, cs], kernel.data[:, :, a, b])

    def bw(node):
        g = node.grad
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for a, b, rs, cs in taps:
                gx[:, rs, cs] += np.einsum("ohw,oc->chw", g, kernel.data[:, :, a, b])
            accumulate_grad(x, gx)
        if kernel.requires_grad:
            gk = np.zeros_like(kernel.data)
            for a, b, rs, cs in taps:
                gk[:, :, a, b] = np.einsum("ohw,chw->oc", g, x.data[:, rs, cs])
            accumulate_grad(kernel, gk)
        if bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=(1, 2)))

    return make_node(out, (x, kernel, bias), bw)


class Conv2dStride2(Module):
    """One subsampler stage: learned 3×3 stride-2 kernel plus bias."""

    def __init__(self, c_in: int, c_out: int, rng):
        fan_in, fan_out = c_in * 9, c_out * 9
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        self.kernel = Tensor(rng.uniform(-limit, limit, size=(c_out, c_in, 3, 3)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_3x3_stride2(x, self.kernel, self.bias)


def subsampled_length(n: int) -> int:
    """Frames surviving two valid 3×3 stride-2 convolutions."""
    return ((n - 1) // 2 - 1) // 2


class ConvSubsampler(Module):
    """Two relu'd 3×3 stride-2 stages, then the frequency axis folds into a
    linear projection to d_model.  Roughly 4× time reduction."""

    def __init__(self, feat_dim: int, d_model: int, rng):
        if subsampled_length(feat_dim) < 1:
            raise ShapeError(f"feature dim {feat_dim} collapses below 1 column")
        self.conv1 = Conv2dStride2(1, d_model, rng)
        self.conv2 = Conv2dStride2(d_model, d_model, rng)
        self.proj = Linear(d_model * subsampled_length(feat_dim), d_model, rng)
        self.feat_dim = feat_dim
        self.d_model = d_model

    def __call__(self, feats: Tensor, mask=None):
        """[T×D] -> ([T'×d_model], out_mask). The mask marks valid output frames."""
        T, D = feats.shape
        if D != self.feat_dim:
            raise ShapeError(f"expected {self.feat_dim} features per frame, got {D}")
        valid = T if mask is None else int(np.count_nonzero(mask))
        if subsampled_length(valid) < 1:
            raise ShapeError(f"{valid} valid frames is too short to subsample (need 7)")
        h = self.conv1(feats.reshape(1, T, D)).relu()
        h = self.conv2(h).relu()
        c, T2, D2 = h.shape
        out = self.proj(h.transpose(1, 0, 2).reshape(T2, c * D2))
        out_mask = np.arange(T2) < subsampled_length(valid)
        return out, out_mask


def _sinusoid_rows(positions: np.ndarray, d_model: int) -> np.ndarray:
    # sin on even columns, cos on odd, frequency base 10000
    pe = np.zeros((len(positions), d_model))
    inv = np.exp(-math.log(10000.0) * np.arange(0, d_model, 2) / d_model)
    ang = positions[:, None] * inv[None, :]
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang[:, :d_model // 2])
    return pe


def rel_pos_encoding(length: int, d_model: int) -> Tensor:
    """Sinusoid rows for relative offsets length-1 down to -(length-1)."""
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    offsets = np.arange(length - 1, -length, -1, dtype=np.float64)
    return Tensor(_sinusoid_rows(offsets, d_model))


def sinusoidal_encoding(length: int, d_model: int) -> Tensor:
    """Absolute sinusoid rows for positions 0..length-1."""
    return Tensor(_sinusoid_rows(np.arange(length, dtype=np.float64), d_model))


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def rel_shift(m: Tensor) -> Tensor:
    """Turn per-offset scores [h×T×(2T-1)] into per-pair scores [h×T×T].

    Column c of the input corresponds to relative offset T-1-c; the output
    at (i, j) picks column T-1-(i-j), done with the pad/flatten/reshape
    trick so it stays a pure view pipeline on the tape.
    """
    h, T, cols = m.shape
    if cols != 2 * T - 1:
        raise ShapeError(f"expected {2 * T - 1} offset columns, got {cols}")
    padded = pad(m, ((0, 0), (0, 0), (0, 1)))
    flat = padded.reshape(h, 2 * T * T)
    flat = pad(flat, ((0, 0), (0, T - 1)))
    return flat.reshape(h, T + 1, 2 * T - 1)[:, :T, T - 1:]


def _split_heads(x: Tensor, rows: int, heads: int, d_head: int) -> Tensor:
    return x.reshape(rows, heads, d_head).transpose(1, 0, 2)


def _mask_to_2d(mask, T_q: int, T_k: int) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype != np.bool_:
        m = m.astype(bool)
    if m.ndim == 1 and m.shape[0] == T_k:
        m = np.broadcast_to(m[None, :], (T_q, T_k))
    if m.shape != (T_q, T_k):
        raise ShapeError(f"mask shape {m.shape} does not cover {T_q}x{T_k}")
    return m


def _weighted_values(scores: Tensor, v: Tensor, mask2d, w_out: Linear,
                     rows: int, d_model: int) -> Tensor:
    if mask2d is not None:
        scores = scores + np.where(mask2d, 0.0, NEG_FILL)
    weights = scores.softmax(axis=-1)
    if mask2d is not None:
        # exact zeros on masked keys, even for fully masked rows
        weights = weights * mask2d.astype(np.float64)
    ctx = weights @ v
    return w_out(ctx.transpose(1, 0, 2).reshape(rows, d_model))


class RelPosSelfAttention(Module):
    """Multi-head self-attention with Transformer-XL relative positions.

    Per head: score(i,j) = [(q_i+u)·k_j + (q_i+v)·r_{i-j}] / sqrt(d_k), with
    learned content bias u and position bias v shared across positions.
    """

    def __init__(self, d_model: int, heads: int, rng):
        if d_model % heads != 0:
            raise ShapeError(f"d_model {d_model} not divisible by {heads} heads")
        self.heads = heads
        self.d_head = d_model // heads
        self.d_model = d_model
        self.w_q = Linear(d_model, d_model, rng)
        self.w_k = Linear(d_model, d_model, rng)
        self.w_v = Linear(d_model, d_model, rng)
        self.w_pos = Linear(d_model, d_model, rng, bias=False)
        self.w_out = Linear(d_model, d_model, rng)
        limit = math.sqrt(6.0 / (heads + self.d_head))
        self.bias_u = Tensor(rng.uniform(-limit, limit, size=(heads, self.d_head)),
                             requires_grad=True)
        self.bias_v = Tensor(rng.uniform(-limit, limit, size=(heads, self.d_head)),
                             requires_grad=True)

    def attention_scores(self, x: Tensor) -> Tensor:
        """Pre-mask scaled scores [h×T×T]; exposed for analysis of the
        relative-position structure."""
        T = x.shape[0]
        h, dk = self.heads, self.d_head
        q = _split_heads(self.w_q(x), T, h, dk)
        k = _split_heads(self.w_k(x), T, h, dk)
        rel = _split_heads(self.w_pos(rel_pos_encoding(T, self.d_model)),
                           2 * T - 1, h, dk)
        content = (q + self.bias_u.reshape(h, 1, dk)) @ k.transpose(0, 2, 1)
        per_offset = (q + self.bias_v.reshape(h, 1, dk)) @ rel.transpose(0, 2, 1)
        return (content + rel_shift(per_offset)) * (1.0 / math.sqrt(dk))

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        T = x.shape[0]
        scores = self.attention_scores(x)
        v = _split_heads(self.w_v(x), T, self.heads, self.d_head)
        mask2d = None if mask is None else _mask_to_2d(mask, T, T)
        return _weighted_values(scores, v, mask2d, self.w_out, T, self.d_model)


class MultiHeadAttention(Module):
    """Standard scaled dot-product attention; queries from x, keys/values
    from memory.  Covers cross-attention and absolute-position self-attention."""

    def __init__(self, d_model: int, heads: int, rng):
        if d_model % heads != 0:
            raise ShapeError(f"d_model {d_model} not divisible by {heads} heads")
        self.heads = heads
        self.d_head = d_model // heads
        self.d_model = d_model
        self.w_q = Linear(d_model, d_model, rng)
        self.w_k = Linear(d_model, d_model, rng)
        self.w_v = Linear(d_model, d_model, rng)
        self.w_out = Linear(d_model, d_model, rng)

    def __call__(self, x: Tensor, memory: Tensor, mask=None) -> Tensor:
        L = x.shape[0]
        S = memory.shape[0]
        h, dk = self.heads, self.d_head
        q = _split_heads(self.w_q(x), L, h, dk)
        k = _split_heads(self.w_k(memory), S, h, dk)
        v = _split_heads(self.w_v(memory), S, h, dk)
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(dk))
        mask2d = None if mask is None else _mask_to_2d(mask, L, S)
        return _weighted_values(scores, v, mask2d, self.w_out, L, self.d_model)
