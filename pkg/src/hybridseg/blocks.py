"""Neural building blocks for the hybrid segmentation network.

Everything here is a pure function of (input, params, state) built from the
taped primitives in hybridseg.tensor, so every block is differentiable and
checkable with grad_check. The single exception is batch-norm running-stat
tracking, which mutates the params in training mode on the training thread.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


def _conv_same(x, w):
    k = w.shape[-1]
    return T.conv2d(x, w, padding=(k - 1) // 2, groups=1)


def _conv_same_depthwise(x, w):
    k = w.shape[-1]
    return T.conv2d(x, w, padding=(k - 1) // 2, groups=x.shape[1])


def _per_channel(v, ndim=4):
    """Reshape a per-channel vector (C,) for NCHW broadcasting."""
    return T.reshape(v, (1, v.shape[0]) + (1,) * (ndim - 2))


# ---------------------------------------------------------------------------
# separable convolution + batch norm


@dataclass
class SeparableConvParams:
    """Depthwise 3x3 (or any odd k) filter bank, 1x1 channel mixer, and the
    batch-norm affine/statistics that follow them."""

    depthwise: Tensor  # (C, 1, k, k)
    pointwise: Tensor  # (O, C, 1, 1)
    bn_gamma: Tensor  # (O,)
    bn_beta: Tensor  # (O,)
    bn_running_mean: Tensor  # (O,), requires_grad False
    bn_running_var: Tensor  # (O,), requires_grad False
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5


def init_separable_conv(rng, in_ch, out_ch, k=3):
    if k % 2 == 0:
        raise ShapeError("separable conv kernel size must be odd")
    dw = rng.normal(0.0, math.sqrt(2.0 / (k * k)), size=(in_ch, 1, k, k))
    pw = rng.normal(0.0, math.sqrt(2.0 / in_ch), size=(out_ch, in_ch, 1, 1))
    return SeparableConvParams(
        depthwise=Tensor(dw, requires_grad=True),
        pointwise=Tensor(pw, requires_grad=True),
        bn_gamma=Tensor(np.ones(out_ch), requires_grad=True),
        bn_beta=Tensor(np.zeros(out_ch), requires_grad=True),
        bn_running_mean=Tensor(np.zeros(out_ch)),
        bn_running_var=Tensor(np.ones(out_ch)),
    )


def separable_conv_bn(x, p, training, update_stats=None):
    """Depthwise conv, pointwise 1x1 conv, then batch normalization.

    Training mode normalizes with batch statistics; inference mode with the
    stored running statistics. update_stats (default: same as training)
    controls whether running statistics are refreshed, so gradient checking
    can run the batch-statistics path without mutating state.
    """
    if p.depthwise.shape[-1] % 2 == 0:
        raise ShapeError("separable conv kernel size must be odd")
    if x.shape[1] != p.depthwise.shape[0]:
        raise ShapeError(
            f"input channels {x.shape[1]} do not match depthwise {p.depthwise.shape}"
        )
    if training and x.shape[0] == 0:
        raise ShapeError("zero batch in training mode")
    if update_stats is None:
        update_stats = training

    y = _conv_same_depthwise(x, p.depthwise)
    y = T.conv2d(y, p.pointwise, padding=0, groups=1)

    if training:
        mu = T.tmean(y, axes=[0, 2, 3], keepdims=True)
        centered = y - mu
        var = T.tmean(centered * centered, axes=[0, 2, 3], keepdims=True)
        if update_stats:
            m = p.bn_momentum
            p.bn_running_mean.data = (
                (1.0 - m) * p.bn_running_mean.data + m * mu.data.reshape(-1)
            )
            p.bn_running_var.data = (
                (1.0 - m) * p.bn_running_var.data + m * var.data.reshape(-1)
            )
    else:
        mu = _per_channel(p.bn_running_mean)
        var = _per_channel(p.bn_running_var)
        centered = y - mu
    xhat = centered / T.sqrt(var + p.bn_eps)
    return _per_channel(p.bn_gamma) * xhat + _per_channel(p.bn_beta)


def encoder_block(x, params_pair, training=False, update_stats=None):
    """Two (separable conv + BN + ReLU) layers, then 2x2 max pooling.

    Returns (skip, pooled): the pre-pool activation kept for the skip path
    and the spatially halved feature map.
    """
    if x.shape[-2] % 2 or x.shape[-1] % 2:
        raise ShapeError("encoder block requires even spatial extents")
    h = x
    for p in params_pair:
        h = T.relu(separable_conv_bn(h, p, training, update_stats))
    return h, T.maxpool2x2(h)


# ---------------------------------------------------------------------------
# convolutional LSTM


@dataclass
class ConvLSTMParams:
    """Gate kernels for one ConvLSTM direction.

    Input/forget gates see the previous memory cell through convolutional
    peepholes; the output gate sees the updated cell through a per-channel
    Hadamard peephole. That asymmetry is deliberate and load-bearing.
    """

    w_x_i: Tensor
    w_h_i: Tensor
    w_c_i: Tensor  # conv peephole on previous cell
    b_i: Tensor
    w_x_f: Tensor
    w_h_f: Tensor
    w_c_f: Tensor  # conv peephole on previous cell
    b_f: Tensor
    w_x_o: Tensor
    w_h_o: Tensor
    w_c_o: Tensor  # (hidden,) Hadamard peephole on the new cell
    b_o: Tensor
    w_x_c: Tensor
    w_h_c: Tensor
    b_c: Tensor

    @property
    def hidden_channels(self):
        return self.w_h_i.shape[0]


@dataclass
class ConvLSTMState:
    hidden: Tensor
    cell: Tensor


def zero_state(batch, hidden, height, width):
    return ConvLSTMState(
        Tensor(np.zeros((batch, hidden, height, width))),
        Tensor(np.zeros((batch, hidden, height, width))),
    )


def init_conv_lstm(rng, in_ch, hidden, k=3):
    def conv_w(cin):
        return Tensor(
            rng.normal(0.0, math.sqrt(1.0 / (k * k * cin)), size=(hidden, cin, k, k)),
            requires_grad=True,
        )

    def bias():
        return Tensor(np.zeros(hidden), requires_grad=True)

    return ConvLSTMParams(
        w_x_i=conv_w(in_ch), w_h_i=conv_w(hidden), w_c_i=conv_w(hidden), b_i=bias(),
        w_x_f=conv_w(in_ch), w_h_f=conv_w(hidden), w_c_f=conv_w(hidden), b_f=bias(),
        w_x_o=conv_w(in_ch), w_h_o=conv_w(hidden),
        w_c_o=Tensor(rng.normal(0.0, 0.1, size=hidden), requires_grad=True),
        b_o=bias(),
        w_x_c=conv_w(in_ch), w_h_c=conv_w(hidden), b_c=bias(),
    )


def conv_lstm_step(x, state, p):
    """One ConvLSTM update.

    Gate order: input and forget gates first (conv peepholes on the previous
    cell), then the cell update, then the output gate (Hadamard peephole on
    the new cell), then the hidden state.

    The per-stream convolutions are fused: the four x-kernels (and the four
    h-kernels, and the two cell peepholes) run as one grouped convolution so
    the patch gather happens once per input stream.
    """
    if x.shape[-2:] != state.hidden.shape[-2:] or x.shape[0] != state.hidden.shape[0]:
        raise ShapeError(
            f"input {x.shape} does not match state {state.hidden.shape}"
        )
    h_prev, c_prev = state.hidden, state.cell
    hid = p.hidden_channels

    from_x = _conv_same(x, T.concat([p.w_x_i, p.w_x_f, p.w_x_o, p.w_x_c], 0))
    from_h = _conv_same(
        h_prev, T.concat([p.w_h_i, p.w_h_f, p.w_h_o, p.w_h_c], 0)
    )
    from_c = _conv_same(c_prev, T.concat([p.w_c_i, p.w_c_f], 0))

    def gate(k):
        return T.narrow(from_x, 1, k * hid, hid) + T.narrow(from_h, 1, k * hid, hid)

    i = T.sigmoid(gate(0) + T.narrow(from_c, 1, 0, hid) + _per_channel(p.b_i))
    f = T.sigmoid(gate(1) + T.narrow(from_c, 1, hid, hid) + _per_channel(p.b_f))
    c_new = f * c_prev + i * T.tanh(gate(3) + _per_channel(p.b_c))
    o = T.sigmoid(gate(2) + _per_channel(p.w_c_o) * c_new + _per_channel(p.b_o))
    return ConvLSTMState(hidden=o * T.tanh(c_new), cell=c_new)


@dataclass
class BConvLSTMParams:
    forward: ConvLSTMParams
    backward: ConvLSTMParams
    mix_fwd: Tensor  # (hidden, hidden, k, k)
    mix_bwd: Tensor  # (hidden, hidden, k, k)
    mix_bias: Tensor  # (hidden,)


def init_bconv_lstm(rng, in_ch, hidden, k=3):
    def mix_w():
        return Tensor(
            rng.normal(0.0, math.sqrt(1.0 / (k * k * hidden)),
                       size=(hidden, hidden, k, k)),
            requires_grad=True,
        )

    return BConvLSTMParams(
        forward=init_conv_lstm(rng, in_ch, hidden, k),
        backward=init_conv_lstm(rng, in_ch, hidden, k),
        mix_fwd=mix_w(),
        mix_bwd=mix_w(),
        mix_bias=Tensor(np.zeros(hidden), requires_grad=True),
    )


def bconv_lstm(sequence, p):
    """Bidirectional ConvLSTM over a feature sequence.

    Both directions start from zero state. The forward pass runs first to
    last, the reverse pass last to first; the output mixes the two hidden
    states aligned at the final sequence position through learned kernels
    and tanh. Both mixing terms are convolutions.
    """
    if not sequence:
        raise ShapeError("bconv_lstm requires a non-empty sequence")
    ref = sequence[0].shape
    if any(t.shape != ref for t in sequence):
        raise ShapeError("bconv_lstm sequence shapes must all agree")
    b, _, h, w = ref
    hidden = p.forward.hidden_channels

    st = zero_state(b, hidden, h, w)
    for x in sequence:
        st = conv_lstm_step(x, st, p.forward)
    fwd_h = st.hidden

    st = zero_state(b, hidden, h, w)
    bwd_h = None
    for x in reversed(sequence):
        st = conv_lstm_step(x, st, p.backward)
        if bwd_h is None:  # hidden aligned at the final sequence position
            bwd_h = st.hidden

    return T.tanh(
        _conv_same(fwd_h, p.mix_fwd)
        + _conv_same(bwd_h, p.mix_bwd)
        + _per_channel(p.mix_bias)
    )


# ---------------------------------------------------------------------------
# windowed multi-head self-attention


@dataclass
class AttentionParams:
    """Projections for one attention module.

    Queries and values carry biases; keys do not: a constant added to every
    key shifts all logits in a softmax row equally and cancels exactly, so a
    key bias would be an inert, unlearnable parameter.
    """

    qkv_w: Tensor  # (d, 3d)
    q_bias: Tensor  # (d,)
    v_bias: Tensor  # (d,)
    proj_w: Tensor  # (d, d)
    proj_b: Tensor  # (d,)


@dataclass
class MlpParams:
    w1: Tensor  # (hidden, d, 1, 1) pointwise
    b1: Tensor
    w2: Tensor  # (d, hidden, 1, 1)
    b2: Tensor


@dataclass
class LayerNormParams:
    # eps is deliberately large: with few channels the normalization becomes
    # a near-step function of channel differences, and a smaller constant
    # puts its curvature beyond what central differences can resolve
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-2


@dataclass
class SwinBlockParams:
    """Parameters of two consecutive windowed-attention blocks.

    Block 1 attends within aligned windows; block 2 within windows cyclically
    shifted by window_size // 2 so information crosses window borders.
    """

    embed_dim: int
    window_size: int
    num_heads: int
    attn1: AttentionParams
    attn2: AttentionParams
    ln1a: LayerNormParams  # after W-MSA
    ln1b: LayerNormParams  # before block-1 MLP
    ln2a: LayerNormParams  # after SW-MSA
    ln2b: LayerNormParams  # before block-2 MLP
    mlp1: MlpParams
    mlp2: MlpParams

    @property
    def shift(self):
        return self.window_size // 2


def init_swin_pair(rng, embed_dim, window_size, num_heads, mlp_ratio=4):
    if embed_dim % num_heads:
        raise ShapeError(
            f"embed dim {embed_dim} not divisible by {num_heads} heads"
        )

    def linear(din, dout):
        return Tensor(
            rng.normal(0.0, math.sqrt(1.0 / din), size=(din, dout)),
            requires_grad=True,
        )

    def attn():
        return AttentionParams(
            qkv_w=linear(embed_dim, 3 * embed_dim),
            q_bias=Tensor(np.zeros(embed_dim), requires_grad=True),
            v_bias=Tensor(np.zeros(embed_dim), requires_grad=True),
            proj_w=linear(embed_dim, embed_dim),
            proj_b=Tensor(np.zeros(embed_dim), requires_grad=True),
        )

    def ln():
        return LayerNormParams(
            gamma=Tensor(np.ones(embed_dim), requires_grad=True),
            beta=Tensor(np.zeros(embed_dim), requires_grad=True),
        )

    hidden = int(embed_dim * mlp_ratio)

    def mlp():
        return MlpParams(
            w1=Tensor(
                rng.normal(0.0, math.sqrt(2.0 / embed_dim),
                           size=(hidden, embed_dim, 1, 1)),
                requires_grad=True,
            ),
            b1=Tensor(np.zeros(hidden), requires_grad=True),
            w2=Tensor(
                rng.normal(0.0, math.sqrt(2.0 / hidden),
                           size=(embed_dim, hidden, 1, 1)),
                requires_grad=True,
            ),
            b2=Tensor(np.zeros(embed_dim), requires_grad=True),
        )

    return SwinBlockParams(
        embed_dim=embed_dim,
        window_size=window_size,
        num_heads=num_heads,
        attn1=attn(),
        attn2=attn(),
        ln1a=ln(), ln1b=ln(), ln2a=ln(), ln2b=ln(),
        mlp1=mlp(), mlp2=mlp(),
    )


_MASK_CACHE = {}


def _shift_attention_mask(height, width, n, shift):
    """Additive mask (num_windows, n*n, n*n) blocking attention between
    regions that only became window-mates through the cyclic shift."""
    key = (height, width, n, shift)
    if key not in _MASK_CACHE:
        ids = np.zeros((height, width))
        region = 0
        for hs in (slice(0, height - n), slice(height - n, height - shift),
                   slice(height - shift, height)):
            for ws in (slice(0, width - n), slice(width - n, width - shift),
                       slice(width - shift, width)):
                ids[hs, ws] = region
                region += 1
        wins = (
            ids.reshape(height // n, n, width // n, n)
            .transpose(0, 2, 1, 3)
            .reshape(-1, n * n)
        )
        diff = wins[:, :, None] - wins[:, None, :]
        _MASK_CACHE[key] = np.where(diff != 0.0, -1e9, 0.0)
    return _MASK_CACHE[key]


def _window_partition(x, n):
    """(B, C, H, W) -> tokens (B*num_windows, n*n, C)."""
    b, c, h, w = x.shape
    t = T.reshape(x, (b, c, h // n, n, w // n, n))
    t = T.transpose(t, (0, 2, 4, 3, 5, 1))
    return T.reshape(t, (b * (h // n) * (w // n), n * n, c))


def _window_merge(tokens, b, c, h, w, n):
    t = T.reshape(tokens, (b, h // n, w // n, n, n, c))
    t = T.transpose(t, (0, 5, 1, 3, 2, 4))
    return T.reshape(t, (b, c, h, w))


def _tokens_linear(tokens, w, bias=None):
    b, t, d = tokens.shape
    flat = T.reshape(tokens, (b * t, d))
    out = T.matmul(flat, w)
    if bias is not None:
        out = out + T.reshape(bias, (1, bias.shape[0]))
    return T.reshape(out, (b, t, w.shape[1]))


def window_attention(x, p, shifted):
    """Multi-head self-attention within non-overlapping windows.

    Tokens are the spatial positions of the NCHW feature map. When shifted,
    the map is cyclically shifted by window_size // 2, wrapped positions are
    masked out of each other's attention, and the shift is undone afterward.
    Output shape equals input shape.
    """
    b, c, height, width = x.shape
    n = p.window_size
    if c != p.embed_dim:
        raise ShapeError(f"channels {c} do not match embed dim {p.embed_dim}")
    if height % n or width % n:
        raise ShapeError(f"spatial extents {(height, width)} not multiples of {n}")
    heads = p.num_heads
    hd = c // heads
    attn_p = p.attn2 if shifted else p.attn1
    shift = p.shift

    if shifted and shift:
        x = T.roll2d(x, (-shift, -shift))

    tokens = _window_partition(x, n)  # (B*nw, T, C)
    bw, tcount, _ = tokens.shape
    qkv = _tokens_linear(tokens, attn_p.qkv_w)

    def heads_of(part):
        t = T.reshape(part, (bw, tcount, heads, hd))
        return T.reshape(T.transpose(t, (0, 2, 1, 3)), (bw * heads, tcount, hd))

    q = heads_of(T.narrow(qkv, 2, 0, c) + T.reshape(attn_p.q_bias, (1, 1, c)))
    k = heads_of(T.narrow(qkv, 2, c, c))
    v = heads_of(T.narrow(qkv, 2, 2 * c, c) + T.reshape(attn_p.v_bias, (1, 1, c)))

    scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(hd))
    if shifted and shift:
        nw = (height // n) * (width // n)
        mask = Tensor(
            _shift_attention_mask(height, width, n, shift)
            .reshape(1, nw, 1, tcount, tcount)
        )
        scores = T.reshape(scores, (b, nw, heads, tcount, tcount)) + mask
        scores = T.reshape(scores, (bw * heads, tcount, tcount))
    att = T.softmax(scores, axis=2)
    ctx = T.matmul(att, v)  # (BW*heads, T, hd)

    ctx = T.reshape(ctx, (bw, heads, tcount, hd))
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (bw, tcount, c))
    out = _tokens_linear(ctx, attn_p.proj_w, attn_p.proj_b)
    out = _window_merge(out, b, c, height, width, n)

    if shifted and shift:
        out = T.roll2d(out, (shift, shift))
    return out


def _layer_norm(x, p):
    """Per-position normalization over the channel axis of an NCHW map."""
    mu = T.tmean(x, axes=[1], keepdims=True)
    centered = x - mu
    var = T.tmean(centered * centered, axes=[1], keepdims=True)
    xhat = centered / T.sqrt(var + p.eps)
    return _per_channel(p.gamma) * xhat + _per_channel(p.beta)


def _mlp(x, p):
    h = T.relu(T.conv2d(x, p.w1, padding=0) + _per_channel(p.b1))
    return T.conv2d(h, p.w2, padding=0) + _per_channel(p.b2)


def swin_block_pair(x, p):
    """Two consecutive windowed-attention blocks with residual fusion.

    Block 1: aligned windows; block 2: shifted windows. Each block adds the
    layer-normed attention output to its input, then adds an MLP applied to
    the layer-normed intermediate. Shape is preserved.
    """
    z1 = x + _layer_norm(window_attention(x, p, shifted=False), p.ln1a)
    z2 = z1 + _mlp(_layer_norm(z1, p.ln1b), p.mlp1)
    z3 = z2 + _layer_norm(window_attention(z2, p, shifted=True), p.ln2a)
    return z3 + _mlp(_layer_norm(z3, p.ln2b), p.mlp2)


# ---------------------------------------------------------------------------
# patch utilities (token granularity helpers)


def patch_partition4(x):
    """Flatten each 4x4 patch of an NCHW map into one token feature."""
    b, c, h, w = x.shape
    if h % 4 or w % 4:
        raise ShapeError("partition4 requires spatial extents divisible by 4")
    t = T.reshape(x, (b, c, h // 4, 4, w // 4, 4))
    t = T.transpose(t, (0, 2, 4, 3, 5, 1))
    return T.reshape(t, (b, (h // 4) * (w // 4), 16 * c))


def patch_merge2(tokens, grid_hw, weight):
    """Concatenate 2x2 neighboring token features and project 4d -> 2d,
    quartering the token count."""
    b, tcount, d = tokens.shape
    gh, gw = grid_hw
    if gh * gw != tcount:
        raise ShapeError(f"grid {grid_hw} does not cover {tcount} tokens")
    if gh % 2 or gw % 2:
        raise ShapeError("merge2 requires an even token grid")
    if weight.shape != (4 * d, 2 * d):
        raise ShapeError(f"merge2 weight must be (4d, 2d), got {weight.shape}")
    t = T.reshape(tokens, (b, gh // 2, 2, gw // 2, 2, d))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    merged = T.reshape(t, (b, (gh // 2) * (gw // 2), 4 * d))
    return _tokens_linear(merged, weight)


def linear_embed(tokens, weight):
    """Project raw token features to the working dimension."""
    if tokens.shape[-1] != weight.shape[0]:
        raise ShapeError("linear_embed feature size mismatch")
    return _tokens_linear(tokens, weight)


def patch_ops(x, mode, **kwargs):
    if mode == "partition4":
        return patch_partition4(x)
    if mode == "merge2":
        return patch_merge2(x, kwargs["grid_hw"], kwargs["weight"])
    if mode == "linear_embed":
        return linear_embed(x, kwargs["weight"])
    raise ValueError(f"unknown patch op {mode!r}")


# ---------------------------------------------------------------------------
# complexity accounting


def complexity_msa(h, w, d):
    """Operation count of global multi-head self-attention on an h x w grid."""
    if min(h, w, d) < 1:
        raise ValueError("complexity arguments must be >= 1")
    hw = h * w
    return 4 * hw * d * d + 2 * hw * hw * d


def complexity_swmsa(h, w, d, n, literal=False):
    """Operation count of shifted-window attention (linear in h*w at fixed n).

    literal=True evaluates the quadratic-in-hw variant for side-by-side
    comparison; it contradicts the linear-scaling claim and is not used by
    the model counters.
    """
    if min(h, w, d, n) < 1:
        raise ValueError("complexity arguments must be >= 1")
    hw = h * w
    if literal:
        return 4 * hw * d * d + 2 * n * n * hw * hw * d
    return 4 * hw * d * d + 2 * n * n * hw * d


# ---------------------------------------------------------------------------
# transposed convolution


def transposed_conv(x, kernel):
    """Stride-2 transposed convolution with a 2x2 kernel: exact 2x upsampling."""
    return T.conv_transpose2d(x, kernel)


def init_transposed_conv(rng, in_ch, out_ch):
    w = rng.normal(0.0, math.sqrt(1.0 / in_ch), size=(in_ch, out_ch, 2, 2))
    return Tensor(w, requires_grad=True)


def params_of(obj, prefix=""):
    """Flatten any nested params dataclass into {path: Tensor}."""
    out = {}
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif hasattr(obj, "__dataclass_fields__"):
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, (Tensor,)) or hasattr(v, "__dataclass_fields__"):
                key = f"{prefix}.{f.name}" if prefix else f.name
                out.update(params_of(v, key))
    return out
