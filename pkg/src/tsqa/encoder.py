"""Patch-based time-series encoder and the three-level position encoding.

A raw segment (L steps x V channels) is windowed into patches, each patch
projected to the model width and run through a small self-attention encoder
that operates along time independently per channel. Position information is
layered on afterwards: fixed sinusoids over within-segment token positions,
a learnable per-channel embedding, and a rotary rotation keyed by segment
index so concatenated segments stay distinguishable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class EncoderError(ValueError):
    pass


@dataclass
class TimeSeriesSegment:
    values: np.ndarray  # L x V, float64
    segment_index: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise EncoderError(f"segment must be L x V, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise EncoderError("segment contains non-finite values")

    @property
    def length(self):
        return self.values.shape[0]

    @property
    def channel_count(self):
        return self.values.shape[1]


@dataclass
class TemporalTokens:
    tokens: Tensor  # L' x V x d
    segment_lengths: list = field(default_factory=list)  # tokens per segment
    tpe_applied: bool = False
    segment_index: int = 0

    @property
    def token_count(self):
        return self.tokens.shape[0]


def num_patches(length, patch_len, stride):
    if length < patch_len:
        raise EncoderError(f"segment length {length} shorter than patch length {patch_len}")
    if stride < 1:
        raise EncoderError(f"stride must be >= 1, got {stride}")
    if (length - patch_len) % stride != 0:
        raise EncoderError(
            f"(L - P) = {length - patch_len} not divisible by stride {stride}; "
            "refusing to truncate"
        )
    return (length - patch_len) // stride + 1


def patchify(seg: TimeSeriesSegment, patch_len, stride):
    """Window the segment into (L', V, P); window t covers [t*S, t*S + P)."""
    n = num_patches(seg.length, patch_len, stride)
    v = seg.channel_count
    out = np.empty((n, v, patch_len), dtype=np.float64)
    for t in range(n):
        out[t] = seg.values[t * stride : t * stride + patch_len].T
    return out


def sinusoidal_table(max_pos, d):
    """Fixed table: even dims sin, odd dims cos, geometric frequency ladder."""
    pos = np.arange(max_pos, dtype=np.float64)[:, None]
    j = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, j / d)
    table = np.zeros((max_pos, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


def rotary_angles(segment_index, d, base=10000.0):
    """Per-pair rotation angles theta_j * i for segment index i."""
    j = np.arange(d // 2, dtype=np.float64)
    theta = np.power(base, -2.0 * j / d)
    return theta * segment_index


def rotate_pairs(tokens: Tensor, angles):
    """Rotate feature pairs (2j, 2j+1) of the last axis by `angles`.

    Pure rotation, so every token keeps its Euclidean norm.
    """
    d = tokens.shape[-1]
    half = d // 2
    cos = np.cos(angles)
    sin = np.sin(angles)
    paired = T.reshape(tokens, tokens.shape[:-1] + (half, 2))
    even = paired[..., 0]
    odd = paired[..., 1]
    re = even * cos - odd * sin
    ro = even * sin + odd * cos
    stacked = T.concat(
        [T.reshape(re, re.shape + (1,)), T.reshape(ro, ro.shape + (1,))], axis=-1
    )
    return T.reshape(stacked, tokens.shape)


class TpeTable:
    """Three-level position encoding: sinusoidal time, learnable channel, rotary segment."""

    def __init__(self, rng, max_tokens, channels, d, rotary_base=10000.0):
        self.p_time = sinusoidal_table(max_tokens, d)
        self.p_channel = T.uniform_init(rng, (channels, d), d, name="psi.p_channel")
        self.rotary_base = rotary_base
        self.d = d

    def apply(self, toks: TemporalTokens) -> TemporalTokens:
        if toks.tpe_applied:
            raise EncoderError("position encoding already applied to these tokens")
        if len(toks.segment_lengths) != 1:
            raise EncoderError("apply TPE per segment, before concatenation")
        seg_index = toks.segment_index
        n = toks.token_count
        out = toks.tokens + Tensor(self.p_time[:n, None, :]) + self.p_channel
        out = rotate_pairs(out, rotary_angles(seg_index, self.d, self.rotary_base))
        return TemporalTokens(
            out, segment_lengths=[n], tpe_applied=True, segment_index=seg_index
        )


def concat_segments(segments):
    """Concatenate per-segment token blocks along the temporal axis."""
    if not segments:
        raise EncoderError("no segments to concatenate")
    shapes = {s.tokens.shape[1:] for s in segments}
    if len(shapes) != 1:
        raise EncoderError(f"segment (V, d) mismatch: {sorted(shapes)}")
    if not all(s.tpe_applied for s in segments):
        raise EncoderError("apply TPE to every segment before concatenation")
    if len(segments) == 1:
        return segments[0]
    tokens = T.concat([s.tokens for s in segments], axis=0)
    lengths = [n for s in segments for n in s.segment_lengths]
    return TemporalTokens(tokens, segment_lengths=lengths, tpe_applied=True)


class PatchEncoder:
    """Per-channel transformer over patch tokens; frozen after initialization.

    Attention runs along the temporal axis with the channel axis treated as a
    batch dimension, so channels never mix here (cross-channel interaction is
    the fusion module's job).
    """

    def __init__(self, rng, patch_len, d, layers=4, heads=8, prefix="enc"):
        if d % heads != 0:
            raise EncoderError(f"width {d} not divisible by {heads} heads")
        self.patch_len = patch_len
        self.d = d
        self.layers = layers
        self.heads = heads
        self.params = {}

        def p(name, shape, fan_in):
            t = T.uniform_init(rng, shape, fan_in, requires_grad=False, name=f"{prefix}.{name}")
            self.params[f"{prefix}.{name}"] = t
            return t

        self.w_in = p("w_in", (patch_len, d), patch_len)
        self.b_in = p("b_in", (d,), patch_len)
        self.blocks = []
        for i in range(layers):
            blk = {
                "ln1_g": Tensor(np.ones(d), name=f"{prefix}.blk{i}.ln1_g"),
                "ln1_b": Tensor(np.zeros(d), name=f"{prefix}.blk{i}.ln1_b"),
                "wq": p(f"blk{i}.wq", (d, d), d),
                "wk": p(f"blk{i}.wk", (d, d), d),
                "wv": p(f"blk{i}.wv", (d, d), d),
                "wo": p(f"blk{i}.wo", (d, d), d),
                "ln2_g": Tensor(np.ones(d), name=f"{prefix}.blk{i}.ln2_g"),
                "ln2_b": Tensor(np.zeros(d), name=f"{prefix}.blk{i}.ln2_b"),
                "w1": p(f"blk{i}.w1", (d, 4 * d), d),
                "b1": p(f"blk{i}.b1", (4 * d,), d),
                "w2": p(f"blk{i}.w2", (4 * d, d), 4 * d),
                "b2": p(f"blk{i}.b2", (d,), 4 * d),
            }
            for key in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
                self.params[blk[key].name] = blk[key]
            self.blocks.append(blk)

    def _attend(self, x, blk):
        # x: V x L' x d (channel-batched)
        v_ch, n, d = x.shape
        h = self.heads
        dk = d // h
        xn = T.layer_norm(x, blk["ln1_g"], blk["ln1_b"])
        q = T.matmul(xn, blk["wq"])
        k = T.matmul(xn, blk["wk"])
        val = T.matmul(xn, blk["wv"])

        def split(t):
            return T.transpose(T.reshape(t, (v_ch, n, h, dk)), (0, 2, 1, 3))

        q, k, val = split(q), split(k), split(val)
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dk))
        attn = T.softmax(scores, axis=-1)
        ctx = T.matmul(attn, val)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (v_ch, n, d))
        return x + T.matmul(ctx, blk["wo"])

    def _ffn(self, x, blk):
        xn = T.layer_norm(x, blk["ln2_g"], blk["ln2_b"])
        hidden = T.gelu(T.matmul(xn, blk["w1"]) + blk["b1"])
        return x + T.matmul(hidden, blk["w2"]) + blk["b2"]

    def encode(self, patched, segment_index=0) -> TemporalTokens:
        """(L', V, P) -> TemporalTokens with (L', V, d), no position encoding yet."""
        patched = np.asarray(patched, dtype=np.float64)
        if patched.ndim != 3 or patched.shape[2] != self.patch_len:
            raise EncoderError(
                f"expected (L', V, {self.patch_len}) patches, got {patched.shape}"
            )
        x = Tensor(np.transpose(patched, (1, 0, 2)))  # V x L' x P
        x = T.matmul(x, self.w_in) + self.b_in
        for blk in self.blocks:
            x = self._attend(x, blk)
            x = self._ffn(x, blk)
        tokens = T.transpose(x, (1, 0, 2))
        return TemporalTokens(
            tokens, segment_lengths=[patched.shape[0]], segment_index=segment_index
        )


# ---------------------------------------------------------------------------
# Series file format: magic "ITTS", version u32, L u32, V u32, then L*V
# little-endian f32 values, time-major. Loader promotes to float64.
# ---------------------------------------------------------------------------

_SERIES_MAGIC = b"ITTS"
_SERIES_VERSION = 1


def save_series(path, values):
    values = np.asarray(values)
    if values.ndim != 2:
        raise EncoderError(f"series must be L x V, got {values.shape}")
    l_steps, v_ch = values.shape
    with open(path, "wb") as fh:
        fh.write(_SERIES_MAGIC)
        fh.write(struct.pack("<III", _SERIES_VERSION, l_steps, v_ch))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def load_series(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _SERIES_MAGIC:
            raise ValueError(f"{path}: not a series file (bad magic)")
        version, l_steps, v_ch = struct.unpack("<III", fh.read(12))
        if version != _SERIES_VERSION:
            raise ValueError(f"{path}: unsupported series version {version}")
        data = np.frombuffer(fh.read(4 * l_steps * v_ch), dtype="<f4")
    return data.reshape(l_steps, v_ch).astype(np.float64)
