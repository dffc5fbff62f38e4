"""Trainable alignment stack between temporal tokens and the frozen LM.

Three attention stages per layer: instruct-token refinement against the
query embedding, channel fusing that collapses the channel axis under
instruct guidance, and time attention over the collapsed sequence. The
final fused block is injected into the query embedding in place of its
placeholder rows, so the frozen LM consumes temporal content as ordinary
token embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class FusionError(ValueError):
    pass


class FlopCounter:
    """Counts multiplies spent on attention score dot-products."""

    def __init__(self):
        self.ita_scores = 0
        self.baseline_scores = 0

    def reset(self):
        self.ita_scores = 0
        self.baseline_scores = 0


FLOPS = FlopCounter()


class AttentionWeights:
    """One stage's projections: q/k/v plus output, no biases, h heads."""

    def __init__(self, rng, d, heads, prefix, params):
        if d % heads != 0:
            raise FusionError(f"width {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.dk = d // heads
        self.wq = T.uniform_init(rng, (d, d), d, name=f"{prefix}.wq")
        self.wk = T.uniform_init(rng, (d, d), d, name=f"{prefix}.wk")
        self.wv = T.uniform_init(rng, (d, d), d, name=f"{prefix}.wv")
        self.wo = T.uniform_init(rng, (d, d), d, name=f"{prefix}.wo")
        for w in (self.wq, self.wk, self.wv, self.wo):
            params[w.name] = w


def _split_heads(x, heads):
    # (rows, d) -> (heads, rows, dk)
    rows, d = x.shape
    return T.transpose(T.reshape(x, (rows, heads, d // heads)), (1, 0, 2))


def _merge_heads(x):
    # (heads, rows, dk) -> (rows, d)
    h, rows, dk = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (rows, h * dk))


def _mha(w: AttentionWeights, queries, keys_values):
    """Plain multi-head attention; returns output and score count."""
    q = _split_heads(T.matmul(queries, w.wq), w.heads)
    k = _split_heads(T.matmul(keys_values, w.wk), w.heads)
    v = _split_heads(T.matmul(keys_values, w.wv), w.heads)
    scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(w.dk))
    attn = T.softmax(scores, axis=-1)
    ctx = _merge_heads(T.matmul(attn, v))
    flops = w.heads * queries.shape[0] * keys_values.shape[0] * w.dk
    return T.matmul(ctx, w.wo), flops


def refine_instruct(w: AttentionWeights, instruct, query):
    """Self-attention over [instruct; query]; keep the instruct rows."""
    if instruct.shape[-1] != w.d or (query.shape[0] and query.shape[-1] != w.d):
        raise FusionError(
            f"width mismatch: instruct {instruct.shape}, query {query.shape}, d={w.d}"
        )
    n = instruct.shape[0]
    joined = T.concat([instruct, query], axis=0) if query.shape[0] else instruct
    out, _ = _mha(w, joined, joined)
    return out[:n] if query.shape[0] else out


def channel_fuse(w: AttentionWeights, instruct, temporal):
    """Collapse the channel axis of (L', V, d) under instruct guidance.

    Keys are temporally mean-pooled per channel, one n x V weight table per
    head scores channels, and each temporal step's values are averaged over
    the instruct rows with those weights.
    """
    if instruct.shape[-1] != w.d or temporal.shape[-1] != w.d:
        raise FusionError(
            f"width mismatch: instruct {instruct.shape}, temporal {temporal.shape}"
        )
    n = instruct.shape[0]
    l_p, v_ch, d = temporal.shape
    h, dk = w.heads, w.dk

    q = _split_heads(T.matmul(instruct, w.wq), h)  # h x n x dk
    keys = T.mean(T.matmul(temporal, w.wk), axis=0)  # V x d, pooled over time
    k = _split_heads(keys, h)  # h x V x dk
    scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(dk))
    attn = T.softmax(scores, axis=-1)  # h x n x V
    FLOPS.ita_scores += h * n * v_ch * dk

    values = T.matmul(temporal, w.wv)  # L' x V x d
    values = T.transpose(T.reshape(values, (l_p, v_ch, h, dk)), (2, 0, 1, 3))  # h x L' x V x dk
    weights = T.mean(attn, axis=1)  # h x V, the 1/n instruct average
    ctx = T.sum_(values * T.reshape(weights, (h, 1, v_ch, 1)), axis=2)  # h x L' x dk
    merged = T.reshape(T.transpose(ctx, (1, 0, 2)), (l_p, d))
    return T.matmul(merged, w.wo)


def time_attend(w: AttentionWeights, instruct, collapsed):
    """Cross-attention: instruct queries over the channel-collapsed sequence."""
    if collapsed.shape[0] == 0:
        raise FusionError("time attention over an empty temporal sequence")
    if instruct.shape[-1] != w.d or collapsed.shape[-1] != w.d:
        raise FusionError(
            f"width mismatch: instruct {instruct.shape}, collapsed {collapsed.shape}"
        )
    out, flops = _mha(w, instruct, collapsed)
    FLOPS.ita_scores += flops
    return out


def cross_attention_baseline(w: AttentionWeights, instruct, temporal):
    """Flatten (L', V, d) to L'*V tokens and attend directly; the benchmark foil."""
    l_p, v_ch, d = temporal.shape
    flat = T.reshape(temporal, (l_p * v_ch, d))
    out, flops = _mha(w, instruct, flat)
    FLOPS.baseline_scores += flops
    return out


@dataclass
class QueryEmbedding:
    rows: Tensor  # L_q x d
    placeholder_mask: np.ndarray  # bool, length L_q

    def __post_init__(self):
        self.placeholder_mask = np.asarray(self.placeholder_mask, dtype=bool)
        if self.placeholder_mask.shape != (self.rows.shape[0],):
            raise FusionError("placeholder mask length must match query length")
        idx = np.flatnonzero(self.placeholder_mask)
        if idx.size and not np.array_equal(idx, np.arange(idx[0], idx[0] + idx.size)):
            raise FusionError("placeholder positions must be contiguous")

    @property
    def placeholder_count(self):
        return int(self.placeholder_mask.sum())


def inject_tal(query: QueryEmbedding, fused):
    """Replace the placeholder rows of the query with the fused block, in order.

    Rows outside the mask come through bit-identical.
    """
    n = fused.shape[0]
    count = query.placeholder_count
    if count != n:
        raise FusionError(f"placeholder count {count} != fused row count {n}")
    start = int(np.flatnonzero(query.placeholder_mask)[0])
    pieces = []
    if start:
        pieces.append(query.rows[:start])
    pieces.append(fused)
    if start + n < query.rows.shape[0]:
        pieces.append(query.rows[start + n :])
    return T.concat(pieces, axis=0) if len(pieces) > 1 else pieces[0]


class FusionLayer:
    def __init__(self, rng, d, heads, index, params):
        prefix = f"psi.layer{index}"
        self.refine_w = AttentionWeights(rng, d, heads, f"{prefix}.refine", params)
        self.channel_w = AttentionWeights(rng, d, heads, f"{prefix}.channel", params)
        self.time_w = AttentionWeights(rng, d, heads, f"{prefix}.time", params)
        self.ln_refine_g = Tensor(np.ones(d), requires_grad=True, name=f"{prefix}.ln_refine_g")
        self.ln_refine_b = Tensor(np.zeros(d), requires_grad=True, name=f"{prefix}.ln_refine_b")
        self.ln_time_g = Tensor(np.ones(d), requires_grad=True, name=f"{prefix}.ln_time_g")
        self.ln_time_b = Tensor(np.zeros(d), requires_grad=True, name=f"{prefix}.ln_time_b")
        for t in (self.ln_refine_g, self.ln_refine_b, self.ln_time_g, self.ln_time_b):
            params[t.name] = t

    def forward(self, instruct_in, query_rows, temporal):
        """Returns (ita_output, next_instruct_input)."""
        normed_i = T.layer_norm(instruct_in, self.ln_refine_g, self.ln_refine_b)
        normed_q = T.layer_norm(query_rows, self.ln_refine_g, self.ln_refine_b)
        i_star = instruct_in + refine_instruct(self.refine_w, normed_i, normed_q)
        s = T.layer_norm(i_star, self.ln_time_g, self.ln_time_b)
        collapsed = channel_fuse(self.channel_w, s, temporal)
        ita_out = time_attend(self.time_w, s, collapsed)
        return ita_out, ita_out + i_star


class FusionStack:
    """The full alignment module: instruct tokens plus stacked fusion layers."""

    def __init__(self, rng, d, heads=8, layers=2, lit_length=25):
        if layers < 1:
            raise FusionError(f"need at least one fusion layer, got {layers}")
        if lit_length < 1:
            raise FusionError(f"need at least one instruct token, got {lit_length}")
        self.d = d
        self.lit_length = lit_length
        self.params = {}
        self.instruct = T.uniform_init(rng, (lit_length, d), d, name="psi.instruct")
        self.params["psi.instruct"] = self.instruct
        self.layers = [FusionLayer(rng, d, heads, i, self.params) for i in range(layers)]

    def fuse(self, temporal_tokens, query: QueryEmbedding):
        """Run the stack; the last layer's time-attention output is the fusion."""
        if not temporal_tokens.tpe_applied:
            raise FusionError("temporal tokens need position encoding before fusion")
        instruct_in = self.instruct
        ita_out = None
        for layer in self.layers:
            ita_out, instruct_in = layer.forward(
                instruct_in, query.rows, temporal_tokens.tokens
            )
        return ita_out
