"""Tiny frozen decoder-only language model over a closed synthetic vocabulary.

Word-plus-punctuation tokenization, sinusoidal positions, two causal
self-attention blocks, tied output head. Every weight is frozen; the model
exists to consume the injected temporal tokens and emit answers.
"""

from __future__ import annotations

import hashlib
import re

import numpy as np

from . import tensor as T
from .encoder import sinusoidal_table
from .fusion import QueryEmbedding
from .tensor import Tensor

PAD, BOS, EOS, UNK, TS_PLACEHOLDER = "<pad>", "<bos>", "<eos>", "<unk>", "<ts>"
RESERVED = [PAD, BOS, EOS, UNK, TS_PLACEHOLDER]

# quoted single letters ("a" ... "e") stay whole: they are the closed-task
# answer alphabet and deserve one id each rather than quote-letter-quote
_TOKEN_RE = re.compile(r'<ts>|"[a-z]"|[a-z0-9]+|[^\sa-z0-9]')


def normalize(text):
    """Lowercase, words and punctuation split apart, single-spaced."""
    return " ".join(_TOKEN_RE.findall(text.lower()))


class Vocabulary:
    """Dense string-to-id map with the reserved tokens pinned first."""

    def __init__(self, words):
        self.tokens = list(RESERVED)
        seen = set(self.tokens)
        for w in words:
            if w not in seen:
                seen.add(w)
                self.tokens.append(w)
        self.ids = {tok: i for i, tok in enumerate(self.tokens)}
        self.pad_id = self.ids[PAD]
        self.bos_id = self.ids[BOS]
        self.eos_id = self.ids[EOS]
        self.unk_id = self.ids[UNK]
        self.placeholder_id = self.ids[TS_PLACEHOLDER]

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def from_texts(cls, texts):
        words = sorted({tok for text in texts for tok in _TOKEN_RE.findall(text.lower())})
        return cls(w for w in words if w not in RESERVED)

    def tokenize(self, text):
        return [
            self.ids.get(tok, self.unk_id) for tok in _TOKEN_RE.findall(text.lower())
        ]

    def detokenize(self, ids):
        return " ".join(
            self.tokens[i] for i in ids if i not in (self.pad_id, self.bos_id, self.eos_id)
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        if tokens[: len(RESERVED)] != RESERVED:
            raise ValueError(f"{path}: reserved tokens missing or out of order")
        return cls(tokens[len(RESERVED) :])


class DecoderLm:
    """Frozen causal decoder; width shared with the alignment module."""

    def __init__(self, rng, vocab: Vocabulary, d, blocks=2, heads=4, ffn_mult=4,
                 max_len=512):
        if d % heads != 0:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.vocab = vocab
        self.d = d
        self.heads = heads
        self.max_len = max_len
        # positions damped so token identity dominates each input row
        self.positions = 0.3 * sinusoidal_table(max_len, d)
        self.params = {}

        def p(name, shape, fan_in):
            t = T.uniform_init(rng, shape, fan_in, requires_grad=False, name=f"lm.{name}")
            self.params[t.name] = t
            return t

        self.embedding = p("embedding", (len(vocab), d), d)
        self.blocks = []
        for i in range(blocks):
            blk = {
                "ln1_g": Tensor(np.ones(d), name=f"lm.blk{i}.ln1_g"),
                "ln1_b": Tensor(np.zeros(d), name=f"lm.blk{i}.ln1_b"),
                "wq": p(f"blk{i}.wq", (d, d), d),
                "wk": p(f"blk{i}.wk", (d, d), d),
                "wv": p(f"blk{i}.wv", (d, d), d),
                "wo": p(f"blk{i}.wo", (d, d), d),
                "ln2_g": Tensor(np.ones(d), name=f"lm.blk{i}.ln2_g"),
                "ln2_b": Tensor(np.zeros(d), name=f"lm.blk{i}.ln2_b"),
                "w1": p(f"blk{i}.w1", (d, ffn_mult * d), d),
                "b1": p(f"blk{i}.b1", (ffn_mult * d,), d),
                "w2": p(f"blk{i}.w2", (ffn_mult * d, d), ffn_mult * d),
                "b2": p(f"blk{i}.b2", (d,), ffn_mult * d),
            }
            for key in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
                self.params[blk[key].name] = blk[key]
            self.blocks.append(blk)
        # gain above 1 widens the tied head's usable logit range while keeping
        # the initial cross-entropy near ln|V|
        self.ln_f_g = Tensor(np.full(d, 1.25), name="lm.ln_f_g")
        self.ln_f_b = Tensor(np.zeros(d), name="lm.ln_f_b")
        self.params["lm.ln_f_g"] = self.ln_f_g
        self.params["lm.ln_f_b"] = self.ln_f_b

    def embed_query(self, ids) -> QueryEmbedding:
        """Token embeddings plus positions; mask marks the placeholder slots."""
        ids = np.asarray(ids, dtype=np.int64)
        rows = T.embedding_lookup(self.embedding, ids) + Tensor(self.positions[: len(ids)])
        return QueryEmbedding(rows, ids == self.vocab.placeholder_id)

    def embed_continuation(self, ids, offset):
        ids = np.asarray(ids, dtype=np.int64)
        return T.embedding_lookup(self.embedding, ids) + Tensor(
            self.positions[offset : offset + len(ids)]
        )

    def _block(self, x, blk):
        rows = x.shape[0]
        h, dk = self.heads, self.d // self.heads
        q = T.transpose(T.reshape(T.matmul(x, blk["wq"]), (rows, h, dk)), (1, 0, 2))
        k = T.transpose(T.reshape(T.matmul(x, blk["wk"]), (rows, h, dk)), (1, 0, 2))
        v = T.transpose(T.reshape(T.matmul(x, blk["wv"]), (rows, h, dk)), (1, 0, 2))
        scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(dk))
        causal = np.triu(np.full((rows, rows), -1e30), k=1)
        attn = T.softmax(scores + Tensor(causal), axis=-1)
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (1, 0, 2)), (rows, self.d))
        # post-norm layout: the raw residual feeds attention, so row magnitude
        # carries through the value path instead of being normalised away
        x = T.layer_norm(x + T.matmul(ctx, blk["wo"]), blk["ln1_g"], blk["ln1_b"])
        hidden = T.gelu(T.matmul(x, blk["w1"]) + blk["b1"])
        return T.layer_norm(x + T.matmul(hidden, blk["w2"]) + blk["b2"],
                            blk["ln2_g"], blk["ln2_b"])

    def logits(self, rows):
        """Causal forward over embedded rows; tied head against the embedding."""
        x = rows
        for blk in self.blocks:
            x = self._block(x, blk)
        x = T.layer_norm(x, self.ln_f_g, self.ln_f_b)
        return T.matmul(x, T.transpose(self.embedding, (1, 0)))

    def score(self, augmented, answer_ids):
        """Teacher-forced loss over the answer span (answer tokens plus EOS)."""
        if not len(answer_ids):
            raise ValueError("empty answer: nothing to supervise")
        prompt_len = augmented.shape[0]
        supervised = list(answer_ids) + [self.vocab.eos_id]
        ans_rows = self.embed_continuation(answer_ids, prompt_len)
        full = T.concat([augmented, ans_rows], axis=0)
        logits = self.logits(full)
        total = full.shape[0]
        targets = np.zeros(total, dtype=np.int64)
        mask = np.zeros(total, dtype=bool)
        # position t predicts token t+1; the final row predicts EOS
        targets[prompt_len - 1 : total] = supervised
        mask[prompt_len - 1 : total] = True
        return T.cross_entropy(logits, targets, mask)

    def decode_greedy(self, augmented, max_len=40):
        """Repeated argmax continuation; ties break toward the lowest id."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        rows = augmented
        out_ids = []
        for _ in range(max_len):
            logits = self.logits(rows).data
            last = logits[-1].copy()
            last[self.vocab.placeholder_id] = -np.inf  # never emit the slot token
            nxt = int(np.argmax(last))
            if nxt == self.vocab.eos_id:
                break
            out_ids.append(nxt)
            offset = rows.shape[0]
            if offset >= self.max_len:
                break
            rows = T.concat([rows, self.embed_continuation([nxt], offset)], axis=0)
        return self.vocab.detokenize(out_ids)


def checksum_params(params):
    """Order-independent digest of a named parameter set."""
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(params[name].data).tobytes())
    return digest.hexdigest()
