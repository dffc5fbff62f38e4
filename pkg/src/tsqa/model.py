"""End-to-end QA model: frozen patch encoder, trainable fusion stack, frozen LM.

Prompts are assembled as BOS, a contiguous run of time-token placeholders,
then the question; the fusion output replaces the placeholder rows before
the frozen decoder scores or generates the answer. Encoder outputs are
cached per series file since the encoder never trains.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import QARecord
from .encoder import (
    PatchEncoder,
    TemporalTokens,
    TimeSeriesSegment,
    TpeTable,
    concat_segments,
    load_series,
    num_patches,
    patchify,
)
from .fusion import FusionStack, inject_tal
from .lm import TS_PLACEHOLDER, DecoderLm, Vocabulary, checksum_params
from .tensor import Tensor

TASK_SERIES_COUNT = {"understanding": 1, "perception": 1, "reasoning": 10, "decision": 10}


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 8
    layers: int = 2
    lit_length: int = 25
    encoder_layers: int = 4
    encoder_heads: int = 8
    lm_blocks: int = 2
    lm_heads: int = 4
    lm_ffn_mult: int = 4
    patch_len: int = 60
    stride: int = 60
    channels: int = 32
    segment_length: int = 600
    max_segments: int = 10
    rotary_base: float = 10000.0

    def max_tokens_per_segment(self):
        return num_patches(self.segment_length, self.patch_len, self.stride)


class QaModel:
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, seed):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = PatchEncoder(
            rng, cfg.patch_len, cfg.d, layers=cfg.encoder_layers, heads=cfg.encoder_heads
        )
        self.tpe = TpeTable(
            rng,
            cfg.max_tokens_per_segment(),
            cfg.channels,
            cfg.d,
            rotary_base=cfg.rotary_base,
        )
        self.fusion = FusionStack(
            rng, cfg.d, heads=cfg.heads, layers=cfg.layers, lit_length=cfg.lit_length
        )
        self.lm = DecoderLm(
            rng, vocab, cfg.d, blocks=cfg.lm_blocks, heads=cfg.lm_heads,
            ffn_mult=cfg.lm_ffn_mult,
        )
        self.vocab = vocab
        self._encode_cache = {}

    # -- parameter bookkeeping ----------------------------------------------

    @property
    def params(self):
        merged = {}
        merged.update(self.encoder.params)
        merged.update(self.fusion.params)
        merged["psi.p_channel"] = self.tpe.p_channel
        merged.update(self.lm.params)
        return merged

    @property
    def trainable_params(self):
        return {k: v for k, v in self.params.items() if v.requires_grad}

    @property
    def frozen_params(self):
        return {k: v for k, v in self.params.items() if not v.requires_grad}

    def frozen_checksum(self):
        return checksum_params(self.frozen_params)

    def param_budget(self):
        trainable = sum(p.size for p in self.trainable_params.values())
        frozen = sum(p.size for p in self.frozen_params.values())
        total = trainable + frozen
        return trainable, frozen, trainable / total if total else 0.0

    def load_state(self, state):
        for name, value in state.items():
            if name not in self.params:
                raise KeyError(f"checkpoint parameter {name!r} not present in model")
            p = self.params[name]
            if p.data.shape != value.shape:
                raise ValueError(
                    f"checkpoint parameter {name!r} shape {value.shape} != {p.data.shape}"
                )
            p.data = value.copy()
        self._encode_cache.clear()

    # -- forward path --------------------------------------------------------

    def encode_series(self, path):
        """Frozen encoder output for one series file, cached as raw values."""
        cached = self._encode_cache.get(path)
        if cached is None:
            seg = TimeSeriesSegment(load_series(path))
            patched = patchify(seg, self.cfg.patch_len, self.cfg.stride)
            cached = self.encoder.encode(patched).tokens.data
            self._encode_cache[path] = cached
        return cached

    def temporal_tokens(self, paths):
        """Encode, position-encode per segment, and concatenate."""
        parts = []
        for i, path in enumerate(paths):
            enc = self.encode_series(path)
            toks = TemporalTokens(Tensor(enc), segment_lengths=[enc.shape[0]], segment_index=i)
            parts.append(self.tpe.apply(toks))
        return concat_segments(parts)

    def prompt_ids(self, question):
        return (
            [self.vocab.bos_id]
            + [self.vocab.placeholder_id] * self.fusion.lit_length
            + self.vocab.tokenize(question)
        )

    def augmented_prompt(self, record: QARecord, root):
        expected = TASK_SERIES_COUNT[record.task]
        if len(record.series) != expected:
            raise ValueError(
                f"{record.id}: task {record.task!r} needs {expected} series, "
                f"got {len(record.series)}"
            )
        paths = [os.path.join(root, s) for s in record.series]
        temporal = self.temporal_tokens(paths)
        query = self.lm.embed_query(self.prompt_ids(record.question))
        fused = self.fusion.fuse(temporal, query)
        return inject_tal(query, fused)

    def loss(self, record: QARecord, root):
        augmented = self.augmented_prompt(record, root)
        answer_ids = self.vocab.tokenize(record.answer)
        return self.lm.score(augmented, answer_ids)

    def answer_greedy(self, record: QARecord, root, max_len=40):
        return self.lm.decode_greedy(self.augmented_prompt(record, root), max_len=max_len)

    def rank_choices(self, record: QARecord, root):
        """Pick the choice letter whose canonical answer scores best."""
        if not record.choices:
            raise ValueError(f"{record.id}: no choices to rank")
        augmented = self.augmented_prompt(record, root)
        best_letter, best_loss = None, None
        for letter in sorted(record.choices):
            ids = self.vocab.tokenize(f'"{letter}"')
            loss = self.lm.score(augmented, ids).item()
            if best_loss is None or loss < best_loss:
                best_letter, best_loss = letter, loss
        return best_letter


def build_vocabulary(records):
    texts = []
    for r in records:
        texts.append(r.question)
        texts.append(r.answer)
        if r.choices:
            texts.extend(r.choices.values())
    texts.append(TS_PLACEHOLDER)
    return Vocabulary.from_texts(texts)
