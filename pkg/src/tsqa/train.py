"""Alignment-only supervised fine-tuning: the fusion stack trains, all else frozen."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import ModelConfig, QaModel
from .tensor import save_checkpoint


@dataclass
class TrainConfig:
    epochs: int = 2
    batch_size: int = 2
    learning_rate: float = 2e-3
    grad_clip: float = 1.0
    seed: int = 0


@dataclass
class StepReport:
    step: int
    epoch: int
    loss: float
    grad_norm: float
    frozen_ok: bool


class Adam:
    """Adaptive moment estimation over the model's trainable parameters."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads):
        self.t += 1
        for name, g in grads.items():
            p = self.params[name]
            m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_gradients(grads, max_norm):
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


class Trainer:
    def __init__(self, model: QaModel, cfg: TrainConfig, data_root):
        self.model = model
        self.cfg = cfg
        self.data_root = data_root
        self.optimizer = Adam(model.trainable_params, cfg.learning_rate)
        self.initial_frozen_checksum = model.frozen_checksum()
        self.step_count = 0

    def sft_step(self, batch, epoch=0) -> StepReport:
        losses = [self.model.loss(rec, self.data_root) for rec in batch]
        total = losses[0]
        for extra in losses[1:]:
            total = total + extra
        loss = total * (1.0 / len(losses))
        grads = T.backward_gradients(loss, self.model.trainable_params)
        grads, norm = clip_gradients(grads, self.cfg.grad_clip)
        self.optimizer.step(grads)
        self.step_count += 1
        frozen_ok = self.model.frozen_checksum() == self.initial_frozen_checksum
        return StepReport(self.step_count, epoch, loss.item(), norm, frozen_ok)

    def run(self, records, log_path=None, progress=None):
        """Seeded epoch shuffling; returns the list of step reports."""
        rng = np.random.default_rng(self.cfg.seed)
        reports = []
        writer = None
        log_file = None
        if log_path:
            log_file = open(log_path, "w", newline="")
            writer = csv.writer(log_file)
            writer.writerow(["step", "epoch", "loss", "grad_norm", "frozen_ok"])
        try:
            for epoch in range(self.cfg.epochs):
                order = rng.permutation(len(records))
                for start in range(0, len(records), self.cfg.batch_size):
                    batch = [records[i] for i in order[start : start + self.cfg.batch_size]]
                    report = self.sft_step(batch, epoch)
                    reports.append(report)
                    if writer:
                        writer.writerow(
                            [report.step, report.epoch, f"{report.loss:.12f}",
                             f"{report.grad_norm:.12f}", int(report.frozen_ok)]
                        )
                    if progress:
                        progress(report)
        finally:
            if log_file:
                log_file.close()
        return reports


def train(model: QaModel, records, data_root, cfg: TrainConfig, out_dir, progress=None):
    os.makedirs(out_dir, exist_ok=True)
    trainer = Trainer(model, cfg, data_root)
    reports = trainer.run(records, log_path=os.path.join(out_dir, "metrics.csv"),
                          progress=progress)
    save_checkpoint(os.path.join(out_dir, "checkpoint.itck"), model.params)
    return reports


def report_param_budget(model: QaModel):
    return model.param_budget()


def analytic_param_counts(cfg: ModelConfig, vocab_size):
    """Closed-form parameter counts; must match the assembled model exactly.

    trainable (alignment module):
        instruct tokens        n*d
        channel position       V*d
        per fusion layer       12*d^2  (three stages x q,k,v,o)  +  4*d (norms)
    frozen:
        encoder                P*d + d + layers*(12*d^2 + 9*d)
        language model         |vocab|*d + blocks*((4 + 2*ffn)*d^2 + (5 + ffn)*d) + 2*d
    """
    d = cfg.d
    trainable = (
        cfg.lit_length * d
        + cfg.channels * d
        + cfg.layers * (12 * d * d + 4 * d)
    )
    encoder = cfg.patch_len * d + d + cfg.encoder_layers * (12 * d * d + 9 * d)
    f = cfg.lm_ffn_mult
    lm = (
        vocab_size * d
        + cfg.lm_blocks * ((4 + 2 * f) * d * d + (5 + f) * d)
        + 2 * d
    )
    frozen = encoder + lm
    return trainable, frozen
