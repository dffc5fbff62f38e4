"""Training loop: determinism, frozen contract, parameter accounting."""

import csv
import os

import numpy as np
import pytest

from tsqa.data import generate_dataset
from tsqa.lm import checksum_params
from tsqa.model import ModelConfig, QaModel, build_vocabulary
from tsqa.tensor import Tensor
from tsqa.train import (
    Adam,
    TrainConfig,
    Trainer,
    analytic_param_counts,
    clip_gradients,
    train,
)

SMALL = ModelConfig(d=32, heads=2, layers=1, lit_length=4, encoder_layers=1,
                    lm_blocks=1, lm_heads=2, patch_len=30, stride=30,
                    channels=8, segment_length=120)


@pytest.fixture(scope="module")
def forge(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("train-data"))
    recs = generate_dataset(
        root, 21, engines=4, cycles=12, channels=8, length=120,
        counts={"understanding": 4, "perception": 8, "reasoning": 4, "decision": 2},
    )
    return root, recs


def small_model(recs, seed=0):
    return QaModel(SMALL, build_vocabulary(recs), seed=seed)


class TestAdam:
    def test_matches_reference_update(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True, name="p")
        opt = Adam({"p": p}, lr=0.1)
        g = np.array([0.5, -0.5])
        opt.step({"p": g})
        # closed-form first step: update is -lr * g / (|g| + eps)
        want = np.array([1.0, -2.0]) - 0.1 * np.sign(g) * (np.abs(g) / (np.abs(g) + 1e-8))
        np.testing.assert_allclose(p.data, want, atol=1e-9)

    def test_clip_rescales_to_max_norm(self):
        grads = {"a": np.array([3.0, 4.0])}
        clipped, norm = clip_gradients(grads, 1.0)
        assert norm == pytest.approx(5.0)
        assert np.linalg.norm(clipped["a"]) == pytest.approx(1.0)

    def test_clip_leaves_small_gradients(self):
        grads = {"a": np.array([0.3])}
        clipped, _ = clip_gradients(grads, 1.0)
        np.testing.assert_array_equal(clipped["a"], grads["a"])


class TestSftStep:
    def test_step_changes_trainable_only(self, forge):
        root, recs = forge
        model = small_model(recs)
        frozen_before = checksum_params(model.frozen_params)
        trainable_before = {k: t.data.copy() for k, t in model.trainable_params.items()}
        trainer = Trainer(model, TrainConfig(seed=0), root)
        report = trainer.sft_step(recs[:2])
        assert report.frozen_ok
        assert checksum_params(model.frozen_params) == frozen_before
        changed = [
            k for k, before in trainable_before.items()
            if np.abs(model.trainable_params[k].data - before).max() > 0
        ]
        assert changed  # at least one alignment parameter moved

    def test_gradient_norm_finite_nonzero(self, forge):
        root, recs = forge
        trainer = Trainer(small_model(recs), TrainConfig(seed=0), root)
        report = trainer.sft_step(recs[:2])
        assert np.isfinite(report.grad_norm) and report.grad_norm > 0

    def test_loss_decreases_on_fixed_subset(self, forge):
        root, recs = forge
        model = small_model(recs)
        trainer = Trainer(model, TrainConfig(learning_rate=5e-3, seed=0), root)
        subset = [r for r in recs if r.task == "perception"][:4]
        first = trainer.sft_step(subset).loss
        last = first
        for _ in range(299):
            last = trainer.sft_step(subset).loss
            if last < 0.5 * first:
                break
        assert last < 0.5 * first  # >= 50% reduction within 300 steps

    def test_wrong_series_count_errors(self, forge):
        root, recs = forge
        model = small_model(recs)
        bad = next(r for r in recs if r.task == "perception")
        bad = type(bad)(bad.id, bad.series * 2, bad.task, bad.question, bad.answer,
                        bad.choices)
        trainer = Trainer(model, TrainConfig(seed=0), root)
        with pytest.raises(ValueError):
            trainer.sft_step([bad])


class TestRun:
    def test_deterministic_given_seed(self, forge):
        root, recs = forge

        def run():
            model = small_model(recs, seed=5)
            trainer = Trainer(model, TrainConfig(epochs=1, batch_size=4, seed=9), root)
            return [r.loss for r in trainer.run(recs[:8])]

        a, b = run(), run()
        for x, y in zip(a, b):
            assert f"{x:.12f}" == f"{y:.12f}"

    def test_zero_epochs_no_steps(self, forge):
        root, recs = forge
        trainer = Trainer(small_model(recs), TrainConfig(epochs=0, seed=0), root)
        assert trainer.run(recs[:4]) == []

    def test_metrics_log_schema(self, forge, tmp_path):
        root, recs = forge
        model = small_model(recs)
        out = str(tmp_path / "run")
        reports = train(model, recs[:4], root, TrainConfig(epochs=1, batch_size=4, seed=0), out)
        assert os.path.exists(os.path.join(out, "checkpoint.itck"))
        with open(os.path.join(out, "metrics.csv")) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "epoch", "loss", "grad_norm", "frozen_ok"]
        assert len(rows) == 1 + len(reports)
        assert rows[1][4] == "1"


class TestParamAccounting:
    def test_analytic_matches_actual_small(self, forge):
        _, recs = forge
        model = small_model(recs)
        trainable, frozen = analytic_param_counts(SMALL, len(model.vocab))
        actual_trainable, actual_frozen, _ = model.param_budget()
        assert actual_trainable == trainable
        assert actual_frozen == frozen

    def test_analytic_matches_actual_default(self, forge):
        _, recs = forge
        model = QaModel(ModelConfig(), build_vocabulary(recs), seed=0)
        trainable, frozen = analytic_param_counts(ModelConfig(), len(model.vocab))
        actual_trainable, actual_frozen, ratio = model.param_budget()
        assert actual_trainable == trainable
        assert actual_frozen == frozen
        assert 0.0 < ratio < 1.0

    def test_widened_config_below_one_percent(self, forge):
        _, recs = forge
        wide = ModelConfig(lm_blocks=12, lm_ffn_mult=16)
        vocab_size = 131072 + len(build_vocabulary(recs))
        trainable, frozen = analytic_param_counts(wide, vocab_size)
        assert frozen >= 100 * trainable
        assert trainable / (trainable + frozen) < 0.01
