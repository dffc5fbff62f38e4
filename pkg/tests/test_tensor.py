"""Gradient and serialization checks for the autodiff substrate."""

import numpy as np
import pytest

from tsqa import tensor as T
from tsqa.tensor import ShapeError, Tensor


def fd_check(fn, tensors, rel_tol=1e-6, h=1e-6):
    """Central finite differences against reverse-mode for every input."""
    loss = fn(*tensors)
    grads = T.backward_gradients(loss, {t.name: t for t in tensors})
    for t in tensors:
        analytic = grads[t.name]
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = fn(*tensors).data.item()
            flat[i] = orig - h
            lo = fn(*tensors).data.item()
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2 * h)
        denom = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
        rel = np.abs(analytic - numeric).max() / denom
        assert rel < rel_tol, f"{t.name}: rel err {rel:.3e}"


def leaf(rng, shape, name):
    return Tensor(rng.standard_normal(shape), requires_grad=True, name=name)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestPrimitiveGradients:
    def test_add(self, rng):
        a, b = leaf(rng, (3, 4), "a"), leaf(rng, (3, 4), "b")
        fd_check(lambda a, b: T.sum_(a + b), [a, b])

    def test_add_broadcast(self, rng):
        a, b = leaf(rng, (3, 4), "a"), leaf(rng, (4,), "b")
        fd_check(lambda a, b: T.sum_((a + b) * (a + b)), [a, b])

    def test_sub(self, rng):
        a, b = leaf(rng, (2, 5), "a"), leaf(rng, (2, 5), "b")
        fd_check(lambda a, b: T.sum_((a - b) * (a - b)), [a, b])

    def test_mul(self, rng):
        a, b = leaf(rng, (4, 3), "a"), leaf(rng, (4, 3), "b")
        fd_check(lambda a, b: T.sum_(a * b), [a, b])

    def test_mul_scalar(self, rng):
        a = leaf(rng, (4, 3), "a")
        fd_check(lambda a: T.sum_(a * 2.5), [a])

    def test_matmul(self, rng):
        a, b = leaf(rng, (3, 4), "a"), leaf(rng, (4, 2), "b")
        fd_check(lambda a, b: T.sum_(T.matmul(a, b)), [a, b])

    def test_matmul_batched(self, rng):
        a, b = leaf(rng, (2, 3, 4), "a"), leaf(rng, (2, 4, 5), "b")
        fd_check(lambda a, b: T.sum_(T.matmul(a, b) * T.matmul(a, b)), [a, b])

    def test_transpose(self, rng):
        a = leaf(rng, (2, 3, 4), "a")
        fd_check(lambda a: T.sum_(T.transpose(a, (2, 0, 1)) * T.transpose(a, (2, 0, 1))), [a])

    def test_reshape(self, rng):
        a = leaf(rng, (3, 4), "a")
        fd_check(lambda a: T.sum_(T.reshape(a, (2, 6)) * T.reshape(a, (2, 6))), [a])

    def test_slice(self, rng):
        a = leaf(rng, (5, 4), "a")
        fd_check(lambda a: T.sum_(T.tensor_slice(a, (slice(1, 4), slice(0, 2)))), [a])

    def test_concat(self, rng):
        a, b = leaf(rng, (2, 3), "a"), leaf(rng, (4, 3), "b")
        fd_check(lambda a, b: T.sum_(T.concat([a, b], axis=0) * T.concat([a, b], axis=0)), [a, b])

    def test_mean(self, rng):
        a = leaf(rng, (3, 5), "a")
        fd_check(lambda a: T.sum_(T.mean(a, axis=1) * T.mean(a, axis=1)), [a])

    def test_sum(self, rng):
        a = leaf(rng, (3, 5), "a")
        fd_check(lambda a: T.sum_(T.sum_(a, axis=0) * T.sum_(a, axis=0)), [a])

    def test_softmax(self, rng):
        a = leaf(rng, (3, 6), "a")
        w = Tensor(rng.standard_normal((3, 6)))
        fd_check(lambda a: T.sum_(T.softmax(a, axis=-1) * w), [a])

    def test_relu(self, rng):
        a = leaf(rng, (4, 4), "a")
        a.data += np.where(np.abs(a.data) < 1e-3, 0.1, 0.0)  # keep away from the kink
        fd_check(lambda a: T.sum_(T.relu(a) * T.relu(a)), [a])

    def test_gelu(self, rng):
        a = leaf(rng, (4, 4), "a")
        fd_check(lambda a: T.sum_(T.gelu(a)), [a])

    def test_layer_norm(self, rng):
        a = leaf(rng, (3, 8), "a")
        g = leaf(rng, (8,), "g")
        b = leaf(rng, (8,), "b")
        w = Tensor(rng.standard_normal((3, 8)))
        fd_check(lambda a, g, b: T.sum_(T.layer_norm(a, g, b) * w), [a, g, b])

    def test_embedding_lookup(self, rng):
        table = leaf(rng, (7, 4), "table")
        ids = np.array([1, 3, 3, 0])
        fd_check(lambda t: T.sum_(T.embedding_lookup(t, ids) * T.embedding_lookup(t, ids)),
                 [table])

    def test_cross_entropy(self, rng):
        logits = leaf(rng, (5, 9), "logits")
        targets = np.array([1, 4, 0, 8, 2])
        mask = np.array([True, True, False, True, True])
        fd_check(lambda l: T.cross_entropy(l, targets, mask), [logits])

    def test_composite_attention_like(self, rng):
        q = leaf(rng, (4, 6), "q")
        k = leaf(rng, (5, 6), "k")
        v = leaf(rng, (5, 6), "v")

        def attn(q, k, v):
            scores = T.matmul(q, T.transpose(k, (1, 0))) * (1 / np.sqrt(6))
            return T.sum_(T.matmul(T.softmax(scores, axis=-1), v))

        fd_check(attn, [q, k, v])


class TestMechanics:
    def test_backward_accumulates_over_reuse(self, rng):
        a = leaf(rng, (3,), "a")
        loss = T.sum_(a + a)
        grads = T.backward_gradients(loss, {"a": a})
        np.testing.assert_allclose(grads["a"], 2 * np.ones(3))

    def test_backward_gradients_only_covers_trainables(self, rng):
        a = leaf(rng, (2, 2), "a")
        frozen = Tensor(rng.standard_normal((2, 2)), requires_grad=False, name="b")
        loss = T.sum_(a * frozen)
        grads = T.backward_gradients(loss, {"a": a, "b": frozen})
        assert "a" in grads and "b" not in grads

    def test_deep_chain_no_recursion_limit(self):
        x = Tensor(np.ones(1), requires_grad=True, name="x")
        y = x
        for _ in range(5000):
            y = y + 1.0
        grads = T.backward_gradients(T.sum_(y), {"x": x})
        np.testing.assert_allclose(grads["x"], [1.0])

    def test_matmul_shape_error(self):
        a = Tensor(np.ones((2, 3)))
        b = Tensor(np.ones((4, 2)))
        with pytest.raises(ShapeError):
            T.matmul(a, b)

    def test_concat_empty_error(self):
        with pytest.raises(ValueError):
            T.concat([], axis=0)

    def test_softmax_rows_stochastic(self, rng):
        a = Tensor(rng.standard_normal((6, 9)) * 10)
        out = T.softmax(a, axis=-1).data
        np.testing.assert_allclose(out.sum(axis=-1), np.ones(6), atol=1e-12)

    def test_uniform_init_range(self):
        rng = np.random.default_rng(3)
        t = T.uniform_init(rng, (50, 20), 400, name="w")
        assert np.abs(t.data).max() <= 1 / np.sqrt(400)
        assert t.requires_grad


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        params = {
            "psi.a": leaf(rng, (3, 4), "psi.a"),
            "lm.b": Tensor(rng.standard_normal((2,)), name="lm.b"),
            "enc.c": Tensor(rng.standard_normal((2, 2, 2)), name="enc.c"),
        }
        path = tmp_path / "w.itck"
        T.save_checkpoint(path, params)
        loaded = T.load_checkpoint(path)
        assert set(loaded) == set(params)
        for name, t in params.items():
            np.testing.assert_array_equal(loaded[name], t.data)

    def test_magic_enforced(self, tmp_path):
        path = tmp_path / "junk.itck"
        path.write_bytes(b"NOPE" + b"\0" * 16)
        with pytest.raises(ValueError):
            T.load_checkpoint(path)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "w.itck"
        T.save_checkpoint(path, {"x": Tensor(np.zeros((2, 3)), name="x")})
        raw = path.read_bytes()
        assert raw[:4] == b"ITCK"
        assert int.from_bytes(raw[4:8], "little") == 1  # version
        assert int.from_bytes(raw[8:12], "little") == 1  # parameter count
