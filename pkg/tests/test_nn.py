"""Architecture shapes, optimizer math, rate rules and checkpoint round-trips."""

import numpy as np
import pytest

from srea import tensor as T
from srea.nn import (
    Adam,
    ArchitectureError,
    batch_size_for,
    build_model,
    load_checkpoint,
    lr_at,
    save_checkpoint,
)


def _forward_all(model, batch=4, training=False):
    gen = np.random.default_rng(0)
    x = T.Tensor(gen.normal(size=(batch, model.input_channels, model.seq_len)).astype(np.float32))
    dgen = T.Rng(0).stream("dropout")
    emb = model.encode(x, training, dgen)
    dec = model.decode(emb, training, dgen)
    logits = model.classify(emb, training, dgen)
    return x, emb, dec, logits


class TestBuildModel:
    def test_chp_shapes(self):
        model = build_model(3, 36, 5, rng=T.Rng(0))
        _, emb, dec, logits = _forward_all(model)
        assert emb.shape == (4, 32, 1)
        assert logits.shape == (4, 5)
        assert dec.shape == (4, 3, 36)

    def test_autoencoder_shape_symmetry(self):
        model = build_model(1, 128, 3, rng=T.Rng(0))
        x, emb, dec, _ = _forward_all(model)
        assert dec.shape == x.shape

    def test_too_short_raises_with_padding_hint(self):
        with pytest.raises(ArchitectureError, match="pad"):
            build_model(1, 15, 2)

    def test_too_few_classes(self):
        with pytest.raises(ArchitectureError):
            build_model(1, 32, 1)

    def test_encoder_channel_progression(self):
        model = build_model(1, 128, 3, rng=T.Rng(0))
        gen = np.random.default_rng(1)
        h = T.Tensor(gen.normal(size=(2, 128, 1)).astype(np.float32))  # channels-last
        expected = [(2, 64, 128), (2, 32, 128), (2, 16, 256), (2, 8, 256)]
        for block, shape in zip(model.encoder, expected):
            h = block.forward(h, training=False, dropout_gen=None)
            assert h.shape == shape

    @pytest.mark.parametrize("channels,seq_len", [(1, 16), (2, 17), (3, 36), (1, 50), (4, 100), (1, 127)])
    def test_shape_round_trip(self, channels, seq_len):
        model = build_model(channels, seq_len, 2, rng=T.Rng(1))
        x, _, dec, _ = _forward_all(model, batch=2)
        assert dec.shape == x.shape

    def test_embedding_length_independent(self):
        for seq_len in (16, 36, 128):
            model = build_model(1, seq_len, 3, rng=T.Rng(0))
            _, emb, _, _ = _forward_all(model, batch=2)
            assert emb.shape == (2, 32, 1)

    def test_same_seed_same_init(self):
        a = build_model(1, 32, 3, rng=T.Rng(5))
        b = build_model(1, 32, 3, rng=T.Rng(5))
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert (pa.data == pb.data).all()


class TestAdam:
    def test_zero_grad_zero_decay_unchanged(self):
        p = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam([p], weight_decay=0.0)
        p.grad = np.zeros(2)
        opt.step(lr=0.01)
        np.testing.assert_allclose(p.data, [1.0, -2.0])

    def test_scalar_two_step_trace(self):
        # hand-computed Adam with constant gradient 2.0, lr 0.1, no decay
        beta1, beta2, eps, lr, g = 0.9, 0.999, 1e-6, 0.1, 2.0
        p = T.Tensor(np.array(1.0), requires_grad=True)
        opt = Adam([p], beta1=beta1, beta2=beta2, eps=eps, weight_decay=0.0)
        m = v = 0.0
        theta = 1.0
        for t in (1, 2):
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            theta -= lr * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)
            p.grad = np.array(g)
            opt.step(lr=lr)
            np.testing.assert_allclose(float(p.data), theta, rtol=1e-12)

    def test_decoupled_decay_shrinks_by_formula(self):
        p = T.Tensor(np.array([4.0]), requires_grad=True)
        opt = Adam([p], weight_decay=1e-4)
        p.grad = np.zeros(1)
        opt.step(lr=0.5)
        np.testing.assert_allclose(p.data, [4.0 * (1 - 0.5 * 1e-4)], rtol=1e-12)

    def test_coupled_differs_from_decoupled(self):
        p1 = T.Tensor(np.array([2.0]), requires_grad=True)
        p2 = T.Tensor(np.array([2.0]), requires_grad=True)
        o1 = Adam([p1], weight_decay=1e-2, coupled=False)
        o2 = Adam([p2], weight_decay=1e-2, coupled=True)
        for o, p in ((o1, p1), (o2, p2)):
            p.grad = np.array([1.0])
            o.step(lr=0.1)
        assert p1.data[0] != p2.data[0]

    def test_step_reduces_convex_quadratic(self):
        for lr in (0.001, 0.01):
            p = T.Tensor(np.array([5.0]), requires_grad=True)
            opt = Adam([p], weight_decay=0.0)
            loss0 = (p.data[0] - 1.0) ** 2
            p.grad = np.array([2 * (p.data[0] - 1.0)])
            opt.step(lr=lr)
            assert (p.data[0] - 1.0) ** 2 < loss0


class TestRates:
    def test_lr_examples(self):
        assert lr_at(0) == 0.01
        assert lr_at(20) == 0.005
        assert lr_at(99) == 0.000625

    def test_lr_non_increasing_positive(self):
        values = [lr_at(t) for t in range(200)]
        assert all(v > 0 for v in values)
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_batch_size_examples(self):
        assert batch_size_for(930) == 93
        assert batch_size_for(10000) == 128
        assert batch_size_for(5) == 1

    def test_batch_size_invalid(self):
        with pytest.raises(ValueError):
            batch_size_for(0)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = build_model(2, 36, 4, rng=T.Rng(3))
        # move running stats off their init values
        _forward_all(model, training=True)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        clone = load_checkpoint(path)
        for (na, pa), (nb, pb) in zip(model.named_parameters().items(),
                                      clone.named_parameters().items()):
            assert na == nb
            assert pa.data.tobytes() == pb.data.tobytes()
        for (na, sa), (nb, sb) in zip(model.bn_states().items(), clone.bn_states().items()):
            assert na == nb
            assert sa.running_mean.tobytes() == sb.running_mean.tobytes()
            assert sa.running_var.tobytes() == sb.running_var.tobytes()

    def test_save_load_save_identical_bytes(self, tmp_path):
        model = build_model(1, 16, 2, rng=T.Rng(4))
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(model, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_magic_bytes(self, tmp_path):
        model = build_model(1, 16, 2, rng=T.Rng(4))
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        assert path.read_bytes()[:4] == b"SREA"

    def test_loaded_model_same_predictions(self, tmp_path):
        model = build_model(1, 32, 3, rng=T.Rng(5))
        _forward_all(model, training=True)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        clone = load_checkpoint(path)
        gen = np.random.default_rng(9)
        x = T.Tensor(gen.normal(size=(3, 1, 32)).astype(np.float32))
        a = model.classify(model.encode(x, False), False)
        b = clone.classify(clone.encode(x, False), False)
        assert (a.data == b.data).all()
