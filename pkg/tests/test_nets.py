import numpy as np
import pytest

import dfkd.tensor as T
from dfkd.nets import ArchDescriptor, IncompatibleModelError, Model, init_from, sgd_step
from dfkd.quant import QuantConfig
from dfkd.tensor import Tensor


CNN_DESC = ArchDescriptor(kind="tapcnn", num_classes=4, channels=(4, 8, 8), image_size=16)


@pytest.fixture
def batch(rng):
    return Tensor(rng.random((2, 3, 16, 16)).astype(np.float32))


class TestDescriptor:
    def test_roundtrip_json(self):
        assert ArchDescriptor.from_json(CNN_DESC.to_json()) == CNN_DESC

    def test_bad_kind(self):
        with pytest.raises(ValueError):
            ArchDescriptor(kind="resnet", num_classes=2)

    def test_pooling_divisibility(self):
        with pytest.raises(ValueError):
            ArchDescriptor(kind="tapcnn", num_classes=2, channels=(4, 4, 4), image_size=10)


class TestForwardWithTaps:
    def test_tapcnn_tap_shapes(self, batch):
        model = Model(CNN_DESC, seed=0)
        logits, taps = model.forward_with_taps(batch)
        assert logits.shape == (2, 4)
        assert len(taps) == 4  # 3 block taps + logits
        assert taps[0].shape == (2, 4, 16, 16)
        assert taps[1].shape == (2, 8, 8, 8)
        assert taps[2].shape == (2, 8, 4, 4)
        assert taps[-1] is logits

    def test_mlp_zero_hidden_taps_logits_only(self, rng):
        desc = ArchDescriptor(kind="mlp", num_classes=3, in_features=5)
        model = Model(desc, seed=0)
        logits, taps = model.forward_with_taps(Tensor(rng.random((4, 5))))
        assert taps == [logits]

    def test_shape_mismatch(self, rng):
        model = Model(CNN_DESC, seed=0)
        with pytest.raises(T.DimensionError):
            model.forward_with_taps(Tensor(rng.random((2, 3, 8, 8))))

    def test_quantized_weights_on_grid(self, batch):
        fp = Model(CNN_DESC, seed=1)
        q = Model(CNN_DESC, quant=QuantConfig(n_bits=4), seed=1)
        q.load_state_arrays(fp.state_arrays())
        fp_logits, _ = fp.eval().forward_with_taps(batch)
        q_logits, _ = q.eval().forward_with_taps(batch)
        assert not np.allclose(fp_logits.data, q_logits.data)
        # every quantized layer's effective weight lies on the DoReFa grid
        from dfkd.quant import quantize_weights
        for i in (1, 2):  # first (0) and last (fc) bypass quantization
            w = q.params[f"conv{i}.weight"]
            eff = quantize_weights(w, 4).data
            grid = (eff + 1) / 2 * 15
            np.testing.assert_allclose(grid, np.round(grid), atol=1e-5)

    def test_first_last_layer_effective_weights_unquantized(self):
        q = Model(CNN_DESC, quant=QuantConfig(n_bits=2), seed=3)
        np.testing.assert_array_equal(q._weight("conv0.weight", 0).data, q.params["conv0.weight"].data)
        np.testing.assert_array_equal(q._weight("fc.weight", q._n_layers - 1).data, q.params["fc.weight"].data)

    def test_same_descriptor_same_param_names_and_shapes(self):
        fp = Model(CNN_DESC, seed=0)
        q = Model(CNN_DESC, quant=QuantConfig(n_bits=2), seed=0)
        assert {k: v.shape for k, v in fp.params.items()} == {k: v.shape for k, v in q.params.items()}

    def test_eval_mode_deterministic(self, batch):
        model = Model(CNN_DESC, seed=2).eval()
        a, _ = model.forward_with_taps(batch)
        b, _ = model.forward_with_taps(batch)
        np.testing.assert_array_equal(a.data, b.data)


class TestInitFrom:
    def test_copy_gives_bit_identical_logits(self, batch):
        src = Model(CNN_DESC, seed=4)
        dst = Model(CNN_DESC, seed=5)
        init_from(dst, CNN_DESC, src.state_arrays())
        a, _ = src.eval().forward_with_taps(batch)
        b, _ = dst.eval().forward_with_taps(batch)
        np.testing.assert_array_equal(a.data, b.data)

    def test_copy_into_quantized_perturbs_logits(self, batch):
        src = Model(CNN_DESC, seed=4)
        dst = Model(CNN_DESC, quant=QuantConfig(n_bits=4), seed=5)
        init_from(dst, CNN_DESC, src.state_arrays())
        a, _ = src.eval().forward_with_taps(batch)
        b, _ = dst.eval().forward_with_taps(batch)
        assert not np.array_equal(a.data, b.data)

    def test_mismatched_descriptor_lists_fields(self):
        other = ArchDescriptor(kind="tapcnn", num_classes=4, channels=(4, 8, 16), image_size=16)
        dst = Model(CNN_DESC, seed=0)
        with pytest.raises(IncompatibleModelError, match="channels"):
            init_from(dst, other, Model(other, seed=0).state_arrays())

    def test_optimizer_state_reset(self, batch):
        src = Model(CNN_DESC, seed=4)
        dst = Model(CNN_DESC, seed=5)
        dst._momentum["conv0.weight"] = np.ones_like(dst.params["conv0.weight"].data)
        init_from(dst, CNN_DESC, src.state_arrays())
        assert dst._momentum == {}


class TestSgdStep:
    def _toy_model(self):
        desc = ArchDescriptor(kind="mlp", num_classes=2, in_features=3)
        return Model(desc, seed=0)

    def test_plain_sgd(self):
        m = self._toy_model()
        w0 = m.params["out.weight"].data.copy()
        g = np.ones_like(w0)
        for p in m.params.values():
            p.grad = np.ones_like(p.data)
        sgd_step(m, lr=0.1, momentum=0.0, weight_decay=0.0)
        np.testing.assert_allclose(m.params["out.weight"].data, w0 - 0.1 * g, rtol=1e-6)

    def test_nesterov_matches_recurrence(self):
        # closed-form recurrence for constant gradient, evaluated independently
        m = self._toy_model()
        w0 = m.params["out.weight"].data.copy()
        mu, lr = 0.9, 0.05
        g = np.full_like(w0, 0.3)
        w_ref, v_ref = w0.astype(np.float64), np.zeros_like(w0, dtype=np.float64)
        for _ in range(2):
            for p in m.params.values():
                p.grad = np.full_like(p.data, 0.3)
            sgd_step(m, lr=lr, momentum=mu, weight_decay=0.0)
            v_ref = mu * v_ref + g
            w_ref = w_ref - lr * (g + mu * v_ref)
        np.testing.assert_allclose(m.params["out.weight"].data, w_ref, rtol=1e-5)

    def test_decay_only_step(self):
        m = self._toy_model()
        w0 = m.params["out.weight"].data.copy()
        for p in m.params.values():
            p.grad = np.zeros_like(p.data)
        sgd_step(m, lr=0.1, momentum=0.0, weight_decay=5e-4)
        np.testing.assert_allclose(m.params["out.weight"].data, w0 * (1 - 0.1 * 5e-4), rtol=1e-6)

    def test_missing_grad_raises(self):
        m = self._toy_model()
        with pytest.raises(T.UsageError, match="no gradient"):
            sgd_step(m, lr=0.1)


def test_training_smoke(rng):
    # a tiny tapcnn fits a 2-class toy batch
    desc = ArchDescriptor(kind="tapcnn", num_classes=2, channels=(4, 8), image_size=8)
    model = Model(desc, seed=0)
    x = Tensor(rng.random((8, 3, 8, 8)).astype(np.float32))
    y = np.eye(2, dtype=np.float32)[np.arange(8) % 2]
    first = None
    for _ in range(30):
        model.zero_grad()
        logits, _ = model.forward_with_taps(x)
        loss = T.softmax_cross_entropy(logits, Tensor(y))
        if first is None:
            first = loss.item()
        loss.backward()
        sgd_step(model, lr=0.05, momentum=0.9)
    assert loss.item() < first * 0.5
