import numpy as np
import pytest

import dfkd.tensor as T
from dfkd import kdloss
from dfkd.kdloss import (
    KDConfig,
    clip_kd_gradients,
    default_decay_interval,
    ii_kd_total,
    inter_loss,
    inter_loss_frozen,
    inter_prepass,
    intra_loss,
    lambda_at,
    soft_label_divergence,
    soft_label_loss,
)
from dfkd.nets import ArchDescriptor, Model
from dfkd.tensor import Tensor

from conftest import finite_diff


def _huber(x, delta=1.0):
    ax = np.abs(x)
    return np.where(ax <= delta, 0.5 * x * x, delta * (ax - 0.5 * delta))


class TestLambdaSchedule:
    def test_halves_at_interval_multiples(self):
        cfg = KDConfig(lambda0=0.4, decay_interval=30)
        assert lambda_at(cfg, 0) == pytest.approx(0.4)
        assert lambda_at(cfg, 29) == pytest.approx(0.4)
        assert lambda_at(cfg, 30) == pytest.approx(0.2)
        assert lambda_at(cfg, 60) == pytest.approx(0.1)

    def test_non_increasing(self):
        cfg = KDConfig(decay_interval=7)
        vals = [lambda_at(cfg, e) for e in range(50)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_default_interval_is_30_percent(self):
        assert default_decay_interval(200) == 60
        assert default_decay_interval(10) == 3


class TestSoftLabelLoss:
    def test_fixed_point(self, rng):
        logits = rng.standard_normal((4, 5))
        student = Tensor(logits.copy(), requires_grad=True, dtype=np.float64)
        loss = soft_label_loss(Tensor(logits), student)
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        assert loss.item() == pytest.approx(-(p * np.log(p)).sum() / 4, abs=1e-6)
        loss.backward()
        np.testing.assert_allclose(student.grad, 0, atol=1e-9)

    def test_matches_direct_evaluation(self):
        teacher = Tensor(np.zeros((1, 4)))
        student = Tensor(np.array([[10.0, 0.0, 0.0, 0.0]]))
        loss = soft_label_loss(teacher, student)
        sm = np.exp([10.0, 0, 0, 0]) / np.exp([10.0, 0, 0, 0]).sum()
        assert loss.item() == pytest.approx(-np.log(sm).sum() / 4, rel=1e-5)

    def test_high_temperature_limit(self, rng):
        t = Tensor(rng.standard_normal((2, 6)))
        s = Tensor(rng.standard_normal((2, 6)))
        assert soft_label_loss(t, s, temperature=100.0).item() == pytest.approx(np.log(6), abs=1e-2)

    def test_divergence_zero_at_equality(self, rng):
        logits = rng.standard_normal((3, 4))
        assert soft_label_divergence(Tensor(logits), Tensor(logits.copy())).item() == pytest.approx(0, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(T.DimensionError):
            soft_label_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


class TestIntraLoss:
    def test_zero_at_equality(self, rng):
        taps = [Tensor(rng.random((4, 3, 4, 4))), Tensor(rng.random((4, 6)))]
        copies = [Tensor(t.data.copy(), requires_grad=True) for t in taps]
        assert intra_loss(taps, copies).item() == pytest.approx(0, abs=1e-9)

    def test_scale_invariance(self, rng):
        taps = [Tensor(rng.random((5, 8)))]
        scaled = [Tensor(2.0 * taps[0].data)]
        assert intra_loss(taps, scaled).item() == pytest.approx(0, abs=1e-6)

    def test_matches_direct_computation(self, rng):
        t = rng.random((3, 2, 2, 2))
        s = rng.random((3, 2, 2, 2))
        out = intra_loss([Tensor(t, dtype=np.float64)], [Tensor(s, dtype=np.float64)])

        def norm_phi(x):
            p = x.mean(axis=(2, 3))
            d = np.sqrt(((p[:, None] - p[None, :]) ** 2).sum(-1))
            return d / d[d > 0].mean()

        diff = norm_phi(s) - norm_phi(t)
        mask = 1 - np.eye(3)
        expected = (_huber(diff) * mask).sum() / 6
        assert out.item() == pytest.approx(expected, rel=1e-6)

    def test_batch_of_one_rejected(self, rng):
        with pytest.raises(ValueError, match="at least 2"):
            intra_loss([Tensor(rng.random((1, 4)))], [Tensor(rng.random((1, 4)))])

    def test_no_teacher_gradient(self, rng):
        t = Tensor(rng.random((3, 4)), requires_grad=True, dtype=np.float64)
        s = Tensor(rng.random((3, 4)), requires_grad=True, dtype=np.float64)
        intra_loss([t], [s]).backward()
        assert t.grad is None
        assert s.grad is not None

    def test_grad_vs_finite_diff(self, rng):
        t_data = rng.random((3, 2, 2, 2))
        s0 = rng.random((3, 2, 2, 2))

        def f(x):
            return intra_loss([Tensor(t_data, dtype=np.float64)], [Tensor(x, dtype=np.float64)]).item()

        leaf = Tensor(s0.copy(), requires_grad=True, dtype=np.float64)
        intra_loss([Tensor(t_data, dtype=np.float64)], [leaf]).backward()
        numeric = finite_diff(f, s0)
        np.testing.assert_allclose(leaf.grad, numeric, rtol=1e-3, atol=1e-6)


class TestInterLoss:
    def test_zero_at_equality(self, rng):
        taps = [Tensor(rng.random((3, 4, 2, 2))), Tensor(rng.random((3, 6, 2, 2)))]
        copies = [Tensor(t.data.copy(), requires_grad=True) for t in taps]
        assert inter_loss(taps, copies, k=2).item() == pytest.approx(0, abs=1e-9)

    def test_rank_one_shared_directions(self, rng):
        # rank-1 maps built from the same right singular direction
        v = rng.standard_normal(5)
        v /= np.linalg.norm(v)
        u1 = rng.random((3, 4))
        u2 = rng.random((3, 4))
        mk = lambda u: np.einsum("nm,c->nmc", u, v).transpose(0, 2, 1).reshape(3, 5, 2, 2)
        taps_t = [Tensor(mk(u1)), Tensor(mk(u2))]
        taps_s = [Tensor(mk(u1)), Tensor(mk(u2))]
        assert inter_loss(taps_t, taps_s, k=1).item() == pytest.approx(0, abs=1e-9)

    def test_matches_reference_svd_computation(self, rng):
        t = [rng.random((2, 3, 2, 2)), rng.random((2, 4, 2, 2))]
        s = [rng.random((2, 3, 2, 2)), rng.random((2, 4, 2, 2))]
        out = inter_loss([Tensor(x, dtype=np.float64) for x in t],
                         [Tensor(x, dtype=np.float64) for x in s], k=2)

        def views(x):
            n, c, h, w = x.shape
            return x.reshape(n, c, h * w).transpose(0, 2, 1)

        def topk(mats, k):
            outv = []
            for m in mats:
                _, _, vt = np.linalg.svd(m, full_matrices=False)  # reference SVD
                v = vt[:k].T
                i = np.abs(v).argmax(axis=0)
                sgn = np.sign(v[i, np.arange(k)])
                sgn[sgn == 0] = 1
                outv.append(v * sgn)
            return np.stack(outv)

        def align(vs, vt):
            dots = (vs * vt).sum(axis=1, keepdims=True)
            return vs * np.where(dots >= 0, 1.0, -1.0)

        tm = [views(x) for x in t]
        sm = [views(x) for x in s]
        vta, vtb = topk(tm[0], 2), topk(tm[1], 2)
        vsa = np.stack([align(a, b) for a, b in zip(topk(sm[0], 2), vta)])
        vsb = np.stack([align(a, b) for a, b in zip(topk(sm[1], 2), vtb)])
        proj = lambda m, v: np.einsum("nmc,nck->nmk", m, v).mean(axis=1)
        gta, gtb = proj(tm[0], vta), proj(tm[1], vtb)
        gsa, gsb = proj(sm[0], vsa), proj(sm[1], vsb)
        sigma = np.median(np.abs(gta[:, :, None] - gtb[:, None, :]))
        rbf = lambda a, b: np.exp(-((a[:, :, None] - b[:, None, :]) ** 2) / (2 * sigma**2)).mean(axis=0)
        expected = ((rbf(gta, gtb) - rbf(gsa, gsb)) ** 2).mean()
        assert out.item() == pytest.approx(expected, rel=1e-5)

    def test_k_truncated_with_warning(self, rng):
        taps_t = [Tensor(rng.random((2, 2, 2, 2))), Tensor(rng.random((2, 2, 2, 2)))]
        taps_s = [Tensor(rng.random((2, 2, 2, 2))), Tensor(rng.random((2, 2, 2, 2)))]
        with pytest.warns(UserWarning, match="truncated"):
            inter_loss(taps_t, taps_s, k=5)

    def test_single_tap_rejected(self, rng):
        with pytest.raises(ValueError, match="at least 2 taps"):
            inter_loss([Tensor(rng.random((2, 3, 2, 2)))], [Tensor(rng.random((2, 3, 2, 2)))], k=1)

    def test_no_teacher_gradient(self, rng):
        t = [Tensor(rng.random((2, 3, 2, 2)), requires_grad=True, dtype=np.float64) for _ in range(2)]
        s = [Tensor(rng.random((2, 3, 2, 2)), requires_grad=True, dtype=np.float64) for _ in range(2)]
        inter_loss(t, s, k=2).backward()
        assert all(x.grad is None for x in t)
        assert all(x.grad is not None for x in s)

    def test_grad_vs_finite_diff_frozen_bases(self, rng):
        # the declared rule: singular vectors are constants under differentiation
        t = [Tensor(rng.random((2, 3, 2, 2)), dtype=np.float64) for _ in range(2)]
        s0 = [rng.random((2, 3, 2, 2)), rng.random((2, 3, 2, 2))]
        pre = inter_prepass(t, [Tensor(x, dtype=np.float64) for x in s0], k=2)

        leaves = [Tensor(x.copy(), requires_grad=True, dtype=np.float64) for x in s0]
        inter_loss_frozen(leaves, pre).backward()

        for which in range(2):
            def f(x):
                taps = [Tensor(x if i == which else s0[i], dtype=np.float64) for i in range(2)]
                return inter_loss_frozen(taps, pre).item()

            numeric = finite_diff(f, s0[which])
            np.testing.assert_allclose(leaves[which].grad, numeric, rtol=1e-3, atol=1e-7)


class TestIIKDTotal:
    def _scalar(self, v):
        return Tensor(np.asarray(v, dtype=np.float64))

    def test_epoch_zero(self):
        cfg = KDConfig(lambda0=0.4, decay_interval=30)
        total, rep = ii_kd_total(self._scalar(1.0), self._scalar(0.5), self._scalar(0.5), cfg, epoch=0)
        assert total.item() == pytest.approx(1.4)
        assert rep.lambda_used == pytest.approx(0.4)

    def test_after_one_decay(self):
        cfg = KDConfig(lambda0=0.4, decay_interval=30)
        total, rep = ii_kd_total(self._scalar(1.0), self._scalar(0.5), self._scalar(0.5), cfg, epoch=30)
        assert total.item() == pytest.approx(1.2)

    def test_vanishing_kd(self):
        cfg = KDConfig()
        total, rep = ii_kd_total(self._scalar(2.5), self._scalar(0.0), self._scalar(0.0), cfg, epoch=0)
        assert total.item() == pytest.approx(2.5)

    def test_report_consistency(self):
        cfg = KDConfig(lambda0=0.4, decay_interval=10)
        total, rep = ii_kd_total(self._scalar(1.0), self._scalar(0.3), self._scalar(0.2), cfg, epoch=25)
        assert rep.total == pytest.approx(rep.task + rep.lambda_used * (rep.kd_intra + rep.kd_inter), abs=1e-6)


class TestClipKDGradients:
    def _model(self):
        return Model(ArchDescriptor(kind="mlp", num_classes=2, in_features=3), seed=0)

    def test_under_threshold_unchanged(self):
        m = self._model()
        m.params["out.weight"].grad = np.full((3, 2), 0.1, dtype=np.float32)
        g0 = m.params["out.weight"].grad.copy()
        clip_kd_gradients(m, 1.0)
        np.testing.assert_array_equal(m.params["out.weight"].grad, g0)

    def test_rescales_to_clip_norm(self):
        m = self._model()
        m.params["out.weight"].grad = np.array([[3.0, 0], [4.0, 0], [0, 0]], dtype=np.float32)
        clip_kd_gradients(m, 1.0)
        np.testing.assert_allclose(m.params["out.weight"].grad, [[0.6, 0], [0.8, 0], [0, 0]], rtol=1e-6)

    def test_infinite_clip_is_noop(self):
        m = self._model()
        m.params["out.weight"].grad = np.full((3, 2), 100.0, dtype=np.float32)
        g0 = m.params["out.weight"].grad.copy()
        clip_kd_gradients(m, np.inf)
        np.testing.assert_array_equal(m.params["out.weight"].grad, g0)
