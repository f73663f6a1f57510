"""Distillation objective family: task loss, soft labels, intra/inter
feature-relationship terms, and the combined objective with decayed balance
weight and KD-gradient clipping.

Teacher-side quantities are always detached; gradients only ever reach the
student. The inter-relationship term treats singular vectors as constants
under differentiation (no SVD backward), so its graph is built from a
precomputed "prepass" of bases and bandwidths.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, jacobi_svd


@dataclass
class KDConfig:
    lambda0: float = 0.4
    decay_factor: float = 0.5
    decay_interval: int = 60
    kd_grad_clip: float = 1.0
    svd_rank: int = 4
    temperature: float = 1.0
    use_soft: bool = False  # intra over the logits tap already covers soft labels
    use_intra: bool = True
    use_inter: bool = True


def default_decay_interval(total_epochs: int) -> int:
    return max(1, math.ceil(0.3 * total_epochs))


def lambda_at(config: KDConfig, epoch: int) -> float:
    return config.lambda0 * config.decay_factor ** (epoch // config.decay_interval)


@dataclass
class LossReport:
    task: float
    kd_soft: float
    kd_intra: float
    kd_inter: float
    total: float
    lambda_used: float


# -- soft labels ----------------------------------------------------------


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def soft_label_loss(teacher_logits, student_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Mean cross-entropy from teacher soft labels to student softmax.

    Teacher is detached; at teacher==student the value equals the mean
    teacher softmax entropy and the student gradient is zero.
    """
    t_data = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t_data.shape != student_logits.shape:
        raise T.DimensionError(f"logit shapes differ: {t_data.shape} vs {student_logits.shape}")
    target = _softmax(t_data / temperature)
    scaled = T.scalar_multiply(student_logits, 1.0 / temperature)
    return T.softmax_cross_entropy(scaled, Tensor(target.astype(student_logits.dtype)))


def soft_label_divergence(teacher_logits, student_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Soft-label loss shifted by the (constant) teacher entropy: a KL
    divergence that is exactly 0 at teacher==student, same gradient."""
    t_data = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    p = _softmax(t_data / temperature)
    ent = float(-(p * np.log(np.clip(p, 1e-30, None))).sum() / p.shape[0])
    return soft_label_loss(teacher_logits, student_logits, temperature) - ent


# -- intra-relationship (normalized pairwise distances) -------------------


def _pool_tap_np(data: np.ndarray) -> np.ndarray:
    return data.mean(axis=(2, 3)) if data.ndim == 4 else data


def _pool_tap(tap: Tensor) -> Tensor:
    return T.global_avg_pool(tap) if tap.data.ndim == 4 else tap


def _normalized_dist_np(pooled: np.ndarray) -> np.ndarray:
    diff = pooled[:, None, :] - pooled[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=2))
    nz = d[d > 0]
    return d / nz.mean() if nz.size else d


def intra_loss(teacher_taps, student_taps) -> Tensor:
    """Huber gap between the teacher's and student's normalized pairwise
    distance matrices over pooled tap vectors, averaged over taps."""
    if len(teacher_taps) != len(student_taps):
        raise T.DimensionError(f"tap counts differ: {len(teacher_taps)} vs {len(student_taps)}")
    n = student_taps[0].shape[0]
    if n < 2:
        raise ValueError(f"intra_loss needs a batch of at least 2 samples, got {n}")

    offdiag = (1.0 - np.eye(n)).astype(student_taps[0].dtype)
    total = None
    for t_tap, s_tap in zip(teacher_taps, student_taps):
        t_data = t_tap.data if isinstance(t_tap, Tensor) else np.asarray(t_tap)
        phi_t = _normalized_dist_np(_pool_tap_np(t_data).astype(np.float64)).astype(s_tap.dtype)

        pooled = _pool_tap(s_tap)
        if pooled.data.ndim != 2:
            pooled = T.flatten(pooled)
        d = T.pairwise_dist(pooled)
        nnz = int((d.data > 0).sum())
        if nnz:
            mu = T.scalar_multiply(T.tsum(d), 1.0 / nnz)
            phi_s = T.divide(d, mu)
        else:
            phi_s = d
        gap = T.huber(T.subtract(phi_s, Tensor(phi_t)), 1.0)
        tap_loss = T.scalar_multiply(T.tsum(T.multiply(gap, Tensor(offdiag))), 1.0 / (n * (n - 1)))
        total = tap_loss if total is None else total + tap_loss
    return T.scalar_multiply(total, 1.0 / len(student_taps))


# -- inter-relationship (singular-direction similarities) -----------------


def _matrix_view_np(data: np.ndarray) -> np.ndarray:
    """(N,C,H,W) -> (N, H*W, C); (N,C) -> (N,1,C)."""
    if data.ndim == 4:
        n, c, h, w = data.shape
        return data.reshape(n, c, h * w).transpose(0, 2, 1)
    return data[:, None, :]


def _matrix_view(tap: Tensor) -> Tensor:
    if tap.data.ndim == 4:
        n, c, h, w = tap.shape
        return T.transpose_last2(T.reshape(tap, (n, c, h * w)))
    n, c = tap.shape
    return T.reshape(tap, (n, 1, c))


def _canonical_sign(v: np.ndarray) -> np.ndarray:
    i = np.abs(v).argmax(axis=0)
    signs = np.sign(v[i, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return v * signs


def _topk_right_vectors(mats: np.ndarray, k: int) -> np.ndarray:
    """Per-sample top-k right singular vectors, canonical sign; (N,C,k).

    Works on the smaller Gram matrix of each sample: eigenvectors of A^T A
    are the right singular vectors; for wide inputs they are recovered from
    the left ones as A^T u / sigma. Columns with zero singular value are
    zeroed rather than filled with arbitrary null-space directions.
    """
    n, m, c = mats.shape
    if m <= c:
        gram = mats @ mats.transpose(0, 2, 1)  # (N, m, m), symmetric PSD
        _, s2, ut = T.jacobi_svd_batched(gram)
        u = ut.transpose(0, 2, 1)[:, :, :k]
        s = np.sqrt(np.clip(s2[:, :k], 0.0, None))
        v = mats.transpose(0, 2, 1) @ u  # columns are sigma * v
        good = s > 1e-12
        v = np.where(good[:, None, :], v / np.where(good, s, 1.0)[:, None, :], 0.0)
    else:
        gram = mats.transpose(0, 2, 1) @ mats  # (N, c, c)
        _, _, vt = T.jacobi_svd_batched(gram)
        v = vt.transpose(0, 2, 1)[:, :, :k]
    idx = np.abs(v).argmax(axis=1)
    picked = np.take_along_axis(v, idx[:, None, :], axis=1)[:, 0, :]
    signs = np.sign(picked)
    signs[signs == 0] = 1.0
    return v * signs[:, None, :]


def _align_signs(v_student: np.ndarray, v_teacher: np.ndarray) -> np.ndarray:
    """Flip student singular vectors to maximize dot product with teacher's
    (only possible when the channel dimensions agree)."""
    if v_student.shape != v_teacher.shape:
        return v_student
    dots = (v_student * v_teacher).sum(axis=1, keepdims=True)
    signs = np.where(dots >= 0, 1.0, -1.0)
    return v_student * signs


def _mean_projections_np(mats: np.ndarray, bases: np.ndarray) -> np.ndarray:
    return np.einsum("nmc,nck->nmk", mats, bases).mean(axis=1)


@dataclass
class InterPrepass:
    """Constants for one inter_loss evaluation: per consecutive tap pair the
    student bases, RBF bandwidth (from the teacher), the pair rank, and the
    teacher's averaged similarity matrix."""
    pairs: list


def inter_prepass(teacher_taps, student_taps, k: int) -> InterPrepass:
    if len(teacher_taps) < 2 or len(student_taps) < 2:
        raise ValueError("inter_loss needs at least 2 taps per network")
    if len(teacher_taps) != len(student_taps):
        raise T.DimensionError(f"tap counts differ: {len(teacher_taps)} vs {len(student_taps)}")
    if k < 1:
        raise ValueError(f"svd rank k must be >= 1, got {k}")

    t_mats = [_matrix_view_np(np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64))
              for t in teacher_taps]
    s_mats = [_matrix_view_np(np.asarray(s.data, dtype=np.float64)) for s in student_taps]

    def rank_for(m):
        kk = min(k, m.shape[1], m.shape[2])
        if kk < k:
            warnings.warn(f"svd rank truncated from {k} to {kk} for tap of shape {m.shape}")
        return kk

    layer_k = [min(rank_for(tm), rank_for(sm)) for tm, sm in zip(t_mats, s_mats)]

    # one SVD per tap; pair-rank truncation is a column slice
    t_vecs = [_topk_right_vectors(tm, lk) for tm, lk in zip(t_mats, layer_k)]
    s_vecs = [_topk_right_vectors(sm, lk) for sm, lk in zip(s_mats, layer_k)]

    pairs = []
    for j in range(len(t_mats) - 1):
        kp = min(layer_k[j], layer_k[j + 1])
        vt_a = t_vecs[j][:, :, :kp]
        vt_b = t_vecs[j + 1][:, :, :kp]
        vs_a = np.stack([_align_signs(v, w) for v, w in zip(s_vecs[j][:, :, :kp], vt_a)])
        vs_b = np.stack([_align_signs(v, w) for v, w in zip(s_vecs[j + 1][:, :, :kp], vt_b)])

        gt_a = _mean_projections_np(t_mats[j], vt_a)
        gt_b = _mean_projections_np(t_mats[j + 1], vt_b)
        dists = np.abs(gt_a[:, :, None] - gt_b[:, None, :])
        sigma = float(np.median(dists))
        if sigma < 1e-12:
            sigma = 1.0
        phi_t = np.exp(-(gt_a[:, :, None] - gt_b[:, None, :]) ** 2 / (2 * sigma * sigma)).mean(axis=0)
        pairs.append({"j": j, "k": kp, "vs_a": vs_a, "vs_b": vs_b, "sigma": sigma, "phi_t": phi_t})
    return InterPrepass(pairs)


def inter_loss_frozen(student_taps, pre: InterPrepass) -> Tensor:
    """Differentiable part of inter_loss: student projections against the
    frozen bases, RBF similarities, squared Frobenius gap to the teacher."""
    total = None
    for pair in pre.pairs:
        j, kp, sigma = pair["j"], pair["k"], pair["sigma"]
        n = student_taps[j].shape[0]
        ga = T.mean(T.batched_project(_matrix_view(student_taps[j]), pair["vs_a"]), axis=1)
        gb = T.mean(T.batched_project(_matrix_view(student_taps[j + 1]), pair["vs_b"]), axis=1)
        d = T.subtract(T.reshape(ga, (n, kp, 1)), T.reshape(gb, (n, 1, kp)))
        e = T.exp(T.scalar_multiply(T.multiply(d, d), -1.0 / (2 * sigma * sigma)))
        phi_s = T.mean(e, axis=0)
        gap = T.subtract(phi_s, Tensor(pair["phi_t"].astype(phi_s.dtype)))
        pair_loss = T.scalar_multiply(T.tsum(T.multiply(gap, gap)), 1.0 / (kp * kp))
        total = pair_loss if total is None else total + pair_loss
    return T.scalar_multiply(total, 1.0 / len(pre.pairs))


def inter_loss(teacher_taps, student_taps, k: int) -> Tensor:
    return inter_loss_frozen(student_taps, inter_prepass(teacher_taps, student_taps, k))


# -- combination and gradient handling ------------------------------------


def ii_kd_total(task: Tensor, intra, inter, config: KDConfig, epoch: int, soft=0.0):
    """Combine task and KD terms: total = task + lambda(epoch)*(intra+inter).

    Returns (total Tensor, LossReport). Disabled terms pass 0.0; the soft
    term participates only when enabled in the config.
    """
    lam = lambda_at(config, epoch)
    kd = None
    for term in (intra, inter, soft):
        if isinstance(term, Tensor):
            kd = term if kd is None else kd + term
    total = task if kd is None else task + T.scalar_multiply(kd, lam)
    report = LossReport(
        task=task.item(),
        kd_soft=soft.item() if isinstance(soft, Tensor) else float(soft),
        kd_intra=intra.item() if isinstance(intra, Tensor) else float(intra),
        kd_inter=inter.item() if isinstance(inter, Tensor) else float(inter),
        total=total.item(),
        lambda_used=lam,
    )
    return total, report


def clip_kd_gradients(model, kd_grad_clip: float):
    """Clip each parameter's current grad tensor to L2 norm <= kd_grad_clip.

    Call after backpropagating the (scaled) KD loss alone, before adding the
    task gradient.
    """
    if not np.isfinite(kd_grad_clip):
        return
    for p in model.params.values():
        if p.grad is None:
            continue
        norm = float(np.sqrt((p.grad.astype(np.float64) ** 2).sum()))
        if norm > kd_grad_clip:
            p.grad = (p.grad * (kd_grad_clip / norm)).astype(p.grad.dtype)
