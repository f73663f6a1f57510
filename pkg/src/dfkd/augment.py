"""Image augmentation operators and per-epoch policy application.

Operators act on numpy (C,H,W) float images with pixel values in [0,1].
A policy is a list of 30 (operator, probability, magnitude) clauses, two
slots per operator; applying it visits the clauses in shuffled order and
fires at most two of them per image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OPERATORS = (
    "shear_x",
    "shear_y",
    "translate_x",
    "translate_y",
    "rotate",
    "auto_contrast",
    "invert",
    "equalize",
    "solarize",
    "posterize",
    "contrast",
    "color",
    "brightness",
    "sharpness",
    "cutout",
)

PROB_GRID = tuple(round(i / 10, 1) for i in range(11))
MAG_GRID = tuple(range(10))
MAX_APPLIED_OPS = 2

# operators whose parameter direction is mirrored at random per image
_SIGNED_OPS = frozenset({"shear_x", "shear_y", "translate_x", "translate_y", "rotate"})
_NO_PARAM_OPS = frozenset({"auto_contrast", "invert", "equalize"})


@dataclass(frozen=True)
class PolicyEntry:
    op: str
    probability: float
    magnitude: int

    def __post_init__(self):
        if self.op not in OPERATORS:
            raise ValueError(f"unknown operator {self.op!r}")
        if round(self.probability, 1) not in PROB_GRID or abs(self.probability - round(self.probability, 1)) > 1e-9:
            raise ValueError(f"probability {self.probability} not on the 0.0..1.0 grid")
        if self.magnitude not in MAG_GRID:
            raise ValueError(f"magnitude {self.magnitude} not in 0..9")


def validate_policy(entries) -> list[PolicyEntry]:
    """Check the 30-entry, two-slots-per-operator invariant."""
    entries = list(entries)
    if len(entries) != 2 * len(OPERATORS):
        raise ValueError(f"policy must have {2 * len(OPERATORS)} entries, got {len(entries)}")
    counts = {}
    for e in entries:
        counts[e.op] = counts.get(e.op, 0) + 1
    if counts != {op: 2 for op in OPERATORS}:
        raise ValueError(f"each operator must appear exactly twice, got {counts}")
    return entries


def initial_policy() -> list[PolicyEntry]:
    """All-null starting policy: probability 0, magnitude 0, two slots per op."""
    return [PolicyEntry(op, 0.0, 0) for op in OPERATORS for _ in range(2)]


def magnitude_to_param(op: str, magnitude: int):
    """Linear map from the 0..9 magnitude grid to each operator's parameter."""
    if op not in OPERATORS:
        raise ValueError(f"unknown operator {op!r}")
    if magnitude not in MAG_GRID:
        raise ValueError(f"magnitude {magnitude} not in 0..9")
    m = magnitude / 9.0
    if op == "rotate":
        return 30.0 * m  # degrees
    if op in ("shear_x", "shear_y"):
        return 0.3 * m
    if op in ("translate_x", "translate_y"):
        return 10.0 * m  # pixels on a 32x32 canvas
    if op == "solarize":
        return 1.0 - m  # threshold
    if op == "posterize":
        return int(round(8 - 4 * m))  # bits kept
    if op in ("contrast", "color", "brightness", "sharpness"):
        return 0.1 + 1.8 * m  # blend factor, 1.0 = identity at mid-grid
    if op == "cutout":
        return int(round(16 * m))  # square side in pixels
    return None  # auto_contrast, invert, equalize take no parameter


# -- geometric kernels (nearest neighbor, zero fill) ----------------------


def _affine_nearest(img, mat):
    """Inverse-map pixels through a 2x2 matrix about the image center."""
    c, h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy, dx = ys - cy, xs - cx
    sy = mat[0][0] * dy + mat[0][1] * dx + cy
    sx = mat[1][0] * dy + mat[1][1] * dx + cx
    syi = np.rint(sy).astype(int)
    sxi = np.rint(sx).astype(int)
    valid = (syi >= 0) & (syi < h) & (sxi >= 0) & (sxi < w)
    out = np.zeros_like(img)
    out[:, valid] = img[:, syi[valid], sxi[valid]]
    return out


def _translate(img, dy, dx):
    out = np.zeros_like(img)
    c, h, w = img.shape
    if abs(dy) >= h or abs(dx) >= w:
        return out  # shifted fully out of frame
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    ys_src = slice(max(-dy, 0), min(h - dy, h))
    xs_src = slice(max(-dx, 0), min(w - dx, w))
    out[:, ys, xs] = img[:, ys_src, xs_src]
    return out


# -- photometric kernels ---------------------------------------------------


def _blend(degenerate, img, factor):
    return degenerate + factor * (img - degenerate)


def _grayscale(img):
    lum = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2] if img.shape[0] == 3 else img.mean(axis=0)
    return np.broadcast_to(lum, img.shape)


def _equalize_channel(ch):
    q = np.clip((ch * 255).astype(int), 0, 255)
    hist = np.bincount(q.reshape(-1), minlength=256)
    nonzero = hist[hist > 0]
    if nonzero.size <= 1:
        return ch
    step = (hist.sum() - nonzero[-1]) // 255
    if step == 0:
        return ch
    lut = (np.cumsum(hist) - hist + step // 2) // step
    lut = np.clip(lut, 0, 255)
    return lut[q] / 255.0


def apply_operator(img: np.ndarray, op: str, magnitude: int, rng: np.random.Generator) -> np.ndarray:
    """Apply one operator at the given magnitude; result stays (C,H,W) in [0,1]."""
    param = magnitude_to_param(op, magnitude)
    if op in _SIGNED_OPS:
        sign = 1.0 if rng.random() < 0.5 else -1.0
        param = sign * param

    if op == "rotate":
        a = np.deg2rad(param)
        out = _affine_nearest(img, [[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    elif op == "shear_x":
        out = _affine_nearest(img, [[1.0, 0.0], [param, 1.0]])
    elif op == "shear_y":
        out = _affine_nearest(img, [[1.0, param], [0.0, 1.0]])
    elif op == "translate_x":
        out = _translate(img, 0, int(round(param)))
    elif op == "translate_y":
        out = _translate(img, int(round(param)), 0)
    elif op == "auto_contrast":
        out = np.empty_like(img)
        for c in range(img.shape[0]):
            lo, hi = img[c].min(), img[c].max()
            out[c] = (img[c] - lo) / (hi - lo) if hi > lo else img[c]
    elif op == "invert":
        out = 1.0 - img
    elif op == "equalize":
        out = np.stack([_equalize_channel(img[c]) for c in range(img.shape[0])])
    elif op == "solarize":
        out = np.where(img >= param, 1.0 - img, img)
    elif op == "posterize":
        shift = 8 - param
        q = np.clip((img * 255).astype(int), 0, 255)
        out = ((q >> shift) << shift) / 255.0
    elif op == "contrast":
        out = _blend(_grayscale(img).mean(), img, param)
    elif op == "color":
        out = _blend(_grayscale(img), img, param)
    elif op == "brightness":
        out = _blend(0.0, img, param)
    elif op == "sharpness":
        kernel = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=img.dtype) / 13.0
        smooth = np.empty_like(img)
        pad = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
        for i in range(3):
            for j in range(3):
                part = pad[:, i : i + img.shape[1], j : j + img.shape[2]] * kernel[i, j]
                smooth = smooth + part if (i, j) != (0, 0) else part
        out = _blend(smooth, img, param)
    elif op == "cutout":
        out = img.copy()
        if param > 0:
            c, h, w = img.shape
            cy = int(rng.integers(0, h))
            cx = int(rng.integers(0, w))
            half = param // 2
            out[:, max(cy - half, 0) : cy - half + param, max(cx - half, 0) : cx - half + param] = 0.0
    else:
        raise ValueError(f"unknown operator {op!r}")
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def apply_policy(img: np.ndarray, policy, rng: np.random.Generator) -> np.ndarray:
    """Apply a shuffled policy to one image; at most two operators fire."""
    order = rng.permutation(len(policy))
    applied = 0
    out = img
    for idx in order:
        if applied >= MAX_APPLIED_OPS:
            break
        entry = policy[idx]
        if entry.probability > 0 and rng.random() < entry.probability:
            out = apply_operator(out, entry.op, entry.magnitude, rng)
            applied += 1
    return np.clip(out, 0.0, 1.0)


def baseline_augment(img: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Always-on baseline: random crop with zero padding + horizontal flip."""
    c, h, w = img.shape
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)))
    dy = int(rng.integers(0, 2 * pad + 1))
    dx = int(rng.integers(0, 2 * pad + 1))
    out = padded[:, dy : dy + h, dx : dx + w]
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, policy, rng: np.random.Generator,
                  baseline: bool = True) -> np.ndarray:
    """Augment a (N,C,H,W) batch, one derived rng stream per image."""
    out = np.empty_like(images)
    for i in range(images.shape[0]):
        img_rng = np.random.default_rng(rng.integers(0, 2**63))
        img = images[i]
        if baseline:
            img = baseline_augment(img, img_rng)
        if policy is not None:
            img = apply_policy(img, policy, img_rng)
        out[i] = img
    return out
