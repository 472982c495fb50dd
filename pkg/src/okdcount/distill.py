"""Distillation losses tying the student branch to the teacher.

Three families, each switchable and weighted independently:

* feature alignment on globally pooled per-block statistics (``fid``, with
  ``mse``/``cos`` ablation variants),
* cross-block relation alignment on pairwise position-similarity matrices
  (``dense`` over all block pairs or ``sparse`` over adjacent ones),
* response alignment on the density maps (structural similarity, with an
  ``mse`` ablation variant).

Student features enter through the 1x1 adapters; teacher tensors are
detached by default so distillation never steers the teacher.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

FEATURE_MODES = ("fid", "mse", "cos", "off")
RELATION_MODES = ("dense", "sparse", "off")
RESPONSE_MODES = ("ssim", "mse", "off")


@dataclass
class LossWeights:
    alpha1: float = 1.0  # feature term
    alpha2: float = 10.0  # relation term
    alpha3: float = 1000.0  # response term
    feature_mode: str = "fid"
    relation_mode: str = "dense"
    response_mode: str = "ssim"
    relation_pool: int = 8
    ssim_window: int = 8
    detach_teacher: bool = True

    def validate(self):
        if self.feature_mode not in FEATURE_MODES:
            raise ConfigError(f"feature_mode must be one of {FEATURE_MODES}, got {self.feature_mode!r}")
        if self.relation_mode not in RELATION_MODES:
            raise ConfigError(f"relation_mode must be one of {RELATION_MODES}, got {self.relation_mode!r}")
        if self.response_mode not in RESPONSE_MODES:
            raise ConfigError(f"response_mode must be one of {RESPONSE_MODES}, got {self.response_mode!r}")
        if self.relation_pool < 1 or self.ssim_window < 1:
            raise ConfigError("relation_pool and ssim_window must be >= 1")
        return self


def _check_pairing(student_feats, teacher_feats):
    if len(student_feats) != len(teacher_feats) or not teacher_feats:
        raise ShapeError(
            f"feature lists must pair up, got {len(student_feats)} student vs "
            f"{len(teacher_feats)} teacher"
        )
    for s, t in zip(student_feats, teacher_feats):
        if s.shape != t.shape:
            raise ShapeError(f"feature shapes must match after adaptation: {s.shape} vs {t.shape}")


def fid_loss(student_feats, teacher_feats) -> Tensor:
    """Squared distance between globally pooled block statistics.

    Per block: pool both features to 1x1, take the squared L2 distance,
    normalize by channel count; mean over the batch, sum over blocks.
    """
    _check_pairing(student_feats, teacher_feats)
    total = None
    for s, t in zip(student_feats, teacher_feats):
        b, c = s.shape[0], s.shape[1]
        d = T.adaptive_avg_pool(s, 1, 1) - T.adaptive_avg_pool(t, 1, 1)
        term = d.square().sum() * (1.0 / (c * b))
        total = term if total is None else total + term
    return total


def relation_matrix(x, pool: int = 8) -> Tensor:
    """Position-similarity matrix of one feature map.

    The map is pooled to ``pool x pool``, flattened to P^2 position vectors,
    and every pairwise inner product across positions is squashed through a
    sigmoid: output is (B, P^2, P^2) with entries in (0, 1).
    """
    if x.ndim != 4:
        raise ShapeError(f"relation_matrix expects a 4-d tensor, got shape {x.shape}")
    b, c = x.shape[0], x.shape[1]
    p = T.adaptive_avg_pool(x, pool, pool)
    flat = p.reshape(b, c, pool * pool)
    return T.sigmoid(T.bmm(flat.transpose2d_last(), flat))


def pair_relation(k_i, k_j) -> Tensor:
    """Cross-block relation: elementwise product of two position-similarity
    matrices, normalized by the position count."""
    if k_i.shape != k_j.shape:
        raise ShapeError(f"pair_relation: shape mismatch {k_i.shape} vs {k_j.shape}")
    return (k_i * k_j) * (1.0 / k_i.shape[-1])


def relation_pairs(n_blocks: int, mode: str):
    if mode == "dense":
        return [(i, j) for i in range(n_blocks) for j in range(i + 1, n_blocks)]
    if mode == "sparse":
        return [(i, i + 1) for i in range(n_blocks - 1)]
    raise ConfigError(f"relation mode must be 'dense' or 'sparse', got {mode!r}")


def frd_loss(student_feats, teacher_feats, mode: str = "dense", pool: int = 8) -> Tensor:
    """Squared distance between student and teacher cross-block relations,
    summed over block pairs and averaged over the batch."""
    _check_pairing(student_feats, teacher_feats)
    n = len(student_feats)
    if n < 2:
        raise ConfigError("relation distillation needs at least two feature blocks")
    pairs = relation_pairs(n, mode)
    ks = [relation_matrix(f, pool) for f in student_feats]
    kt = [relation_matrix(f, pool) for f in teacher_feats]
    batch = student_feats[0].shape[0]
    total = None
    for i, j in pairs:
        d = pair_relation(ks[i], ks[j]) - pair_relation(kt[i], kt[j])
        term = d.square().sum()
        total = term if total is None else total + term
    return total * (1.0 / batch)


def ssim(x, y, window: int = 8, dynamic_range: float | None = None) -> Tensor:
    """Mean structural similarity over all k x k windows (stride 1).

    Uses the standard stabilizers c1=(0.01 L)^2, c2=(0.03 L)^2; by default L
    is the max value across both inputs (floored at 1e-3), which keeps the
    op symmetric. Identical inputs score exactly 1.
    """
    if x.shape != y.shape:
        raise ShapeError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if x.ndim != 4:
        raise ShapeError(f"ssim expects 4-d tensors, got shape {x.shape}")
    if dynamic_range is None:
        dynamic_range = max(float(np.max(x.data)), float(np.max(y.data)), 1e-3)
    L = float(dynamic_range)
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    mx = T.window_mean(x, window)
    my = T.window_mean(y, window)
    mx2, my2, mxy = mx.square(), my.square(), mx * my
    vx = T.window_mean(x.square(), window) - mx2
    vy = T.window_mean(y.square(), window) - my2
    cxy = T.window_mean(x * y, window) - mxy
    num = (mxy * 2.0 + c1) * (cxy * 2.0 + c2)
    den = (mx2 + my2 + c1) * (vx + vy + c2)
    return (num / den).mean()


def rd_loss(teacher_map, student_map, window: int = 8, detach_teacher: bool = True) -> Tensor:
    """1 - SSIM between the density maps.

    The dynamic range comes from the (detached) teacher map only, so the
    loss stays differentiable with respect to everything on the student side.
    """
    t = teacher_map.detach() if detach_teacher else teacher_map
    L = max(float(np.max(t.data)), 1e-3)
    return 1.0 - ssim(t, student_map, window=window, dynamic_range=L)


# -- ablation variants ---------------------------------------------------------


def mse_feature_loss(student_feats, teacher_feats) -> Tensor:
    """Plain per-block MSE between adapted student and teacher features."""
    _check_pairing(student_feats, teacher_feats)
    total = None
    for s, t in zip(student_feats, teacher_feats):
        term = (s - t).square().mean()
        total = term if total is None else total + term
    return total


def cos_feature_loss(student_feats, teacher_feats) -> Tensor:
    """Per-block (1 - cosine) between per-pixel channel vectors, averaged
    over positions."""
    _check_pairing(student_feats, teacher_feats)
    total = None
    for s, t in zip(student_feats, teacher_feats):
        dot = T.channel_sum(s * t)
        ns = (T.channel_sum(s.square()) + 1e-24).sqrt()
        nt = (T.channel_sum(t.square()) + 1e-24).sqrt()
        cos = dot / (ns * nt + 1e-12)
        term = 1.0 - cos.mean()
        total = term if total is None else total + term
    return total


def mse_response_loss(teacher_map, student_map) -> Tensor:
    """Plain MSE between the two density maps."""
    if teacher_map.shape != student_map.shape:
        raise ShapeError(
            f"mse_response_loss: shape mismatch {teacher_map.shape} vs {student_map.shape}"
        )
    return (teacher_map - student_map).square().mean()


# -- combined objective ----------------------------------------------------------


def total_loss(gt_density, output, weights: LossWeights):
    """Full training objective.

    Both branches regress the target density (MSE); the three distillation
    terms are added with their weights. Returns the scalar loss tensor and a
    float breakdown dict.
    """
    w = weights.validate()
    s_map, t_map = output.student_density, output.teacher_density
    if s_map.shape != gt_density.shape or t_map.shape != gt_density.shape:
        raise ShapeError(
            f"density shapes disagree: student {s_map.shape}, teacher {t_map.shape}, "
            f"target {gt_density.shape}"
        )
    l_st = (s_map - gt_density).square().mean()
    l_tea = (t_map - gt_density).square().mean()
    total = l_st + l_tea

    t_feats = output.features.teacher
    if w.detach_teacher:
        t_feats = [f.detach() for f in t_feats]
    s_feats = output.features.adapted

    breakdown = {
        "l_st": l_st.item(),
        "l_tea": l_tea.item(),
        "l_f": 0.0,
        "l_r": 0.0,
        "l_s": 0.0,
        "frd_pairs": 0,
    }

    if w.feature_mode != "off" and w.alpha1 != 0.0:
        fn = {"fid": fid_loss, "mse": mse_feature_loss, "cos": cos_feature_loss}[w.feature_mode]
        l_f = fn(s_feats, t_feats)
        total = total + w.alpha1 * l_f
        breakdown["l_f"] = l_f.item()

    if w.relation_mode != "off" and w.alpha2 != 0.0:
        l_r = frd_loss(s_feats, t_feats, mode=w.relation_mode, pool=w.relation_pool)
        total = total + w.alpha2 * l_r
        breakdown["l_r"] = l_r.item()
        breakdown["frd_pairs"] = len(relation_pairs(len(t_feats), w.relation_mode))

    if w.response_mode != "off" and w.alpha3 != 0.0:
        if w.response_mode == "ssim":
            l_s = rd_loss(t_map, s_map, window=w.ssim_window, detach_teacher=w.detach_teacher)
        else:
            t_ref = t_map.detach() if w.detach_teacher else t_map
            l_s = mse_response_loss(t_ref, s_map)
        total = total + w.alpha3 * l_s
        breakdown["l_s"] = l_s.item()

    breakdown["total"] = total.item()
    return total, breakdown
