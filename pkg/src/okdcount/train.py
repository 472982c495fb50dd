"""Training loops: online distillation, two-phase baseline, single-branch runs.

``online`` warms the teacher up alone, then trains both branches jointly
with the distillation losses. ``two_phase`` is the classic baseline: train
the teacher to its full budget, freeze it, then distill into the student.
``student_only``/``teacher_only`` train one branch on plain MSE.

History records are fully deterministic for a given config and seed;
wall-clock numbers are reported separately so logs stay byte-comparable.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import augment
from .distill import LossWeights, total_loss
from .errors import ConfigError
from .model import FeatureGroup, JointOutput, Model
from .tensor import Tensor, no_grad

MODES = ("online", "two_phase", "student_only", "teacher_only")
SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    mode: str = "online"
    epochs: int = 40
    teacher_warmup_epochs: int = 10
    batch_size: int = 8
    student_lr: float = 1e-4
    teacher_lr: float = 1e-6
    warmup_lr: float = 1e-4
    lr_schedule: str = "constant"
    grad_clip: float = 10.0
    seed: int = 0
    eval_every: int = 10
    crop: int = 64
    augment: bool = True
    sigma: float = 2.0
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(
                f"lr_schedule must be one of {SCHEDULES}, got {self.lr_schedule!r}"
            )
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.teacher_warmup_epochs < 0:
            raise ConfigError(f"teacher_warmup_epochs must be >= 0, got {self.teacher_warmup_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        self.weights.validate()
        return self


class Adam:
    """Bias-corrected Adam over a fixed parameter list."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.base_lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    sq = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    for g in grads:
        sq += float((g * g).sum())
    norm = sq ** 0.5
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


# -- batching -------------------------------------------------------------------


def _make_batch(scenes, idxs, cfg: TrainConfig, rng, downsample: int):
    imgs, dens = [], []
    for i in idxs:
        sc = scenes[i]
        if cfg.augment:
            sc = augment(sc, rng, crop=cfg.crop, sigma=cfg.sigma, downsample=downsample)
        imgs.append(sc.image)
        dens.append(sc.density)
    return Tensor(np.stack(imgs)), Tensor(np.stack(dens))


def _check_finite(loss, epoch, phase):
    val = loss.item()
    if not np.isfinite(val):
        raise RuntimeError(f"training diverged: non-finite loss in {phase} epoch {epoch}")


def _mean_breakdown(sums, n):
    return {k: (v / n if k != "frd_pairs" else int(v / n)) for k, v in sums.items()}


# -- per-epoch runners ------------------------------------------------------------


def _branch_mse_epoch(model, scenes, cfg, rng, opt, branch, epoch, phase):
    """One epoch of plain MSE training for a single branch (plus the stem)."""
    order = rng.permutation(len(scenes))
    sums, batches = {}, 0
    key = "l_tea" if branch == "teacher" else "l_st"
    for start in range(0, len(order), cfg.batch_size):
        x, gt = _make_batch(scenes, order[start : start + cfg.batch_size], cfg, rng, model.downsample)
        d = model.forward_density(x, branch)
        loss = (d - gt).square().mean()
        _check_finite(loss, epoch, phase)
        opt.zero_grad()
        loss.backward()
        clip_global_norm(opt.params, cfg.grad_clip)
        opt.step()
        val = loss.item()
        sums[key] = sums.get(key, 0.0) + val
        sums["total"] = sums.get("total", 0.0) + val
        batches += 1
    return _mean_breakdown(sums, batches)


def _joint_epoch(model, scenes, cfg, rng, opt_teacher, opt_student, epoch):
    order = rng.permutation(len(scenes))
    sums, batches = {}, 0
    for start in range(0, len(order), cfg.batch_size):
        x, gt = _make_batch(scenes, order[start : start + cfg.batch_size], cfg, rng, model.downsample)
        out = model.forward_joint(x)
        loss, bd = total_loss(gt, out, cfg.weights)
        _check_finite(loss, epoch, "joint")
        opt_teacher.zero_grad()
        opt_student.zero_grad()
        loss.backward()
        clip_global_norm(opt_teacher.params + opt_student.params, cfg.grad_clip)
        opt_teacher.step()
        opt_student.step()
        for k, v in bd.items():
            sums[k] = sums.get(k, 0.0) + v
        batches += 1
    return _mean_breakdown(sums, batches)


def _frozen_distill_epoch(model, scenes, cfg, rng, opt_student, epoch):
    """Student/adapter updates against a frozen stem and teacher."""
    order = rng.permutation(len(scenes))
    sums, batches = {}, 0
    for start in range(0, len(order), cfg.batch_size):
        x, gt = _make_batch(scenes, order[start : start + cfg.batch_size], cfg, rng, model.downsample)
        with no_grad():
            base = model.stem_forward(x)
            t_density, t_feats = model.branch_forward(base, "teacher")
        s_density, s_feats = model.branch_forward(base, "student")
        out = JointOutput(t_density, s_density, FeatureGroup(t_feats, s_feats, model.adapt(s_feats)))
        loss, bd = total_loss(gt, out, cfg.weights)
        _check_finite(loss, epoch, "student_distill")
        opt_student.zero_grad()
        loss.backward()
        clip_global_norm(opt_student.params, cfg.grad_clip)
        opt_student.step()
        for k, v in bd.items():
            sums[k] = sums.get(k, 0.0) + v
        batches += 1
    return _mean_breakdown(sums, batches)


# -- evaluation -------------------------------------------------------------------


def evaluate(model, scenes, branch: str = "student", batch_size: int = 16) -> dict:
    """Count error of one branch over a scene list.

    mae is the mean absolute count error; mse is the root mean squared
    count error (the usual crowd-counting convention).
    """
    if not scenes:
        raise ConfigError("evaluate needs at least one scene")
    errors = []
    i = 0
    while i < len(scenes):
        chunk = [scenes[i]]
        shape = scenes[i].image.shape
        i += 1
        while i < len(scenes) and len(chunk) < batch_size and scenes[i].image.shape == shape:
            chunk.append(scenes[i])
            i += 1
        pred = model.predict(np.stack([s.image for s in chunk]), branch)
        counts = pred.sum(axis=(1, 2, 3))
        for s, c in zip(chunk, counts):
            errors.append(c - s.count)
    errors = np.asarray(errors)
    return {
        "branch": branch,
        "count": int(errors.size),
        "mae": float(np.abs(errors).mean()),
        "mse": float(np.sqrt((errors ** 2).mean())),
    }


def _eval_record(model, scenes):
    if not scenes:
        return None
    return {b: evaluate(model, scenes, b) for b in ("student", "teacher")}


# -- full runs --------------------------------------------------------------------


def _lr_factor(schedule, k, n):
    """Multiplier on the base lr for epoch k (1-based) of an n-epoch phase."""
    if schedule == "cosine" and n > 1:
        return 0.5 * (1.0 + math.cos(math.pi * (k - 1) / n))
    return 1.0


def _run_phase(model, eval_scenes, cfg, history, epoch_fn, phase, n_epochs, start_epoch,
               opts=()):
    for k in range(1, n_epochs + 1):
        epoch = start_epoch + k
        fac = _lr_factor(cfg.lr_schedule, k, n_epochs)
        for opt in opts:
            opt.lr = opt.base_lr * fac
        losses = epoch_fn(epoch)
        record = {"epoch": epoch, "phase": phase, "losses": losses}
        if (k % cfg.eval_every == 0) or (k == n_epochs):
            ev = _eval_record(model, eval_scenes)
            if ev is not None:
                record["eval"] = ev
        history.append(record)
    return start_epoch + n_epochs


def train_online(model: Model, train_scenes, eval_scenes, cfg: TrainConfig):
    """Warm-up (teacher + stem alone), then joint two-branch distillation."""
    cfg.validate()
    if not train_scenes:
        raise ConfigError("training needs at least one scene")
    rng = np.random.default_rng(cfg.seed)
    history = []
    t0 = time.perf_counter()

    opt_warm = Adam(model.parameters("stem") + model.parameters("teacher"), cfg.warmup_lr)
    epoch = _run_phase(
        model, eval_scenes, cfg, history,
        lambda e: _branch_mse_epoch(model, train_scenes, cfg, rng, opt_warm, "teacher", e, "warmup"),
        "warmup", cfg.teacher_warmup_epochs, 0, opts=(opt_warm,),
    )
    t1 = time.perf_counter()

    opt_teacher = Adam(model.parameters("stem") + model.parameters("teacher"), cfg.teacher_lr)
    opt_student = Adam(model.parameters("student") + model.parameters("adapters"), cfg.student_lr)
    _run_phase(
        model, eval_scenes, cfg, history,
        lambda e: _joint_epoch(model, train_scenes, cfg, rng, opt_teacher, opt_student, e),
        "joint", cfg.epochs, epoch, opts=(opt_teacher, opt_student),
    )
    t2 = time.perf_counter()

    timing = {
        "mode": "online",
        "wall_clock_seconds": t2 - t0,
        "phases": {"warmup": t1 - t0, "joint": t2 - t1},
    }
    return history, timing


def train_two_phase(model: Model, train_scenes, eval_scenes, cfg: TrainConfig):
    """Teacher to full budget, freeze, then distill into the student.

    Each phase gets the same epoch count as one full online run, so timing
    comparisons measure the architectural cost, not a budget difference.
    """
    cfg.validate()
    if not train_scenes:
        raise ConfigError("training needs at least one scene")
    rng = np.random.default_rng(cfg.seed)
    history = []
    n = cfg.teacher_warmup_epochs + cfg.epochs
    t0 = time.perf_counter()

    opt_teacher = Adam(model.parameters("stem") + model.parameters("teacher"), cfg.warmup_lr)
    epoch = _run_phase(
        model, eval_scenes, cfg, history,
        lambda e: _branch_mse_epoch(model, train_scenes, cfg, rng, opt_teacher, "teacher", e, "teacher_pretrain"),
        "teacher_pretrain", n, 0, opts=(opt_teacher,),
    )
    t1 = time.perf_counter()
    history.append({"epoch": epoch, "phase_boundary": "teacher_frozen"})

    opt_student = Adam(model.parameters("student") + model.parameters("adapters"), cfg.student_lr)
    _run_phase(
        model, eval_scenes, cfg, history,
        lambda e: _frozen_distill_epoch(model, train_scenes, cfg, rng, opt_student, e),
        "student_distill", n, epoch, opts=(opt_student,),
    )
    t2 = time.perf_counter()

    timing = {
        "mode": "two_phase",
        "wall_clock_seconds": t2 - t0,
        "phases": {"teacher_pretrain": t1 - t0, "student_distill": t2 - t1},
    }
    return history, timing


def train_single(model: Model, train_scenes, eval_scenes, cfg: TrainConfig, branch: str):
    """One branch (plus the stem) on plain MSE, same total budget as online."""
    cfg.validate()
    if not train_scenes:
        raise ConfigError("training needs at least one scene")
    if branch not in ("student", "teacher"):
        raise ConfigError(f"branch must be 'student' or 'teacher', got {branch!r}")
    rng = np.random.default_rng(cfg.seed)
    history = []
    n = cfg.teacher_warmup_epochs + cfg.epochs
    lr = cfg.student_lr if branch == "student" else cfg.warmup_lr
    phase = f"{branch}_only"
    t0 = time.perf_counter()
    opt = Adam(model.parameters("stem") + model.parameters(branch), lr)
    _run_phase(
        model, eval_scenes, cfg, history,
        lambda e: _branch_mse_epoch(model, train_scenes, cfg, rng, opt, branch, e, phase),
        phase, n, 0, opts=(opt,),
    )
    t1 = time.perf_counter()
    timing = {"mode": f"{branch}_only", "wall_clock_seconds": t1 - t0, "phases": {phase: t1 - t0}}
    return history, timing


def train_run(model: Model, train_scenes, eval_scenes, cfg: TrainConfig):
    """Dispatch on cfg.mode; returns (history, timing)."""
    cfg.validate()
    if cfg.mode == "online":
        return train_online(model, train_scenes, eval_scenes, cfg)
    if cfg.mode == "two_phase":
        return train_two_phase(model, train_scenes, eval_scenes, cfg)
    branch = "student" if cfg.mode == "student_only" else "teacher"
    return train_single(model, train_scenes, eval_scenes, cfg, branch)
