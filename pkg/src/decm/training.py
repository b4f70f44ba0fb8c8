"""End-to-end training: data prep, guided teacher velocities, the per-step
consistency+boundary update, the periodic noise-to-noisy update, EMA
maintenance, fault handling, logging, and checkpointing.

Every iteration runs one optimizer update on the enabled consistency and
boundary losses; every `freq`-th iteration runs a second update on the
noise-to-noisy loss (left endpoint pinned at r = 0) plus a fresh boundary
term. A step whose losses or gradients go non-finite is rolled back to the
pre-step weights and counted as a fault.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import network as nets
from .objectives import (
    AdaptiveDistance,
    GuidanceSpec,
    cm_target,
    fm_loss,
    guided_velocity,
    n2n_target,
)
from .schedules import TimestepSampler, WeightFn, interpolate, sample_t

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainingDiverged",
    "Adam",
    "prepare_batch",
    "train_step",
    "run_training",
    "METRIC_COLUMNS",
]

METRIC_COLUMNS = [
    "step",
    "loss_fm",
    "loss_cm",
    "loss_n2n",
    "grad_norm",
    "term_sup",
    "term_self",
    "ema_gap",
]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "distill"  # distill | from-scratch
    use_fm: bool = True
    use_cd: bool = True
    use_n2n: bool = True
    lam: float = 1.0
    gamma: float = 1.0
    w_cfg: float = 1.0
    eta: float = 1.0
    normalize_guidance: bool = True
    freq: int = 3
    n_segments: int = 8
    timestep_kind: str = "uniform-n-seg"
    weight_kind: str = "const"
    kappa: float = 1.0
    p: float = 0.5
    c: float = 1e-3
    beta_cos: float = 1.0
    learning_rate: float = 1e-4
    ema_decay: float = 0.999
    batch_size: int = 256
    total_steps: int = 10_000
    seed: int = 0
    n2n_right_velocity: str = "interpolant"  # interpolant | mapped
    hidden_dim: int = 256
    n_hidden: int = 4
    fault_limit: int = 50
    checkpoint_every: int = 0  # 0 = final only
    log_every: int = 1

    def __post_init__(self):
        if self.mode not in ("distill", "from-scratch"):
            raise ValueError(f"unknown mode: {self.mode!r}")
        if self.freq < 1:
            raise ValueError("freq must be >= 1")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lam and gamma must be >= 0")
        if not (self.use_fm or self.use_cd or self.use_n2n):
            raise ValueError("at least one loss flag must be enabled")
        if self.n2n_right_velocity not in ("interpolant", "mapped"):
            raise ValueError("n2n_right_velocity must be 'interpolant' or 'mapped'")

    @property
    def guidance(self) -> GuidanceSpec:
        return GuidanceSpec(w_cfg=self.w_cfg, eta=self.eta, normalize=self.normalize_guidance)

    @property
    def distance(self) -> AdaptiveDistance:
        return AdaptiveDistance(p=self.p, c=self.c)

    @property
    def timestep_sampler(self) -> TimestepSampler:
        return TimestepSampler(kind=self.timestep_kind, n_segments=self.n_segments)

    @property
    def weight_fn(self) -> WeightFn:
        return WeightFn(kind=self.weight_kind, kappa=self.kappa)


class Adam:
    """Adaptive-moment optimizer with decoupled weight decay."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def snapshot(self):
        return self.t, [m.copy() for m in self.m], [v.copy() for v in self.v]

    def restore(self, snap) -> None:
        self.t, self.m, self.v = snap[0], [m.copy() for m in snap[1]], [v.copy() for v in snap[2]]


@dataclass
class TrainState:
    net: nets.VelocityNet
    ema: nets.EmaShadow
    optimizer: Adam
    step: int = 0
    faults: int = 0
    consecutive_faults: int = 0
    rng_data: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    rng_time: np.random.Generator = field(default_factory=lambda: np.random.default_rng(1))
    log: list = field(default_factory=list)


def _teacher_velocity(teacher, x, t, labels, guidance: GuidanceSpec) -> np.ndarray:
    v_cond = teacher(x, t, t, labels)
    if guidance.w_cfg == 1.0 or teacher.class_dim == 0:
        return v_cond
    v_uncond = teacher(x, t, t, None)
    return guided_velocity(v_cond, v_uncond, guidance)


def prepare_batch(teacher, dataset, rng_data, rng_time, config: TrainConfig, branch: str):
    """One prepared batch: noise, data, labels, times, interpolant, velocity.

    In distill mode the velocity is the (guided) teacher prediction at the
    interpolant; from scratch it is the conditional path velocity x1 - z.
    """
    n = config.batch_size
    z = rng_data.standard_normal((n, dataset.dim))
    z_ref, labels = dataset.sample(n, rng_data)
    t = sample_t(config.timestep_sampler, rng_time, branch, size=n)
    z_t = interpolate(z, z_ref, t)
    if config.mode == "from-scratch":
        v_t = z_ref - z
    else:
        v_t = _teacher_velocity(teacher, z_t, t, labels, config.guidance)
    return z, z_ref, labels, t, z_t, v_t


def _global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def _ema_gap(net, ema) -> float:
    return float(
        np.sqrt(sum(float(np.sum((p - s) ** 2)) for p, s in zip(net.params, ema.shadow)))
    )


def _apply_update(state: TrainState, loss_fn) -> tuple[dict, float]:
    """Trace loss_fn over the parameters, update, and return (parts, grad norm)."""
    parts: dict = {}
    out, tape = ad.forward(lambda *pv: loss_fn(pv, parts), state.net.params)
    grads = ad.backward(tape, np.array(1.0))
    if not np.isfinite(out.value):
        raise ad.NumericFaultError("non-finite loss")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise ad.NumericFaultError("non-finite gradient")
    gn = _global_norm(grads)
    state.optimizer.step(state.net.params, grads)
    state.ema.update(state.net)
    return parts, gn


def train_step(state: TrainState, config: TrainConfig, dataset, teacher=None) -> dict:
    """One Algorithm-1 iteration; returns the metric row for the step."""
    net = state.net
    dist = config.distance
    wfn = config.weight_fn
    snap_params = [p.copy() for p in net.params]
    snap_opt = state.optimizer.snapshot()
    snap_ema = [s.copy() for s in state.ema.shadow]

    row = {k: float("nan") for k in METRIC_COLUMNS}
    row["step"] = state.step
    try:
        # ---- phase 1: consistency + boundary ---------------------------
        branch = "cm" if config.use_cd else "fm"
        z, z_ref, labels, t, z_t, v_t = prepare_batch(
            teacher, dataset, state.rng_data, state.rng_time, config, branch
        )
        onehot = net.onehot(labels) if net.class_dim else None
        grad_norms = []
        if config.use_cd or config.use_fm:

            def phase1(pv, parts):
                terms = []
                if config.use_cd:
                    lt = cm_target(net, pv, z_t, t, onehot, v_t, wfn.w1(t))
                    loss_cm = dist(lt.prediction, lt.target)
                    parts["loss_cm"] = float(loss_cm.value)
                    dfdt = lt.diagnostics["dFdt"]
                    f_sg = lt.diagnostics["F_sg"]
                    parts["term_sup"] = float(np.mean(np.sum((f_sg - v_t) ** 2, axis=1)))
                    parts["term_self"] = float(
                        np.mean(np.sum(((1.0 - t)[:, None] * dfdt) ** 2, axis=1))
                    )
                    terms.append(loss_cm)
                if config.use_fm:
                    loss_fm, _ = fm_loss(
                        net, pv, z_t, t, onehot, v_t, dist=dist, beta_cos=config.beta_cos
                    )
                    parts["loss_fm"] = float(loss_fm.value)
                    terms.append(loss_fm)
                total = terms[0]
                for extra in terms[1:]:
                    total = ad.add(total, extra)
                return total

            parts, gn = _apply_update(state, phase1)
            row.update(parts)
            grad_norms.append(gn)

        # ---- phase 2: noise-to-noisy every freq iterations -------------
        if config.use_n2n and state.step % config.freq == 0:
            z2, zref2, labels2, t2, zt2, vt2 = prepare_batch(
                teacher, dataset, state.rng_data, state.rng_time, config, "n2n-right"
            )
            r = np.zeros_like(t2)
            x_r = interpolate(z2, zref2, r)
            if config.mode == "from-scratch":
                v_r = zref2 - z2
            else:
                v_r = _teacher_velocity(teacher, x_r, r, labels2, config.guidance)
            v_right = vt2
            if config.mode == "distill" and config.n2n_right_velocity == "mapped":
                mapped = nets.flow_map(net, x_r, r, t2, labels2 if net.class_dim else None)
                v_right = _teacher_velocity(teacher, mapped, t2, labels2, config.guidance)
            onehot2 = net.onehot(labels2) if net.class_dim else None

            def phase2(pv, parts):
                lt = n2n_target(
                    net,
                    pv,
                    x_r,
                    r,
                    t2,
                    onehot2,
                    v_r,
                    v_right,
                    lam=config.lam,
                    gamma=config.gamma,
                    w2=wfn.w2(r, t2),
                )
                total = dist(lt.prediction, lt.target)
                parts["loss_n2n"] = float(total.value)
                if config.use_fm:
                    loss_fm2, _ = fm_loss(
                        net, pv, zt2, t2, onehot2, vt2, dist=dist, beta_cos=config.beta_cos
                    )
                    parts["loss_fm2"] = float(loss_fm2.value)
                    total = ad.add(total, loss_fm2)
                return total

            parts2, gn2 = _apply_update(state, phase2)
            row["loss_n2n"] = parts2["loss_n2n"]
            grad_norms.append(gn2)

        row["grad_norm"] = max(grad_norms) if grad_norms else float("nan")
        row["ema_gap"] = _ema_gap(net, state.ema)
        state.consecutive_faults = 0
    except ad.NumericFaultError as fault:
        net.params = snap_params
        state.optimizer.restore(snap_opt)
        state.ema.shadow = snap_ema
        state.faults += 1
        state.consecutive_faults += 1
        row["fault"] = str(fault)
        if state.consecutive_faults > config.fault_limit:
            raise TrainingDiverged(
                f"{state.consecutive_faults} consecutive faulted steps at step {state.step}; "
                f"last fault: {fault}"
            ) from None
    state.step += 1
    return row


def init_student(config: TrainConfig, dataset, teacher=None) -> nets.VelocityNet:
    if config.mode == "distill":
        if teacher is None:
            raise ValueError("distill mode requires a teacher network")
        student = nets.VelocityNet(
            dim_x=teacher.dim_x,
            n_classes=teacher.n_classes,
            hidden_dim=teacher.hidden_dim,
            n_hidden=teacher.n_hidden,
            n_freqs=teacher.n_freqs,
            with_s=True,
            seed=config.seed,
        )
        student.init_from_teacher(teacher)
        return student
    with_s = config.use_cd or config.use_n2n
    return nets.VelocityNet(
        dim_x=dataset.dim,
        n_classes=dataset.n_classes,
        hidden_dim=config.hidden_dim,
        n_hidden=config.n_hidden,
        with_s=with_s,
        seed=config.seed,
    )


@dataclass
class TrainResult:
    net: nets.VelocityNet
    ema: nets.EmaShadow
    log: list
    faults: int

    def ema_net(self) -> nets.VelocityNet:
        return self.ema.as_net(self.net)


def run_training(
    config: TrainConfig,
    dataset,
    teacher: nets.VelocityNet | None = None,
    out_dir: str | None = None,
    digest: bytes = b"",
    progress=None,
) -> TrainResult:
    """Run `total_steps` iterations and return the trained weights plus the
    per-step metric log; optionally stream the log and checkpoints to disk."""
    if config.mode == "distill" and teacher is None:
        raise ValueError("distill mode requires a teacher checkpoint")
    student = init_student(config, dataset, teacher)
    state = TrainState(
        net=student,
        ema=nets.EmaShadow(student, decay=config.ema_decay),
        optimizer=Adam(student.params, lr=config.learning_rate),
        rng_data=np.random.default_rng([config.seed, 0xDA7A]),
        rng_time=np.random.default_rng([config.seed, 0x717E]),
    )
    writer = fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        writer.writeheader()
    try:
        for _ in range(config.total_steps):
            row = train_step(state, config, dataset, teacher)
            if row["step"] % config.log_every == 0 or state.step == config.total_steps:
                state.log.append(row)
                if writer is not None:
                    writer.writerow(row)
            if progress is not None and state.step % 1000 == 0:
                progress(state.step, row)
            if (
                out_dir is not None
                and config.checkpoint_every > 0
                and state.step % config.checkpoint_every == 0
            ):
                nets.save_checkpoint(
                    os.path.join(out_dir, f"ckpt_{state.step:07d}.bin"),
                    state.net,
                    state.ema,
                    state.step,
                    digest,
                )
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        nets.save_checkpoint(
            os.path.join(out_dir, "ckpt_final.bin"), state.net, state.ema, state.step, digest
        )
    return TrainResult(net=state.net, ema=state.ema, log=state.log, faults=state.faults)
