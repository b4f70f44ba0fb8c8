"""Distance metrics, guidance, and the three trajectory-loss target builders.

Targets are always built from stop-gradient network evaluations (plain
arrays, or a dual-number pass for the total-derivative terms); predictions
are re-evaluated on the caller's tape so the optimizer sees gradients only
through them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DualValue

__all__ = [
    "AdaptiveDistance",
    "GuidanceSpec",
    "LossTarget",
    "adaptive_distance",
    "guided_velocity",
    "fm_loss",
    "cm_target",
    "n2n_target",
    "instability_probe",
]


def _val(x):
    return x.value if isinstance(x, ad.Var) else np.asarray(x, dtype=np.float64)


@dataclass
class AdaptiveDistance:
    """||a-b||^2 / (||a-b||^2 + c^2)^(1-p), denominator under stop-gradient.

    p = 0.5 gives the pseudo-Huber form; the batch mean is returned.
    """

    p: float = 0.5
    c: float = 1e-3

    def __call__(self, a, b):
        return adaptive_distance(a, b, p=self.p, c=self.c)


def adaptive_distance(a, b, p: float = 0.5, c: float = 1e-3):
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise ValueError(f"shape mismatch: {av.shape} vs {bv.shape}")
    diff = ad.sub(a, b)
    sq = ad.sum_(ad.square(diff), axis=1)
    denom = (np.sum((av - bv) ** 2, axis=1) + c * c) ** (1.0 - p)
    out = ad.mean_(ad.mul(sq, 1.0 / denom))
    return out


def _cosine_penalty(a, b):
    """Mean over the batch of 1 - cos(a, b); zero-norm rows contribute 0."""
    av = _val(a)
    bv = _val(b).copy()  # snapshot: vjp closures must not see later target edits
    sq_a = np.sum(av * av, axis=1)
    sq_b = np.sum(bv * bv, axis=1)
    mask = ((sq_a > 1e-20) & (sq_b > 1e-20)).astype(np.float64)
    dot = ad.sum_(ad.mul(a, bv), axis=1)
    norm_a = ad.sqrt(ad.add(ad.sum_(ad.square(a), axis=1), 1e-24))
    denom = ad.mul(norm_a, np.sqrt(sq_b) + (1.0 - mask))
    cos = ad.div(dot, denom)
    return ad.mean_(ad.mul(ad.sub(1.0, cos), mask))


@dataclass
class GuidanceSpec:
    """Classifier-free guidance with optional direction normalization."""

    w_cfg: float = 1.0
    eta: float = 1.0
    normalize: bool = True

    def __post_init__(self):
        if self.w_cfg < 1.0:
            raise ValueError("w_cfg must be >= 1")
        if self.eta <= 0.0:
            raise ValueError("eta must be > 0")


def guided_velocity(v_cond: np.ndarray, v_uncond: np.ndarray, g: GuidanceSpec) -> np.ndarray:
    """v_cond extrapolated away from v_uncond; per-sample normalization keeps
    the guidance term at norm (w_cfg - 1) * eta when enabled."""
    v_cond = np.asarray(v_cond, dtype=np.float64)
    v_uncond = np.asarray(v_uncond, dtype=np.float64)
    if v_cond.shape != v_uncond.shape:
        raise ValueError(f"shape mismatch: {v_cond.shape} vs {v_uncond.shape}")
    if g.w_cfg == 1.0:
        return v_cond.copy()
    diff = v_cond - v_uncond
    if not g.normalize:
        return v_cond + (g.w_cfg - 1.0) * diff
    norm = np.linalg.norm(diff, axis=-1, keepdims=True)
    out = v_cond.copy()
    ok = norm[:, 0] >= 1e-12
    out[ok] += (g.w_cfg - 1.0) * g.eta * diff[ok] / norm[ok]
    return out


@dataclass
class LossTarget:
    """Gradient-tracked prediction paired with its stop-gradient target."""

    prediction: object
    target: np.ndarray
    branch: str
    diagnostics: dict = field(default_factory=dict)


def fm_loss(net, params, x_t, t, onehot, v_target, dist: AdaptiveDistance | None = None, beta_cos: float = 1.0):
    """Instantaneous-velocity boundary loss at s = t.

    adaptive distance plus beta_cos * (1 - cosine similarity); `params` may be
    tape Vars (training) or plain arrays (evaluation).
    """
    dist = dist or AdaptiveDistance()
    pred = net.apply(params, x_t, t, t, onehot)
    v_target = np.asarray(v_target, dtype=np.float64)
    loss = adaptive_distance(pred, v_target, p=dist.p, c=dist.c)
    if beta_cos != 0.0:
        loss = ad.add(loss, ad.mul(_cosine_penalty(pred, v_target), beta_cos))
    return loss, pred


def cm_target(net, params, x_t, t, onehot, v_phi, w1) -> LossTarget:
    """Consistency-trajectory target at s = 1.

    A dual pass at (x_t, t, 1) with tangent (v_phi, 1, 0) yields the
    stop-gradient output F_sg and its trajectory total derivative dF/dt; the
    target is F_sg - w1(t) * (F_sg - v_phi - (1 - t) dF/dt).
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    v_phi = np.asarray(v_phi, dtype=np.float64)
    ones = np.ones_like(t)
    out = ad.jvp(
        lambda xd, td, sd: net.apply(net.params, xd, td, sd, onehot),
        [DualValue(x_t, v_phi), DualValue(t, ones), DualValue(ones, np.zeros_like(t))],
    )
    F_sg, dFdt = out.primal, out.tangent
    w = np.asarray(w1, dtype=np.float64).reshape(-1, 1)
    g = F_sg - v_phi - (1.0 - t)[:, None] * dFdt
    target = F_sg - w * g
    pred = net.apply(params, x_t, t, ones, onehot)
    gap = float(np.max(np.abs(_val(pred) - F_sg))) if len(t) else 0.0
    assert gap < 1e-9, f"tracked prediction drifted from stop-grad primal by {gap}"
    return LossTarget(
        prediction=pred,
        target=target,
        branch="cm",
        diagnostics={
            "target_norm": float(np.mean(np.linalg.norm(target, axis=1))),
            "tangent_norm": float(np.mean(np.linalg.norm(dFdt, axis=1))),
            "residual_norm": float(np.mean(np.linalg.norm(g, axis=1))),
            "F_sg": F_sg,
            "dFdt": dFdt,
        },
    )


def n2n_target(
    net,
    params,
    x_r,
    r,
    t,
    onehot,
    v_r,
    v_t,
    lam: float = 1.0,
    gamma: float = 1.0,
    w2=1.0,
) -> LossTarget:
    """Noise-to-noisy target over [r, t] with the left endpoint pinned near 0.

    Dual pass at (x_r, r, t) with tangent (lam*v_r, lam, -gamma); the residual
    combines the velocities at both endpoints with the total-derivative
    correction: g = (lam+gamma) F_sg - lam (v_r + (t-r) dF) - gamma v_t.
    """
    x_r = np.asarray(x_r, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if np.any(t <= r):
        raise ValueError("n2n requires t > r")
    v_r = np.asarray(v_r, dtype=np.float64)
    v_t = np.asarray(v_t, dtype=np.float64)
    ones = np.ones_like(r)
    out = ad.jvp(
        lambda xd, rd, sd: net.apply(net.params, xd, rd, sd, onehot),
        [DualValue(x_r, lam * v_r), DualValue(r, lam * ones), DualValue(t, -gamma * ones)],
    )
    F_sg, dF = out.primal, out.tangent
    w = np.asarray(w2, dtype=np.float64).reshape(-1, 1)
    g = (lam + gamma) * F_sg - lam * (v_r + (t - r)[:, None] * dF) - gamma * v_t
    target = F_sg - w * g
    pred = net.apply(params, x_r, r, t, onehot)
    gap = float(np.max(np.abs(_val(pred) - F_sg))) if len(t) else 0.0
    assert gap < 1e-9, f"tracked prediction drifted from stop-grad primal by {gap}"
    return LossTarget(
        prediction=pred,
        target=target,
        branch="n2n",
        diagnostics={
            "target_norm": float(np.mean(np.linalg.norm(target, axis=1))),
            "tangent_norm": float(np.mean(np.linalg.norm(dF, axis=1))),
            "residual_norm": float(np.mean(np.linalg.norm(g, axis=1))),
            "F_sg": F_sg,
            "dFdt": dF,
        },
    )


def instability_probe(net, x_t, t, onehot, v_phi) -> dict:
    """Decompose the consistency objective at s = 1 into its supervised and
    self-supervised squared terms (the two-term view of the loss)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    v_phi = np.asarray(v_phi, dtype=np.float64)
    ones = np.ones_like(t)
    out = ad.jvp(
        lambda xd, td, sd: net.apply(net.params, xd, td, sd, onehot),
        [DualValue(x_t, v_phi), DualValue(t, ones), DualValue(ones, np.zeros_like(t))],
    )
    F = out.primal
    v_tilde = F + (1.0 - t)[:, None] * out.tangent
    term_sup = float(np.mean(np.sum((F - v_phi) ** 2, axis=1)))
    term_self = float(np.mean(np.sum((F - v_tilde) ** 2, axis=1)))
    return {"term_sup": term_sup, "term_self": term_self}
