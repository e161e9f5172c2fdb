"""Training loss terms: photometric, prior (naive / deflected / adaptive),
eikonal, curvature, and the weighted total.

Modulation weights derived from the deflection angle are always fed in as
plain (detached) arrays: letting the optimizer shrink the loss by inflating
the angle instead of fitting geometry defeats the gating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class NonFiniteLossError(RuntimeError):
    def __init__(self, term):
        super().__init__(f"non-finite loss term: {term}")
        self.term = term


@dataclass
class ModulationParams:
    """Shifted logistic gate between naive and deflected prior supervision."""
    s0: float = 12.5
    theta0: float = np.pi / 12.0

    def __post_init__(self):
        if self.s0 <= 0 or not (0.0 < self.theta0 < np.pi):
            raise ValueError("invalid modulation parameters")


@dataclass
class LossWeights:
    lam_eik: float = 0.05
    lam_curv: float = 0.0005
    lam_normal: float = 0.025
    lam_depth: float = 0.05

    def __post_init__(self):
        for v in (self.lam_eik, self.lam_curv, self.lam_normal, self.lam_depth):
            if v < 0:
                raise ValueError("loss weights must be nonnegative")


@dataclass
class ScaleShift:
    scale: float
    shift: float
    degenerate: bool = False


def _masked_mean(values, mask=None):
    if mask is None:
        return ad.mean(values)
    mask = np.asarray(mask, dtype=np.float64)
    count = max(float(mask.sum()), 1.0)
    return ad.asum(values * mask) / count


def modulation_weights(delta_theta, params=None):
    """(g_deflected, g_naive): logistic in the deflection angle, summing to 1.

    Works on plain arrays (the weights are consumed detached).
    """
    p = params or ModulationParams()
    ang = np.asarray(ad.value_of(delta_theta), dtype=np.float64)
    g_d = 1.0 / (1.0 + np.exp(-p.s0 * (ang - p.theta0)))
    return g_d, 1.0 - g_d


def weighted_color_loss(pred_rgb, gt_rgb, color_weights=None):
    """Mean over rays of w * L1(pred, gt); all-ones weights give the plain
    photometric loss."""
    diff = ad.asum(ad.absval(pred_rgb - gt_rgb), axis=1)
    if color_weights is not None:
        diff = diff * np.asarray(color_weights, dtype=np.float64)
    return ad.mean(diff)


def solve_scale_shift(rendered_depth, prior_depth, valid=None):
    """Least-squares (scale, shift) aligning rendered depth to the prior.

    Solved on detached values; a near-constant rendered depth falls back to
    scale 1 with a mean shift and is flagged.
    """
    d_hat = np.asarray(ad.value_of(rendered_depth), dtype=np.float64).ravel()
    d = np.asarray(ad.value_of(prior_depth), dtype=np.float64).ravel()
    if valid is not None:
        sel = np.asarray(valid, dtype=bool)
        d_hat = d_hat[sel]
        d = d[sel]
    if d_hat.size < 2:
        return ScaleShift(1.0, float(np.mean(d - d_hat)) if d_hat.size else 0.0,
                          degenerate=True)
    var = float(np.var(d_hat))
    if var < 1e-10:
        return ScaleShift(1.0, float(np.mean(d - d_hat)), degenerate=True)
    mean_x = d_hat.mean()
    mean_y = d.mean()
    w = float(((d_hat - mean_x) * (d - mean_y)).sum()
              / ((d_hat - mean_x) ** 2).sum())
    q = float(mean_y - w * mean_x)
    return ScaleShift(w, q)


def depth_residuals(rendered_depth, prior_depth, scale_shift):
    """Squared aligned-depth residual per ray."""
    aligned = rendered_depth * scale_shift.scale + scale_shift.shift
    diff = aligned - prior_depth
    return diff * diff


def depth_prior_loss(rendered_depth, prior_depth, scale_shift, valid=None):
    return _masked_mean(depth_residuals(rendered_depth, prior_depth,
                                        scale_shift), valid)


def normal_residuals(pred_normal, prior_normal):
    """Per-ray L1 + angular (1 - cos) residual of unit normals."""
    l1 = ad.asum(ad.absval(pred_normal - prior_normal), axis=1)
    cosine = ad.absval(1.0 - ad.dot_rows(pred_normal, prior_normal))
    return l1 + cosine.reshape((l1.shape[0],))


def normal_prior_loss(pred_normal, prior_normal, valid=None):
    return _masked_mean(normal_residuals(pred_normal, prior_normal), valid)


def adaptive_normal_loss(rendered_normal, deflected_normal, prior_normal,
                         delta_theta, params=None, valid=None):
    """Gated blend: deflected residual weighted by g_d, naive by g."""
    g_d, g = modulation_weights(delta_theta, params)
    res_defl = normal_residuals(deflected_normal, prior_normal)
    res_naive = normal_residuals(rendered_normal, prior_normal)
    return _masked_mean(res_defl * g_d + res_naive * g, valid)


def adaptive_depth_loss(rendered_depth, prior_depth, delta_theta, scale_shift,
                        params=None, valid=None):
    """Depth residual weighted by the naive gate g (priors fade out where the
    deflection angle marks complex geometry)."""
    _, g = modulation_weights(delta_theta, params)
    res = depth_residuals(rendered_depth, prior_depth, scale_shift)
    return _masked_mean(res * g, valid)


def eikonal_loss(gradients):
    """Mean squared deviation of the gradient norm from 1."""
    norm = ad.norm_rows(gradients)
    dev = norm.reshape((ad.value_of(norm).shape[0],)) - 1.0
    return ad.mean(dev * dev)


def curvature_loss(laplacians):
    """Mean absolute second derivative (stencil Laplacian)."""
    return ad.mean(ad.absval(laplacians))


def curvature_decay(step, total_steps, warmup_fraction=0.2, decay_decades=2.0):
    """Multiplier on the curvature weight: 1 through warm-up, then exponential
    decay reaching 10^-decades at the final step."""
    warmup = warmup_fraction * total_steps
    if total_steps <= warmup or step <= warmup:
        return 1.0
    frac = (step - warmup) / (total_steps - warmup)
    return 10.0 ** (-decay_decades * min(frac, 1.0))


def total_loss(terms, weights=None, curvature_scale=1.0):
    """Weighted sum of the five terms; aborts naming any non-finite term.

    `terms` maps {"color", "eikonal", "curvature", "normal", "depth"} to
    scalar losses.
    """
    w = weights or LossWeights()
    for name, term in terms.items():
        if not np.all(np.isfinite(ad.value_of(term))):
            raise NonFiniteLossError(name)
    return (terms["color"]
            + w.lam_eik * terms["eikonal"]
            + (w.lam_curv * curvature_scale) * terms["curvature"]
            + w.lam_normal * terms["normal"]
            + w.lam_depth * terms["depth"])
