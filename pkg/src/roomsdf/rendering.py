"""Ray sampling, SDF-to-density conversion and volume compositing.

Density conversions follow the Laplace-CDF form; the unbiased variant divides
the SDF by the magnitude of its directional derivative along the ray, and the
guided variant gates that division by a per-ray confidence in [0, 1].
All functions accept tape variables or ndarrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

_EXP_CLIP = 60.0        # |s| / beta is clamped here before exponentiation
_DERIV_FLOOR = 1e-4     # |f'| floor: keeps grazing rays from dividing by ~0


@dataclass
class RayBatch:
    """Structure-of-arrays ray bundle; directions are unit length."""
    origins: np.ndarray          # (R, 3)
    dirs: np.ndarray             # (R, 3)
    near: np.ndarray             # (R,)
    far: np.ndarray              # (R,)
    image_id: int = -1
    rows: np.ndarray = field(default=None)
    cols: np.ndarray = field(default=None)

    def __len__(self):
        return self.origins.shape[0]


def aabb_near_far(origins, dirs, lo=-1.0, hi=1.0, min_near=1e-3):
    """Slab intersection of rays with the axis-aligned domain box."""
    inv = 1.0 / np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t0 = (lo - origins) * inv
    t1 = (hi - origins) * inv
    near = np.minimum(t0, t1).max(axis=1)
    far = np.maximum(t0, t1).min(axis=1)
    near = np.maximum(near, min_near)
    return near, far


def sample_stratified(near, far, n, rng=None, jitter=True):
    """One sample per uniform bin of [near, far]; strictly increasing."""
    r = near.shape[0]
    edges = np.linspace(0.0, 1.0, n + 1)
    lowers = edges[:-1][None, :]
    if jitter and rng is not None:
        u = rng.random((r, n))
    else:
        u = np.full((r, n), 0.5)
    frac = lowers + u / n
    return near[:, None] + (far - near)[:, None] * frac


def sample_importance(t_vals, weights, n, rng=None):
    """Inverse-CDF draws proportional to per-sample weights.

    Bins are the midpoints between existing samples; returns (R, n) new
    locations inside [t_0, t_last].
    """
    r, s = t_vals.shape
    mids = 0.5 * (t_vals[:, 1:] + t_vals[:, :-1])
    bins = np.concatenate([t_vals[:, :1], mids, t_vals[:, -1:]], axis=1)
    w = weights + 1e-9
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((r, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    if rng is None:
        u = (np.arange(n) + 0.5)[None, :] / n * np.ones((r, 1))
    else:
        u = rng.random((r, n))
    out = np.empty((r, n))
    for i in range(r):
        idx = np.searchsorted(cdf[i], u[i], side="right") - 1
        idx = np.clip(idx, 0, s - 1)
        c0 = cdf[i, idx]
        c1 = cdf[i, idx + 1]
        denom = np.where(c1 - c0 < 1e-12, 1.0, c1 - c0)
        frac = (u[i] - c0) / denom
        out[i] = bins[i, idx] + frac * (bins[i, idx + 1] - bins[i, idx])
    return out


def sample_points(near, far, n_uniform, n_importance, rng,
                  proposal_weights_fn=None):
    """Stratified pass plus one importance-resampling pass.

    `proposal_weights_fn(t) -> weights` supplies current rendering weights for
    the stratified samples; with `n_importance == 0` the result is exactly the
    stratified set.  Degenerate intervals yield an empty sample set.
    """
    if n_uniform < 2:
        raise ValueError("need at least two uniform samples")
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    ok = (far - near) >= 1e-6
    if not np.any(ok):
        return np.zeros((near.shape[0], 0)), ok
    t = sample_stratified(near, far, n_uniform, rng)
    if n_importance > 0:
        if proposal_weights_fn is None:
            raise ValueError("importance sampling needs proposal weights")
        w = proposal_weights_fn(t)
        t_extra = sample_importance(t, w, n_importance, rng)
        t = np.sort(np.concatenate([t, t_extra], axis=1), axis=1)
    # enforce strictly increasing sample positions
    eps = 1e-12 * np.maximum(1.0, np.abs(t))
    t = np.maximum.accumulate(t + 0.0, axis=1)
    for _ in range(2):
        dup = np.diff(t, axis=1) <= 0
        if not dup.any():
            break
        t[:, 1:][dup] += eps[:, 1:][dup]
    return t, ok


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------

def laplace_density(s, beta):
    """Laplace-CDF density: (1/2b) e^{-s/b} outside, 1/b - (1/2b) e^{s/b}
    inside; continuous at the surface."""
    ratio = ad.clamp(s / beta, -_EXP_CLIP, _EXP_CLIP)
    pos = ad.exp(-ratio) * (0.5 / beta)
    neg = 1.0 / beta - ad.exp(ratio) * (0.5 / beta)
    return ad.where(ad.value_of(s) >= 0.0, pos, neg)


def unbiased_density(s, sdf_dir_deriv, beta, floor=_DERIV_FLOOR):
    """Divide the SDF by |directional derivative| before the conversion so the
    weight peak sits on the zero level set."""
    denom = ad.clamp(ad.absval(sdf_dir_deriv), lo=floor)
    return laplace_density(s / denom, beta)


def guided_density(s, sdf_dir_deriv, beta, cfd, floor=_DERIV_FLOOR):
    """Confidence-gated unbiasing: cfd=0 is plain Laplace, cfd=1 is unbiased."""
    mag = ad.clamp(ad.absval(sdf_dir_deriv), lo=floor)
    denom = cfd * mag + (1.0 - cfd)
    return laplace_density(s / denom, beta)


# ---------------------------------------------------------------------------
# compositing
# ---------------------------------------------------------------------------

@dataclass
class CompositeResult:
    color: object            # (R, 3)
    depth: object            # (R,)
    normal: object           # (R, 3) raw weight-sum
    quaternion: object       # (R, 4) raw weight-sum, or None
    weights: object          # (R, S)
    opacity: object          # (R,)
    transmittance_end: object  # (R,)


def composite_ray(t_vals, near, sigma, color=None, normal=None,
                  quaternion=None, extra=None):
    """Alpha-composite per-point quantities along each ray.

    `t_vals` (R, S) strictly increasing; the first segment length is measured
    from `near`.  Empty sample sets give a fully transparent result.
    """
    r = np.asarray(near).shape[0]
    tv = np.asarray(ad.value_of(t_vals))
    if tv.shape[1] == 0:
        zero3 = np.zeros((r, 3))
        return CompositeResult(color=zero3, depth=np.zeros(r), normal=zero3,
                               quaternion=None, weights=np.zeros((r, 0)),
                               opacity=np.zeros(r),
                               transmittance_end=np.ones(r))
    t0 = np.concatenate([np.asarray(near)[:, None], tv[:, :-1]], axis=1)
    delta = tv - t0
    tau = sigma * delta
    alpha = 1.0 - ad.exp(-tau)
    trans = ad.exp(-ad.cumsum_exclusive(tau, axis=1))
    weights = trans * alpha
    opacity = ad.asum(weights, axis=1)
    total_tau = ad.asum(tau, axis=1)
    t_end = ad.exp(-total_tau)
    depth = ad.asum(weights * tv, axis=1)

    def fold(values):
        if values is None:
            return None
        w3 = weights.reshape((r, tv.shape[1], 1))
        return ad.asum(w3 * values, axis=1)

    out_color = fold(color)
    out_normal = fold(normal)
    out_quat = fold(quaternion)
    res = CompositeResult(color=out_color, depth=depth, normal=out_normal,
                          quaternion=out_quat, weights=weights,
                          opacity=opacity, transmittance_end=t_end)
    if extra is not None:
        for key, values in extra.items():
            setattr(res, key, fold(values))
    return res


def deflection_angle(rendered_normal, deflected_normal):
    """Angle between the unit-renormalized rendered and deflected normals.

    Fully transparent rays (zero-length rendered normal) report angle 0; the
    returned mask flags them.
    """
    n_val = ad.value_of(rendered_normal)
    transparent = np.linalg.norm(n_val, axis=-1) < 1e-12
    a = ad.normalize_rows(rendered_normal)
    b = ad.normalize_rows(deflected_normal)
    ang = ad.arccos(ad.dot_rows(a, b)).reshape((n_val.shape[0],))
    ang = ad.where(transparent, np.zeros(n_val.shape[0]), ang)
    return ang, transparent
