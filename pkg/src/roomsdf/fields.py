"""Geometry / color / deflection networks and quaternion algebra.

All forward functions are generic over tape variables and ndarrays: pass a
`LeafBundle` for training, or `ParameterStore.arrays()` for eager evaluation.
Quaternions are stored (w, x, y, z) in the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------

def init_geometry_net(rng, in_dim, hidden, feat_width, sphere_radius=0.5):
    """Two-layer geometry net initialized so the SDF approximates a sphere.

    Only the raw xyz slots of the first layer carry weight at init; encoding
    slots start at zero so the sphere shape does not depend on them.
    """
    w1 = np.zeros((in_dim, hidden))
    w1[:3, :] = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(hidden), (3, hidden))
    b1 = np.zeros(hidden)
    w2 = np.zeros((hidden, 1 + feat_width))
    w2[:, 0] = rng.normal(np.sqrt(np.pi) / np.sqrt(hidden), 1e-4, hidden)
    w2[:, 1:] = rng.normal(0.0, np.sqrt(2.0 / hidden), (hidden, feat_width))
    b2 = np.zeros(1 + feat_width)
    b2[0] = -sphere_radius
    return {"geo.w1": w1, "geo.b1": b1, "geo.w2": w2, "geo.b2": b2}


def init_color_net(rng, in_dim, hidden, prefix="col"):
    w1 = rng.normal(0.0, np.sqrt(2.0 / in_dim), (in_dim, hidden))
    b1 = np.zeros(hidden)
    w2 = rng.normal(0.0, 0.05, (hidden, 3))
    b2 = np.zeros(3)
    return {f"{prefix}.w1": w1, f"{prefix}.b1": b1,
            f"{prefix}.w2": w2, f"{prefix}.b2": b2}


def init_deflection_net(rng, in_dim, hidden, prefix="defl"):
    """Same shape as the color net; output biased to axis x, half-angle pi/2."""
    w1 = rng.normal(0.0, np.sqrt(2.0 / in_dim), (in_dim, hidden))
    b1 = np.zeros(hidden)
    w2 = rng.normal(0.0, 1e-4, (hidden, 4))
    b2 = np.array([0.0, 1.0, 0.0, 0.0])
    return {f"{prefix}.w1": w1, f"{prefix}.b1": b1,
            f"{prefix}.w2": w2, f"{prefix}.b2": b2}


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

GEOMETRY_SOFTPLUS_BETA = 100.0


def geometry_forward(params, feats, softplus_beta=GEOMETRY_SOFTPLUS_BETA):
    """Full geometry pass: returns (sdf (N,), latent feature (N, Z))."""
    h = ad.softplus(feats @ params["geo.w1"] + params["geo.b1"], softplus_beta)
    out = h @ params["geo.w2"] + params["geo.b2"]
    n = out.shape[0]
    sdf = out[:, :1].reshape((n,))
    z = out[:, 1:]
    return sdf, z


def geometry_sdf(params, feats, softplus_beta=GEOMETRY_SOFTPLUS_BETA):
    """SDF head only (used for stencil evaluations; skips the latent columns)."""
    h = ad.softplus(feats @ params["geo.w1"] + params["geo.b1"], softplus_beta)
    out = h @ params["geo.w2"][:, :1] + params["geo.b2"][:1]
    return out.reshape((out.shape[0],))


def color_forward(params, x, v, n, z, prefix="col"):
    """Sigmoid-bounded RGB from position, view, normal and latent feature."""
    feats = ad.concat([x, v, n, z], axis=1)
    h = ad.relu(feats @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    return ad.sigmoid(h @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"])


def deflection_forward(params, x, v, n, z, prefix="defl"):
    """Unit deflection quaternion per point; zero-norm raw outputs fall back
    to the identity rotation. Returns (quaternion, fallback event count)."""
    feats = ad.concat([x, v, n, z], axis=1)
    h = ad.relu(feats @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    raw = h @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]
    q, degenerate = quat_normalize_safe(raw)
    return q, int(degenerate.sum())


# ---------------------------------------------------------------------------
# quaternion algebra
# ---------------------------------------------------------------------------

def _col(q, i):
    return q[..., i:i + 1]


def quat_identity(n):
    out = np.zeros((n, 4))
    out[:, 0] = 1.0
    return out


def quat_normalize_safe(q, eps=1e-12):
    """Normalize rows of (..., 4); rows with ~zero norm become the identity.

    Returns (unit quaternions, boolean mask of degenerate rows).
    """
    sq = ad.dot_rows(q, q)
    degenerate = (ad.value_of(sq) < eps * eps).reshape(-1)
    safe = ad.where(degenerate[:, None], np.ones_like(ad.value_of(sq)), sq)
    unit = q / ad.sqrt(safe)
    ident = quat_identity(ad.value_of(q).shape[0])
    mask = np.broadcast_to(degenerate[:, None], ident.shape)
    return ad.where(mask, ident, unit), degenerate


def quat_mul(a, b):
    aw, ax, ay, az = (_col(a, i) for i in range(4))
    bw, bx, by, bz = (_col(b, i) for i in range(4))
    return ad.concat([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conjugate(q):
    return ad.concat([_col(q, 0), -_col(q, 1), -_col(q, 2), -_col(q, 3)],
                     axis=-1)


def quat_rotate(q, v):
    """Rotate 3-vectors v by unit quaternions q: vector part of q (0,v) q*."""
    zeros = np.zeros((ad.value_of(v).shape[0], 1))
    pure = ad.concat([zeros, v], axis=-1)
    out = quat_mul(quat_mul(q, pure), quat_conjugate(q))
    return out[..., 1:]


def quat_decompose(q, eps=1e-7):
    """Split unit quaternions into (axis, half_angle).

    Near-identity rotations (sin(theta/2) < eps) use the fallback axis
    (0, 0, 1) and half-angle exactly 0.  For unit quaternions sin(theta/2)
    equals the vector-part norm, which stays accurate where arccos saturates.
    """
    w = _col(q, 0)
    vec = q[..., 1:]
    s = ad.norm_rows(vec)
    degenerate = ad.value_of(s) < eps
    half = ad.arccos(w)
    safe_s = ad.where(degenerate, np.ones_like(ad.value_of(s)), s)
    axis = vec / safe_s
    n = ad.value_of(q).shape[0]
    fallback = np.tile(np.array([0.0, 0.0, 1.0]), (n, 1))
    axis = ad.where(np.broadcast_to(degenerate, (n, 3)), fallback, axis)
    half = ad.where(degenerate, np.zeros_like(ad.value_of(half)), half)
    return axis, half


def quat_compose(axis, half_angle):
    return ad.concat([ad.cos(half_angle), ad.sin(half_angle) * axis], axis=-1)


def quat_anneal(q, rendered_normal, prog_q, eps=1e-7):
    """Warm-up blend: scale the angle by prog_q and slide the axis from the
    rendered scene normal toward the learned axis.  prog_q=0 yields the exact
    identity quaternion; prog_q=1 reproduces q (up to decompose round-trip)."""
    axis, half = quat_decompose(q)
    half_iter = half * float(prog_q)
    blend = axis * float(prog_q) + rendered_normal * float(1.0 - prog_q)
    norm_sq = ad.dot_rows(blend, blend)
    degenerate = ad.value_of(norm_sq) < eps * eps
    safe = ad.where(degenerate, np.ones_like(ad.value_of(norm_sq)), norm_sq)
    unit = blend / ad.sqrt(safe)
    n = ad.value_of(q).shape[0]
    mask3 = np.broadcast_to(degenerate, (n, 3))
    axis_iter = ad.where(mask3, rendered_normal, unit)
    return quat_compose(axis_iter, half_iter)


@dataclass
class WarmupSchedule:
    """Linear ramp of the deflection strength over the first fraction of
    training; prog_q = clamp(step / (anneal_quat_end * total), 0, 1)."""
    anneal_quat_end: float = 0.2

    def prog_q(self, step, total_steps):
        horizon = self.anneal_quat_end * total_steps
        if horizon <= 0:
            return 1.0
        return float(np.clip(step / horizon, 0.0, 1.0))
