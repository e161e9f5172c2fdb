"""Per-image deflection-angle maps and the three angle-guided mechanisms:
pixel sampling, photometric re-weighting, and bias confidence for partial
unbiased rendering.

The maintained map is a running max with decay, so a pixel's entry never
exceeds the largest angle ever observed there.  Only pixels sampled in a step
are updated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class GuidanceParams:
    s1: float = 25.0
    theta1: float = np.pi / 12.0
    t1: float = 4.0
    s2: float = 25.0
    theta2: float = np.pi / 12.0
    t2: float = 2.0
    s3: float = 25.0
    theta3: float = np.pi / 18.0
    decay: float = 0.99       # angle-map decay coefficient
    activation_progress: float = 0.2

    def __post_init__(self):
        for s, t in ((self.s1, self.t1), (self.s2, self.t2), (self.s3, 1.0)):
            if s <= 0 or t <= 0:
                raise ValueError("guidance steepness/span must be positive")
        for th in (self.theta1, self.theta2, self.theta3):
            if not (0.0 < th < np.pi):
                raise ValueError("guidance offsets must lie in (0, pi)")


class AngleMap:
    """Per-image, per-pixel maintained deflection angles (radians)."""

    def __init__(self, n_images, height, width, decay=0.99):
        if not (0.0 < decay < 1.0):
            raise ValueError("decay must lie in (0, 1)")
        self.decay = decay
        self.values = np.zeros((n_images, height, width))

    @property
    def shape(self):
        return self.values.shape

    def update(self, image_id, rows, cols, angles):
        """max-with-decay update at the sampled pixels; duplicate pixels in a
        batch contribute their largest current angle, decay applies once."""
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        angles = np.asarray(angles, dtype=np.float64)
        flat = rows * self.values.shape[2] + cols
        order = np.argsort(flat, kind="stable")
        flat_sorted = flat[order]
        ang_sorted = angles[order]
        uniq, start = np.unique(flat_sorted, return_index=True)
        maxima = np.maximum.reduceat(ang_sorted, start)
        r = uniq // self.values.shape[2]
        c = uniq % self.values.shape[2]
        old = self.values[image_id, r, c]
        self.values[image_id, r, c] = np.maximum(old * self.decay, maxima)

    def state(self):
        return self.values

    def load_state(self, values):
        if values.shape != self.values.shape:
            raise ValueError("angle map shape mismatch")
        self.values = np.array(values, dtype=np.float64)


def sampling_probability(angle_map_image, params, active=True):
    """Normalized per-pixel sampling distribution for one image.

    Raw probabilities live in [1, 1 + t1]; inactive guidance is uniform.
    """
    h, w = angle_map_image.shape
    if not active:
        return np.full(h * w, 1.0 / (h * w))
    raw = 1.0 + params.t1 * _logistic(
        params.s1 * (angle_map_image.ravel() - params.theta1))
    return raw / raw.sum()


def sample_pixels(prob, count, rng):
    """i.i.d. inverse-CDF draws from a flat probability array."""
    cdf = np.cumsum(prob)
    cdf[-1] = 1.0
    u = rng.random(count)
    return np.searchsorted(cdf, u, side="right")


def color_weight(delta_theta, params, active=True):
    """Photometric re-weighting in [1, 1 + t2] from the current angle."""
    if not active:
        return np.ones_like(np.asarray(delta_theta, dtype=np.float64))
    return 1.0 + params.t2 * _logistic(
        params.s2 * (np.asarray(delta_theta, dtype=np.float64) - params.theta2))


def bias_confidence(map_entries, params, active=True):
    """Unbiasing confidence from the maintained (not current) angle map."""
    entries = np.asarray(map_entries, dtype=np.float64)
    if not active:
        return np.zeros_like(entries)
    return _logistic(params.s3 * (entries - params.theta3))
