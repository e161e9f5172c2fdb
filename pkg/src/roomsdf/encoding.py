"""Multi-resolution hash-grid encoding and stencil derivatives of the SDF.

The grid lookup is the single hottest operation in the pipeline, so its
forward interpolation and the scatter of adjoints back into the feature table
are implemented as numba kernels (with numpy fallbacks kept for verification
and for environments without numba).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

try:
    from numba import njit, prange
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

# per-axis primes for the spatial hash (XOR-folded, masked to table size)
_P1 = np.int64(2654435761)
_P2 = np.int64(805459861)
_P3 = np.int64(3674653429)


@dataclass
class HashGridConfig:
    levels: int = 16
    base_resolution: int = 32
    max_resolution: int = 2048
    features_per_level: int = 2
    log2_table_size: int = 19
    active_init: int = 8
    activation_interval: int = 2000

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if not (1 <= self.active_init <= self.levels):
            raise ValueError("active_init must lie in [1, levels]")

    @property
    def table_size(self):
        return 1 << self.log2_table_size

    @property
    def table_rows(self):
        return self.levels * self.table_size

    def resolutions(self):
        """Geometric progression of per-level resolutions, base to max."""
        if self.levels == 1:
            return np.array([self.base_resolution], dtype=np.int64)
        g = (self.max_resolution / self.base_resolution) ** (
            1.0 / (self.levels - 1))
        res = np.round(self.base_resolution * g ** np.arange(self.levels))
        return res.astype(np.int64)

    def level_offsets(self):
        return (np.arange(self.levels, dtype=np.int64) * self.table_size)

    def init_table(self, rng, scale=1e-4):
        return rng.uniform(-scale, scale,
                           (self.table_rows, self.features_per_level))


def set_active_levels(step, config):
    """Progressive level schedule: one extra level per activation interval."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return min(config.levels,
               config.active_init + step // config.activation_interval)


# ---------------------------------------------------------------------------
# interpolation kernels
# ---------------------------------------------------------------------------

def _encode_forward_np(x, res, offsets, mask, table, n_feat):
    n = x.shape[0]
    n_levels = res.shape[0]
    out = np.zeros((n, n_levels * n_feat))
    x01 = (x + 1.0) * 0.5
    for l in range(n_levels):
        p = x01 * res[l]
        i0 = np.floor(p).astype(np.int64)
        f = p - i0
        acc = np.zeros((n, n_feat))
        for c in range(8):
            cx, cy, cz = c & 1, (c >> 1) & 1, (c >> 2) & 1
            w = ((f[:, 0] if cx else 1.0 - f[:, 0])
                 * (f[:, 1] if cy else 1.0 - f[:, 1])
                 * (f[:, 2] if cz else 1.0 - f[:, 2]))
            h = (((i0[:, 0] + cx) * _P1)
                 ^ ((i0[:, 1] + cy) * _P2)
                 ^ ((i0[:, 2] + cz) * _P3)) & mask
            acc += w[:, None] * table[offsets[l] + h]
        out[:, l * n_feat:(l + 1) * n_feat] = acc
    return out


def _encode_backward_np(x, res, offsets, mask, grad, table_shape):
    n = x.shape[0]
    n_levels = res.shape[0]
    n_feat = table_shape[1]
    dtable = np.zeros(table_shape)
    x01 = (x + 1.0) * 0.5
    for l in range(n_levels):
        p = x01 * res[l]
        i0 = np.floor(p).astype(np.int64)
        f = p - i0
        g = grad[:, l * n_feat:(l + 1) * n_feat]
        for c in range(8):
            cx, cy, cz = c & 1, (c >> 1) & 1, (c >> 2) & 1
            w = ((f[:, 0] if cx else 1.0 - f[:, 0])
                 * (f[:, 1] if cy else 1.0 - f[:, 1])
                 * (f[:, 2] if cz else 1.0 - f[:, 2]))
            h = offsets[l] + ((((i0[:, 0] + cx) * _P1)
                               ^ ((i0[:, 1] + cy) * _P2)
                               ^ ((i0[:, 2] + cz) * _P3)) & mask)
            contrib = w[:, None] * g
            for feat in range(n_feat):
                dtable[:, feat] += np.bincount(
                    h, weights=contrib[:, feat], minlength=table_shape[0])
    return dtable


if _HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def _encode_forward_nb(x, res, offsets, mask, table, out):  # pragma: no cover
        n = x.shape[0]
        n_levels = res.shape[0]
        n_feat = table.shape[1]
        for i in prange(n):
            px0 = (x[i, 0] + 1.0) * 0.5
            py0 = (x[i, 1] + 1.0) * 0.5
            pz0 = (x[i, 2] + 1.0) * 0.5
            for l in range(n_levels):
                r = res[l]
                px = px0 * r
                py = py0 * r
                pz = pz0 * r
                ix = np.int64(np.floor(px))
                iy = np.int64(np.floor(py))
                iz = np.int64(np.floor(pz))
                fx = px - ix
                fy = py - iy
                fz = pz - iz
                for feat in range(n_feat):
                    out[i, l * n_feat + feat] = 0.0
                for c in range(8):
                    cx = c & 1
                    cy = (c >> 1) & 1
                    cz = (c >> 2) & 1
                    w = ((fx if cx else 1.0 - fx)
                         * (fy if cy else 1.0 - fy)
                         * (fz if cz else 1.0 - fz))
                    h = ((((ix + cx) * _P1)
                          ^ ((iy + cy) * _P2)
                          ^ ((iz + cz) * _P3)) & mask)
                    row = offsets[l] + h
                    for feat in range(n_feat):
                        out[i, l * n_feat + feat] += w * table[row, feat]

    @njit(cache=True)
    def _encode_backward_nb(x, res, offsets, mask, grad, dtable):  # pragma: no cover
        n = x.shape[0]
        n_levels = res.shape[0]
        n_feat = dtable.shape[1]
        for i in range(n):
            px0 = (x[i, 0] + 1.0) * 0.5
            py0 = (x[i, 1] + 1.0) * 0.5
            pz0 = (x[i, 2] + 1.0) * 0.5
            for l in range(n_levels):
                r = res[l]
                px = px0 * r
                py = py0 * r
                pz = pz0 * r
                ix = np.int64(np.floor(px))
                iy = np.int64(np.floor(py))
                iz = np.int64(np.floor(pz))
                fx = px - ix
                fy = py - iy
                fz = pz - iz
                for c in range(8):
                    cx = c & 1
                    cy = (c >> 1) & 1
                    cz = (c >> 2) & 1
                    w = ((fx if cx else 1.0 - fx)
                         * (fy if cy else 1.0 - fy)
                         * (fz if cz else 1.0 - fz))
                    h = ((((ix + cx) * _P1)
                          ^ ((iy + cy) * _P2)
                          ^ ((iz + cz) * _P3)) & mask)
                    row = offsets[l] + h
                    for feat in range(n_feat):
                        dtable[row, feat] += w * grad[i, l * n_feat + feat]


def _forward_impl(x, res, offsets, mask, table, n_feat, use_numba):
    if use_numba and _HAVE_NUMBA:
        out = np.empty((x.shape[0], res.shape[0] * n_feat))
        _encode_forward_nb(x, res, offsets, np.int64(mask), table, out)
        return out
    return _encode_forward_np(x, res, offsets, mask, table, n_feat)


def _backward_impl(x, res, offsets, mask, grad, table_shape, use_numba):
    if use_numba and _HAVE_NUMBA:
        dtable = np.zeros(table_shape)
        _encode_backward_nb(x, res, offsets, np.int64(mask), grad, dtable)
        return dtable
    return _encode_backward_np(x, res, offsets, mask, grad, table_shape)


def _grid_forward(values, aux):
    (table,) = values
    x, res, offsets, mask, n_feat, n_levels, use_numba = aux
    n_active = res.shape[0]
    active = _forward_impl(x, res, offsets, mask, table, n_feat, use_numba)
    if n_active == n_levels:
        return active
    out = np.zeros((x.shape[0], n_levels * n_feat))
    out[:, :n_active * n_feat] = active  # inactive levels stay exactly zero
    return out


def _grid_vjp(values, aux, grad):
    (table,) = values
    x, res, offsets, mask, n_feat, n_levels, use_numba = aux
    n_active = res.shape[0]
    g = grad[:, :n_active * n_feat]
    g = np.ascontiguousarray(g)
    dtable = _backward_impl(x, res, offsets, mask, g, table.shape, use_numba)
    return [(0, dtable)]


_GRID_OP = ad.CustomOp("hashgrid", _grid_forward, _grid_vjp)


def grid_encode(table, x, config, active_levels=None, use_numba=True):
    """Trilinear hash-grid features for points `x` in [-1, 1]^3.

    Returns an (N, levels * features_per_level) array/Var; slots of inactive
    levels are exactly zero.  `table` may be a Var (training) or ndarray.
    """
    if active_levels is None:
        active_levels = config.levels
    active_levels = int(np.clip(active_levels, 1, config.levels))
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    res = config.resolutions()[:active_levels]
    offsets = config.level_offsets()[:active_levels]
    aux = (x, res, offsets, config.table_size - 1,
           config.features_per_level, config.levels, use_numba)
    if isinstance(table, ad.Var):
        return table.tape.apply_custom(_GRID_OP, (table,), aux=aux)
    return _grid_forward([np.asarray(table, dtype=np.float64)], aux)


def positional_encoding(x, bands=6):
    """Sinusoidal features (sin/cos of 2^k * pi * x per axis)."""
    x = np.asarray(x, dtype=np.float64)
    if bands == 0:
        return np.zeros((x.shape[0], 0))
    freqs = (2.0 ** np.arange(bands)) * np.pi
    ang = x[:, None, :] * freqs[None, :, None]  # (N, bands, 3)
    out = np.concatenate([np.sin(ang), np.cos(ang)], axis=2)
    return out.reshape(x.shape[0], bands * 6)


@dataclass
class EncodedPoint:
    """Full network input for a point batch plus a domain-clamp flag."""
    position: np.ndarray
    features: object  # Var or ndarray: concat(x, PE(x), grid features)
    clamped: np.ndarray


def encode_position(x, config, table, active_levels=None, pe_bands=6,
                    use_numba=True):
    x = np.asarray(x, dtype=np.float64)
    clamped = np.any(np.abs(x) > 1.0, axis=1)
    xc = np.clip(x, -1.0, 1.0)
    grid = grid_encode(table, xc, config, active_levels, use_numba=use_numba)
    pe = positional_encoding(xc, pe_bands)
    feats = ad.concat([xc, pe, grid], axis=1)
    return EncodedPoint(position=xc, features=feats, clamped=clamped)


# ---------------------------------------------------------------------------
# stencil derivatives of a scalar field
# ---------------------------------------------------------------------------

def _stencil_points(x, eps):
    n = x.shape[0]
    pts = np.empty((6 * n, 3))
    for axis in range(3):
        off = np.zeros(3)
        off[axis] = eps
        pts[2 * axis * n:(2 * axis + 1) * n] = x + off
        pts[(2 * axis + 1) * n:(2 * axis + 2) * n] = x - off
    return pts


def numerical_gradient(sdf_fn, x, eps):
    """Central difference per axis; exactly 6 field evaluations."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    f = sdf_fn(_stencil_points(x, eps))
    cols = []
    for axis in range(3):
        plus = f[2 * axis * n:(2 * axis + 1) * n]
        minus = f[(2 * axis + 1) * n:(2 * axis + 2) * n]
        cols.append(((plus - minus) / (2.0 * eps)).reshape(n, 1))
    return ad.concat(cols, axis=1)


def numerical_laplacian(sdf_fn, x, eps, center=None):
    """Sum of per-axis second differences."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if center is None:
        center = sdf_fn(x)
    f = sdf_fn(_stencil_points(x, eps))
    lap = None
    for axis in range(3):
        plus = f[2 * axis * n:(2 * axis + 1) * n]
        minus = f[(2 * axis + 1) * n:(2 * axis + 2) * n]
        term = plus + minus - 2.0 * center
        lap = term if lap is None else lap + term
    return lap / (eps * eps)


def gradient_and_laplacian(sdf_fn, x, eps, center):
    """Both stencil quantities from one shared set of 6 evaluations."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    f = sdf_fn(_stencil_points(x, eps))
    cols = []
    lap = None
    for axis in range(3):
        plus = f[2 * axis * n:(2 * axis + 1) * n]
        minus = f[(2 * axis + 1) * n:(2 * axis + 2) * n]
        cols.append(((plus - minus) / (2.0 * eps)).reshape(n, 1))
        term = plus + minus - 2.0 * center
        lap = term if lap is None else lap + term
    return ad.concat(cols, axis=1), lap / (eps * eps)


def stencil_eps_for(config, active_levels):
    """Derivative step tied to the finest active level's cell size."""
    res = config.resolutions()[active_levels - 1]
    return 1.0 / float(res)
