"""Synthetic analytic scenes and the prior oracle.

A scene is a min-union of primitives whose SDFs are positive in free space
(the room shell is the complement of the interior box, so its "inside" is the
wall material).  The oracle sphere-traces exact first intersections, shades
them with a fixed directional light, and the corruption model distorts the
resulting depth/normal cues deterministically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from . import evalmesh

MASK_VALID = 1   # bit 0: prior usable at this pixel
MASK_FLAT = 2    # bit 1: pixel lies on a planar region


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _box_sdf(d, half):
    q = np.abs(d) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


def _box_grad(d, half):
    q = np.abs(d) - half
    outside = np.maximum(q, 0.0)
    norm = np.linalg.norm(outside, axis=-1, keepdims=True)
    out_grad = np.sign(d) * outside / np.where(norm < 1e-12, 1.0, norm)
    axis = np.argmax(q, axis=-1)
    in_grad = np.zeros_like(d)
    rows = np.arange(d.shape[0])
    in_grad[rows, axis] = np.sign(d[rows, axis])
    # points within rounding of a face use the face normal (inside branch)
    is_out = norm[:, 0] > 1e-12
    return np.where(is_out[:, None], out_grad, in_grad)


@dataclass
class Sphere:
    center: tuple
    radius: float
    albedo: tuple = (0.7, 0.7, 0.7)
    flat: bool = False

    def sdf(self, x):
        return np.linalg.norm(x - np.asarray(self.center), axis=-1) - self.radius

    def gradient(self, x):
        d = x - np.asarray(self.center)
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        return d / np.where(n < 1e-12, 1.0, n)


@dataclass
class Box:
    center: tuple
    half: tuple
    albedo: tuple = (0.7, 0.7, 0.7)
    flat: bool = True

    def sdf(self, x):
        return _box_sdf(x - np.asarray(self.center), np.asarray(self.half))

    def gradient(self, x):
        return _box_grad(x - np.asarray(self.center), np.asarray(self.half))


@dataclass
class RoomShell:
    """Walls of a box room: free space inside, solid beyond the faces."""
    half: tuple
    albedo: tuple = (0.7, 0.7, 0.7)
    flat: bool = True
    center: tuple = (0.0, 0.0, 0.0)

    def sdf(self, x):
        return -_box_sdf(x - np.asarray(self.center), np.asarray(self.half))

    def gradient(self, x):
        return -_box_grad(x - np.asarray(self.center), np.asarray(self.half))


@dataclass
class CylinderZ:
    """Capped vertical cylinder (axis along z)."""
    center: tuple
    radius: float
    half_height: float
    albedo: tuple = (0.7, 0.7, 0.7)
    flat: bool = False

    def _q(self, x):
        d = x - np.asarray(self.center)
        qr = np.hypot(d[:, 0], d[:, 1]) - self.radius
        qz = np.abs(d[:, 2]) - self.half_height
        return d, qr, qz

    def sdf(self, x):
        _, qr, qz = self._q(x)
        q = np.stack([qr, qz], axis=-1)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def gradient(self, x):
        d, qr, qz = self._q(x)
        rad = np.hypot(d[:, 0], d[:, 1])
        radial = np.zeros_like(d)
        safe = np.where(rad < 1e-12, 1.0, rad)
        radial[:, 0] = d[:, 0] / safe
        radial[:, 1] = d[:, 1] / safe
        axial = np.zeros_like(d)
        axial[:, 2] = np.sign(d[:, 2])
        q = np.stack([qr, qz], axis=-1)
        qpos = np.maximum(q, 0.0)
        norm = np.linalg.norm(qpos, axis=-1, keepdims=True)
        out_grad = (radial * qpos[:, :1] + axial * qpos[:, 1:]) / np.where(
            norm < 1e-12, 1.0, norm)
        in_grad = np.where((qr > qz)[:, None], radial, axial)
        is_out = norm[:, 0] > 1e-12
        return np.where(is_out[:, None], out_grad, in_grad)


@dataclass
class SceneSpec:
    name: str
    primitives: list
    light_dir: tuple = (0.35, 0.25, 0.9)
    ambient: float = 0.35
    domain_half: float = 1.0

    def light(self):
        l = np.asarray(self.light_dir, dtype=np.float64)
        return l / np.linalg.norm(l)


def room_thin():
    """Benchmark room: 1.6^3 shell, a sphere, a box, and a thin-legged table."""
    prims = [
        RoomShell(half=(0.8, 0.8, 0.8), albedo=(0.74, 0.72, 0.68)),
        Sphere(center=(-0.38, 0.16, -0.575), radius=0.25,
               albedo=(0.67, 0.26, 0.21)),
        Box(center=(0.44, -0.40, -0.672), half=(0.13, 0.11, 0.14),
            albedo=(0.22, 0.32, 0.62)),
        Box(center=(-0.05, 0.47, -0.435), half=(0.21, 0.17, 0.022),
            albedo=(0.58, 0.38, 0.20)),  # table top slab
    ]
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            prims.append(CylinderZ(
                center=(-0.05 + 0.155 * sx, 0.47 + 0.115 * sy, -0.627),
                radius=0.015, half_height=0.178,
                albedo=(0.28, 0.22, 0.16)))
    return SceneSpec(name="room-thin", primitives=prims)


SCENE_PRESETS = {"room-thin": room_thin}


def scene_sdf(spec, x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    values = np.stack([p.sdf(x) for p in spec.primitives], axis=0)
    return values.min(axis=0)


def scene_sdf_eval(spec, x):
    """Min-union SDF with the winning primitive's analytic normal and id."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    values = np.stack([p.sdf(x) for p in spec.primitives], axis=0)
    winner = values.argmin(axis=0)
    sdf = values[winner, np.arange(x.shape[0])]
    normal = np.zeros_like(x)
    for i, prim in enumerate(spec.primitives):
        sel = winner == i
        if np.any(sel):
            normal[sel] = prim.gradient(x[sel])
    return sdf, normal, winner


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------

@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    c2w: np.ndarray  # 4x4 world-from-camera
    split: str = "train"

    def rotation(self):
        return self.c2w[:3, :3]

    def position(self):
        return self.c2w[:3, 3]

    def to_json(self):
        return {
            "intrinsics": {"fx": self.fx, "fy": self.fy, "cx": self.cx,
                           "cy": self.cy, "width": self.width,
                           "height": self.height},
            "pose_world_from_camera": [float(v) for v in self.c2w.ravel()],
            "split": self.split,
        }

    @staticmethod
    def from_json(obj):
        intr = obj["intrinsics"]
        pose = np.asarray(obj["pose_world_from_camera"],
                          dtype=np.float64).reshape(4, 4)
        return Camera(fx=intr["fx"], fy=intr["fy"], cx=intr["cx"],
                      cy=intr["cy"], width=intr["width"],
                      height=intr["height"], c2w=pose,
                      split=obj.get("split", "train"))


def look_at_pose(position, target, up=(0.0, 0.0, 1.0)):
    """OpenCV-style camera axes: x right, y down, z forward."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(forward, up) / np.linalg.norm(up)) > 0.999:
        up = np.array([0.0, 1.0, 0.001])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = down
    c2w[:3, 2] = forward
    c2w[:3, 3] = position
    return c2w


def pixel_rays(camera, rows, cols):
    """World-space rays through pixel centers."""
    u = (np.asarray(cols, dtype=np.float64) + 0.5 - camera.cx) / camera.fx
    v = (np.asarray(rows, dtype=np.float64) + 0.5 - camera.cy) / camera.fy
    dirs_cam = np.stack([u, v, np.ones_like(u)], axis=-1)
    dirs = dirs_cam @ camera.rotation().T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.position(), dirs.shape).copy()
    return origins, dirs


def generate_cameras(spec, n_views, seed, width=96, height=96, fov_deg=70.0,
                     n_test=0, orbit_radius=0.58):
    """Interior orbit of pinhole cameras, all in free space facing content."""
    if n_views < 2:
        raise ValueError("need at least two views")
    rng = np.random.default_rng(seed)
    fx = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
    fy = fx
    total = n_views + n_test
    cameras = []
    k = 0
    attempts = 0
    while k < total:
        attempts += 1
        if attempts > 50 * total:
            raise RuntimeError("camera placement failed")
        phi = 2.0 * np.pi * (k / total) + rng.normal(0.0, 0.08)
        radius = orbit_radius + rng.uniform(-0.03, 0.03)
        z = rng.uniform(-0.18, 0.3)
        pos = np.array([radius * np.cos(phi), radius * np.sin(phi), z])
        target = np.array([rng.uniform(-0.22, 0.22),
                           rng.uniform(-0.22, 0.22),
                           rng.uniform(-0.45, 0.05)])
        if np.linalg.norm(target - pos) < 0.3:
            continue
        # strictly inside the room and clear of every solid
        if np.max(np.abs(pos)) > 0.74 or scene_sdf(spec, pos[None])[0] < 0.06:
            continue
        cam = Camera(fx=fx, fy=fy, cx=width / 2.0, cy=height / 2.0,
                     width=width, height=height,
                     c2w=look_at_pose(pos, target),
                     split="train" if k < n_views else "test")
        o, d = pixel_rays(cam, np.array([height // 2]), np.array([width // 2]))
        hit, t, _ = sphere_trace(spec, o, d, t_max=4.0)
        if not hit[0] or t[0] < 0.2:
            continue
        cameras.append(cam)
        k += 1
    return cameras


# ---------------------------------------------------------------------------
# oracle rendering
# ---------------------------------------------------------------------------

def sphere_trace(spec, origins, dirs, t_max=4.0, tol=1e-10, max_iter=256):
    """Exact first intersections: march by the SDF, then Newton-polish."""
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    n = origins.shape[0]
    t = np.full(n, 1e-4)
    active = np.ones(n, dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        x = origins[active] + t[active, None] * dirs[active]
        s = scene_sdf(spec, x)
        t[active] = t[active] + s
        still = (s > tol) & (t[active] <= t_max)
        idx = np.flatnonzero(active)
        active[idx[~still]] = False
    hit = t <= t_max
    # Newton refinement against the directional derivative
    for _ in range(3):
        sel = hit
        x = origins[sel] + t[sel, None] * dirs[sel]
        s, normal, _ = scene_sdf_eval(spec, x)
        deriv = np.einsum("ij,ij->i", normal, dirs[sel])
        deriv = np.where(np.abs(deriv) < 0.05, -1.0, deriv)
        t[sel] = t[sel] - s / deriv
    x = origins + t[:, None] * dirs
    _, normal, prim = scene_sdf_eval(spec, x)
    return hit, t, (normal, prim)


def shade(spec, normal, prim_id):
    albedo = np.stack([np.asarray(spec.primitives[i].albedo)
                       for i in prim_id])
    lam = np.clip(np.einsum("ij,j->i", normal, spec.light()), 0.0, None)
    rgb = albedo * (spec.ambient + (1.0 - spec.ambient) * lam)[:, None]
    return np.clip(rgb, 0.0, 1.0)


@dataclass
class ViewRender:
    rgb: np.ndarray            # (H, W, 3) float in [0, 1]
    depth: np.ndarray          # (H, W) ray lengths
    normal_world: np.ndarray   # (H, W, 3) unit, air side
    hit: np.ndarray            # (H, W) bool
    flat: np.ndarray           # (H, W) bool
    prim_id: np.ndarray        # (H, W) int


def oracle_render(spec, camera):
    """Ground-truth color/depth/normal/flat-mask images for one camera."""
    h, w = camera.height, camera.width
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    origins, dirs = pixel_rays(camera, rows.ravel(), cols.ravel())
    hit, t, (normal, prim) = sphere_trace(spec, origins, dirs)
    rgb = shade(spec, normal, prim)
    flat = np.array([spec.primitives[i].flat for i in prim])
    return ViewRender(
        rgb=rgb.reshape(h, w, 3),
        depth=np.where(hit, t, 0.0).reshape(h, w),
        normal_world=normal.reshape(h, w, 3),
        hit=hit.reshape(h, w),
        flat=(flat & hit).reshape(h, w),
        prim_id=prim.reshape(h, w),
    )


# ---------------------------------------------------------------------------
# prior corruption
# ---------------------------------------------------------------------------

@dataclass
class PriorCorruption:
    flat_rotation_deg: float = 0.0
    rotation_axis: tuple = (1.0, 1.0, 1.0)
    complex_noise_deg: float = 0.0
    depth_scale: float = 1.0
    depth_shift: float = 0.0
    invalid_fraction: float = 0.0

    def axis(self):
        a = np.asarray(self.rotation_axis, dtype=np.float64)
        return a / np.linalg.norm(a)


def rotate_toward_axis(normals, axis, angle_rad):
    """Rotate each normal by exactly `angle_rad` in its plane toward `axis`."""
    n = np.atleast_2d(normals)
    a = np.asarray(axis, dtype=np.float64)
    w = np.cross(n, a[None, :])
    wn = np.linalg.norm(w, axis=-1, keepdims=True)
    parallel = wn[:, 0] < 1e-8
    if np.any(parallel):
        jitter = a + np.array([1e-3, -1.3e-3, 0.7e-3])
        w[parallel] = np.cross(n[parallel], jitter[None, :])
        wn = np.linalg.norm(w, axis=-1, keepdims=True)
    k = w / wn
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    kxn = np.cross(k, n)
    kdn = np.einsum("ij,ij->i", k, n)[:, None]
    return n * c + kxn * s + k * kdn * (1.0 - c)


def _random_perp_rotation(normals, angles_rad, rng):
    n = np.atleast_2d(normals)
    raw = rng.standard_normal(n.shape)
    perp = raw - np.einsum("ij,ij->i", raw, n)[:, None] * n
    norm = np.linalg.norm(perp, axis=-1, keepdims=True)
    k = perp / np.where(norm < 1e-12, 1.0, norm)
    c = np.cos(angles_rad)[:, None]
    s = np.sin(angles_rad)[:, None]
    kxn = np.cross(k, n)
    return n * c + kxn * s  # k perpendicular to n, so the k (k.n) term drops


def corrupt_priors(render, corruption, rng):
    """Distorted depth/normal priors plus the validity mask for one view.

    Returns (prior_depth, prior_normal_world, mask_bits).
    """
    h, w = render.depth.shape
    normals = render.normal_world.reshape(-1, 3).copy()
    flat = render.flat.ravel()
    if corruption.flat_rotation_deg != 0.0 and np.any(flat):
        normals[flat] = rotate_toward_axis(
            normals[flat], corruption.axis(),
            np.radians(corruption.flat_rotation_deg))
    complex_sel = (~flat) & render.hit.ravel()
    if corruption.complex_noise_deg > 0.0 and np.any(complex_sel):
        angles = np.abs(rng.normal(
            0.0, np.radians(corruption.complex_noise_deg),
            int(complex_sel.sum())))
        normals[complex_sel] = _random_perp_rotation(
            normals[complex_sel], angles, rng)
    depth = corruption.depth_scale * render.depth + corruption.depth_shift
    valid = render.hit.copy().ravel()
    if corruption.invalid_fraction > 0.0:
        valid &= rng.random(h * w) >= corruption.invalid_fraction
    mask = (valid.astype(np.uint8) * MASK_VALID
            | (flat & valid).astype(np.uint8) * MASK_FLAT)
    return depth, normals.reshape(h, w, 3), mask.reshape(h, w)


# ---------------------------------------------------------------------------
# dataset I/O
# ---------------------------------------------------------------------------

def write_dataset(path, spec_name, cameras, renders, priors, corruption,
                  scene_seed, gt_mesh=None):
    """Write the on-disk dataset layout consumed by the trainer.

    rgb as 8-bit PNG, depth/normal priors as little-endian float32 raw files,
    masks as PNG bitfields, cameras and corruption metadata as JSON.
    """
    path = Path(path)
    for sub in ("rgb", "depth_prior", "normal_prior", "mask"):
        (path / sub).mkdir(parents=True, exist_ok=True)
    views = []
    for i, (cam, render, (p_depth, p_normal_cam, p_mask)) in enumerate(
            zip(cameras, renders, priors)):
        rgb8 = np.clip(np.round(render.rgb * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb8).save(path / "rgb" / f"{i:04d}.png")
        p_depth.astype("<f4").tofile(path / "depth_prior" / f"{i:04d}.f32")
        p_normal_cam.astype("<f4").tofile(path / "normal_prior" / f"{i:04d}.f32")
        Image.fromarray(p_mask.astype(np.uint8)).save(
            path / "mask" / f"{i:04d}.png")
        views.append(cam.to_json())
    meta = {
        "scene": {"preset": spec_name, "seed": int(scene_seed)},
        "corruption": asdict(corruption),
        "views": views,
    }
    with open(path / "cameras.json", "w") as f:
        json.dump(meta, f, indent=1)
    if gt_mesh is not None:
        evalmesh.write_ply(path / "gt_mesh.ply", *gt_mesh)
    return path


@dataclass
class Dataset:
    cameras: list
    rgb: np.ndarray            # (V, H, W, 3) float64
    prior_depth: np.ndarray    # (V, H, W)
    prior_normal_world: np.ndarray  # (V, H, W, 3) unit
    valid: np.ndarray          # (V, H, W) bool
    flat: np.ndarray           # (V, H, W) bool
    meta: dict = field(default_factory=dict)

    @property
    def n_views(self):
        return len(self.cameras)

    def train_ids(self):
        return [i for i, c in enumerate(self.cameras) if c.split == "train"]

    def test_ids(self):
        return [i for i, c in enumerate(self.cameras) if c.split == "test"]


def load_dataset(path):
    path = Path(path)
    with open(path / "cameras.json") as f:
        meta = json.load(f)
    cameras = [Camera.from_json(v) for v in meta["views"]]
    rgb, depth, normal, valid, flat = [], [], [], [], []
    for i, cam in enumerate(cameras):
        h, w = cam.height, cam.width
        rgb.append(np.asarray(Image.open(path / "rgb" / f"{i:04d}.png"),
                              dtype=np.float64) / 255.0)
        depth.append(np.fromfile(path / "depth_prior" / f"{i:04d}.f32",
                                 dtype="<f4").reshape(h, w).astype(np.float64))
        n_cam = np.fromfile(path / "normal_prior" / f"{i:04d}.f32",
                            dtype="<f4").reshape(h, w, 3).astype(np.float64)
        # priors are stored in camera space; supervision happens in world space
        n_world = n_cam.reshape(-1, 3) @ cam.rotation().T
        norm = np.linalg.norm(n_world, axis=-1, keepdims=True)
        n_world = n_world / np.where(norm < 1e-12, 1.0, norm)
        normal.append(n_world.reshape(h, w, 3))
        bits = np.asarray(Image.open(path / "mask" / f"{i:04d}.png"))
        valid.append((bits & MASK_VALID) > 0)
        flat.append((bits & MASK_FLAT) > 0)
    return Dataset(cameras=cameras, rgb=np.stack(rgb),
                   prior_depth=np.stack(depth),
                   prior_normal_world=np.stack(normal),
                   valid=np.stack(valid), flat=np.stack(flat), meta=meta)


def world_to_camera_normals(camera, normals_world):
    flat_n = normals_world.reshape(-1, 3) @ camera.rotation()
    return flat_n.reshape(normals_world.shape)


def make_dataset(path, preset="room-thin", n_views=24, n_test=2, width=96,
                 height=96, seed=0, corruption=None, gt_mesh_resolution=256,
                 write_gt_mesh=True):
    """Generate, corrupt, and write a complete dataset; returns its path."""
    corruption = corruption or PriorCorruption()
    spec = SCENE_PRESETS[preset]()
    cameras = generate_cameras(spec, n_views, seed, width=width, height=height,
                               n_test=n_test)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    renders = []
    priors = []
    for cam in cameras:
        render = oracle_render(spec, cam)
        renders.append(render)
        p_depth, p_normal_world, p_mask = corrupt_priors(render, corruption,
                                                         rng)
        p_normal_cam = world_to_camera_normals(cam, p_normal_world)
        priors.append((p_depth, p_normal_cam, p_mask))
    gt_mesh = None
    if write_gt_mesh:
        gt_mesh = mesh_from_sdf(spec, gt_mesh_resolution)
    return write_dataset(path, preset, cameras, renders, priors, corruption,
                         seed, gt_mesh=gt_mesh)


def mesh_from_sdf(spec, resolution):
    """Marching-cubes mesh of the analytic scene (vertices, faces, normals)."""
    def fn(pts):
        return scene_sdf(spec, pts)
    mesh = evalmesh.extract_mesh(fn, resolution)
    return mesh.vertices, mesh.triangles, mesh.normals
