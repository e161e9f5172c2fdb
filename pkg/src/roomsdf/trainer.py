"""Optimization loop wiring encoding, fields, rendering, losses and guidance.

A `Pipeline` owns the parameter store and builds the per-batch computation
graph; `train` drives the schedule (quat warm-up, progressive grid levels,
curvature decay, guidance activation), the decoupled-weight-decay adaptive
moment optimizer, CSV logging and deterministic binary checkpoints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import encoding, fields, guidance, losses, rendering, scenes, evalmesh


class TrainingAborted(RuntimeError):
    pass


@dataclass
class RunConfig:
    dataset: str = ""
    total_steps: int = 10000
    rays_per_step: int = 128
    learning_rate: float = 1e-3
    anneal_quat_end: float = 0.2
    # sampling
    n_uniform: int = 24
    n_importance: int = 16
    n_eik_points: int = 512
    # model
    hidden: int = 256
    feat_width: int = 256
    pe_bands: int = 6
    grid_levels: int = 16
    grid_base_resolution: int = 32
    grid_max_resolution: int = 2048
    grid_features: int = 2
    grid_log2_table: int = 19
    grid_active_init: int = 8
    grid_activation_interval: int = 2000
    sphere_radius: float = 0.5
    beta_init: float = 0.1
    beta_min: float = 1e-4
    # losses
    lam_eik: float = 0.05
    lam_curv: float = 0.0005
    lam_normal: float = 0.025
    lam_depth: float = 0.05
    mod_s0: float = 12.5
    mod_theta0: float = float(np.pi / 12.0)
    curv_decay_decades: float = 2.0
    # guidance
    g_s1: float = 25.0
    g_theta1: float = float(np.pi / 12.0)
    g_t1: float = 4.0
    g_s2: float = 25.0
    g_theta2: float = float(np.pi / 12.0)
    g_t2: float = 2.0
    g_s3: float = 25.0
    g_theta3: float = float(np.pi / 18.0)
    g_decay: float = 0.99
    # optimizer
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-2
    # ablation switches (prerequisite lattice enforced in validate())
    use_deflection: bool = True      # ND
    use_adaptive: bool = True        # AP
    use_guided_opt: bool = True      # DO: sampling + photometric re-weighting
    use_guided_unbias: bool = True   # DU: confidence-gated unbiased densities
    # bookkeeping
    seed: int = 0
    checkpoint_every: int = 0        # 0: final checkpoint only
    log_every: int = 1
    # test hooks
    freeze_deflection_identity: bool = False
    force_naive_gate: bool = False

    def validate(self):
        if self.use_adaptive and not self.use_deflection:
            raise ValueError("adaptive prior losses require the deflection field")
        if self.use_guided_opt and not self.use_adaptive:
            raise ValueError("guided optimization requires the adaptive losses")
        if self.use_guided_unbias and not self.use_adaptive:
            raise ValueError("guided unbiasing requires the adaptive losses")
        if self.total_steps < 1 or self.rays_per_step < 1:
            raise ValueError("steps/rays must be positive")
        return self

    def grid_config(self):
        return encoding.HashGridConfig(
            levels=self.grid_levels,
            base_resolution=self.grid_base_resolution,
            max_resolution=self.grid_max_resolution,
            features_per_level=self.grid_features,
            log2_table_size=self.grid_log2_table,
            active_init=self.grid_active_init,
            activation_interval=self.grid_activation_interval,
        )

    def loss_weights(self):
        return losses.LossWeights(self.lam_eik, self.lam_curv,
                                  self.lam_normal, self.lam_depth)

    def modulation(self):
        return losses.ModulationParams(self.mod_s0, self.mod_theta0)

    def guidance_params(self):
        return guidance.GuidanceParams(
            s1=self.g_s1, theta1=self.g_theta1, t1=self.g_t1,
            s2=self.g_s2, theta2=self.g_theta2, t2=self.g_t2,
            s3=self.g_s3, theta3=self.g_theta3, decay=self.g_decay,
            activation_progress=self.anneal_quat_end)

    def to_json(self):
        return asdict(self)

    @staticmethod
    def from_json(obj):
        return RunConfig(**obj).validate()


def desk_config(**overrides):
    """CPU-scale preset: small networks and a shallow grid keep a full run in
    the tens of minutes while preserving every mechanism."""
    cfg = RunConfig(
        total_steps=10000, rays_per_step=128, n_uniform=24, n_importance=16,
        n_eik_points=384, hidden=48, feat_width=48, pe_bands=4,
        grid_levels=10, grid_max_resolution=256, grid_log2_table=13,
        grid_active_init=8, grid_activation_interval=2000)
    return replace(cfg, **overrides).validate()


def paper_config(**overrides):
    """Constants at publication scale (not a CPU acceptance target)."""
    cfg = RunConfig(total_steps=128000, rays_per_step=4096, n_uniform=64,
                    n_importance=32)
    return replace(cfg, **overrides).validate()


@dataclass
class Schedules:
    step: int
    prog_q: float
    active_levels: int
    curvature_scale: float
    guidance_on: bool
    stencil_eps: float


def update_schedules(step, cfg):
    """All step-dependent knobs: warm-up progress, active grid levels,
    curvature decay, and guidance activation."""
    if step < 0 or step > cfg.total_steps:
        raise ValueError("step outside the run")
    warm = fields.WarmupSchedule(cfg.anneal_quat_end)
    prog_q = warm.prog_q(step, cfg.total_steps)
    grid_cfg = cfg.grid_config()
    active = encoding.set_active_levels(step, grid_cfg)
    scale = losses.curvature_decay(step, cfg.total_steps,
                                   warmup_fraction=cfg.anneal_quat_end,
                                   decay_decades=cfg.curv_decay_decades)
    progress = step / cfg.total_steps if cfg.total_steps else 1.0
    return Schedules(step=step, prog_q=prog_q, active_levels=active,
                     curvature_scale=scale,
                     guidance_on=progress >= cfg.anneal_quat_end,
                     stencil_eps=encoding.stencil_eps_for(grid_cfg, active))


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass
class RenderOutput:
    color: object          # (R, 3)
    depth: object          # (R,)
    normal_unit: object    # (R, 3)
    deflected_unit: object  # (R, 3) equals normal_unit when deflection is off
    delta_theta: object    # (R,) tape Var / ndarray
    opacity: object        # (R,)
    gradients: object      # (N_pts + N_eik, 3) stencil gradients
    laplacians: object     # (N_pts,) stencil Laplacians
    transparent: np.ndarray
    quat_fallbacks: int
    t_vals: np.ndarray
    weights: object


class Pipeline:
    """Model state plus the batch graph builder, shared by training and eval."""

    def __init__(self, cfg, rng=None, store=None):
        cfg.validate()
        self.cfg = cfg
        self.grid = cfg.grid_config()
        self.geo_in = 3 + 6 * cfg.pe_bands + cfg.grid_levels * cfg.grid_features
        self.cond_in = 9 + cfg.feat_width
        if store is None:
            if rng is None:
                raise ValueError("need an rng to initialize parameters")
            store = self._init_store(rng)
        self.store = store

    def _init_store(self, rng):
        segments = {}
        segments["grid.table"] = self.grid.init_table(rng)
        segments.update(fields.init_geometry_net(
            rng, self.geo_in, self.cfg.hidden, self.cfg.feat_width,
            self.cfg.sphere_radius))
        segments.update(fields.init_color_net(rng, self.cond_in,
                                              self.cfg.hidden))
        segments.update(fields.init_deflection_net(rng, self.cond_in,
                                                   self.cfg.hidden))
        raw = np.log(np.expm1(max(self.cfg.beta_init - self.cfg.beta_min,
                                  1e-6)))
        segments["beta.raw"] = np.array([raw])
        return ad.ParameterStore(segments)

    # -- field evaluation -----------------------------------------------------

    def beta(self, params):
        return ad.softplus(params["beta.raw"]) + self.cfg.beta_min

    def features(self, params, x, active_levels):
        enc = encoding.encode_position(
            x, self.grid, params["grid.table"], active_levels,
            pe_bands=self.cfg.pe_bands)
        return enc.features

    def sdf_full(self, params, x, active_levels):
        feats = self.features(params, x, active_levels)
        return fields.geometry_forward(params, feats)

    def sdf_only(self, params, x, active_levels):
        feats = self.features(params, x, active_levels)
        return fields.geometry_sdf(params, feats)

    def sdf_eager(self, x, active_levels=None):
        if active_levels is None:
            active_levels = self.grid.levels
        return self.sdf_only(self.store.arrays(), x, active_levels)

    # -- ray rendering ----------------------------------------------------------

    def sample_batch(self, rays, sched, rng):
        """Proposal pass (no gradients) producing the final sample positions.

        Proposal weights come from plain Laplace densities at the current
        parameters; the differentiable pass re-renders the merged samples.
        """
        params = self.store.arrays()
        beta_val = float(ad.value_of(self.beta(params))[0])

        def proposal_weights(t_vals):
            pts = (rays.origins[:, None, :]
                   + t_vals[..., None] * rays.dirs[:, None, :]).reshape(-1, 3)
            sdf = self.sdf_only(params, pts, sched.active_levels)
            sigma = rendering.laplace_density(sdf.reshape(t_vals.shape),
                                              beta_val)
            res = rendering.composite_ray(t_vals, rays.near, sigma)
            return ad.value_of(res.weights)

        t_vals, ok = rendering.sample_points(
            rays.near, rays.far, self.cfg.n_uniform, self.cfg.n_importance,
            rng, proposal_weights_fn=proposal_weights)
        return t_vals, ok

    def render_rays(self, params, rays, t_vals, sched, cfd=None,
                    deflection_on=None):
        """Differentiable forward pass for a sampled ray batch."""
        cfg = self.cfg
        if deflection_on is None:
            deflection_on = cfg.use_deflection
        r, s = t_vals.shape
        n_pts = r * s
        pts = (rays.origins[:, None, :]
               + t_vals[..., None] * rays.dirs[:, None, :]).reshape(-1, 3)
        v_pts = np.repeat(rays.dirs, s, axis=0)

        sdf, z = self.sdf_full(params, pts, sched.active_levels)

        def stencil_fn(q):
            return self.sdf_only(params, q, sched.active_levels)

        grads, laps = encoding.gradient_and_laplacian(
            stencil_fn, pts, sched.stencil_eps, sdf)
        n_unit_pts = ad.normalize_rows(grads)

        # directional derivative feeding the density denominator is detached
        n_detached = ad.value_of(n_unit_pts)
        f_prime = np.einsum("ij,ij->i", n_detached, v_pts).reshape(r, s)

        beta = self.beta(params)
        sdf_rs = sdf.reshape((r, s))
        if cfd is None:
            cfd_rs = np.zeros((r, 1))
        else:
            cfd_rs = np.asarray(cfd, dtype=np.float64).reshape(r, 1)
        if np.any(cfd_rs > 0.0):
            sigma = rendering.guided_density(sdf_rs, f_prime, beta, cfd_rs)
        else:
            sigma = rendering.laplace_density(sdf_rs, beta)

        rgb = fields.color_forward(params, pts, v_pts, n_unit_pts, z)
        quat_fallbacks = 0
        quats = None
        if deflection_on and not cfg.freeze_deflection_identity:
            quats, quat_fallbacks = fields.deflection_forward(
                params, pts, v_pts, n_unit_pts, z)
        elif deflection_on:
            quats = fields.quat_identity(n_pts)

        comp = rendering.composite_ray(
            t_vals, rays.near, sigma,
            color=rgb.reshape((r, s, 3)),
            normal=n_unit_pts.reshape((r, s, 3)),
            quaternion=None if quats is None else quats.reshape((r, s, 4)))

        normal_unit = ad.normalize_rows(comp.normal)
        if deflection_on:
            q_hat, _ = fields.quat_normalize_safe(comp.quaternion)
            q_iter = fields.quat_anneal(q_hat, normal_unit, sched.prog_q)
            deflected = fields.quat_rotate(q_iter, normal_unit)
            delta_theta, transparent = rendering.deflection_angle(
                comp.normal, deflected)
        else:
            deflected = normal_unit
            delta_theta = np.zeros(r)
            transparent = np.linalg.norm(ad.value_of(comp.normal),
                                         axis=1) < 1e-12

        return RenderOutput(
            color=comp.color, depth=comp.depth, normal_unit=normal_unit,
            deflected_unit=deflected, delta_theta=delta_theta,
            opacity=comp.opacity, gradients=grads, laplacians=laps,
            transparent=transparent, quat_fallbacks=quat_fallbacks,
            t_vals=t_vals, weights=comp.weights)

    def eikonal_domain_gradients(self, params, sched, rng):
        """Stencil gradients at uniform domain points (regularization only)."""
        if self.cfg.n_eik_points == 0:
            return None
        pts = rng.uniform(-0.95, 0.95, (self.cfg.n_eik_points, 3))

        def stencil_fn(q):
            return self.sdf_only(params, q, sched.active_levels)

        return encoding.numerical_gradient(stencil_fn, pts, sched.stencil_eps)

    def compute_losses(self, out, batch_priors, sched, eik_domain=None,
                       color_weights=None):
        """All loss terms for one rendered batch; returns (total, breakdown)."""
        cfg = self.cfg
        rgb_gt, depth_gt, normal_gt, valid = batch_priors
        mod = cfg.modulation()
        dtheta_val = np.asarray(ad.value_of(out.delta_theta))

        loss_color = losses.weighted_color_loss(out.color, rgb_gt,
                                                color_weights)

        ss = losses.solve_scale_shift(out.depth, depth_gt, valid)
        if cfg.force_naive_gate or not cfg.use_adaptive:
            if cfg.use_deflection and not cfg.force_naive_gate:
                loss_normal = losses.normal_prior_loss(out.deflected_unit,
                                                       normal_gt, valid)
            else:
                loss_normal = losses.normal_prior_loss(out.normal_unit,
                                                       normal_gt, valid)
            loss_depth = losses.depth_prior_loss(out.depth, depth_gt, ss,
                                                 valid)
        else:
            loss_normal = losses.adaptive_normal_loss(
                out.normal_unit, out.deflected_unit, normal_gt, dtheta_val,
                mod, valid)
            loss_depth = losses.adaptive_depth_loss(
                out.depth, depth_gt, dtheta_val, ss, mod, valid)

        grads = out.gradients
        if eik_domain is not None:
            grads = ad.concat([grads, eik_domain], axis=0)
        loss_eik = losses.eikonal_loss(grads)
        loss_curv = losses.curvature_loss(out.laplacians)

        terms = {"color": loss_color, "eikonal": loss_eik,
                 "curvature": loss_curv, "normal": loss_normal,
                 "depth": loss_depth}
        total = losses.total_loss(terms, cfg.loss_weights(),
                                  curvature_scale=sched.curvature_scale)
        return total, terms, ss


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """Adaptive moments with decoupled weight decay on network weights only."""

    def __init__(self, store, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=1e-2):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = np.zeros(store.n_params)
        self.v = np.zeros(store.n_params)
        self.t = 0
        self.decay_mask = np.zeros(store.n_params)
        for name in store.names():
            if name.endswith(".w1") or name.endswith(".w2"):
                offset, _, size = store.slice_of(name)
                self.decay_mask[offset:offset + size] = 1.0

    def step(self, store, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        update = m_hat / (np.sqrt(v_hat) + self.eps)
        update = update + self.weight_decay * self.decay_mask * store.values
        store.values -= self.lr * update


# ---------------------------------------------------------------------------
# training state, checkpoints, logging
# ---------------------------------------------------------------------------

LOG_COLUMNS = ["step", "loss_total", "loss_color", "loss_eik", "loss_curv",
               "loss_normal", "loss_depth", "inv_beta", "mean_dtheta",
               "active_levels", "prog_q", "guidance_on"]


@dataclass
class TrainState:
    pipeline: Pipeline
    optimizer: AdamW
    angle_map: guidance.AngleMap
    rng: np.random.Generator
    step: int = 0

    @property
    def cfg(self):
        return self.pipeline.cfg


def init_state(cfg, dataset):
    cfg.validate()
    seq = np.random.SeedSequence(cfg.seed)
    init_seed, run_seed = seq.spawn(2)
    pipeline = Pipeline(cfg, rng=np.random.default_rng(init_seed))
    h = dataset.cameras[0].height
    w = dataset.cameras[0].width
    amap = guidance.AngleMap(dataset.n_views, h, w, decay=cfg.g_decay)
    return TrainState(
        pipeline=pipeline,
        optimizer=AdamW(pipeline.store, cfg.learning_rate, cfg.adam_beta1,
                        cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay),
        angle_map=amap,
        rng=np.random.default_rng(run_seed))


def _fmt(v):
    return f"{v:.17g}"


def train_step(state, dataset):
    """One optimization step; returns the logged scalar breakdown."""
    cfg = state.cfg
    pipe = state.pipeline
    sched = update_schedules(state.step, cfg)
    gp = cfg.guidance_params()
    rng = state.rng

    train_ids = dataset.train_ids()
    image_id = train_ids[int(rng.integers(len(train_ids)))]
    cam = dataset.cameras[image_id]
    h, w = cam.height, cam.width

    guided = cfg.use_guided_opt and sched.guidance_on
    if guided:
        prob = guidance.sampling_probability(
            state.angle_map.values[image_id], gp, active=True)
    else:
        prob = np.full(h * w, 1.0 / (h * w))
    flat_idx = guidance.sample_pixels(prob, cfg.rays_per_step, rng)
    rows = flat_idx // w
    cols = flat_idx % w

    origins, dirs = scenes.pixel_rays(cam, rows, cols)
    near, far = rendering.aabb_near_far(origins, dirs, min_near=0.02)
    rays = rendering.RayBatch(origins=origins, dirs=dirs, near=near, far=far,
                              image_id=image_id, rows=rows, cols=cols)

    t_vals, ok = pipe.sample_batch(rays, sched, rng)
    if t_vals.shape[1] == 0:
        raise TrainingAborted("degenerate ray batch")

    unbias_on = cfg.use_guided_unbias and sched.guidance_on
    cfd = None
    if unbias_on:
        cfd = guidance.bias_confidence(
            state.angle_map.values[image_id, rows, cols], gp, active=True)

    tape = ad.Tape()
    leaves = ad.LeafBundle(tape, pipe.store)
    out = pipe.render_rays(leaves, rays, t_vals, sched, cfd=cfd)
    eik_domain = pipe.eikonal_domain_gradients(leaves, sched, rng)

    rgb_gt = dataset.rgb[image_id, rows, cols]
    depth_gt = dataset.prior_depth[image_id, rows, cols]
    normal_gt = dataset.prior_normal_world[image_id, rows, cols]
    valid = dataset.valid[image_id, rows, cols]

    color_w = None
    if cfg.use_guided_opt and sched.guidance_on:
        color_w = guidance.color_weight(ad.value_of(out.delta_theta), gp,
                                        active=True)

    total, terms, _ = pipe.compute_losses(
        out, (rgb_gt, depth_gt, normal_gt, valid), sched,
        eik_domain=eik_domain, color_weights=color_w)

    grad = tape.backward(total, pipe.store)
    if not np.all(np.isfinite(grad)):
        raise TrainingAborted(f"non-finite gradient at step {state.step}")
    state.optimizer.step(pipe.store, grad)

    dtheta_val = np.asarray(ad.value_of(out.delta_theta))
    if cfg.use_deflection:
        state.angle_map.update(image_id, rows, cols, dtheta_val)

    beta_val = float(ad.value_of(pipe.beta(pipe.store.arrays()))[0])
    record = {
        "step": state.step,
        "loss_total": float(ad.value_of(total)),
        "loss_color": float(ad.value_of(terms["color"])),
        "loss_eik": float(ad.value_of(terms["eikonal"])),
        "loss_curv": float(ad.value_of(terms["curvature"])),
        "loss_normal": float(ad.value_of(terms["normal"])),
        "loss_depth": float(ad.value_of(terms["depth"])),
        "inv_beta": 1.0 / beta_val,
        "mean_dtheta": float(dtheta_val.mean()),
        "active_levels": sched.active_levels,
        "prog_q": sched.prog_q,
        "guidance_on": int(sched.guidance_on),
    }
    state.step += 1
    return record


# -- checkpoint serialization (deterministic bytes) --------------------------

_CKPT_MAGIC = b"RSDF1\n"


def save_checkpoint(state, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    store = state.pipeline.store
    arrays = [
        ("params", store.values),
        ("adam_m", state.optimizer.m),
        ("adam_v", state.optimizer.v),
        ("angle_map", state.angle_map.values.ravel()),
    ]
    header = {
        "step": state.step,
        "adam_t": state.optimizer.t,
        "config": state.cfg.to_json(),
        "angle_map_shape": list(state.angle_map.values.shape),
        "rng_state": state.rng.bit_generator.state,
        "segments": {name: list(store.slice_of(name)[1])
                     for name in store.names()},
        "arrays": [(name, arr.size) for name, arr in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        for _, arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def load_checkpoint(path, dataset):
    with open(path, "rb") as f:
        if f.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ValueError("not a checkpoint file")
        n = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(n).decode())
        payload = {}
        for name, size in header["arrays"]:
            payload[name] = np.frombuffer(f.read(8 * size),
                                          dtype="<f8").copy()
    cfg = RunConfig.from_json(header["config"])
    state = init_state(cfg, dataset)
    state.pipeline.store.values[:] = payload["params"]
    state.optimizer.m = payload["adam_m"]
    state.optimizer.v = payload["adam_v"]
    state.optimizer.t = header["adam_t"]
    state.angle_map.values = payload["angle_map"].reshape(
        header["angle_map_shape"])
    state.rng.bit_generator.state = header["rng_state"]
    state.step = header["step"]
    return state


def dump_angle_maps(angle_map, out_dir, thresholds_deg=(5.0, 15.0, 25.0)):
    """PGM heatmaps plus binary threshold masks per image."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vmax = max(float(angle_map.values.max()), 1e-9)
    written = []
    for i, img in enumerate(angle_map.values):
        scaled = np.clip(np.round(img / vmax * 255.0), 0,
                         255).astype(np.uint8)
        p = out_dir / f"angle_{i:04d}.pgm"
        _write_pgm(p, scaled)
        written.append(p)
        for th in thresholds_deg:
            mask = (img >= np.radians(th)).astype(np.uint8) * 255
            p = out_dir / f"mask_{i:04d}_{int(th):02d}deg.pgm"
            _write_pgm(p, mask)
            written.append(p)
    return written


def _write_pgm(path, img):
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(img.astype(np.uint8).tobytes())


def train(cfg, dataset, out_dir, progress_cb=None):
    """Full run: writes config.json, log.csv, checkpoints/, angle_maps/."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "checkpoints").mkdir(exist_ok=True)
    with open(out_dir / "config.json", "w") as f:
        json.dump(cfg.to_json(), f, indent=1, sort_keys=True)
    state = init_state(cfg, dataset)
    log_path = out_dir / "log.csv"
    last_good = None
    with open(log_path, "w") as logf:
        logf.write(",".join(LOG_COLUMNS) + "\n")
        for step in range(cfg.total_steps):
            try:
                rec = train_step(state, dataset)
            except (TrainingAborted, losses.NonFiniteLossError) as exc:
                raise TrainingAborted(
                    f"aborted at step {step}: {exc}; last checkpoint: "
                    f"{last_good}") from exc
            if step % cfg.log_every == 0 or step == cfg.total_steps - 1:
                row = [rec[c] if isinstance(rec[c], int) else _fmt(rec[c])
                       for c in LOG_COLUMNS]
                logf.write(",".join(str(v) for v in row) + "\n")
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                last_good = save_checkpoint(
                    state, out_dir / "checkpoints" / f"step_{step + 1:06d}.bin")
            if progress_cb is not None:
                progress_cb(step, rec)
    final = save_checkpoint(
        state, out_dir / "checkpoints" / f"step_{cfg.total_steps:06d}.bin")
    dump_angle_maps(state.angle_map, out_dir / "angle_maps")
    return state, final


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def render_view(state, camera, chunk=512):
    """Eager full-image render (color, depth) with the current parameters."""
    pipe = state.pipeline
    cfg = state.cfg
    sched = update_schedules(min(state.step, cfg.total_steps), cfg)
    h, w = camera.height, camera.width
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    rows = rows.ravel()
    cols = cols.ravel()
    rgb = np.zeros((h * w, 3))
    depth = np.zeros(h * w)
    params = pipe.store.arrays()
    rng = np.random.default_rng(0)
    for start in range(0, h * w, chunk):
        sl = slice(start, min(start + chunk, h * w))
        origins, dirs = scenes.pixel_rays(camera, rows[sl], cols[sl])
        near, far = rendering.aabb_near_far(origins, dirs, min_near=0.02)
        rays = rendering.RayBatch(origins=origins, dirs=dirs, near=near,
                                  far=far)
        t_vals, _ = pipe.sample_batch(rays, sched, rng)
        out = pipe.render_rays(params, rays, t_vals, sched,
                               deflection_on=False)
        rgb[sl] = ad.value_of(out.color)
        depth[sl] = ad.value_of(out.depth)
    return rgb.reshape(h, w, 3), depth.reshape(h, w)


def extract_state_mesh(state, resolution=128):
    pipe = state.pipeline
    active = update_schedules(min(state.step, state.cfg.total_steps),
                              state.cfg).active_levels

    def fn(pts):
        return ad.value_of(pipe.sdf_eager(pts, active))

    return evalmesh.extract_mesh(fn, resolution)


def evaluate_checkpoint(state, dataset, gt_mesh_path=None, mesh_resolution=128,
                        threshold=0.02, n_samples=100000):
    """Mesh metrics against the dataset's reference mesh plus test-view PSNR."""
    metrics = {"step": state.step, "failed": False}
    try:
        mesh = extract_state_mesh(state, mesh_resolution)
    except evalmesh.EmptyMeshError as exc:
        metrics["failed"] = True
        metrics["error"] = str(exc)
        return metrics, None
    if gt_mesh_path is not None:
        gt = evalmesh.read_ply(gt_mesh_path)
        metrics.update(evalmesh.all_metrics(mesh, gt, threshold=threshold,
                                            n_samples=n_samples))
    psnrs = []
    for vid in dataset.test_ids():
        rgb, _ = render_view(state, dataset.cameras[vid])
        mse = float(np.mean((rgb - dataset.rgb[vid]) ** 2))
        psnrs.append(-10.0 * np.log10(max(mse, 1e-12)))
    if psnrs:
        metrics["psnr"] = float(np.mean(psnrs))
    return metrics, mesh
