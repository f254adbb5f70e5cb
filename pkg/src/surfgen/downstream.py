"""Sampling and score-distillation based editing built on a trained denoiser."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import numerics as nx
from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    cfg_combine,
    ddim_inverse_step,
    ddim_step,
    eps_from_v,
    sds_gradient,
    v_from_eps,
)
from .mesh import (
    MeshTopology,
    RigidTransform,
    Upsampler,
    canonical_frame,
    edge_length_vjp,
    edge_lengths,
    slerp,
    upsample,
    vertex_normals,
)
from .synthetic import resegment_skeleton

log = logging.getLogger(__name__)

# float32 GEMM results depend on the batch shape, so samples run one at a time:
# each output then depends only on its own noise stream, not on n
CHUNK = 1


class Generated(NamedTuple):
    vertices: np.ndarray  # (n, N, C)
    joints: np.ndarray  # (n, J, 3)
    noise_x: np.ndarray
    noise_y: np.ndarray


def _check_model(model) -> None:
    if not getattr(model, "trained", True):
        log.warning("sampling from an untrained model")


def draw_start_noise(model, n: int, seed: int, offset: int = 0):
    """Per-sample streams: sample i uses default_rng([seed, offset + i])."""
    cfg = model.config
    xs, ys, us = [], [], []
    for i in range(n):
        rng = np.random.default_rng([seed, offset + i])
        xs.append(rng.standard_normal((cfg.n_vertex_tokens, cfg.vertex_channels)))
        ys.append(rng.standard_normal((cfg.n_joint_tokens, 3)))
        us.append(rng.standard_normal((cfg.n_joint_tokens, 3)))
    f = np.float32
    return np.asarray(xs, f), np.asarray(ys, f), np.asarray(us, f)


def _ddim_loop(model, schedule: NoiseSchedule, x, y, sampler: SamplerConfig, cond_y=None, uncond_y=None):
    """Run the reverse chain for one batch in the sampler's mode."""
    seq = sampler.subsequence(schedule.T)
    T = schedule.T
    for k, t in enumerate(seq):
        t_prev = seq[k + 1] if k + 1 < len(seq) else 0
        if sampler.mode == "joint":
            vx, vy = model(x, y, t, t)
            x, y = ddim_step(x, vx, t, t_prev, schedule), ddim_step(y, vy, t, t_prev, schedule)
        elif sampler.mode == "marginal":
            # vertex stream held at pure noise with t_x = T
            _, vy = model(x, y, T, t)
            y = ddim_step(y, vy, t, t_prev, schedule)
        else:
            vx, _ = model(x, cond_y, t, 0)
            if sampler.guidance_scale > 0:
                vu, _ = model(x, uncond_y, t, T)
                ec = eps_from_v(x, vx, t, schedule)
                eu = eps_from_v(x, vu, t, schedule)
                vx = v_from_eps(x, cfg_combine(ec, eu, sampler.guidance_scale), t, schedule)
            x = ddim_step(x, vx, t, t_prev, schedule)
    return x, y


def sample_from_noise(model, schedule, noise_x, noise_y, sampler: SamplerConfig, cond_y=None, uncond_y=None):
    _check_model(model)
    if sampler.guidance_scale > 3:
        log.warning("guidance scale %.2f above 3 tends to distort shapes", sampler.guidance_scale)
    n = len(noise_x)
    out_x, out_y = [], []
    for s in range(0, n, CHUNK):
        sl = slice(s, s + CHUNK)
        cy = None if cond_y is None else cond_y[sl]
        uy = None if uncond_y is None else uncond_y[sl]
        x, y = _ddim_loop(model, schedule, noise_x[sl], noise_y[sl], sampler, cy, uy)
        out_x.append(x)
        out_y.append(y)
    return np.concatenate(out_x), np.concatenate(out_y)


def generate(model, schedule: NoiseSchedule, sampler: SamplerConfig, n: int) -> Generated:
    """Unconditional joint sampling of vertex and joint tokens."""
    if n < 1:
        raise ValueError("n must be positive")
    sampler = SamplerConfig(sampler.steps, sampler.guidance_scale, "joint", sampler.seed, sampler.step_subsequence)
    nx_, ny_, _ = draw_start_noise(model, n, sampler.seed)
    x, y = sample_from_noise(model, schedule, nx_, ny_, sampler)
    return Generated(x, y, nx_, ny_)


def generate_joints(model, schedule: NoiseSchedule, sampler: SamplerConfig, n: int) -> np.ndarray:
    """Skeleton-only sampling with the vertex stream marginalised out."""
    sampler = SamplerConfig(sampler.steps, 0.0, "marginal", sampler.seed, sampler.step_subsequence)
    nx_, ny_, _ = draw_start_noise(model, n, sampler.seed)
    _, y = sample_from_noise(model, schedule, nx_, ny_, sampler)
    return y


def generate_pose_conditioned(
    model, schedule: NoiseSchedule, joints_y0: np.ndarray, guidance_scale: float, n: int | None = None,
    steps: int = 10, seed: int = 0, step_subsequence=None,
) -> Generated:
    """Vertices sampled given clean joints (t_y = 0), optionally with guidance.

    ``joints_y0`` is (J, 3), repeated ``n`` times, or an (n, J, 3) batch.
    """
    if guidance_scale < 0:
        raise ValueError("guidance scale must be non-negative")
    y0 = np.asarray(joints_y0, dtype=np.float32)
    if y0.ndim == 2:
        y0 = np.repeat(y0[None], n or 1, axis=0)
    elif n is not None and n != len(y0):
        raise ValueError("n disagrees with the joint batch size")
    sampler = SamplerConfig(steps, guidance_scale, "conditional_on_joints", seed, list(step_subsequence or []))
    nx_, _, uy = draw_start_noise(model, len(y0), seed)
    x, _ = sample_from_noise(model, schedule, nx_, y0, sampler, cond_y=y0, uncond_y=uy)
    return Generated(x, y0, nx_, uy)


def body_shape_variation(
    model, schedule: NoiseSchedule, pose_joints: np.ndarray, shape_joints: np.ndarray, parents,
    guidance_scale: float = 1.0, n: int = 1, steps: int = 10, seed: int = 0,
) -> Generated:
    """Meshes in the pose of one skeleton with the bone lengths of another."""
    skeleton = resegment_skeleton(pose_joints, shape_joints, parents)
    return generate_pose_conditioned(model, schedule, skeleton, guidance_scale, n, steps, seed)


def mesh_from_3d_keypoints(
    model, schedule: NoiseSchedule, joints_3d: np.ndarray, topology: MeshTopology, upsampler: Upsampler,
    guidance_scale: float = 1.0, steps: int = 10, seed: int = 0,
):
    """Dense mesh and its coarse tokens for world-frame joints, returned in the world frame."""
    frame = canonical_frame(joints_3d, topology.landmark_ids)
    jc = frame.apply(np.asarray(joints_3d, dtype=np.float64))
    gen = generate_pose_conditioned(model, schedule, jc, guidance_scale, 1, steps, seed)
    coarse = gen.vertices[0, :, :3].astype(np.float64)
    dense = upsample(coarse, upsampler)
    back = frame.inverse()
    return back.apply(dense), back.apply(coarse)


# ---------------------------------------------------------------------------
# morphing
# ---------------------------------------------------------------------------


def invert(model, schedule: NoiseSchedule, vertices, joints, steps: int = 10):
    """Deterministic DDIM inversion of clean (vertices, joints) to t = T."""
    seq = [0] + sorted(SamplerConfig(steps).subsequence(schedule.T))
    x = np.asarray(vertices, dtype=np.float32)
    y = np.asarray(joints, dtype=np.float32)
    for t, t_next in zip(seq, seq[1:]):
        vx, vy = model(x, y, t, t)
        x, y = ddim_inverse_step(x, vx, t, t_next, schedule), ddim_inverse_step(y, vy, t, t_next, schedule)
    return x, y


def morph(model, schedule: NoiseSchedule, noise_a, noise_b, weights, steps: int = 10) -> list[tuple[np.ndarray, np.ndarray]]:
    """Slerp the joint start noise of two shapes and sample each blend.

    ``noise_a``/``noise_b`` are (x_T, y_T) pairs; the whole state is blended as one vector.
    """
    xa, ya = (np.asarray(a, dtype=np.float32) for a in noise_a)
    xb, yb = (np.asarray(b, dtype=np.float32) for b in noise_b)
    flat_a = np.concatenate([xa.ravel(), ya.ravel()])
    flat_b = np.concatenate([xb.ravel(), yb.ravel()])
    sampler = SamplerConfig(steps, 0.0, "joint")
    starts_x, starts_y = [], []
    for w in weights:
        z = slerp(flat_a, flat_b, float(w))
        starts_x.append(z[: xa.size].reshape(xa.shape))
        starts_y.append(z[xa.size :].reshape(ya.shape))
    starts = np.stack(starts_x).astype(np.float32), np.stack(starts_y).astype(np.float32)
    x, y = sample_from_noise(model, schedule, *starts, sampler)
    return [(x[i], y[i]) for i in range(len(weights))]


# ---------------------------------------------------------------------------
# score-distillation loops
# ---------------------------------------------------------------------------


def anneal(t_start: int, t_end: int, iters: int) -> np.ndarray:
    """Integer timesteps decreasing linearly from t_start to t_end."""
    if iters <= 0:
        return np.zeros(0, dtype=int)
    return np.round(np.linspace(t_start, t_end, iters)).astype(int)


def _with_attrs(v: np.ndarray, model, topology: MeshTopology | None) -> np.ndarray:
    """Append coarse-face normals when the model expects normal channels."""
    if not model.config.attr_channels:
        return v
    if topology is None:
        raise ValueError("a topology is needed to build normal channels")
    return np.concatenate([v, vertex_normals(v, topology.faces_coarse)], axis=-1)


@dataclass
class RefineConfig:
    steps: int = 10
    t_start: int = 100
    t_end: int = 1
    step_size: float = 0.2
    weighting: str = "x0"
    seed: int = 0


def refine(model, schedule: NoiseSchedule, vertices, joints, cfg: RefineConfig | None = None, topology=None):
    """Repeated explicit SDS steps X <- X - eta * grad with decreasing t."""
    cfg = cfg or RefineConfig()
    _check_model(model)
    v = np.asarray(vertices, dtype=np.float64).copy()
    j = np.asarray(joints, dtype=np.float64).copy()
    rng = np.random.default_rng(cfg.seed)
    for t in anneal(cfg.t_start, cfg.t_end, cfg.steps):
        x = _with_attrs(v, model, topology).astype(np.float32)
        gx, gj = sds_gradient(x, j.astype(np.float32), int(t), model, schedule, rng, weighting=cfg.weighting)
        v -= cfg.step_size * gx[..., :3]
        j -= cfg.step_size * gj
    return v, j


@dataclass
class DeformLossWeights:
    w_sds: float = 1.0
    w_edge: float = 1.0
    w_lap: float = 1.0
    w_consist: float = 1.0
    w_cp: float = 10.0

    def __post_init__(self):
        vals = [self.w_sds, self.w_edge, self.w_lap, self.w_consist, self.w_cp]
        if min(vals) < 0:
            raise ValueError("loss weights must be non-negative")
        if max(vals) == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class CameraModel:
    """Weak perspective: (u, v) = s * (x, y) + (t_u, t_v)."""

    scale: float
    t_u: float = 0.0
    t_v: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("camera scale must be positive")

    def project(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points)
        return self.scale * p[..., :2] + np.array([self.t_u, self.t_v])


@dataclass
class OptimConfig:
    iters: int = 200
    lr: float = 1e-2
    t_start: int = 100
    t_end: int = 1
    weighting: str = "x0"
    guidance_scale: float = 0.0
    seed: int = 0


@dataclass
class LoopReport:
    losses: list[dict[str, float]] = field(default_factory=list)

    def to_text(self) -> str:
        lines = ["["]
        for i, row in enumerate(self.losses):
            body = ", ".join(f'"{k}": {v:.6g}' for k, v in row.items())
            lines.append(f'  {{"iter": {i}, {body}}}' + ("," if i + 1 < len(self.losses) else ""))
        lines.append("]")
        return "\n".join(lines) + "\n"


class _Objective:
    """Shared SDS + geometric regularisers on (vertices, joints)."""

    def __init__(self, model, schedule, topology, upsampler, weights, frame: RigidTransform | None = None):
        self.model = model
        self.schedule = schedule
        self.topo = topology
        self.w = weights
        self.frame = frame
        self.A, self.c = topology.regression_operator(upsampler)
        self.lap = topology.laplacian_coarse
        self.edges = topology.edges_coarse

    def sds_targets(self, v, j, t, rng, cfg: OptimConfig):
        """Vertex SDS target in the optimisation frame, conditioned on the current joints."""
        vf, jf = v, j
        if self.frame is not None:
            vf, jf = self.frame.apply(v), self.frame.apply(j)
        x = _with_attrs(vf, self.model, self.topo).astype(np.float32)
        gx, _ = sds_gradient(
            x, jf.astype(np.float32), int(t), self.model, self.schedule, rng,
            condition_joints=jf.astype(np.float32), guidance_scale=cfg.guidance_scale, weighting=cfg.weighting,
        )
        g = gx[:, :3].astype(np.float64)
        if self.frame is not None:
            g = g @ self.frame.rotation  # back to the world frame: R^T g per row
        return v - g

    def terms(self, v, j, v_sds):
        """Loss values and gradients of every term except the data term."""
        n, e_n, jn = len(v), len(self.edges), len(j)
        w = self.w
        gv = np.zeros_like(v)
        gj = np.zeros_like(j)
        vals = {}
        if w.w_sds:
            r = v - v_sds
            vals["sds"] = float(np.sum(r * r) / n)
            gv += w.w_sds * 2.0 * r / n
        if w.w_edge:
            r = edge_lengths(v, self.edges) - edge_lengths(v_sds, self.edges)
            vals["edge"] = float(np.sum(r * r) / e_n)
            gv += w.w_edge * edge_length_vjp(v, self.edges, 2.0 * r / e_n)
        if w.w_lap:
            r = self.lap @ v - self.lap @ v_sds
            vals["lap"] = float(np.sum(r * r) / n)
            gv += w.w_lap * 2.0 * (self.lap.T @ r) / n
        if w.w_consist:
            r = j - (self.A @ v + self.c)
            vals["consist"] = float(np.sum(r * r) / jn)
            gj += w.w_consist * 2.0 * r / jn
            gv -= w.w_consist * 2.0 * (self.A.T @ r) / jn
        return vals, gv, gj


def _adam_loop(objective: _Objective, v0, j0, data_term, cfg: OptimConfig):
    v = nx.Tensor(np.asarray(v0, dtype=np.float64).copy(), True, "v", np.float64)
    j = nx.Tensor(np.asarray(j0, dtype=np.float64).copy(), True, "j", np.float64)
    state = nx.AdamState()
    rng = np.random.default_rng(cfg.seed)
    report = LoopReport()
    use_sds = any([objective.w.w_sds, objective.w.w_edge, objective.w.w_lap])
    for t in anneal(cfg.t_start, cfg.t_end, cfg.iters):
        v_sds = objective.sds_targets(v.data, j.data, t, rng, cfg) if use_sds else v.data
        vals, gv, gj = objective.terms(v.data, j.data, v_sds)
        d_val, d_gv, d_gj = data_term(v.data, j.data)
        vals["data"] = d_val
        vals["total"] = float(sum(vals.values()))
        report.losses.append(vals)
        nx.adam_update({"v": v, "j": j}, {"v": gv + d_gv, "j": gj + d_gj}, state, cfg.lr)
    return v.data, j.data, report


def deform_control_points(
    model, schedule: NoiseSchedule, vertices, joints, control_targets: dict[int, np.ndarray],
    topology: MeshTopology, upsampler: Upsampler, weights: DeformLossWeights | None = None,
    cfg: OptimConfig | None = None,
):
    """Move the listed joints to targets while the SDS terms keep the surface plausible."""
    weights = weights or DeformLossWeights()
    cfg = cfg or OptimConfig()
    ids = np.array(sorted(control_targets), dtype=int)
    if len(ids) == 0:
        raise ValueError("no control points given")
    bad = [int(i) for i in ids if not 0 <= i < topology.n_joints]
    if bad:
        raise ValueError(f"control ids {bad} are not joints")
    targets = np.stack([np.asarray(control_targets[i], dtype=np.float64) for i in ids])

    def data_term(v, j):
        r = j[ids] - targets
        g = np.zeros_like(j)
        g[ids] = weights.w_cp * 2.0 * r / len(ids)
        return float(weights.w_cp * np.sum(r * r) / len(ids)), 0.0, g

    obj = _Objective(model, schedule, topology, upsampler, weights)
    return _adam_loop(obj, vertices, joints, data_term, cfg)


def fit_2d_keypoints(
    model, schedule: NoiseSchedule, vertices, joints, keypoints_2d, camera: CameraModel,
    topology: MeshTopology, upsampler: Upsampler, visible=None, frame: RigidTransform | None = None,
    weights: DeformLossWeights | None = None, cfg: OptimConfig | None = None,
):
    """Fit world-frame (vertices, joints) to 2-D joint observations.

    The SDS terms are evaluated in the body frame ``frame`` (by default the
    canonical frame of the initial joints) and mapped back.
    """
    weights = weights or DeformLossWeights()
    cfg = cfg or OptimConfig()
    kp = np.asarray(keypoints_2d, dtype=np.float64)
    vis = np.ones(len(kp), bool) if visible is None else np.asarray(visible, bool)
    if vis.sum() < 4:
        raise ValueError("need at least 4 visible keypoints")
    if frame is None:
        frame = canonical_frame(joints, topology.landmark_ids)
    idx = np.flatnonzero(vis)

    def data_term(v, j):
        r = camera.project(j[idx]) - kp[idx]
        g = np.zeros_like(j)
        g[idx, :2] = weights.w_cp * 2.0 * camera.scale * r / len(idx)
        return float(weights.w_cp * np.sum(r * r) / len(idx)), 0.0, g

    obj = _Objective(model, schedule, topology, upsampler, weights, frame)
    return _adam_loop(obj, vertices, joints, data_term, cfg)


def canonical_sds_gradient(model, schedule, vertices, joints, frame: RigidTransform, t: int, seed: int, topology=None):
    """World-frame SDS vertex gradient computed in the body frame (R^T g_c)."""
    rng = np.random.default_rng(seed)
    vc, jc = frame.apply(vertices), frame.apply(joints)
    x = _with_attrs(vc, model, topology).astype(np.float32)
    gx, _ = sds_gradient(x, jc.astype(np.float32), t, model, schedule, rng, condition_joints=jc.astype(np.float32), weighting="x0")
    return gx[:, :3].astype(np.float64) @ frame.rotation
