"""Procedural articulated tube bodies with exact joint regression.

Each bone of a small kinematic tree carries a tube of vertex rings. Rings are
skinned with one or two bone transforms, so every ring stays an affine image
of a regular polygon and its centroid tracks the joint it surrounds exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .mesh import (
    MeshTopology,
    canonical_frame,
    load_named_rows,
    load_obj,
    load_topology,
    order_rows,
    save_named_rows,
    save_obj,
    save_topology,
    vertex_normals,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Tube:
    start: int  # joint at ring 0
    end: int  # child joint at the last ring
    rings: int
    radius: float
    blend: str = "joint"  # "joint": half/half at ring 0; "linear": ramp along the tube


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


@dataclass
class SkeletonSpec:
    joint_names: list[str]
    parents: list[int]
    offsets: np.ndarray  # rest offset of each joint from its parent
    limits: dict[int, np.ndarray]  # joint -> (2, 2) bounds for rotation about x then z of its incoming bone
    tubes: list[Tube]
    sides: int = 8
    length_jitter: float = 0.1
    radius_jitter: float = 0.15
    groups: dict[str, list[int]] = field(default_factory=dict)  # joints sharing one length factor

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        self.limits = {k: np.asarray(v, dtype=np.float64).reshape(-1, 2) for k, v in self.limits.items()}
        j = len(self.joint_names)
        if len(self.parents) != j or self.offsets.shape != (j, 3):
            raise ValueError("skeleton arrays disagree on the joint count")
        if self.parents[0] != -1 or np.any(self.offsets[0] != 0):
            raise ValueError("root must come first with a zero offset")
        for c, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < c:
                raise ValueError("parents must precede children (acyclic tree)")
        for k, lim in self.limits.items():
            if np.any(lim[:, 0] > lim[:, 1]):
                raise ValueError(f"joint {self.joint_names[k]}: lower angle limit exceeds upper")
        if self.sides % 2 or self.sides < 6:
            raise ValueError("ring sides must be even and at least 6")
        for tube in self.tubes:
            if self.parents[tube.end] != tube.start:
                raise ValueError("tubes must follow a single bone")
            if tube.rings % 2 or tube.rings < 2:
                raise ValueError("tube ring counts must be even")

    @property
    def landmark_ids(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.joint_names)}

    @property
    def n_dof(self) -> int:
        return sum(len(v) for v in self.limits.values())


def default_skeleton() -> SkeletonSpec:
    names = [
        "pelvis", "neck", "hip_left", "hip_right", "shoulder_left",
        "shoulder_right", "hand_left", "hand_right", "foot_left", "foot_right",
    ]
    parents = [-1, 0, 0, 0, 1, 1, 4, 5, 2, 3]
    arm = 1.4 / np.sqrt(2.0)
    offsets = [
        [0, 0, 0], [0, 1.2, 0], [0.24, 0, 0], [-0.24, 0, 0], [0.4, 0, 0],
        [-0.4, 0, 0], [arm, -arm, 0], [-arm, -arm, 0], [0, -1.8, 0], [0, -1.8, 0],
    ]
    limb = [[-0.8, 0.8], [-0.4, 0.4]]
    limits = {1: [[-0.4, 0.4], [-0.3, 0.3]], 6: limb, 7: limb, 8: limb, 9: limb}
    tubes = [
        Tube(0, 1, 16, 0.3, "linear"),
        Tube(2, 8, 8, 0.14),
        Tube(3, 9, 8, 0.14),
        Tube(4, 6, 8, 0.11),
        Tube(5, 7, 8, 0.11),
    ]
    groups = {"legs": [8, 9], "arms": [6, 7], "trunk": [1, 2, 3, 4, 5]}
    return SkeletonSpec(names, parents, offsets, limits, tubes, groups=groups)


def _ring_frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = axis / np.linalg.norm(axis)
    ref = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = ref - (ref @ a) * a
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(a, e1)  # e1 x e2 = a keeps faces outward


def build_topology(spec: SkeletonSpec) -> MeshTopology:
    s = spec.sides
    p = s // 2
    faces_d, faces_c = [], []
    reg_rows, down, pmid, pdense = [], [], [], []
    ring_of_joint: dict[int, tuple[int, int]] = {}
    d0 = c0 = m0 = 0
    for tube in spec.tubes:
        r = tube.rings
        rc = r // 2
        for k in range(r - 1):
            for j in range(s):
                a, b = d0 + k * s + j, d0 + k * s + (j + 1) % s
                faces_d += [[a, b, a + s], [b, b + s, a + s]]
        for i in range(rc - 1):
            for j in range(p):
                a, b = c0 + i * p + j, c0 + i * p + (j + 1) % p
                faces_c += [[a, b, a + p], [b, b + p, a + p]]
        for i in range(rc):
            for j in range(p):
                for dk in (0, 1):
                    for dj in (0, 1):
                        down.append((c0 + i * p + j, d0 + (2 * i + dk) * s + 2 * j + dj, 0.25))
        for k in range(r):
            pos = (k - 0.5) / 2.0
            i0 = int(np.clip(np.floor(pos), 0, rc - 2))
            frac = pos - i0
            for j in range(p):
                pmid.append((m0 + k * p + j, c0 + i0 * p + j, 1.0 - frac))
                pmid.append((m0 + k * p + j, c0 + (i0 + 1) * p + j, frac))
        for k in range(r):
            for si in range(s):
                u = 2 * np.pi * si / s
                for j in range(p):
                    phi = 2 * np.pi * (2 * j + 0.5) / s
                    w = 1.0 / p + 2.0 * np.cos(u - phi) / (p * np.cos(np.pi / s))
                    pdense.append((d0 + k * s + si, m0 + k * p + j, w))
        ring_of_joint.setdefault(tube.start, (d0, 0))
        ring_of_joint.setdefault(tube.end, (d0, r - 1))
        d0 += r * s
        c0 += rc * p
        m0 += r * p
    j_count = len(spec.joint_names)
    for jt in range(j_count):
        if jt not in ring_of_joint:
            raise ValueError(f"joint {spec.joint_names[jt]} is not covered by any tube")
        base, k = ring_of_joint[jt]
        reg_rows += [(jt, base + k * s + si, 1.0 / s) for si in range(s)]

    def mat(rows, shape):
        r_, c_, w_ = zip(*rows)
        return sp.csr_matrix((w_, (r_, c_)), shape=shape)

    return MeshTopology(
        n_coarse=c0,
        n_dense=d0,
        n_mid=m0,
        joint_names=list(spec.joint_names),
        parents=np.asarray(spec.parents),
        faces_dense=np.asarray(faces_d),
        faces_coarse=np.asarray(faces_c),
        joint_regressor=mat(reg_rows, (j_count, d0)),
        downsample=mat(down, (c0, d0)),
        prolong_mid=mat(pmid, (m0, c0)),
        prolong_dense=mat(pdense, (d0, m0)),
        landmark_ids=spec.landmark_ids,
    )


def forward_kinematics(spec: SkeletonSpec, angles: dict[int, np.ndarray], offsets: np.ndarray):
    """World joint positions and per-joint rotations of each incoming bone."""
    j = len(spec.parents)
    pos = np.zeros((j, 3))
    rot = np.zeros((j, 3, 3))
    rot[0] = np.eye(3)
    for c in range(1, j):
        p = spec.parents[c]
        local = np.eye(3)
        if c in angles:
            ax, az = angles[c]
            local = _rot_z(az) @ _rot_x(ax)
        rot[c] = rot[p] @ local
        pos[c] = pos[p] + rot[c] @ offsets[c]
    return pos, rot


def pose_body(spec: SkeletonSpec, angles: dict[int, np.ndarray], length_scale: np.ndarray, radius_scale: float):
    """Dense vertices and joints of one posed body in the root frame."""
    offsets = spec.offsets * length_scale[:, None]
    rest, _ = forward_kinematics(spec, {}, offsets)
    pos, rot = forward_kinematics(spec, angles, offsets)

    def bone(b):
        # rigid map of the bone ending at joint b (the root bone is the identity)
        if b == 0:
            return np.eye(3), np.zeros(3)
        p = spec.parents[b]
        return rot[b], pos[p] - rot[b] @ rest[p]

    s = spec.sides
    u = 2 * np.pi * np.arange(s) / s
    out = []
    for tube in spec.tubes:
        a, b = rest[tube.start], rest[tube.end]
        e1, e2 = _ring_frame(b - a)
        circle = radius_scale * tube.radius * (np.cos(u)[:, None] * e1 + np.sin(u)[:, None] * e2)
        r_parent, t_parent = bone(tube.start)
        r_child, t_child = bone(tube.end)
        for k in range(tube.rings):
            f = k / (tube.rings - 1)
            ring = a + f * (b - a) + circle
            if tube.blend == "linear":
                w = f
            else:
                w = 0.5 if k == 0 else 1.0
            moved = (1 - w) * (ring @ r_parent.T + t_parent) + w * (ring @ r_child.T + t_child)
            out.append(moved)
    return np.concatenate(out), pos


@dataclass
class SyntheticSet:
    topology: MeshTopology
    coarse: np.ndarray  # (S, N, 3)
    dense: np.ndarray  # (S, M, 3)
    joints: np.ndarray  # (S, J, 3)
    normals: np.ndarray  # (S, N, 3) coarse unit normals

    def __len__(self) -> int:
        return len(self.coarse)

    def subset(self, idx) -> "SyntheticSet":
        idx = np.asarray(idx)
        return SyntheticSet(self.topology, self.coarse[idx], self.dense[idx], self.joints[idx], self.normals[idx])


def coarse_normals(dense: np.ndarray, topology: MeshTopology) -> np.ndarray:
    n = topology.downsample @ vertex_normals(dense, topology.faces_dense)
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)


def sample_pose(spec: SkeletonSpec, rng: np.random.Generator):
    angles = {k: rng.uniform(lim[:, 0], lim[:, 1]) for k, lim in sorted(spec.limits.items())}
    scale = np.full(len(spec.parents), 1.0)
    body = rng.uniform(1 - spec.length_jitter, 1 + spec.length_jitter)
    scale *= body
    for _, members in sorted(spec.groups.items()):
        scale[members] *= rng.uniform(1 - spec.length_jitter, 1 + spec.length_jitter)
    radius = rng.uniform(1 - spec.radius_jitter, 1 + spec.radius_jitter)
    return angles, scale, radius


def generate_dataset(
    spec: SkeletonSpec | None = None,
    n_samples: int = 2000,
    seed: int = 0,
    topology: MeshTopology | None = None,
) -> SyntheticSet:
    """Random poses and proportions, skinned, then moved into the body frame."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    spec = spec or default_skeleton()
    topo = topology or build_topology(spec)
    rng = np.random.default_rng(seed)
    dense, joints = [], []
    for _ in range(n_samples):
        angles, scale, radius = sample_pose(spec, rng)
        v, j = pose_body(spec, angles, scale, radius)
        frame = canonical_frame(j, topo.landmark_ids)
        dense.append(frame.apply(v))
        joints.append(frame.apply(j))
    dense = np.stack(dense)
    joints = np.stack(joints)
    coarse = np.stack([topo.downsample @ d for d in dense])
    normals = np.stack([coarse_normals(d, topo) for d in dense])
    return SyntheticSet(topo, coarse, dense, joints, normals)


def resegment_skeleton(skeleton_a: np.ndarray, skeleton_b: np.ndarray, parents) -> np.ndarray:
    """Pose of ``a`` with the bone lengths of ``b``, rebuilt from the root outwards."""
    a = np.asarray(skeleton_a, dtype=np.float64)
    b = np.asarray(skeleton_b, dtype=np.float64)
    if a.shape != b.shape or len(parents) != len(a):
        raise ValueError("skeletons must share one tree")
    out = np.empty_like(a)
    out[0] = a[0]
    for c in range(1, len(a)):
        p = parents[c]
        if not 0 <= p < c:
            raise ValueError("parents must precede children")
        bone_a = a[c] - a[p]
        bone_b = b[c] - b[p]
        norm = np.linalg.norm(bone_a)
        if norm < 1e-12:
            out[c] = out[p] + bone_b
        else:
            out[c] = out[p] + bone_a / norm * np.linalg.norm(bone_b)
    return out


# ---------------------------------------------------------------------------
# on-disk layout: topology.txt, sample_XXXXX.obj (dense + normals), sample_XXXXX.joints.txt
# ---------------------------------------------------------------------------


def write_dataset(root, data: SyntheticSet) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    topo = data.topology
    save_topology(root / "topology.txt", topo)
    for i in range(len(data)):
        normals = vertex_normals(data.dense[i], topo.faces_dense)
        save_obj(root / f"sample_{i:05d}.obj", data.dense[i], topo.faces_dense, normals)
        save_named_rows(root / f"sample_{i:05d}.joints.txt", topo.joint_names, data.joints[i])


def read_dataset(root, topology: MeshTopology | None = None) -> SyntheticSet:
    root = Path(root)
    topo = topology or load_topology(root / "topology.txt")
    files = sorted(root.glob("sample_*.obj"))
    if not files:
        raise FileNotFoundError(f"no sample_*.obj files under {root}")
    dense, joints = [], []
    for f in files:
        obj = load_obj(f)
        if obj.vertices.shape != (topo.n_dense, 3):
            raise ValueError(f"{f}: expected {topo.n_dense} vertices, found {len(obj.vertices)}")
        names, rows = load_named_rows(f.with_suffix(".joints.txt"), 3)
        dense.append(obj.vertices)
        joints.append(order_rows(names, rows, topo.joint_names))
    dense = np.stack(dense)
    coarse = np.stack([topo.downsample @ d for d in dense])
    normals = np.stack([coarse_normals(d, topo) for d in dense])
    return SyntheticSet(topo, coarse, dense, np.stack(joints), normals)
