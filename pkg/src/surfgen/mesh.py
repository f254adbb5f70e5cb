"""Fixed-topology geometry: connectivity context, differential coordinates,
joint regression, alignment, noise-space interpolation, up-sampling and I/O."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

REQUIRED_LANDMARKS = ("pelvis", "neck", "hip_left", "hip_right")


class TopologyError(ValueError):
    pass


class ObjFormatError(ValueError):
    pass


def _csr(m) -> sp.csr_matrix:
    return sp.csr_matrix(m, dtype=np.float64)


def umbrella_laplacian(n: int, edges: np.ndarray) -> tuple[sp.csr_matrix, int]:
    """Uniform graph Laplacian I - D^-1 A; isolated vertices get an identity row."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    i = np.concatenate([edges[:, 0], edges[:, 1]])
    j = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sp.csr_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
    adj.data[:] = 1.0  # duplicate edges count once
    deg = np.asarray(adj.sum(axis=1)).ravel()
    isolated = int(np.sum(deg == 0))
    inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0)
    lap = sp.identity(n, format="csr") - sp.diags(inv) @ adj
    return lap.tocsr(), isolated


def edges_from_faces(faces: np.ndarray) -> np.ndarray:
    faces = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


@dataclass
class MeshTopology:
    """Static connectivity shared by every sample."""

    n_coarse: int
    n_dense: int
    n_mid: int
    joint_names: list[str]
    parents: np.ndarray
    faces_dense: np.ndarray
    faces_coarse: np.ndarray
    joint_regressor: sp.csr_matrix
    downsample: sp.csr_matrix
    prolong_mid: sp.csr_matrix
    prolong_dense: sp.csr_matrix
    landmark_ids: dict[str, int] = field(default_factory=dict)
    edges_coarse: np.ndarray | None = None
    laplacian_coarse: sp.csr_matrix | None = None
    n_isolated: int = 0

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.faces_dense = np.asarray(self.faces_dense, dtype=np.int64).reshape(-1, 3)
        self.faces_coarse = np.asarray(self.faces_coarse, dtype=np.int64).reshape(-1, 3)
        for name in ("joint_regressor", "downsample", "prolong_mid", "prolong_dense"):
            setattr(self, name, _csr(getattr(self, name)))
        if self.edges_coarse is None:
            self.edges_coarse = edges_from_faces(self.faces_coarse)
        self.edges_coarse = np.asarray(self.edges_coarse, dtype=np.int64).reshape(-1, 2)
        self._check_edges()
        if self.laplacian_coarse is None:
            self.laplacian_coarse, self.n_isolated = umbrella_laplacian(self.n_coarse, self.edges_coarse)
        self.validate()

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    def _check_edges(self) -> None:
        e = self.edges_coarse
        if e.size and (e.min() < 0 or e.max() >= self.n_coarse):
            raise TopologyError("coarse edge index out of range")
        if np.any(e[:, 0] == e[:, 1]):
            raise TopologyError("degenerate coarse edge")

    def validate(self) -> None:
        n, m, j = self.n_coarse, self.n_dense, self.n_joints
        self._check_edges()
        if self.faces_dense.size and (self.faces_dense.min() < 0 or self.faces_dense.max() >= m):
            raise TopologyError("dense face index out of range")
        if self.faces_coarse.size and self.faces_coarse.max() >= n:
            raise TopologyError("coarse face index out of range")
        shapes = {
            "joint_regressor": (j, m),
            "downsample": (n, m),
            "prolong_mid": (self.n_mid, n),
            "prolong_dense": (m, self.n_mid),
            "laplacian_coarse": (n, n),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise TopologyError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        reg = self.joint_regressor
        if reg.data.size and reg.data.min() < 0:
            raise TopologyError("joint regressor has negative weights")
        if not np.allclose(np.asarray(reg.sum(axis=1)).ravel(), 1.0, atol=1e-6):
            raise TopologyError("joint regressor rows must sum to 1")
        if len(self.parents) != j or self.parents[0] != -1:
            raise TopologyError("parents must list one entry per joint with the root first")
        for k, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < k:
                raise TopologyError("parents must reference earlier joints")
        for name, idx in self.landmark_ids.items():
            if not 0 <= idx < j:
                raise TopologyError(f"landmark {name} index {idx} out of range")

    def regression_operator(self, upsampler: "Upsampler | None" = None) -> tuple[np.ndarray, np.ndarray]:
        """(A, c) such that regressed joints = A @ coarse + c through the up-sampler."""
        if upsampler is None:
            w = (self.prolong_dense @ self.prolong_mid).toarray()
            return (self.joint_regressor @ w), np.zeros((self.n_joints, 3))
        w = upsampler.w2 @ upsampler.w1
        bias = upsampler.w2 @ upsampler.b1 + upsampler.b2
        return self.joint_regressor @ w, self.joint_regressor @ bias


@dataclass
class ArticulatedSample:
    coarse_vertices: np.ndarray
    joints: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.coarse_vertices = np.asarray(self.coarse_vertices)
        self.joints = np.asarray(self.joints)
        if self.normals is not None:
            self.normals = np.asarray(self.normals)
            if self.normals.shape != self.coarse_vertices.shape:
                raise ValueError("normals must match the coarse vertex array")
            if not np.allclose(np.linalg.norm(self.normals, axis=-1), 1.0, atol=1e-4):
                raise ValueError("normals must have unit length")


def _apply(mat, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    if v.ndim == 2:
        return np.asarray(mat @ v)
    flat = np.moveaxis(v, -2, 0).reshape(v.shape[-2], -1)
    out = np.asarray(mat @ flat)
    return np.moveaxis(out.reshape((mat.shape[0],) + v.shape[:-2] + (v.shape[-1],)), 0, -2)


def edge_lengths(vertices: np.ndarray, topology: MeshTopology | np.ndarray) -> np.ndarray:
    """Per-edge Euclidean lengths, ordered like the coarse edge list."""
    edges = topology.edges_coarse if isinstance(topology, MeshTopology) else np.asarray(topology)
    v = np.asarray(vertices)
    d = v[..., edges[:, 0], :] - v[..., edges[:, 1], :]
    return np.sqrt(np.sum(d * d, axis=-1))


def edge_length_vjp(vertices: np.ndarray, edges: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Pull an (E,) gradient on edge lengths back onto (N, 3) vertices."""
    v = np.asarray(vertices, dtype=np.float64)
    d = v[edges[:, 0]] - v[edges[:, 1]]
    length = np.linalg.norm(d, axis=1)
    unit = d / np.maximum(length, 1e-12)[:, None]
    contrib = upstream[:, None] * unit
    g = np.zeros_like(v)
    np.add.at(g, edges[:, 0], contrib)
    np.add.at(g, edges[:, 1], -contrib)
    return g


def laplacian_coords(vertices: np.ndarray, topology: MeshTopology) -> np.ndarray:
    if topology.n_isolated:
        log.warning("%d isolated coarse vertices keep their absolute position as delta", topology.n_isolated)
    return _apply(topology.laplacian_coarse, vertices)


def regress_joints(dense_vertices: np.ndarray, topology: MeshTopology) -> np.ndarray:
    return _apply(topology.joint_regressor, dense_vertices)


def downsample(dense_vertices: np.ndarray, topology: MeshTopology) -> np.ndarray:
    return _apply(topology.downsample, dense_vertices)


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted unit vertex normals."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces)
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])  # length = 2 * area
    n = np.zeros_like(v)
    for k in range(3):
        np.add.at(n, f[:, k], fn)
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)


# ---------------------------------------------------------------------------
# rigid / similarity alignment
# ---------------------------------------------------------------------------


class Procrustes(NamedTuple):
    rotation: np.ndarray
    translation: np.ndarray
    scale: float
    aligned: np.ndarray
    degenerate: bool


def procrustes_align(source: np.ndarray, target: np.ndarray, with_scale: bool = True) -> Procrustes:
    """Least-squares similarity (or rigid) transform mapping source onto target."""
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"procrustes needs matching (K, 3) arrays, got {src.shape} and {tgt.shape}")
    if src.shape[0] < 3:
        raise ValueError("procrustes needs at least 3 points")
    mu_s, mu_t = src.mean(axis=0), tgt.mean(axis=0)
    x, y = src - mu_s, tgt - mu_t
    var_s = np.sum(x * x) / len(x)
    if var_s <= 1e-300:
        raise ValueError("source points are all coincident")
    cov = y.T @ x / len(x)
    u, sv, vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2] = -1.0
    rot = (u * d) @ vt
    scale = float(np.sum(sv * d) / var_s) if with_scale else 1.0
    trans = mu_t - scale * rot @ mu_s
    degenerate = bool(sv[1] <= 1e-12 * max(sv[0], 1e-300))
    return Procrustes(rot, trans, scale, scale * src @ rot.T + trans, degenerate)


def procrustes_batch(source: np.ndarray, target: np.ndarray, with_scale: bool = True) -> np.ndarray:
    """Vectorised alignment of (B, K, 3) sources onto targets; returns aligned sources."""
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    mu_s = src.mean(axis=1, keepdims=True)
    mu_t = tgt.mean(axis=1, keepdims=True)
    x, y = src - mu_s, tgt - mu_t
    cov = np.einsum("bki,bkj->bij", y, x)
    u, sv, vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    sign[sign == 0] = 1.0
    d = np.ones(sv.shape)
    d[:, 2] = sign
    rot = np.einsum("bij,bj,bjk->bik", u, d, vt)
    if with_scale:
        var_s = np.maximum(np.sum(x * x, axis=(1, 2)), 1e-300)
        s = (np.sum(sv * d, axis=1) / var_s)[:, None, None]
    else:
        s = 1.0
    return s * np.einsum("bkj,bij->bki", x, rot) + mu_t


@dataclass
class RigidTransform:
    """p -> R p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def apply_vectors(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors) @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)


def canonical_frame(joints: np.ndarray, landmark_ids: dict[str, int]) -> RigidTransform:
    """Transform taking a posed body into its pelvis-centred body frame.

    y runs pelvis -> neck, x runs right hip -> left hip (orthogonalised), z = x cross y.
    """
    missing = [k for k in REQUIRED_LANDMARKS if k not in landmark_ids]
    if missing:
        raise ValueError(f"canonical frame needs landmarks {missing}")
    j = np.asarray(joints, dtype=np.float64)
    pelvis = j[landmark_ids["pelvis"]]
    up = j[landmark_ids["neck"]] - pelvis
    side = j[landmark_ids["hip_left"]] - j[landmark_ids["hip_right"]]
    nu, ns = np.linalg.norm(up), np.linalg.norm(side)
    if nu < 1e-9 or ns < 1e-9:
        raise ValueError("pelvis/neck or hip landmarks coincide")
    y = up / nu
    x = side - (side @ y) * y
    nx_ = np.linalg.norm(x)
    if nx_ < 1e-6 * ns:
        raise ValueError("hip axis is collinear with the spine")
    x /= nx_
    z = np.cross(x, y)
    rot = np.stack([x, y, z])
    return RigidTransform(rot, -rot @ pelvis)


# ---------------------------------------------------------------------------
# noise-space interpolation
# ---------------------------------------------------------------------------


def slerp(a: np.ndarray, b: np.ndarray, w: float, angle_tol: float = 1e-6) -> np.ndarray:
    """Spherical interpolation of two flattened vectors; w outside [0, 1] extrapolates."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"slerp shapes differ: {a.shape} vs {b.shape}")
    if w == 0:
        return a.copy()
    if w == 1:
        return b.copy()
    fa, fb = a.reshape(-1).astype(np.float64), b.reshape(-1).astype(np.float64)
    na, nb = np.linalg.norm(fa), np.linalg.norm(fb)
    if na == 0 or nb == 0:
        raise ValueError("slerp endpoints must be non-zero")
    cos = np.clip(fa @ fb / (na * nb), -1.0, 1.0)
    omega = np.arccos(cos)
    if np.pi - omega < angle_tol:
        raise ValueError("slerp endpoints are antipodal; interpolation path is undefined")
    if omega < angle_tol:
        out = (1.0 - w) * fa + w * fb
    else:
        out = (np.sin((1.0 - w) * omega) * fa + np.sin(w * omega) * fb) / np.sin(omega)
    return out.reshape(a.shape).astype(a.dtype, copy=False)


# ---------------------------------------------------------------------------
# coarse -> dense up-sampling
# ---------------------------------------------------------------------------


@dataclass
class Upsampler:
    """Two per-channel linear maps N -> N_mid -> M with per-vertex biases."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    trained: bool = False

    @classmethod
    def from_topology(cls, topology: MeshTopology) -> "Upsampler":
        return cls(
            topology.prolong_mid.toarray(),
            np.zeros((topology.n_mid, 3)),
            topology.prolong_dense.toarray(),
            np.zeros((topology.n_dense, 3)),
            trained=False,
        )

    def __call__(self, coarse: np.ndarray) -> np.ndarray:
        return upsample(coarse, self)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"upsampler.w1": self.w1, "upsampler.b1": self.b1, "upsampler.w2": self.w2, "upsampler.b2": self.b2}

    @classmethod
    def from_arrays(cls, arrays, trained: bool = True) -> "Upsampler":
        return cls(
            arrays["upsampler.w1"], arrays["upsampler.b1"], arrays["upsampler.w2"], arrays["upsampler.b2"], trained
        )


def upsample(coarse: np.ndarray, up: Upsampler) -> np.ndarray:
    if not up.trained:
        log.warning("up-sampling with untrained weights")
    c = np.asarray(coarse)
    mid = np.matmul(up.w1, c) + up.b1
    return (np.matmul(up.w2, mid) + up.b2).astype(c.dtype, copy=False)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


class ObjData(NamedTuple):
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None


def save_obj(path, vertices: np.ndarray, faces: np.ndarray | None = None, normals: np.ndarray | None = None) -> None:
    v = np.asarray(vertices, dtype=np.float64)
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in v]
    if normals is not None:
        lines += [f"vn {x:.6f} {y:.6f} {z:.6f}" for x, y, z in np.asarray(normals, dtype=np.float64)]
    if faces is not None:
        fmt = "f {0}//{0} {1}//{1} {2}//{2}" if normals is not None else "f {0} {1} {2}"
        lines += [fmt.format(a + 1, b + 1, c + 1) for a, b, c in np.asarray(faces, dtype=np.int64)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> ObjData:
    verts, norms, faces = [], [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        try:
            if tag == "v":
                if len(rest) < 3:
                    raise ValueError("vertex needs 3 coordinates")
                verts.append([float(x) for x in rest[:3]])
            elif tag == "vn":
                if len(rest) != 3:
                    raise ValueError("normal needs 3 components")
                norms.append([float(x) for x in rest])
            elif tag == "f":
                if len(rest) != 3:
                    raise ValueError("only triangle faces are supported")
                idx = []
                for tok in rest:
                    k = int(tok.split("/")[0])
                    if k == 0:
                        raise ValueError("OBJ indices are 1-based")
                    idx.append(k - 1 if k > 0 else len(verts) + k)
                faces.append(idx)
            elif tag in ("vt", "o", "g", "s", "usemtl", "mtllib"):
                continue
            else:
                raise ValueError(f"unknown record {tag!r}")
        except ValueError as exc:
            raise ObjFormatError(f"{path}:{lineno}: {exc}") from None
    v = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if f.size and f.max() >= len(v):
        raise ObjFormatError(f"{path}: face index exceeds vertex count {len(v)}")
    n = np.asarray(norms, dtype=np.float64).reshape(-1, 3) if norms else None
    return ObjData(v, f, n)


def save_named_rows(path, names: list[str], rows: np.ndarray) -> None:
    """Whitespace table, one ``name c1 c2 [c3]`` row per entry."""
    rows = np.asarray(rows, dtype=np.float64)
    with open(path, "w") as fh:
        for name, r in zip(names, rows):
            fh.write(name + " " + " ".join(f"{x:.9g}" for x in r) + "\n")


def load_named_rows(path, ncols: int) -> tuple[list[str], np.ndarray]:
    names, rows = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != ncols + 1:
            raise ValueError(f"{path}:{lineno}: expected name and {ncols} numbers")
        names.append(parts[0])
        rows.append([float(x) for x in parts[1:]])
    return names, np.asarray(rows, dtype=np.float64).reshape(-1, ncols)


def order_rows(names: list[str], rows: np.ndarray, joint_names: list[str]) -> np.ndarray:
    """Reorder a named table to the topology's joint order (all joints required)."""
    lookup = dict(zip(names, rows))
    missing = [n for n in joint_names if n not in lookup]
    if missing:
        raise ValueError(f"missing joints {missing}")
    return np.stack([lookup[n] for n in joint_names])


def _triplets(mat: sp.csr_matrix):
    coo = mat.tocoo()
    return zip(coo.row, coo.col, coo.data)


def save_topology(path, topo: MeshTopology) -> None:
    out = [
        "# surfgen topology v1",
        f"n_coarse {topo.n_coarse}",
        f"n_dense {topo.n_dense}",
        f"n_mid {topo.n_mid}",
    ]
    for name, parent in zip(topo.joint_names, topo.parents):
        out.append(f"joint {name} {parent}")
    for name, idx in topo.landmark_ids.items():
        out.append(f"landmark {name} {idx}")
    out += [f"face {a} {b} {c}" for a, b, c in topo.faces_dense]
    out += [f"cface {a} {b} {c}" for a, b, c in topo.faces_coarse]
    out += [f"edge {a} {b}" for a, b in topo.edges_coarse]
    for tag, mat in (
        ("reg", topo.joint_regressor),
        ("down", topo.downsample),
        ("pmid", topo.prolong_mid),
        ("pdense", topo.prolong_dense),
    ):
        out += [f"{tag} {r} {c} {w:.17g}" for r, c, w in _triplets(mat)]
    Path(path).write_text("\n".join(out) + "\n")


def load_topology(path) -> MeshTopology:
    header: dict[str, int] = {}
    names, parents, landmarks = [], [], {}
    lists: dict[str, list] = {k: [] for k in ("face", "cface", "edge", "reg", "down", "pmid", "pdense")}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tag, *rest = line.split()
        try:
            if tag in ("n_coarse", "n_dense", "n_mid"):
                header[tag] = int(rest[0])
            elif tag == "joint":
                names.append(rest[0])
                parents.append(int(rest[1]))
            elif tag == "landmark":
                landmarks[rest[0]] = int(rest[1])
            elif tag in ("face", "cface", "edge"):
                lists[tag].append([int(x) for x in rest])
            elif tag in lists:
                lists[tag].append((int(rest[0]), int(rest[1]), float(rest[2])))
            else:
                raise ValueError(f"unknown record {tag!r}")
        except (ValueError, IndexError) as exc:
            raise TopologyError(f"{path}:{lineno}: {exc}") from None
    n, m, mid, j = header["n_coarse"], header["n_dense"], header["n_mid"], len(names)

    def mat(tag, shape):
        rows = lists[tag]
        if not rows:
            return sp.csr_matrix(shape)
        r, c, w = zip(*rows)
        return sp.csr_matrix((w, (r, c)), shape=shape)

    return MeshTopology(
        n_coarse=n,
        n_dense=m,
        n_mid=mid,
        joint_names=names,
        parents=np.asarray(parents),
        faces_dense=np.asarray(lists["face"]),
        faces_coarse=np.asarray(lists["cface"]),
        edges_coarse=np.asarray(lists["edge"]).reshape(-1, 2),
        joint_regressor=mat("reg", (j, m)),
        downsample=mat("down", (n, m)),
        prolong_mid=mat("pmid", (mid, n)),
        prolong_dense=mat("pdense", (m, mid)),
        landmark_ids=landmarks,
    )


def topology_arrays(topo: MeshTopology) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Dense-array form for embedding a topology in a checkpoint container."""
    arrays = {
        "topology.parents": topo.parents,
        "topology.faces_dense": topo.faces_dense,
        "topology.faces_coarse": topo.faces_coarse,
        "topology.edges_coarse": topo.edges_coarse,
        "topology.joint_regressor": topo.joint_regressor.toarray(),
        "topology.downsample": topo.downsample.toarray(),
        "topology.prolong_mid": topo.prolong_mid.toarray(),
        "topology.prolong_dense": topo.prolong_dense.toarray(),
    }
    meta = {
        "topology.joint_names": ",".join(topo.joint_names),
        "topology.landmarks": ",".join(f"{k}:{v}" for k, v in topo.landmark_ids.items()),
    }
    return arrays, meta


def topology_from_arrays(arrays, meta) -> MeshTopology:
    names = meta["topology.joint_names"].split(",")
    landmarks = {}
    for item in filter(None, meta.get("topology.landmarks", "").split(",")):
        k, v = item.split(":")
        landmarks[k] = int(v)
    reg = arrays["topology.joint_regressor"]
    down = arrays["topology.downsample"]
    pmid = arrays["topology.prolong_mid"]
    return MeshTopology(
        n_coarse=down.shape[0],
        n_dense=down.shape[1],
        n_mid=pmid.shape[0],
        joint_names=names,
        parents=arrays["topology.parents"],
        faces_dense=arrays["topology.faces_dense"],
        faces_coarse=arrays["topology.faces_coarse"],
        edges_coarse=arrays["topology.edges_coarse"],
        joint_regressor=reg,
        downsample=down,
        prolong_mid=pmid,
        prolong_dense=arrays["topology.prolong_dense"],
        landmark_ids=landmarks,
    )
