"""Set-level generation metrics and joint/vertex reconstruction errors."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .mesh import procrustes_align, procrustes_batch

DISTANCES = ("chamfer", "l2")


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared nearest-neighbour distance from a to b plus the reverse term."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer needs non-empty point sets")
    d = _sqdist(a[None], b[None])[0]
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # exact squared distances for batches of point sets: (K, P, D), (K, Q, D) -> (K, P, Q)
    diff = a[:, :, None, :] - b[:, None, :, :]
    return np.einsum("kpqd,kpqd->kpq", diff, diff)


def _pair_distances(a: np.ndarray, b: np.ndarray, metric: str, aligned: bool) -> np.ndarray:
    """Distances between a[k] and b[k] for each k; with ``aligned`` a[k] is first moved rigidly onto b[k]."""
    if aligned:
        a = procrustes_batch(a, b, with_scale=False)
    if metric == "l2":
        return np.mean(np.sum((a - b) ** 2, axis=-1), axis=-1)
    d = _sqdist(a, b)
    return d.min(axis=2).mean(axis=1) + d.min(axis=1).mean(axis=1)


def pairwise_distances(
    gen: np.ndarray,
    ref: np.ndarray | None = None,
    metric: str = "chamfer",
    aligned: bool = False,
    chunk: int = 256,
) -> np.ndarray:
    """Shape-to-shape distance matrix.

    With ``ref=None`` the symmetric matrix within ``gen`` is returned; entry
    (i, j) with i < j aligns shape i onto shape j and is mirrored. Otherwise
    entry (i, j) aligns gen[i] onto ref[j].
    """
    if metric not in DISTANCES:
        raise ValueError(f"unknown shape distance {metric!r}")
    gen = np.asarray(gen, dtype=np.float64)
    if ref is None:
        n = len(gen)
        ii, jj = np.triu_indices(n, k=1)
        out = np.zeros((n, n))
        for s in range(0, len(ii), chunk):
            i, j = ii[s : s + chunk], jj[s : s + chunk]
            d = _pair_distances(gen[i], gen[j], metric, aligned)
            out[i, j] = d
            out[j, i] = d
        return out
    ref = np.asarray(ref, dtype=np.float64)
    ii, jj = np.meshgrid(np.arange(len(gen)), np.arange(len(ref)), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    out = np.zeros(len(ii))
    for s in range(0, len(ii), chunk):
        out[s : s + chunk] = _pair_distances(gen[ii[s : s + chunk]], ref[jj[s : s + chunk]], metric, aligned)
    return out.reshape(len(gen), len(ref))


def one_nna(gen, ref, metric: str = "chamfer", aligned: bool = False, distances: np.ndarray | None = None) -> float:
    """Leave-one-out 1-NN accuracy (percent) of telling gen from ref.

    Shapes are pooled as [gen, ref]; among equally near neighbours the one
    with the lower pooled index wins.
    """
    n_gen = len(gen)
    n_ref = len(ref)
    if n_gen < 2 or n_ref < 2:
        raise ValueError("1-NNA needs at least two shapes per set")
    if distances is None:
        distances = pairwise_distances(np.concatenate([np.asarray(gen), np.asarray(ref)]), None, metric, aligned)
    d = np.array(distances, dtype=np.float64, copy=True)
    np.fill_diagonal(d, np.inf)
    nearest = np.argmin(d, axis=1)  # argmin returns the first minimum
    labels = np.r_[np.zeros(n_gen, bool), np.ones(n_ref, bool)]
    return 100.0 * float(np.mean(labels[nearest] == labels))


def mmd_cov(gen, ref, metric: str = "chamfer", aligned: bool = False, distances: np.ndarray | None = None):
    """(MMD, COV): mean over ref of its closest gen distance; share of ref that is some gen's nearest."""
    if len(gen) == 0 or len(ref) == 0:
        raise ValueError("MMD/COV need non-empty sets")
    d = pairwise_distances(gen, ref, metric, aligned) if distances is None else np.asarray(distances)
    mmd = float(d.min(axis=0).mean())
    cov = len(np.unique(np.argmin(d, axis=1))) / d.shape[1]
    return mmd, cov


class PoseErrors(NamedTuple):
    mpjpe: float
    pa_mpjpe: float
    mpve: float | None


def pose_errors(pred_joints, gt_joints, pred_verts=None, gt_verts=None) -> PoseErrors:
    """Mean joint error, the same after similarity alignment, and mean vertex error.

    Inputs may be single (K, 3) arrays or batches (B, K, 3); errors average over everything.
    """
    pj = np.asarray(pred_joints, dtype=np.float64)
    gj = np.asarray(gt_joints, dtype=np.float64)
    if pj.shape != gj.shape:
        raise ValueError(f"joint arrays differ in shape: {pj.shape} vs {gj.shape}")
    single = pj.ndim == 2
    if single:
        pj, gj = pj[None], gj[None]
    mpjpe = float(np.mean(np.linalg.norm(pj - gj, axis=-1)))
    aligned = np.stack([procrustes_align(p, g, with_scale=True).aligned for p, g in zip(pj, gj)])
    pa = float(np.mean(np.linalg.norm(aligned - gj, axis=-1)))
    mpve = None
    if pred_verts is not None:
        pv = np.asarray(pred_verts, dtype=np.float64)
        gv = np.asarray(gt_verts, dtype=np.float64)
        if pv.shape != gv.shape:
            raise ValueError("vertex arrays differ in shape")
        mpve = float(np.mean(np.linalg.norm(pv - gv, axis=-1)))
    return PoseErrors(mpjpe, pa, mpve)


def bbox_diagonal(points: np.ndarray) -> np.ndarray:
    """Bounding-box diagonal of each shape in a (..., K, 3) array."""
    p = np.asarray(points)
    return np.linalg.norm(p.max(axis=-2) - p.min(axis=-2), axis=-1)


def gaussian_blobs(ref: np.ndarray, n: int, seed: int = 0) -> np.ndarray:
    """Baseline shapes drawn i.i.d. from per-coordinate Gaussians fitted to ``ref``."""
    ref = np.asarray(ref, dtype=np.float64)
    rng = np.random.default_rng(seed)
    mu, sd = ref.mean(axis=0), ref.std(axis=0)
    return mu + sd * rng.standard_normal((n,) + ref.shape[1:])
