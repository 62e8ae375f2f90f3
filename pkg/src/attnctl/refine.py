"""Cluster-based mask refinement.

Coarse per-instance masks are read off the cross-attention maps (group-column
average, box blur, min-max normalize, threshold); the self-attention rows are
clustered with plain Lloyd's K-means; each cluster is assigned to the instance
whose coarse mask covers enough of it. The union of a given instance's
clusters becomes its refined mask.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import AttentionRecord, BinaryMask
from .errors import ConfigurationError, DegenerateInputWarning, ShapeError


@dataclass
class RefinementConfig:
    enabled: bool = True
    smoothing: int = 1          # box-blur radius for the CA maps
    sigma_noun: float = 0.3     # threshold on the normalized CA map
    sigma_cluster: float = 0.5  # minimum cluster-overlap ratio
    clusters: int = 0           # 0 = instances + 1

    def validate(self) -> None:
        if self.smoothing < 0:
            raise ConfigurationError("smoothing: must be >= 0")
        if not 0.0 <= self.sigma_noun <= 1.0:
            raise ConfigurationError("sigma_noun: must lie in [0, 1]")
        if not 0.0 < self.sigma_cluster <= 1.0:
            raise ConfigurationError("sigma_cluster: must lie in (0, 1]")
        if self.clusters < 0:
            raise ConfigurationError("clusters: must be >= 0")


def box_blur(grid: np.ndarray, radius: int) -> np.ndarray:
    """Mean filter with an edge-truncated window (window shrinks at borders)."""
    if radius < 0:
        raise ConfigurationError("radius: must be >= 0")
    if radius == 0:
        return grid.copy()
    h, w = grid.shape
    out = np.empty_like(grid, dtype=np.float64)
    for r in range(h):
        r0, r1 = max(0, r - radius), min(h, r + radius + 1)
        for c in range(w):
            c0, c1 = max(0, c - radius), min(w, c + radius + 1)
            out[r, c] = grid[r0:r1, c0:c1].mean()
    return out


def compute_ca_masks(record: AttentionRecord, groups, smoothing: int,
                     sigma_noun: float) -> "list[BinaryMask]":
    """Coarse instance masks from the gated cross-attention maps.

    Per instance: average the group's token columns over all decoder CA
    layers, blur, min-max normalize, then keep cells >= sigma_noun. A constant
    map cannot be normalized and yields an all-zero mask plus a diagnostic.
    """
    layers = record.gated_cross()
    if not layers:
        raise ConfigurationError("record has no decoder cross-attention layer")
    extents = {(l.height, l.width) for l in layers}
    if len(extents) != 1:
        raise ConfigurationError(
            "gated cross-attention layers disagree on resolution"
        )
    h, w = next(iter(extents))
    out = []
    for group in groups:
        if not group:
            raise ConfigurationError("token group must be nonempty")
        acc = np.zeros((h, w))
        for layer in layers:
            for token in group:
                if not 0 <= token < layer.amap.cols:
                    raise ConfigurationError(f"token id {token} absent from record")
                acc += layer.amap.column(token).reshape(h, w)
        acc /= len(layers) * len(group)
        acc = box_blur(acc, smoothing)
        lo, hi = float(acc.min()), float(acc.max())
        if hi - lo <= 0.0:
            warnings.warn(
                "constant cross-attention map; coarse mask is empty",
                DegenerateInputWarning, stacklevel=2,
            )
            out.append(BinaryMask(np.zeros((h, w), dtype=np.uint8)))
            continue
        norm = (acc - lo) / (hi - lo)
        out.append(BinaryMask((norm >= sigma_noun).astype(np.uint8)))
    return out


@dataclass
class ClusterState:
    """Converged K-means state; centers feed the next warm start."""

    centers: np.ndarray        # (k, features)
    assignments: np.ndarray    # (n,)
    n_iter: int
    inertia: float
    inertia_history: "list[float]"


def _plusplus_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++ seeding: sample rows with probability proportional to
    their squared distance from the centers chosen so far."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            # All remaining rows coincide with a chosen center.
            centers[c:] = centers[0]
            break
        centers[c] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centers[c]) ** 2).sum(axis=1))
    return centers


def kmeans_self_attention(features, k: int,
                          prev_centers: np.ndarray | None = None,
                          seed: int = 0, max_iter: int = 100,
                          tol: float = 1e-8) -> ClusterState:
    """Lloyd's algorithm on self-attention rows.

    Initialization is either the provided warm-start centers or seeded
    k-means++ seeding. Ties in assignment go to the lowest cluster index; an
    emptied cluster keeps its previous center.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError("features: expected a nonempty (n, d) array")
    if not np.all(np.isfinite(x)):
        raise ValueError("features: non-finite values")
    n = x.shape[0]
    if k < 1:
        raise ConfigurationError("k: must be >= 1")
    if k > n:
        raise ConfigurationError(f"k ({k}) exceeds the number of samples ({n})")
    if prev_centers is not None:
        centers = np.asarray(prev_centers, dtype=np.float64).copy()
        if centers.shape != (k, x.shape[1]):
            raise ShapeError(
                f"prev_centers shape {centers.shape} != ({k}, {x.shape[1]})"
            )
    else:
        centers = _plusplus_init(x, k, np.random.default_rng(seed))

    assignments = np.zeros(n, dtype=np.int64)
    history: "list[float]" = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assignments = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), assignments].sum()))
        new_centers = centers.copy()
        for c in range(k):
            members = assignments == c
            if np.any(members):
                new_centers[c] = x[members].mean(axis=0)
        shift = float(np.max(np.abs(new_centers - centers)))
        centers = new_centers
        if shift <= tol:
            break
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assignments = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(n), assignments].sum())
    return ClusterState(centers=centers, assignments=assignments,
                        n_iter=n_iter, inertia=inertia,
                        inertia_history=history)


def assign_clusters(ca_masks: "list[BinaryMask]", clusters: ClusterState,
                    sigma_cluster: float) -> "list[BinaryMask]":
    """Refined masks: each cluster joins the instance whose coarse mask
    overlaps at least sigma_cluster of it (ties: larger overlap, then lower
    instance index). Unclaimed clusters belong to no instance."""
    if not ca_masks:
        raise ConfigurationError("need at least one coarse mask")
    if not 0.0 < sigma_cluster <= 1.0:
        raise ConfigurationError("sigma_cluster: must lie in (0, 1]")
    h, w = ca_masks[0].height, ca_masks[0].width
    n = h * w
    if clusters.assignments.shape != (n,):
        raise ShapeError(
            f"cluster assignments cover {clusters.assignments.shape[0]} pixels, "
            f"masks cover {n}"
        )
    k = clusters.centers.shape[0]
    refined = [np.zeros((h, w), dtype=np.uint8) for _ in ca_masks]
    flat_masks = [m.flat() > 0.5 for m in ca_masks]
    for c in range(k):
        members = clusters.assignments == c
        size = int(members.sum())
        if size == 0:
            continue
        best_i, best_overlap = -1, -1
        for i, fm in enumerate(flat_masks):
            overlap = int((members & fm).sum())
            if overlap > best_overlap:
                best_i, best_overlap = i, overlap
        if best_overlap / size >= sigma_cluster:
            refined[best_i] |= members.reshape(h, w).astype(np.uint8)
    return [BinaryMask(r) for r in refined]
