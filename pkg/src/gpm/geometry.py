"""Point-cloud partitioning and set-distance primitives.

Everything here is a pure function of its inputs and runs in double
precision, independent of the model precision used elsewhere.  Ties in any
nearest/farthest decision are broken by the lowest point index, which makes
every function exactly reproducible and lets brute-force oracles agree
bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gpm.validation import as_cloud


@dataclass
class PatchSet:
    """m local patches cut from one cloud.

    Attributes:
        centers: (m, 3) center coordinates, each a point of the source cloud.
        patches: (m, k, 3) patch coordinates stored center-relative.
        source_indices: (m, k) indices into the source cloud for every patch
            point, in nearest-first order.
    """

    centers: np.ndarray
    patches: np.ndarray
    source_indices: np.ndarray

    @property
    def num_patches(self) -> int:
        return self.centers.shape[0]

    @property
    def patch_size(self) -> int:
        return self.patches.shape[1]


def fps(cloud: np.ndarray, m: int, seed) -> np.ndarray:
    """Greedy farthest point sampling; returns m indices in selection order.

    The first index is drawn uniformly by a generator seeded with `seed`
    (an int seed or a numpy Generator).  Each later pick maximizes the
    minimum squared distance to the points picked so far; exact ties go to
    the lowest index.
    """
    pts = as_cloud(cloud)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"fps needs 1 <= m <= {n} points, got m={m}")
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = rng.integers(n)
    # min squared distance from every point to the chosen set, updated online
    min_d2 = np.sum((pts - pts[chosen[0]]) ** 2, axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(min_d2))  # argmax returns the lowest index on ties
        chosen[i] = nxt
        d2 = np.sum((pts - pts[nxt]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return chosen


def knn_patch(cloud: np.ndarray, center_index: int, k: int) -> np.ndarray:
    """Indices of the k nearest points to `cloud[center_index]`.

    The center itself is at distance zero and is always included.  Ties are
    broken by the lowest index (stable sort on squared distances).
    """
    pts = as_cloud(cloud)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"knn_patch needs 1 <= k <= {n} points, got k={k}")
    if not 0 <= center_index < n:
        raise ValueError(f"center_index {center_index} out of range for {n} points")
    d2 = np.sum((pts - pts[center_index]) ** 2, axis=1)
    order = np.argsort(d2, kind="stable")
    return order[:k].astype(np.int64)


def knn_all(cloud: np.ndarray, center_indices: np.ndarray, k: int) -> np.ndarray:
    """Vectorized `knn_patch` for several centers at once; (len(centers), k)."""
    pts = as_cloud(cloud)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"knn_all needs 1 <= k <= {n} points, got k={k}")
    centers = pts[np.asarray(center_indices, dtype=np.int64)]
    d2 = np.sum((centers[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def build_patches(cloud: np.ndarray, m: int, k: int, seed) -> PatchSet:
    """FPS centers plus k-NN neighborhoods, stored center-relative.

    Only the center is subtracted from each patch; patch means are not
    re-centered.
    """
    pts = as_cloud(cloud)
    center_idx = fps(pts, m, seed)
    source = knn_all(pts, center_idx, k)
    centers = pts[center_idx]
    patches = pts[source] - centers[:, None, :]
    return PatchSet(centers=centers, patches=patches, source_indices=source)


def chamfer_l1(p: np.ndarray, g: np.ndarray) -> float:
    """Symmetric average nearest-neighbor distance, non-squared Euclidean norm.

    (1/|P|) sum_p min_g ||p-g|| + (1/|G|) sum_g min_p ||g-p||.
    """
    a = as_cloud(p)
    b = as_cloud(g)
    i_ab, i_ba = nearest_neighbor_indices(a, b)
    d_ab = np.linalg.norm(a - b[i_ab], axis=1)
    d_ba = np.linalg.norm(b - a[i_ba], axis=1)
    return float(d_ab.mean() + d_ba.mean())


def nearest_neighbor_indices(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-point nearest-neighbor indices a->b and b->a under squared distance.

    The squared-distance matrix is formed with one gemm; the caller should
    recompute exact distances for the selected pairs (see `chamfer_l1`) since
    the gemm expansion is not cancellation-safe for coincident points.
    """
    a2 = np.sum(a * a, axis=1)[:, None]
    b2 = np.sum(b * b, axis=1)[None, :]
    d2 = a2 + b2 - 2.0 * (a @ b.T)
    return np.argmin(d2, axis=1), np.argmin(d2, axis=0)
