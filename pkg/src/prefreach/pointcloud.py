"""Point clouds and the geometry used by the autoencoder loss.

Distances are in meters (Chamfer is therefore in squared meters); the
transport distance uses unsquared L2 and requires equal cardinality, which
the pipeline guarantees by downsampling input and reconstruction to the
same point count.
"""

from __future__ import annotations

import itertools
import json

import numpy as np
from scipy.optimize import linear_sum_assignment

_TXT_MAGIC = "pcloudtxt 1"
_BIN_MAGIC = b"PCLB1\n"


def as_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"point cloud must be (n, 3), got {pts.shape}")
    if pts.shape[0] == 0:
        raise ValueError("point cloud must be nonempty")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud has non-finite coordinates")
    return pts


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def farthest_point_sample(cloud, k: int, seed: int, first_index: int | None = None) -> np.ndarray:
    """Greedy max-min downsampling to k points.

    First point drawn by seeded RNG (or forced via first_index); afterwards
    the point with the largest distance to the selected set wins, ties broken
    by lowest index.
    """
    pts = as_cloud(cloud)
    n = pts.shape[0]
    if n < k:
        raise ValueError(f"farthest_point_sample: need >= {k} points, got {n}")
    chosen = np.empty(k, dtype=np.intp)
    if first_index is None:
        chosen[0] = np.random.default_rng(seed).integers(n)
    else:
        chosen[0] = first_index
    min_d = np.einsum("ij,ij->i", pts - pts[chosen[0]], pts - pts[chosen[0]])
    for i in range(1, k):
        # argmax returns the lowest index among ties
        nxt = int(np.argmax(min_d))
        chosen[i] = nxt
        d = pts - pts[nxt]
        np.minimum(min_d, np.einsum("ij,ij->i", d, d), out=min_d)
    return pts[chosen]


def chamfer_distance(a, b) -> float:
    """Sum of squared nearest-neighbor distances, both directions."""
    pa, pb = as_cloud(a), as_cloud(b)
    d2 = pairwise_sq_dists(pa, pb)
    return float(d2.min(axis=1).sum() + d2.min(axis=0).sum())


def emd_exact(a, b) -> float:
    """Minimum total L2 transport cost over bijections (exact assignment)."""
    pa, pb = as_cloud(a), as_cloud(b)
    if pa.shape[0] != pb.shape[0]:
        raise ValueError(
            f"emd_exact: clouds must have equal size, got {pa.shape[0]} vs {pb.shape[0]}")
    cost = np.sqrt(np.maximum(pairwise_sq_dists(pa, pb), 0.0))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def emd_assignment(a, b) -> np.ndarray:
    """Optimal bijection as an index array: a[i] matches b[out[i]]."""
    pa, pb = as_cloud(a), as_cloud(b)
    if pa.shape[0] != pb.shape[0]:
        raise ValueError(
            f"emd_assignment: clouds must have equal size, got {pa.shape[0]} vs {pb.shape[0]}")
    cost = np.sqrt(np.maximum(pairwise_sq_dists(pa, pb), 0.0))
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(pa.shape[0], dtype=np.intp)
    out[rows] = cols
    return out


def emd_bruteforce(a, b) -> float:
    """Test oracle: exact minimum by enumerating all bijections (n <= 8)."""
    pa, pb = as_cloud(a), as_cloud(b)
    n = pa.shape[0]
    if pb.shape[0] != n:
        raise ValueError(
            f"emd_bruteforce: clouds must have equal size, got {n} vs {pb.shape[0]}")
    if n > 8:
        raise ValueError(f"emd_bruteforce: n={n} exceeds factorial guard (8)")
    d = np.sqrt(np.maximum(pairwise_sq_dists(pa, pb), 0.0))
    best = np.inf
    for perm in itertools.permutations(range(n)):
        total = d[np.arange(n), perm].sum()
        if total < best:
            best = total
    return float(best)


# ---------------------------------------------------------------------------
# cloud files: one record per cloud, text and length-prefixed binary
# ---------------------------------------------------------------------------


def save_clouds_text(path, clouds, meta: dict | None = None):
    with open(path, "w") as f:
        f.write(_TXT_MAGIC + "\n")
        f.write(json.dumps(meta or {}, sort_keys=True) + "\n")
        for cloud in clouds:
            pts = as_cloud(cloud)
            f.write(f"{pts.shape[0]} 3\n")
            for x, y, z in pts:
                # float repr is shortest-exact, so text round trips at 64 bits
                f.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def load_clouds_text(path) -> tuple[list[np.ndarray], dict]:
    with open(path) as f:
        if f.readline().strip() != _TXT_MAGIC:
            raise ValueError(f"{path}: not a text cloud file")
        meta = json.loads(f.readline())
        clouds = []
        for header in f:
            if not header.strip():
                continue
            n, cols = (int(v) for v in header.split())
            if cols != 3:
                raise ValueError(f"{path}: expected 3 columns, got {cols}")
            pts = np.array([[float(v) for v in f.readline().split()] for _ in range(n)])
            clouds.append(as_cloud(pts))
    return clouds, meta


def save_clouds_binary(path, clouds, meta: dict | None = None):
    with open(path, "wb") as f:
        f.write(_BIN_MAGIC)
        f.write(json.dumps(meta or {}, sort_keys=True).encode() + b"\n")
        for cloud in clouds:
            pts = as_cloud(cloud)
            f.write(np.array([pts.shape[0], 3], dtype="<u8").tobytes())
            f.write(np.ascontiguousarray(pts, dtype="<f8").tobytes())


def load_clouds_binary(path) -> tuple[list[np.ndarray], dict]:
    with open(path, "rb") as f:
        if f.read(len(_BIN_MAGIC)) != _BIN_MAGIC:
            raise ValueError(f"{path}: not a binary cloud file")
        meta = json.loads(f.readline().decode())
        clouds = []
        while True:
            head = f.read(16)
            if not head:
                break
            n, cols = np.frombuffer(head, dtype="<u8")
            if cols != 3:
                raise ValueError(f"{path}: expected 3 columns, got {cols}")
            buf = f.read(int(n) * 24)
            if len(buf) != int(n) * 24:
                raise ValueError(f"{path}: truncated cloud record")
            clouds.append(np.frombuffer(buf, dtype="<f8").reshape(int(n), 3).copy())
    return clouds, meta
