"""Mask branch: superpoints, prompt pixels, and multi-view prompt-mask voting.

The 2D mask generator itself is external. It receives the prompt pixels
written by :func:`write_prompts` and must hand back one int32 raster per
frame where every pixel holds the prompt id whose mask covers it, or -1.
Overlapping masks have to be resolved on that side before export.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import InvariantError, ParseError
from .scene import UNASSIGNED, project_cloud, rescale_pixels

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SuperpointPartition:
    sp_ids: np.ndarray
    count: int
    degenerate_normals: int = 0

    def __post_init__(self):
        ids = np.asarray(self.sp_ids, dtype=np.int64)
        object.__setattr__(self, "sp_ids", ids)
        if len(ids) and (ids.min() < 0 or ids.max() >= self.count):
            raise InvariantError(f"superpoint ids outside [0, {self.count})")
        if len(np.unique(ids)) != self.count:
            raise InvariantError("superpoint ids do not occupy every value in [0, M)")

    @classmethod
    def from_ids(cls, ids):
        """Relabel arbitrary ids to ``0..M-1`` in order of first appearance."""
        ids = np.asarray(ids)
        _, first, inverse = np.unique(ids, return_index=True, return_inverse=True)
        rank = np.empty(len(first), dtype=np.int64)
        rank[np.argsort(first, kind="stable")] = np.arange(len(first))
        return cls(rank[inverse.reshape(-1)], len(first))


@dataclass(frozen=True, eq=False)
class PromptSet:
    frame_ids: np.ndarray
    prompt_ids: np.ndarray
    pixels: np.ndarray  # n x 2 (row, col)

    def for_frame(self, frame_id):
        sel = self.frame_ids == frame_id
        return self.prompt_ids[sel], self.pixels[sel]

    def __len__(self):
        return len(self.frame_ids)


@dataclass(frozen=True, eq=False)
class PromptMaskRaster:
    frame_id: int
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.int32)
        if data.ndim != 2:
            raise InvariantError(f"prompt raster {self.frame_id} must be 2-D")
        if len(data) and data.min() < -1:
            raise InvariantError(f"prompt raster {self.frame_id} holds ids below -1")
        object.__setattr__(self, "data", data)


# oversegmentation ----------------------------------------------------------


def estimate_normals(xyz, k=16):
    """PCA normals over the ``k`` nearest neighbours.

    Returns ``(normals, variation, degenerate)`` where ``variation`` is the
    surface variation ``l0 / (l0 + l1 + l2)`` of the neighbourhood covariance.
    Degenerate neighbourhoods (rank < 2) get the normal (0, 0, 1).
    """
    n = len(xyz)
    k = max(1, min(k, n))
    _, nbr = cKDTree(xyz).query(xyz, k=k)
    nbr = nbr.reshape(n, k)
    local = xyz[nbr]
    local = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    scale = np.maximum(evals[:, 2], np.finfo(float).tiny)
    degenerate = evals[:, 1] <= 1e-10 * scale
    normals[degenerate] = (0.0, 0.0, 1.0)
    total = evals.sum(axis=1)
    variation = np.divide(evals[:, 0], total, out=np.zeros(n), where=total > 0)
    return normals, variation, degenerate


def _csr_radius_graph(xyz, radius):
    n = len(xyz)
    pairs = cKDTree(xyz).query_pairs(radius, output_type="ndarray")
    src = np.concatenate([pairs[:, 0], pairs[:, 1]])
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n), out=indptr[1:])
    return indptr, dst


def _gather(indptr, indices, nodes):
    starts = indptr[nodes]
    lens = indptr[nodes + 1] - starts
    total = int(lens.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    offs = np.repeat(starts - np.cumsum(lens) + lens, lens)
    return indices[offs + np.arange(total)]


def oversegment(cloud, angle_threshold=30.0, knn_normals=16, radius=0.04, min_size=30,
                max_variation=0.05):
    """Normal-based region growing into superpoints.

    Seeds are taken in ascending point index. A region absorbs radius
    neighbours whose (unoriented) normal lies within ``angle_threshold``
    degrees of the seed normal; comparing against the seed rather than the
    current point keeps smooth bends from chaining across sharp edges.
    Points whose surface variation exceeds ``max_variation`` (creases,
    corners) may be absorbed but never seed or extend a region.

    Afterwards, leftover crease points and regions smaller than ``min_size``
    are handed to the nearest surviving region within ``radius``. Whatever
    is still unreachable becomes one region per connected piece.
    """
    xyz = cloud.xyz if hasattr(cloud, "xyz") else np.asarray(cloud, dtype=np.float64)
    n = len(xyz)
    normals, variation, degenerate = estimate_normals(xyz, knn_normals)
    n_degen = int(degenerate.sum())
    if n_degen:
        logger.warning("%d points have degenerate normal neighbourhoods", n_degen)
    smooth = variation <= max_variation
    cos_t = np.cos(np.deg2rad(angle_threshold))
    indptr, indices = _csr_radius_graph(xyz, radius)

    region = np.full(n, -1, dtype=np.int64)
    rid = 0
    for seed in np.flatnonzero(smooth):
        if region[seed] >= 0:
            continue
        ref = normals[seed]
        region[seed] = rid
        frontier = np.array([seed])
        while len(frontier):
            nb = np.unique(_gather(indptr, indices, frontier))
            nb = nb[region[nb] < 0]
            nb = nb[np.abs(normals[nb] @ ref) >= cos_t]
            region[nb] = rid
            frontier = nb[smooth[nb]]
        rid += 1

    region = _absorb(xyz, region, indptr, indices, min_size)
    part = SuperpointPartition.from_ids(region)
    return SuperpointPartition(part.sp_ids, part.count, n_degen)


def _absorb(xyz, region, indptr, indices, min_size):
    """Flood unlabelled and undersized-region points from nearest labelled neighbours."""
    n = len(xyz)
    if n == 0:
        return region
    sizes = np.bincount(region[region >= 0], minlength=1)
    region = np.where((region >= 0) & (sizes[np.maximum(region, 0)] >= min_size), region, -1)
    src = np.repeat(np.arange(n), np.diff(indptr))
    dist = np.linalg.norm(xyz[src] - xyz[indices], axis=1)
    while True:
        open_ = (region[src] < 0) & (region[indices] >= 0)
        if not open_.any():
            break
        s, d, t = src[open_], dist[open_], indices[open_]
        order = np.lexsort((t, d, s))
        s, t = s[order], t[order]
        first = np.ones(len(s), dtype=bool)
        first[1:] = s[1:] != s[:-1]
        region[s[first]] = region[t[first]]
    stranded = np.flatnonzero(region < 0)
    if len(stranded):
        base = region.max() + 1
        comp = radius_components_from_csr(indptr, indices, stranded)
        region[stranded] = base + comp
    return region


def radius_components_from_csr(indptr, indices, nodes):
    """Connected components of the subgraph induced by ``nodes``."""
    local = np.full(len(indptr) - 1, -1, dtype=np.int64)
    local[nodes] = np.arange(len(nodes))
    src = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))
    keep = (local[src] >= 0) & (local[indices] >= 0)
    graph = coo_matrix((np.ones(int(keep.sum()), dtype=np.int8),
                        (local[src[keep]], local[indices[keep]])), shape=(len(nodes), len(nodes)))
    _, comp = connected_components(graph, directed=False)
    return comp


def superpoint_centroids(cloud, sp):
    """Per superpoint, the member point closest to the member mean.

    Returns an int64 array ``c`` with ``c[m]`` the point index used as
    prompt ``m``. Ties go to the lowest point index.
    """
    xyz = cloud.xyz if hasattr(cloud, "xyz") else np.asarray(cloud, dtype=np.float64)
    ids = sp.sp_ids
    counts = np.bincount(ids, minlength=sp.count).astype(np.float64)
    mean = np.stack(
        [np.bincount(ids, weights=xyz[:, a], minlength=sp.count) for a in range(3)], axis=1
    ) / counts[:, None]
    d2 = ((xyz - mean[ids]) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(len(ids)), d2, ids))
    first = np.ones(len(order), dtype=bool)
    first[1:] = ids[order][1:] != ids[order][:-1]
    return order[first]


def project_prompts(cloud, centroids, frames, depth_tol):
    """Visible centroid pixels per frame, sorted by (frame_id, prompt_id)."""
    xyz = cloud.xyz if hasattr(cloud, "xyz") else np.asarray(cloud, dtype=np.float64)
    pts = xyz[np.asarray(centroids, dtype=np.int64)]
    fids, pids, pixs = [], [], []
    for frame in sorted(frames, key=lambda f: f.frame_id):
        idx, pix = project_cloud(pts, frame, depth_tol)
        fids.append(np.full(len(idx), frame.frame_id, dtype=np.int64))
        pids.append(idx)
        pixs.append(pix)
    if not fids:
        return PromptSet(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 2), np.int64))
    return PromptSet(np.concatenate(fids), np.concatenate(pids), np.concatenate(pixs))


def write_prompts(path, prompts):
    lines = [
        f"{f} {p} {h} {w}"
        for f, p, (h, w) in zip(prompts.frame_ids.tolist(), prompts.prompt_ids.tolist(),
                                prompts.pixels.tolist())
    ]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_prompts(path):
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        tok = line.split()
        if len(tok) != 4:
            raise ParseError(path, f"line {lineno}: expected 'frame_id prompt_id h w'")
        try:
            rows.append([int(t) for t in tok])
        except ValueError as exc:
            raise ParseError(path, f"line {lineno}: {exc}") from exc
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return PromptSet(arr[:, 0], arr[:, 1], arr[:, 2:4])


def vote_fine_masks(cloud, frames, rasters, depth_tol):
    """Fine instance masks from per-frame prompt-mask rasters.

    Every point gathers the prompt id under its pixel in each frame where it
    is visible (-1 pixels cast no vote). Its label is the most frequent id,
    lowest id on ties; points without votes stay UNASSIGNED.

    Returns ``(masks, labels)`` where ``labels[n]`` is a prompt id and masks
    are listed by ascending prompt id.
    """
    if len(frames) != len(rasters):
        raise InvariantError(f"{len(rasters)} prompt rasters for {len(frames)} frames")
    by_id = {r.frame_id: r for r in rasters}
    if set(by_id) != {f.frame_id for f in frames}:
        raise InvariantError("prompt raster frame ids do not match camera frame ids")
    n = len(cloud)
    pts, ids = [], []
    for frame in sorted(frames, key=lambda f: f.frame_id):
        raster = by_id[frame.frame_id].data
        idx, pix = project_cloud(cloud, frame, depth_tol)
        rpix = rescale_pixels(pix, frame.rgb_size, raster.shape)
        got = raster[rpix[:, 0], rpix[:, 1]].astype(np.int64)
        hit = got >= 0
        pts.append(idx[hit])
        ids.append(got[hit])
    labels = np.full(n, UNASSIGNED, dtype=np.int64)
    if not pts or not sum(len(p) for p in pts):
        return [], labels
    pts = np.concatenate(pts)
    ids = np.concatenate(ids)
    span = int(ids.max()) + 1
    keys, counts = np.unique(pts * span + ids, return_counts=True)
    kpt, kid = np.divmod(keys, span)
    order = np.lexsort((kid, -counts, kpt))
    kpt, kid = kpt[order], kid[order]
    first = np.ones(len(kpt), dtype=bool)
    first[1:] = kpt[1:] != kpt[:-1]
    labels[kpt[first]] = kid[first]
    return masks_from_labels(labels), labels


def masks_from_labels(labels):
    """Split a labeling into point masks, one per non-negative id (ascending)."""
    labels = np.asarray(labels)
    assigned = np.flatnonzero(labels >= 0)
    order = assigned[np.argsort(labels[assigned], kind="stable")]
    if not len(order):
        return []
    splits = np.flatnonzero(np.diff(labels[order])) + 1
    return np.split(order, splits)
