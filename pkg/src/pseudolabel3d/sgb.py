"""Semantic branch: lift 2D features onto points, score them against the
class embeddings, and group same-class foreground points by radius BFS.
"""

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import DimensionError
from .scene import IGNORE, ScoreMatrix, project_cloud, rescale_pixels


@dataclass(frozen=True, eq=False)
class PointFeatures:
    data: np.ndarray  # N x C float32
    featureless: np.ndarray  # N bool
    counts: np.ndarray  # frames contributing to each point


def _pair_by_frame(frames, others, what):
    by_id = {o.frame_id: o for o in others}
    if len(by_id) != len(others) or set(by_id) != {f.frame_id for f in frames}:
        raise DimensionError(f"{what} frame ids do not match camera frame ids")
    return [(f, by_id[f.frame_id]) for f in sorted(frames, key=lambda f: f.frame_id)]


def accumulate_features(cloud, frames, maps, depth_tol):
    """Average the feature vectors seen by every point over all frames.

    Frames are visited in ascending ``frame_id`` and sums are kept in float64,
    so the result is reproducible bit for bit.
    """
    n = len(cloud)
    channels = {m.channels for m in maps}
    if len(channels) > 1:
        raise DimensionError(f"feature maps disagree on channel count: {sorted(channels)}")
    pairs = _pair_by_frame(frames, maps, "feature map")
    C = channels.pop() if channels else 0
    sums = np.zeros((n, C), dtype=np.float64)
    counts = np.zeros(n, dtype=np.int64)
    for frame, fmap in pairs:
        idx, pix = project_cloud(cloud, frame, depth_tol)
        fpix = rescale_pixels(pix, frame.rgb_size, fmap.data.shape)
        # each point appears at most once per frame, so fancy-index += is safe
        sums[idx] += fmap.data[fpix[:, 0], fpix[:, 1]]
        counts[idx] += 1
    featureless = counts == 0
    mean = np.zeros_like(sums)
    seen = ~featureless
    mean[seen] = sums[seen] / counts[seen, None]
    return PointFeatures(mean.astype(np.float32), featureless, counts)


def compute_scores(feat, labels, normalize=True):
    """Point-to-class similarity scores ``S = F3d @ F1d.T``.

    With ``normalize`` both sides are L2-normalised per row first, i.e. the
    score is a cosine similarity. Rows that are featureless, or have zero
    norm under normalisation, are flagged and left at zero.
    """
    F = feat.data.astype(np.float64)
    L = labels.data.astype(np.float64)
    if F.shape[1] != L.shape[1]:
        raise DimensionError(f"point features have C={F.shape[1]}, label embeddings C={L.shape[1]}")
    featureless = feat.featureless.copy()
    if normalize:
        fn = np.linalg.norm(F, axis=1)
        featureless |= fn == 0
        F = np.divide(F, fn[:, None], out=np.zeros_like(F), where=fn[:, None] > 0)
        ln = np.linalg.norm(L, axis=1)
        L = np.divide(L, ln[:, None], out=np.zeros_like(L), where=ln[:, None] > 0)
    S = F @ L.T
    S[featureless] = 0.0
    return ScoreMatrix(S.astype(np.float32), featureless)


def classify_points(scores):
    """Argmax class per point (lowest index on ties); featureless -> IGNORE."""
    if scores.data.shape[1] == 0:
        return np.full(len(scores.data), IGNORE, dtype=np.int64)
    cls = np.argmax(scores.data, axis=1).astype(np.int64)
    cls[scores.featureless] = IGNORE
    return cls


def radius_components(xyz, radius):
    """Connected components of the graph linking points within ``radius``."""
    n = len(xyz)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    pairs = cKDTree(xyz).query_pairs(radius, output_type="ndarray")
    graph = coo_matrix(
        (np.ones(len(pairs), dtype=np.int8), (pairs[:, 0], pairs[:, 1])), shape=(n, n)
    )
    _, comp = connected_components(graph, directed=False)
    return comp


def bfs_group(cloud, sem, radius, min_cluster_size=50, background_classes=()):
    """Coarse instance masks from same-class radius connectivity.

    Two foreground points are linked when they share a class and lie within
    ``radius`` of each other; clusters are the connected components.
    Clusters below ``min_cluster_size`` points are dropped. Masks come back
    sorted by their smallest point index.
    """
    xyz = cloud.xyz if hasattr(cloud, "xyz") else np.asarray(cloud, dtype=np.float64)
    sem = np.asarray(sem)
    fg = sem >= 0
    if len(background_classes):
        fg &= ~np.isin(sem, np.asarray(background_classes, dtype=sem.dtype))
    masks = []
    for cls in np.unique(sem[fg]):
        members = np.flatnonzero(sem == cls)
        comp = radius_components(xyz[members], radius)
        order = np.argsort(comp, kind="stable")
        splits = np.flatnonzero(np.diff(comp[order])) + 1
        for group in np.split(members[order], splits):
            if len(group) >= min_cluster_size:
                masks.append(np.sort(group))
    masks.sort(key=lambda m: m[0])
    return masks
