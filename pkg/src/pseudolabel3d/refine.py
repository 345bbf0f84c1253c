"""Pseudo-label refinement.

Instance side: combine coarse (semantic BFS) and fine (prompt-vote) masks by
overlap ratio, then fold undersized instances into their nearest large
neighbour. Semantic side: keep the most confident fraction of each class and
spread the survivors over superpoints.
"""

import math
from fractions import Fraction

import numpy as np
from scipy.sparse import csr_matrix
from scipy.spatial import cKDTree

from .scene import IGNORE, UNASSIGNED, ScoreMatrix


def _incidence(masks, n):
    lens = [len(m) for m in masks]
    cols = np.concatenate(masks) if masks else np.zeros(0, dtype=np.int64)
    rows = np.repeat(np.arange(len(masks)), lens)
    return csr_matrix((np.ones(len(cols), dtype=np.int64), (rows, cols)), shape=(len(masks), n))


def overlap_matrix(coarse, fine):
    """``A[q, w] = |coarse[q] & fine[w]|`` as a dense int64 array."""
    n = 1 + max((int(m[-1]) for m in list(coarse) + list(fine) if len(m)), default=0)
    A = _incidence(coarse, n) @ _incidence(fine, n).T
    return np.asarray(A.todense(), dtype=np.int64).reshape(len(coarse), len(fine))


def granularity_aware_assign(coarse, fine, theta):
    """Keep or split each coarse mask according to its best fine-mask overlap.

    With ``rho = max_w A[q, w] / sum_w A[q, w]``, a coarse mask is kept whole
    when ``rho > theta`` and otherwise replaced by its non-empty
    intersections with the fine masks; points covered by no fine mask are
    dropped. A coarse mask that touches no fine mask at all is kept whole.
    """
    A = overlap_matrix(coarse, fine)
    out = []
    for q, mask in enumerate(coarse):
        total = A[q].sum()
        if total == 0 or A[q].max() / total > theta:
            out.append(mask)
            continue
        for w in np.flatnonzero(A[q]):
            out.append(np.intersect1d(mask, fine[w], assume_unique=True))
    return out


def labels_from_masks(masks, n):
    labels = np.full(n, UNASSIGNED, dtype=np.int64)
    for i, m in enumerate(masks):
        labels[m] = i
    return labels


def _foreign_links(xyz, labels, tree, assigned, inst, pts, k):
    """Owners of the ``k`` nearest points outside instance ``inst``, per point."""
    budget = min(len(assigned), k + len(pts))
    dist, nn = tree.query(xyz[pts], k=budget)
    dist = dist.reshape(len(pts), budget)
    gidx = assigned[nn.reshape(len(pts), budget)]
    order = np.lexsort((gidx, dist), axis=1)
    gidx = np.take_along_axis(gidx, order, axis=1)
    owner = labels[gidx]
    foreign = owner != inst
    take = foreign & (np.cumsum(foreign, axis=1) <= k)
    return owner[take]


def merge_small_instances(cloud, masks, gamma, knn_k=1):
    """Fold instances smaller than ``gamma`` into their nearest large neighbour.

    For every point of a small instance the ``knn_k`` nearest assigned points
    of *other* instances are found; each is a link to its owner. The small
    instance joins the large (``>= gamma``) instance receiving most links,
    lowest index on ties. Sizes are taken once up front, so large instances
    never move and the result does not depend on processing order.

    Returns per-point instance ids, compacted to ``0..I-1`` in mask order.
    """
    xyz = cloud.xyz if hasattr(cloud, "xyz") else np.asarray(cloud, dtype=np.float64)
    labels = labels_from_masks(masks, len(xyz))
    sizes = np.array([len(m) for m in masks], dtype=np.int64)
    target = np.arange(len(masks))
    small = np.flatnonzero(sizes < gamma)
    large = sizes >= gamma
    if len(small) and large.any():
        assigned = np.flatnonzero(labels >= 0)
        tree = cKDTree(xyz[assigned])
        for inst in small:
            links = _foreign_links(xyz, labels, tree, assigned, inst, masks[inst], knn_k)
            links = links[large[links]]
            if len(links):
                votes = np.bincount(links, minlength=len(masks))
                target[inst] = int(np.argmax(votes))
    survivors = np.unique(target)
    remap = np.full(len(masks), -1, dtype=np.int64)
    remap[survivors] = np.arange(len(survivors))
    out = np.full(len(xyz), UNASSIGNED, dtype=np.int64)
    hit = labels >= 0
    out[hit] = remap[target[labels[hit]]]
    return out


def _quota(alpha, n):
    return math.ceil(Fraction(str(alpha)) * n / 100)


def semantic_select(scores, sem, alpha):
    """Per class, keep the ``ceil(alpha% * n_k)`` highest-scoring points.

    ``n_k`` is the number of points classified as ``k``. Ties at the cut go
    to the lower point index. Everything else becomes IGNORE.
    """
    S = scores.data if isinstance(scores, ScoreMatrix) else np.asarray(scores)
    sem = np.asarray(sem, dtype=np.int64)
    out = np.full(len(sem), IGNORE, dtype=np.int64)
    for k in np.unique(sem[sem >= 0]):
        members = np.flatnonzero(sem == k)
        keep = _quota(alpha, len(members))
        order = np.lexsort((members, -S[members, k]))
        out[members[order[:keep]]] = k
    return out


def _modal(groups, values, n_groups):
    """Most frequent non-negative value per group (lowest on ties), else -1."""
    valid = values >= 0
    result = np.full(n_groups, -1, dtype=np.int64)
    if not valid.any():
        return result
    g, v = groups[valid], values[valid]
    n_vals = int(v.max()) + 1
    hist = np.bincount(g * n_vals + v, minlength=n_groups * n_vals).reshape(n_groups, n_vals)
    has = hist.sum(axis=1) > 0
    result[has] = np.argmax(hist[has], axis=1)
    return result


def superpoint_propagate(selected, sp):
    """Give every point its superpoint's most frequent selected class."""
    ids = sp.sp_ids if hasattr(sp, "sp_ids") else np.asarray(sp, dtype=np.int64)
    count = sp.count if hasattr(sp, "count") else int(ids.max()) + 1
    mode = _modal(ids, np.asarray(selected, dtype=np.int64), count)
    return mode[ids]


def assign_instance_classes(instances, sem):
    """Map each instance id to the modal non-IGNORE class of its points."""
    instances = np.asarray(instances, dtype=np.int64)
    sem = np.asarray(sem, dtype=np.int64)
    hit = instances >= 0
    if not hit.any():
        return {}
    n_inst = int(instances.max()) + 1
    mode = _modal(instances[hit], sem[hit], n_inst)
    present = np.unique(instances[hit])
    return {int(i): int(mode[i]) for i in present}
