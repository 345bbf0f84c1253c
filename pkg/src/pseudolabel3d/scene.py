"""Scene containers and the 3D -> 2D projection / visibility primitives.

Pixel coordinates are always ``(row, col)``.  The intrinsic matrix follows
the usual pinhole convention, so the first homogeneous component is the
column (x) and the second is the row (y):

    u, v, s = K @ (E @ [x, y, z, 1])[:3]
    row, col = v / s, u / s

Intrinsics are expressed at RGB resolution; depth, feature and mask rasters
of other sizes are reached by uniform scaling.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvariantError

UNASSIGNED = -1
IGNORE = -1

_ROT_TOL = 1e-6


def as_mask(indices):
    """Canonical point mask: sorted, unique int64 indices."""
    return np.unique(np.asarray(indices, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class SceneCloud:
    xyz: np.ndarray
    rgb: np.ndarray = None
    scene_id: str = "scene"

    def __post_init__(self):
        xyz = np.ascontiguousarray(self.xyz, dtype=np.float64)
        rgb = self.rgb
        if rgb is None:
            rgb = np.zeros((len(xyz), 3), dtype=np.uint8)
        rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "rgb", rgb)
        problems = self.check()
        if problems:
            raise InvariantError(problems)

    def check(self):
        problems = []
        if self.xyz.ndim != 2 or self.xyz.shape[1] != 3:
            return [f"{self.scene_id}: xyz must be N x 3, got {self.xyz.shape}"]
        if len(self.xyz) < 1:
            problems.append(f"{self.scene_id}: empty point cloud")
        if not np.isfinite(self.xyz).all():
            problems.append(f"{self.scene_id}: non-finite coordinates")
        if self.rgb.shape != self.xyz.shape:
            problems.append(f"{self.scene_id}: rgb shape {self.rgb.shape} != xyz shape {self.xyz.shape}")
        return problems

    def __len__(self):
        return len(self.xyz)


@dataclass(frozen=True, eq=False)
class CameraFrame:
    frame_id: int
    intrinsic: np.ndarray
    extrinsic: np.ndarray
    depth: np.ndarray
    rgb_size: tuple

    def __post_init__(self):
        object.__setattr__(self, "intrinsic", np.asarray(self.intrinsic, dtype=np.float64).copy())
        object.__setattr__(self, "extrinsic", np.asarray(self.extrinsic, dtype=np.float64).copy())
        object.__setattr__(self, "depth", np.ascontiguousarray(self.depth, dtype=np.uint16))
        object.__setattr__(self, "rgb_size", (int(self.rgb_size[0]), int(self.rgb_size[1])))
        for arr in (self.intrinsic, self.extrinsic, self.depth):
            arr.setflags(write=False)
        problems = self.check()
        if problems:
            raise InvariantError(problems)

    def check(self):
        tag = f"frame {self.frame_id}"
        problems = []
        K, E = self.intrinsic, self.extrinsic
        if K.shape != (3, 3):
            problems.append(f"{tag}: intrinsic must be 3x3, got {K.shape}")
        else:
            if not (K[0, 0] > 0 and K[1, 1] > 0):
                problems.append(f"{tag}: intrinsic focal entries must be positive")
            if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
                problems.append(f"{tag}: intrinsic must be upper-triangular")
            if not K[2, 2] > 0:
                problems.append(f"{tag}: intrinsic K[2,2] must be positive")
        if E.shape != (4, 4):
            problems.append(f"{tag}: extrinsic must be 4x4, got {E.shape}")
        else:
            R = E[:3, :3]
            if not np.isfinite(E).all():
                problems.append(f"{tag}: extrinsic has non-finite entries")
            elif (np.abs(R @ R.T - np.eye(3)).max() > _ROT_TOL
                    or abs(np.linalg.det(R) - 1.0) > _ROT_TOL):
                problems.append(f"{tag}: extrinsic rotation block is not a proper rotation")
        if self.depth.ndim != 2:
            problems.append(f"{tag}: depth raster must be 2-D")
        if min(self.rgb_size) < 1:
            problems.append(f"{tag}: rgb_size must be positive")
        return problems


@dataclass(frozen=True, eq=False)
class FeatureMap:
    frame_id: int
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise InvariantError(f"feature map {self.frame_id}: expected H x W x C, got {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def channels(self):
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class LabelEmbeddings:
    classes: tuple
    data: np.ndarray

    def __post_init__(self):
        classes = tuple(str(c) for c in self.classes)
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "data", data)
        problems = []
        if len(classes) < 1:
            problems.append("label set is empty")
        if len(set(classes)) != len(classes):
            problems.append("class names are not unique")
        if data.ndim != 2 or data.shape[0] != len(classes):
            problems.append(f"embeddings shape {data.shape} does not match {len(classes)} classes")
        if problems:
            raise InvariantError(problems)


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    data: np.ndarray
    featureless: np.ndarray = field(default=None)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        fl = self.featureless
        fl = np.zeros(len(data), dtype=bool) if fl is None else np.asarray(fl, dtype=bool)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "featureless", fl)
        if not np.isfinite(data[~fl]).all():
            raise InvariantError("score matrix has non-finite entries on scored rows")


# projection ---------------------------------------------------------------


def project_point(p, frame):
    """Project one world point; returns ``(row, col, depth)`` or ``None``.

    ``None`` means the point sits at or behind the camera plane.
    """
    x, y, z = (float(v) for v in p)
    E = frame.extrinsic.tolist()
    K = frame.intrinsic.tolist()
    cx = E[0][0] * x + E[0][1] * y + E[0][2] * z + E[0][3]
    cy = E[1][0] * x + E[1][1] * y + E[1][2] * z + E[1][3]
    cz = E[2][0] * x + E[2][1] * y + E[2][2] * z + E[2][3]
    if not cz > 0:
        return None
    u = K[0][0] * cx + K[0][1] * cy + K[0][2] * cz
    v = K[1][0] * cx + K[1][1] * cy + K[1][2] * cz
    s = K[2][0] * cx + K[2][1] * cy + K[2][2] * cz
    return v / s, u / s, cz


def visible_in_frame(p, frame, depth_tol):
    """Integer RGB pixel ``(row, col)`` of ``p`` if it passes the occlusion test."""
    proj = project_point(p, frame)
    if proj is None:
        return None
    h, w, d = proj
    H, W = frame.rgb_size
    Hd, Wd = frame.depth.shape
    if not (0.0 <= h + 0.5 < H and 0.0 <= w + 0.5 < W):
        return None
    hd = h * (Hd / H) + 0.5
    wd = w * (Wd / W) + 0.5
    if not (0.0 <= hd < Hd and 0.0 <= wd < Wd):
        return None
    raw = int(frame.depth[math.floor(hd), math.floor(wd)])
    if raw == 0:
        return None
    if not abs(d - raw / 1000.0) <= depth_tol:
        return None
    return math.floor(h + 0.5), math.floor(w + 0.5)


def project_points(xyz, frame):
    """Vectorised :func:`project_point`; returns ``(rows, cols, depth)`` arrays.

    Entries with non-positive depth are NaN in ``rows`` / ``cols``.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    E = frame.extrinsic
    K = frame.intrinsic
    # same operation order as the scalar path so results are bit-identical
    cx = E[0, 0] * x + E[0, 1] * y + E[0, 2] * z + E[0, 3]
    cy = E[1, 0] * x + E[1, 1] * y + E[1, 2] * z + E[1, 3]
    cz = E[2, 0] * x + E[2, 1] * y + E[2, 2] * z + E[2, 3]
    u = K[0, 0] * cx + K[0, 1] * cy + K[0, 2] * cz
    v = K[1, 0] * cx + K[1, 1] * cy + K[1, 2] * cz
    s = K[2, 0] * cx + K[2, 1] * cy + K[2, 2] * cz
    front = cz > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        rows = np.where(front, v / s, np.nan)
        cols = np.where(front, u / s, np.nan)
    return rows, cols, cz


def project_cloud(cloud, frame, depth_tol):
    """All visible points of ``cloud`` in ``frame``.

    Returns ``(indices, pixels)``: ascending point indices and the matching
    integer ``(row, col)`` RGB pixels as an ``n x 2`` int64 array.
    """
    xyz = cloud.xyz if isinstance(cloud, SceneCloud) else np.asarray(cloud, dtype=np.float64)
    rows, cols, d = project_points(xyz, frame)
    H, W = frame.rgb_size
    Hd, Wd = frame.depth.shape
    with np.errstate(invalid="ignore"):
        hr = rows + 0.5
        wr = cols + 0.5
        hd = rows * (Hd / H) + 0.5
        wd = cols * (Wd / W) + 0.5
        ok = (hr >= 0.0) & (hr < H) & (wr >= 0.0) & (wr < W)
        ok &= (hd >= 0.0) & (hd < Hd) & (wd >= 0.0) & (wd < Wd)
    idx = np.flatnonzero(ok)
    raw = frame.depth[np.floor(hd[idx]).astype(np.int64), np.floor(wd[idx]).astype(np.int64)]
    keep = (raw > 0) & (np.abs(d[idx] - raw / 1000.0) <= depth_tol)
    idx = idx[keep]
    pix = np.empty((len(idx), 2), dtype=np.int64)
    pix[:, 0] = np.floor(hr[idx])
    pix[:, 1] = np.floor(wr[idx])
    return idx, pix


def rescale_pixels(pix, rgb_size, raster_shape):
    """Map integer RGB pixels onto a raster of another resolution.

    A pixel covers ``[h, h+1)``; its centre ``h + 0.5`` is scaled and
    floored, in exact integer arithmetic.
    """
    pix = np.asarray(pix, dtype=np.int64)
    H, W = rgb_size
    Hr, Wr = raster_shape[:2]
    if (Hr, Wr) == (H, W):
        return pix
    out = np.empty_like(pix)
    out[:, 0] = ((2 * pix[:, 0] + 1) * Hr) // (2 * H)
    out[:, 1] = ((2 * pix[:, 1] + 1) * Wr) // (2 * W)
    return out
