"""Synthetic scenes with exact ground truth, for end-to-end oracle tests.

A scene is a floor plane (background class) plus raised axis-aligned boxes
(foreground instances) sampled on a jittered grid. Cameras circle the room
looking inward. Depth, one-hot class features and prompt-mask rasters are
all rendered from one point z-buffer, so with every noise knob at zero the
inputs are self-consistent and the pipeline should recover the truth.

Points that no camera sees are dropped, as a reconstruction would never
contain them.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvariantError
from .manifest import SceneBundle, save_scene
from .metrics import GroundTruth
from .mgb import PromptMaskRaster, SuperpointPartition, superpoint_centroids
from .scene import CameraFrame, FeatureMap, LabelEmbeddings, SceneCloud, project_cloud, project_points

CLASS_NAMES = ("chair", "table", "cabinet", "bed", "sofa", "desk", "bookshelf", "sink",
               "toilet", "bathtub", "counter", "refrigerator")
FLOOR = "floor"


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 1
    instances: int = 6
    points_per_instance: tuple = (400, 800)
    classes: int = 3  # foreground classes; "floor" is added as background
    room_extent: float = 4.0
    frames: int = 8
    feature_flip_rate: float = 0.0
    mask_dilation: int = 0
    depth_noise: float = 0.0  # metres
    image_size: tuple = (120, 160)
    spacing: float = 0.025
    gap: float = 0.25
    elevation: float = 0.2
    depth_tolerance: float = 0.05

    def __post_init__(self):
        problems = []
        if min(self.instances, self.classes, self.frames) < 1:
            problems.append("instances, classes and frames must all be >= 1")
        lo, hi = self.points_per_instance
        if not 1 <= lo <= hi:
            problems.append("points_per_instance must satisfy 1 <= lo <= hi")
        if not 0.0 <= self.feature_flip_rate <= 1.0:
            problems.append("feature_flip_rate must be in [0, 1]")
        if self.mask_dilation < 0 or self.depth_noise < 0:
            problems.append("noise knobs must be non-negative")
        if self.room_extent <= 0 or self.spacing <= 0:
            problems.append("room_extent and spacing must be positive")
        if problems:
            raise InvariantError(problems)


@dataclass(eq=False)
class SyntheticScene:
    bundle: SceneBundle
    ground_truth: GroundTruth


def _grid(lo, hi, spacing):
    n = max(2, int(round((hi - lo) / spacing)) + 1)
    return np.linspace(lo, hi, n)


def _face(rng, u, v, make, spacing):
    uu, vv = np.meshgrid(u, v, indexing="ij")
    uu = uu.ravel() + rng.uniform(-0.1, 0.1, uu.size) * spacing
    vv = vv.ravel() + rng.uniform(-0.1, 0.1, vv.size) * spacing
    return make(uu, vv)


def _box_faces(rng, origin, dims, spacing):
    x0, y0, z0 = origin
    a, b, c = dims
    x1, y1, z1 = x0 + a, y0 + b, z0 + c
    xs, ys, zs = _grid(x0, x1, spacing), _grid(y0, y1, spacing), _grid(z0, z1, spacing)
    return [
        _face(rng, xs, ys, lambda u, v: np.stack([u, v, np.full_like(u, z1)], 1), spacing),
        _face(rng, xs, zs, lambda u, v: np.stack([u, np.full_like(u, y0), v], 1), spacing),
        _face(rng, xs, zs, lambda u, v: np.stack([u, np.full_like(u, y1), v], 1), spacing),
        _face(rng, ys, zs, lambda u, v: np.stack([np.full_like(u, x0), u, v], 1), spacing),
        _face(rng, ys, zs, lambda u, v: np.stack([np.full_like(u, x1), u, v], 1), spacing),
    ]


def _place_boxes(rng, spec):
    E = spec.room_extent
    margin = 0.3
    placed = []
    for i in range(spec.instances):
        target = rng.integers(spec.points_per_instance[0], spec.points_per_instance[1] + 1)
        aspect = rng.uniform(0.6, 1.4, 3)
        unit_area = aspect[0] * aspect[1] + 2 * aspect[2] * (aspect[0] + aspect[1])
        scale = spec.spacing * np.sqrt(target / unit_area)
        dims = aspect * scale
        for _ in range(2000):
            lo = margin
            hi = E - margin - dims[:2]
            if (hi < lo).any():
                break
            xy = rng.uniform(lo, hi)
            ok = all(
                xy[0] + dims[0] + spec.gap <= p[0] or p[0] + d[0] + spec.gap <= xy[0]
                or xy[1] + dims[1] + spec.gap <= p[1] or p[1] + d[1] + spec.gap <= xy[1]
                for p, d in placed
            )
            if ok:
                placed.append((xy, dims))
                break
        else:
            raise InvariantError(f"cannot place instance {i}: room too small for {spec.instances} boxes")
        if len(placed) != i + 1:
            raise InvariantError(f"instance {i} does not fit in a {E} m room")
    return placed


def _look_at(eye, target):
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ eye
    return T


def _cameras(spec):
    H, W = spec.image_size
    f = W / 2.0  # 90 degree horizontal field of view
    K = np.array([[f, 0.0, W / 2.0], [0.0, f, H / 2.0], [0.0, 0.0, 1.0]])
    E = spec.room_extent
    centre = np.array([E / 2, E / 2, 0.0])
    poses = []
    for i in range(spec.frames):
        ang = 2 * np.pi * i / spec.frames
        radius = 0.55 * E + 0.15 * E * (i % 2)
        eye = centre + np.array([radius * np.cos(ang), radius * np.sin(ang), 1.6 + 0.4 * (i % 3)])
        aim = centre + np.array([0.1 * E * np.cos(ang + 1.0), 0.1 * E * np.sin(ang + 1.0), 0.3])
        poses.append(_look_at(eye, aim))
    return K, poses


def _render(xyz, K, T, image_size):
    """Point z-buffer: depth in mm and the winning point index per pixel (-1 = empty)."""
    H, W = image_size
    dummy = CameraFrame(0, K, T, np.zeros((1, 1), np.uint16), image_size)
    rows, cols, d = project_points(xyz, dummy)
    with np.errstate(invalid="ignore"):
        hr, wr = np.floor(rows + 0.5), np.floor(cols + 0.5)
        ok = (d > 0) & (hr >= 0) & (hr < H) & (wr >= 0) & (wr < W)
    idx = np.flatnonzero(ok)
    mm = np.round(d[idx] * 1000.0)
    ok_mm = (mm >= 1) & (mm <= 65535)
    idx, mm = idx[ok_mm], mm[ok_mm]
    flat = hr[idx].astype(np.int64) * W + wr[idx].astype(np.int64)
    order = np.lexsort((idx, mm, flat))
    flat, idx, mm = flat[order], idx[order], mm[order]
    first = np.ones(len(flat), dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    depth = np.zeros(H * W, dtype=np.uint16)
    winner = np.full(H * W, -1, dtype=np.int64)
    depth[flat[first]] = mm[first].astype(np.uint16)
    winner[flat[first]] = idx[first]
    return depth.reshape(H, W), winner.reshape(H, W)


def generate_synthetic(spec=SynthSpec()):
    """Build a scene bundle plus its ground truth, deterministically from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    n_fg = spec.classes
    names = [FLOOR] + [CLASS_NAMES[i] if i < len(CLASS_NAMES) else f"object{i}" for i in range(n_fg)]
    K_cls = len(names)

    pts, inst, cls, face = [], [], [], []
    face_id = 0
    boxes = _place_boxes(rng, spec)
    inst_class = np.array([1 + (i % n_fg) for i in range(spec.instances)])
    rng.shuffle(inst_class)
    for i, (xy, dims) in enumerate(boxes):
        z0 = spec.elevation + rng.uniform(0.0, 0.1)
        faces = _box_faces(rng, (xy[0], xy[1], z0), dims, spec.spacing)
        for fpts in faces:
            pts.append(fpts)
            inst.append(np.full(len(fpts), i))
            cls.append(np.full(len(fpts), inst_class[i]))
            face.append(np.full(len(fpts), face_id))
            face_id += 1
    E = spec.room_extent
    fx, fy = _grid(0.0, E, spec.spacing), _grid(0.0, E, spec.spacing)
    floor = _face(rng, fx, fy, lambda u, v: np.stack([u, v, np.zeros_like(u)], 1), spec.spacing)
    tile = np.floor(np.clip(floor[:, :2], 0, E - 1e-9)).astype(np.int64)
    n_tiles = int(np.ceil(E))
    pts.append(floor)
    inst.append(np.full(len(floor), -1))
    cls.append(np.zeros(len(floor), dtype=np.int64))
    face.append(face_id + tile[:, 0] * n_tiles + tile[:, 1])

    # float32 round-trip so the on-disk scene is identical to the in-memory one
    xyz = np.concatenate(pts).astype(np.float32).astype(np.float64)
    inst = np.concatenate(inst)
    cls = np.concatenate(cls)
    face = np.concatenate(face)
    order = rng.permutation(len(xyz))
    xyz, inst, cls, face = xyz[order], inst[order], cls[order], face[order]

    K, poses = _cameras(spec)
    H, W = spec.image_size
    renders = [_render(xyz, K, T, spec.image_size) for T in poses]
    frames = []
    for fid, (T, (depth, _)) in enumerate(zip(poses, renders)):
        if spec.depth_noise > 0:
            valid = depth > 0
            noisy = depth.astype(np.float64) + rng.normal(0.0, spec.depth_noise * 1000.0, depth.shape)
            depth = np.where(valid, np.clip(np.round(noisy), 1, 65535), 0).astype(np.uint16)
        frames.append(CameraFrame(fid, K, T, depth, spec.image_size))

    seen = np.zeros(len(xyz), dtype=bool)
    for frame in frames:
        idx, _ = project_cloud(xyz, frame, spec.depth_tolerance)
        seen[idx] = True
    keep = np.flatnonzero(seen)
    remap = np.full(len(xyz), -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    winners = [np.where(w >= 0, remap[np.maximum(w, 0)], -1) for _, w in renders]
    xyz, inst, cls, face = xyz[keep], inst[keep], cls[keep], face[keep]
    # winners always pass the depth test when depth is noise-free

    face = _fold_small_faces(face, inst, min_size=40)
    sp = SuperpointPartition.from_ids(face)
    cloud = SceneCloud(xyz, _colours(cls), f"synth-{spec.seed}")
    centroids = superpoint_centroids(cloud, sp)

    # canonical prompt per instance: its lowest superpoint id
    n_inst = spec.instances
    sp_inst = np.full(sp.count, -1, dtype=np.int64)
    sp_inst[sp.sp_ids] = inst
    canon = np.full(n_inst, -1, dtype=np.int64)
    for m in range(sp.count - 1, -1, -1):
        if sp_inst[m] >= 0:
            canon[sp_inst[m]] = m

    fmaps, rasters = [], []
    eye = np.eye(K_cls, dtype=np.float32)
    for frame, win in zip(frames, winners):
        has = win >= 0
        wcls = np.where(has, cls[np.maximum(win, 0)], -1)
        if spec.feature_flip_rate > 0:
            flip = has & (rng.random(win.shape) < spec.feature_flip_rate)
            shift = rng.integers(1, max(K_cls, 2), win.shape)
            wcls = np.where(flip, (wcls + shift) % K_cls, wcls)
        feat = np.zeros((H, W, K_cls), dtype=np.float32)
        feat[has] = eye[wcls[has]]
        fmaps.append(FeatureMap(frame.frame_id, feat))

        cidx, _ = project_cloud(xyz[centroids], frame, spec.depth_tolerance)
        prompted = np.zeros(n_inst, dtype=bool)
        hit = sp_inst[cidx]
        prompted[hit[hit >= 0]] = True
        winst = np.where(has, inst[np.maximum(win, 0)], -1)
        show = (winst >= 0) & prompted[np.maximum(winst, 0)]
        raster = np.where(show, canon[np.maximum(winst, 0)], -1).astype(np.int32)
        if spec.mask_dilation > 0:
            raster = _dilate(raster, spec.mask_dilation)
        rasters.append(PromptMaskRaster(frame.frame_id, raster))

    labels = LabelEmbeddings(tuple(names), np.eye(K_cls, dtype=np.float32))
    gt = GroundTruth(inst, cls)
    bundle = SceneBundle(cloud, frames, fmaps, labels, rasters, sp, gt, (FLOOR,))
    return SyntheticScene(bundle, gt)


def _fold_small_faces(face, inst, min_size):
    """Merge undersized box faces into the largest face of the same instance."""
    face = face.copy()
    ids, counts = np.unique(face, return_counts=True)
    size = dict(zip(ids.tolist(), counts.tolist()))
    for i in np.unique(inst[inst >= 0]):
        members = np.unique(face[inst == i])
        big = max(members.tolist(), key=lambda f: (size[f], -f))
        for f in members.tolist():
            if size[f] < min_size and f != big:
                face[face == f] = big
    return face


def _dilate(raster, radius):
    out = raster.copy()
    structure = ndimage.generate_binary_structure(2, 1)
    for pid in np.unique(raster[raster >= 0]):
        grown = ndimage.binary_dilation(raster == pid, structure, iterations=radius)
        out[grown & (out == -1)] = pid
    return out


def _colours(cls):
    palette = np.array([[128, 128, 128], [220, 60, 60], [60, 180, 75], [0, 130, 200],
                        [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230]], np.uint8)
    return palette[cls % len(palette)]


def write_synthetic(spec, out_dir):
    scene = generate_synthetic(spec)
    return save_scene(scene.bundle, out_dir), scene
