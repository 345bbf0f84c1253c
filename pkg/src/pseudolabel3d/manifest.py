"""Scene manifests: loading a scene bundle from disk and writing one back.

A manifest is a JSON document::

    {
      "schema": "pseudolabel3d.scene",
      "version": 1,
      "scene_id": "scene0000",
      "points": "points.dbgt",            # f32 N x 6 (xyz rgb) or an ASCII .ply
      "classes": ["floor", "chair"],
      "label_embeddings": "labels.dbgt",  # f32 K x C
      "background_classes": ["floor"],    # optional
      "superpoints": "superpoints.dbgt",  # optional, i32 N
      "ground_truth": {"instances": "gt_instances.dbgt", "classes": "gt_classes.dbgt"},
      "frames": [
        {"frame_id": 0, "rgb_size": [H, W],
         "intrinsic": "frames/000000.intrinsic.txt",
         "extrinsic": "frames/000000.extrinsic.txt",
         "depth": "frames/000000.depth.dbgt",        # u16 Hd x Wd, millimetres
         "features": "frames/000000.features.dbgt",  # f32 H' x W' x C
         "prompt_mask": "frames/000000.prompts.dbgt"}  # optional, i32 H x W
      ]
    }

Relative paths resolve against the manifest's directory.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvariantError, ParseError
from .metrics import GroundTruth
from .mgb import PromptMaskRaster, SuperpointPartition
from .scene import CameraFrame, FeatureMap, LabelEmbeddings, SceneCloud
from .tensorio import read_dbgt, read_matrix_txt, read_ply, write_dbgt, write_matrix_txt

SCHEMA = "pseudolabel3d.scene"
SCHEMA_VERSION = 1


@dataclass(eq=False)
class SceneBundle:
    cloud: SceneCloud
    frames: list
    feature_maps: list
    labels: LabelEmbeddings
    rasters: list = None
    superpoints: SuperpointPartition = None
    ground_truth: GroundTruth = None
    background_classes: tuple = ()

    def summary(self):
        return {
            "scene_id": self.cloud.scene_id,
            "N": len(self.cloud),
            "F": len(self.frames),
            "K": len(self.labels.classes),
            "M": self.superpoints.count if self.superpoints is not None else None,
        }


def _read_points(path):
    if path.suffix.lower() == ".ply":
        xyz, rgb = read_ply(path)
        return xyz, rgb
    arr = read_dbgt(path, dtype=np.float32, rank=2)
    if arr.shape[1] != 6:
        raise ParseError(path, f"point table must have 6 columns, found {arr.shape[1]}")
    return arr[:, :3].astype(np.float64), np.clip(arr[:, 3:], 0, 255).astype(np.uint8)


def load_scene(manifest_path):
    """Load and validate every file referenced by a manifest.

    Raises :class:`ParseError` for the first unreadable file and
    :class:`InvariantError` listing all consistency problems found.
    """
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise ParseError(manifest_path, f"cannot read: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(manifest_path, f"invalid JSON: {exc.msg}", offset=exc.pos) from exc
    if not isinstance(doc, dict) or doc.get("schema") != SCHEMA:
        raise ParseError(manifest_path, f"not a {SCHEMA} manifest")
    if doc.get("version") != SCHEMA_VERSION:
        raise ParseError(manifest_path, f"unsupported manifest version {doc.get('version')!r}")
    for key in ("points", "classes", "label_embeddings", "frames"):
        if key not in doc:
            raise ParseError(manifest_path, f"missing key {key!r}")
    root = manifest_path.parent

    def res(p):
        return root / p

    problems = []
    xyz, rgb = _read_points(res(doc["points"]))
    try:
        cloud = SceneCloud(xyz, rgb, doc.get("scene_id", manifest_path.stem))
    except InvariantError as exc:
        raise InvariantError(exc.violations) from exc
    n = len(cloud)

    emb = read_dbgt(res(doc["label_embeddings"]), dtype=np.float32, rank=2)
    try:
        labels = LabelEmbeddings(tuple(doc["classes"]), emb)
    except InvariantError as exc:
        problems.extend(exc.violations)
        labels = None

    frames, fmaps, rasters = [], [], []
    seen_ids = set()
    n_with_raster = 0
    for k, entry in enumerate(doc["frames"]):
        fid = entry.get("frame_id", k)
        if fid in seen_ids:
            problems.append(f"duplicate frame_id {fid}")
        seen_ids.add(fid)
        for key in ("intrinsic", "extrinsic", "depth", "rgb_size"):
            if key not in entry:
                problems.append(f"frame {fid}: missing {key}")
        if "features" not in entry:
            problems.append(f"frame {fid}: missing features")
        if any(key not in entry for key in ("intrinsic", "extrinsic", "depth", "rgb_size")):
            continue
        K = read_matrix_txt(res(entry["intrinsic"]), (3, 3))
        E = read_matrix_txt(res(entry["extrinsic"]), (4, 4))
        depth = read_dbgt(res(entry["depth"]), dtype=np.uint16, rank=2)
        try:
            frame = CameraFrame(fid, K, E, depth, tuple(entry["rgb_size"]))
        except InvariantError as exc:
            problems.extend(exc.violations)
            continue
        frames.append(frame)
        if "features" in entry:
            data = read_dbgt(res(entry["features"]), dtype=np.float32, rank=3)
            fmaps.append(FeatureMap(fid, data))
            if labels is not None and data.shape[2] != labels.data.shape[1]:
                problems.append(
                    f"frame {fid}: feature channels {data.shape[2]} != embedding C {labels.data.shape[1]}")
        if entry.get("prompt_mask"):
            n_with_raster += 1
            data = read_dbgt(res(entry["prompt_mask"]), dtype=np.int32, rank=2)
            try:
                rasters.append(PromptMaskRaster(fid, data))
            except InvariantError as exc:
                problems.extend(exc.violations)
    if len({m.channels for m in fmaps}) > 1:
        problems.append("feature maps disagree on channel count")
    if n_with_raster not in (0, len(doc["frames"])):
        problems.append(f"{n_with_raster} prompt rasters for {len(doc['frames'])} frames")

    superpoints = None
    if doc.get("superpoints"):
        ids = read_dbgt(res(doc["superpoints"]), dtype=np.int32, rank=1)
        if len(ids) != n:
            problems.append(f"superpoints have {len(ids)} entries for {n} points")
        else:
            try:
                superpoints = SuperpointPartition(ids, int(ids.max()) + 1 if len(ids) else 0)
            except InvariantError as exc:
                problems.extend(exc.violations)

    gt = None
    if doc.get("ground_truth"):
        g = doc["ground_truth"]
        inst = read_dbgt(res(g["instances"]), dtype=np.int32, rank=1)
        cls = read_dbgt(res(g["classes"]), dtype=np.int32, rank=1)
        if len(inst) != n or len(cls) != n:
            problems.append("ground-truth length does not match point count")
        else:
            gt = GroundTruth(inst, cls)

    background = tuple(doc.get("background_classes", ()))
    if labels is not None:
        unknown = [b for b in background if b not in labels.classes]
        if unknown:
            problems.append(f"background classes not in label set: {unknown}")
    if problems:
        raise InvariantError(problems)
    return SceneBundle(cloud, frames, fmaps, labels, rasters or None, superpoints, gt, background)


def save_scene(bundle, out_dir, manifest_name="manifest.json"):
    """Write a bundle as DBGT / text files plus a manifest; returns its path."""
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    cloud = bundle.cloud
    table = np.concatenate([cloud.xyz, cloud.rgb.astype(np.float64)], axis=1).astype(np.float32)
    write_dbgt(out_dir / "points.dbgt", table)
    write_dbgt(out_dir / "labels.dbgt", bundle.labels.data)
    doc = {
        "schema": SCHEMA,
        "version": SCHEMA_VERSION,
        "scene_id": cloud.scene_id,
        "points": "points.dbgt",
        "classes": list(bundle.labels.classes),
        "label_embeddings": "labels.dbgt",
        "background_classes": list(bundle.background_classes),
        "frames": [],
    }
    fmaps = {m.frame_id: m for m in bundle.feature_maps}
    rasters = {r.frame_id: r for r in (bundle.rasters or [])}
    for frame in bundle.frames:
        stem = f"frames/{frame.frame_id:06d}"
        write_matrix_txt(out_dir / f"{stem}.intrinsic.txt", frame.intrinsic)
        write_matrix_txt(out_dir / f"{stem}.extrinsic.txt", frame.extrinsic)
        write_dbgt(out_dir / f"{stem}.depth.dbgt", frame.depth)
        entry = {
            "frame_id": frame.frame_id,
            "rgb_size": list(frame.rgb_size),
            "intrinsic": f"{stem}.intrinsic.txt",
            "extrinsic": f"{stem}.extrinsic.txt",
            "depth": f"{stem}.depth.dbgt",
        }
        if frame.frame_id in fmaps:
            write_dbgt(out_dir / f"{stem}.features.dbgt", fmaps[frame.frame_id].data)
            entry["features"] = f"{stem}.features.dbgt"
        if frame.frame_id in rasters:
            write_dbgt(out_dir / f"{stem}.prompts.dbgt", rasters[frame.frame_id].data)
            entry["prompt_mask"] = f"{stem}.prompts.dbgt"
        doc["frames"].append(entry)
    if bundle.superpoints is not None:
        write_dbgt(out_dir / "superpoints.dbgt", bundle.superpoints.sp_ids.astype(np.int32))
        doc["superpoints"] = "superpoints.dbgt"
    if bundle.ground_truth is not None:
        write_dbgt(out_dir / "gt_instances.dbgt", bundle.ground_truth.instances.astype(np.int32))
        write_dbgt(out_dir / "gt_classes.dbgt", bundle.ground_truth.classes.astype(np.int32))
        doc["ground_truth"] = {"instances": "gt_instances.dbgt", "classes": "gt_classes.dbgt"}
    path = out_dir / manifest_name
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path
