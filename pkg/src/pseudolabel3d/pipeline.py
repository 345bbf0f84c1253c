"""End-to-end pseudo-label generation for one scene."""

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mgb, refine, sgb
from .errors import PseudoLabelError, StageError
from .tensorio import write_dbgt

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class PipelineResult:
    instances: np.ndarray  # Y^I
    semantics: np.ndarray  # Y^S
    ensemble: list  # refined masks before small-instance merging
    coarse: list
    fine: list
    scores: object
    superpoints: object
    centroids: np.ndarray
    diagnostics: dict = field(default_factory=dict)


@contextmanager
def _stage(name, timings):
    t0 = time.perf_counter()
    try:
        yield
    except PseudoLabelError as exc:
        if isinstance(exc, StageError):
            raise
        raise StageError(name, exc) from exc
    except (ValueError, IndexError, MemoryError) as exc:
        raise StageError(name, exc) from exc
    finally:
        timings[name] = time.perf_counter() - t0


def run_pipeline(scene, config):
    """Run both grouping branches and the refinement steps on ``scene``."""
    timings = {}
    warnings = []
    cloud = scene.cloud
    n = len(cloud)
    if not scene.frames:
        warnings.append("scene has no frames: every point is featureless")
        logger.warning("%s: no frames", cloud.scene_id)

    with _stage("accumulate", timings):
        feats = sgb.accumulate_features(cloud, scene.frames, scene.feature_maps,
                                        config.depth_tolerance)
        if not scene.frames:
            feats = sgb.PointFeatures(
                np.zeros((n, scene.labels.data.shape[1]), np.float32),
                np.ones(n, dtype=bool), np.zeros(n, dtype=np.int64))
    with _stage("score", timings):
        scores = sgb.compute_scores(feats, scene.labels, config.normalize_embeddings)
    with _stage("classify", timings):
        sem = sgb.classify_points(scores)
    with _stage("bfs_group", timings):
        names = config.background_classes or scene.background_classes
        unknown = [b for b in names if b not in scene.labels.classes]
        if unknown:
            warnings.append(f"unknown background classes ignored: {unknown}")
        bg = [scene.labels.classes.index(b) for b in names if b in scene.labels.classes]
        coarse = sgb.bfs_group(cloud, sem, config.bfs_radius, config.min_cluster_size, bg)

    with _stage("superpoints", timings):
        sp = scene.superpoints
        if sp is None:
            sp = mgb.oversegment(cloud, config.angle_threshold, config.knn_normals,
                                 config.bfs_radius, config.min_superpoint_size)
        centroids = mgb.superpoint_centroids(cloud, sp)
    with _stage("vote", timings):
        if scene.rasters:
            fine, _ = mgb.vote_fine_masks(cloud, scene.frames, scene.rasters,
                                          config.depth_tolerance)
        else:
            fine = []
            if scene.frames:
                warnings.append("no prompt rasters: fine masks are empty")

    with _stage("assign", timings):
        ensemble = refine.granularity_aware_assign(coarse, fine, config.overlap_threshold)
    with _stage("merge", timings):
        instances = refine.merge_small_instances(cloud, ensemble,
                                                 config.small_instance_threshold, config.knn_k)
    with _stage("select", timings):
        selected = refine.semantic_select(scores, sem, config.select_top_alpha)
    with _stage("propagate", timings):
        semantics = refine.superpoint_propagate(selected, sp)

    diagnostics = {
        "scene_id": cloud.scene_id,
        "points": n,
        "frames": len(scene.frames),
        "featureless": int(feats.featureless.sum()),
        "coarse_masks": len(coarse),
        "fine_masks": len(fine),
        "ensemble_masks": len(ensemble),
        "instances": int(instances.max()) + 1 if (instances >= 0).any() else 0,
        "superpoints": sp.count,
        "instance_labeled_fraction": float((instances >= 0).mean()),
        "semantic_labeled_fraction": float((semantics >= 0).mean()),
        "selected_points": int((selected >= 0).sum()),
        "warnings": warnings,
        "timing_s": timings,
    }
    return PipelineResult(instances, semantics, ensemble, coarse, fine, scores, sp,
                          centroids, diagnostics)


def write_mask_sets(path, masks):
    """One mask per line, space-separated ascending point indices."""
    Path(path).write_text("".join(" ".join(map(str, m.tolist())) + "\n" for m in masks))


def read_mask_sets(path):
    masks = []
    for line in Path(path).read_text().splitlines():
        masks.append(np.array([int(t) for t in line.split()], dtype=np.int64))
    return masks


def write_outputs(result, out_dir, intermediates=False):
    """Write label files and diagnostics.

    Stage timings are left out so that repeated runs give identical bytes.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_dbgt(out_dir / "instances.dbgt", result.instances.astype(np.int32))
    write_dbgt(out_dir / "semantics.dbgt", result.semantics.astype(np.int32))
    write_mask_sets(out_dir / "ensemble.txt", result.ensemble)
    if intermediates:
        write_dbgt(out_dir / "scores.dbgt", result.scores.data)
        write_dbgt(out_dir / "featureless.dbgt", result.scores.featureless.astype(np.uint8))
        write_dbgt(out_dir / "superpoints.dbgt", result.superpoints.sp_ids.astype(np.int32))
        write_dbgt(out_dir / "centroids.dbgt", result.centroids.astype(np.int32))
        write_mask_sets(out_dir / "coarse.txt", result.coarse)
        write_mask_sets(out_dir / "fine.txt", result.fine)
    diag = {k: v for k, v in result.diagnostics.items() if k != "timing_s"}
    (out_dir / "diagnostics.json").write_text(json.dumps(diag, indent=2) + "\n")
