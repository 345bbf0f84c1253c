import hashlib
import json
import logging
import shutil

import numpy as np
import pytest

from pseudolabel3d import cli
from pseudolabel3d.config import PipelineConfig
from pseudolabel3d.errors import InvariantError, ParseError
from pseudolabel3d.manifest import load_scene, save_scene
from pseudolabel3d.metrics import instance_ap, miou, predictions_from_labels
from pseudolabel3d.pipeline import read_mask_sets, run_pipeline, write_outputs
from pseudolabel3d.refine import assign_instance_classes
from pseudolabel3d.synth import SynthSpec, generate_synthetic, write_synthetic
from pseudolabel3d.tensorio import read_dbgt, read_ply, write_dbgt


def evaluate(result, gt, n_classes):
    preds = predictions_from_labels(result.instances,
                                    assign_instance_classes(result.instances, result.semantics))
    return instance_ap(preds, gt), miou(result.semantics, gt.classes, n_classes)[1]


def tree_digest(path):
    h = {}
    for f in sorted(path.rglob("*")):
        if f.is_file():
            h[str(f.relative_to(path))] = hashlib.sha256(f.read_bytes()).hexdigest()
    return h


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    path, scene = write_synthetic(SynthSpec(seed=3, instances=5, classes=3, frames=6), out)
    return path, scene


# synthetic generator -------------------------------------------------------


def test_synth_reproducible_bytes(tmp_path):
    spec = SynthSpec(seed=1, instances=3)
    write_synthetic(spec, tmp_path / "a")
    write_synthetic(spec, tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    other = tree_digest(write_synthetic(SynthSpec(seed=2, instances=3), tmp_path / "c")[0].parent)
    assert other != tree_digest(tmp_path / "a")


def test_synth_infeasible_spec():
    with pytest.raises(InvariantError):
        generate_synthetic(SynthSpec(instances=200, room_extent=1.0))
    with pytest.raises(InvariantError):
        SynthSpec(feature_flip_rate=2.0)


@pytest.mark.parametrize("seed", [1, 2])
def test_clean_synthetic_recovered(seed):
    spec = SynthSpec(seed=seed, instances=5, classes=3, frames=4)
    scene = generate_synthetic(spec)
    result = run_pipeline(scene.bundle, PipelineConfig())
    ap, mean_iou = evaluate(result, scene.ground_truth, len(scene.bundle.labels.classes))
    assert ap.ap == 1.0 and mean_iou == 1.0
    # instances equal gt up to relabelling
    gt = scene.ground_truth.instances
    pairs = {(a, b) for a, b in zip(result.instances.tolist(), gt.tolist()) if b >= 0}
    assert len(pairs) == len({b for _, b in pairs}) == len({a for a, _ in pairs})


def test_dilated_masks_stay_disjoint():
    scene = generate_synthetic(SynthSpec(seed=4, instances=6, mask_dilation=2))
    result = run_pipeline(scene.bundle, PipelineConfig())
    flat = np.concatenate(result.fine)
    assert len(flat) == len(set(flat.tolist()))


def test_noisy_synthetic_still_runs():
    scene = generate_synthetic(SynthSpec(seed=5, feature_flip_rate=0.2, depth_noise=0.005))
    result = run_pipeline(scene.bundle, PipelineConfig())
    assert result.instances.shape == (len(scene.bundle.cloud),)
    ap, _ = evaluate(result, scene.ground_truth, len(scene.bundle.labels.classes))
    assert 0.0 <= ap.ap <= 1.0


# pipeline ------------------------------------------------------------------


def test_zero_frames(caplog):
    scene = generate_synthetic(SynthSpec(seed=1, instances=3))
    bundle = scene.bundle
    bundle.frames, bundle.feature_maps, bundle.rasters = [], [], None
    with caplog.at_level(logging.WARNING):
        result = run_pipeline(bundle, PipelineConfig())
    assert result.scores.featureless.all()
    assert (result.instances == -1).all() and (result.semantics == -1).all()
    assert result.coarse == [] and result.fine == [] and result.ensemble == []
    assert any("no frames" in w for w in result.diagnostics["warnings"])


def test_pipeline_deterministic_in_memory():
    scene = generate_synthetic(SynthSpec(seed=6))
    a = run_pipeline(scene.bundle, PipelineConfig())
    b = run_pipeline(scene.bundle, PipelineConfig())
    assert np.array_equal(a.instances, b.instances) and np.array_equal(a.semantics, b.semantics)


def test_oversegment_fallback_when_no_superpoints():
    scene = generate_synthetic(SynthSpec(seed=2, instances=3))
    scene.bundle.superpoints = None
    result = run_pipeline(scene.bundle, PipelineConfig())
    assert result.superpoints.count > 1
    assert set(result.superpoints.sp_ids.tolist()) == set(range(result.superpoints.count))


def test_outputs_round_trip(tmp_path):
    scene = generate_synthetic(SynthSpec(seed=7, instances=4))
    result = run_pipeline(scene.bundle, PipelineConfig())
    write_outputs(result, tmp_path, intermediates=True)
    assert np.array_equal(read_dbgt(tmp_path / "instances.dbgt"), result.instances)
    assert np.array_equal(read_dbgt(tmp_path / "scores.dbgt"), result.scores.data)
    assert [m.tolist() for m in read_mask_sets(tmp_path / "coarse.txt")] == \
        [m.tolist() for m in result.coarse]
    diag = json.loads((tmp_path / "diagnostics.json").read_text())
    assert {"coarse_masks", "fine_masks", "ensemble_masks", "instance_labeled_fraction"} <= set(diag)
    assert "timing_s" not in diag and "timing_s" in result.diagnostics


# manifest ------------------------------------------------------------------


def test_load_scene_summary(synth_dir):
    path, scene = synth_dir
    loaded = load_scene(path)
    s = loaded.summary()
    assert s["N"] == len(scene.bundle.cloud) and s["F"] == 6
    assert s["K"] == 4 and s["M"] == scene.bundle.superpoints.count


def test_save_load_round_trip(tmp_path, synth_dir):
    path, _ = synth_dir
    first = load_scene(path)
    again = load_scene(save_scene(first, tmp_path))
    assert np.array_equal(first.cloud.xyz, again.cloud.xyz)
    for a, b in zip(first.frames, again.frames):
        assert np.array_equal(a.extrinsic, b.extrinsic) and np.array_equal(a.depth, b.depth)


def copy_scene(src, dst):
    shutil.copytree(src.parent, dst)
    return dst / src.name


def test_load_scene_truncated_payload(tmp_path, synth_dir):
    path = copy_scene(synth_dir[0], tmp_path / "s")
    target = path.parent / "frames" / "000002.depth.dbgt"
    target.write_bytes(target.read_bytes()[:-3])
    with pytest.raises(ParseError) as err:
        load_scene(path)
    assert "000002.depth.dbgt" in str(err.value)


def test_load_scene_frame_mismatch(tmp_path, synth_dir):
    path = copy_scene(synth_dir[0], tmp_path / "s")
    doc = json.loads(path.read_text())
    del doc["frames"][1]["features"]
    doc["frames"][2]["prompt_mask"] = None
    path.write_text(json.dumps(doc))
    with pytest.raises(InvariantError) as err:
        load_scene(path)
    assert len(err.value.violations) == 2


def test_load_scene_channel_mismatch(tmp_path, synth_dir):
    path = copy_scene(synth_dir[0], tmp_path / "s")
    write_dbgt(path.parent / "frames" / "000000.features.dbgt", np.zeros((4, 4, 2), np.float32))
    with pytest.raises(InvariantError):
        load_scene(path)


def test_load_scene_bad_json(tmp_path):
    (tmp_path / "m.json").write_text("{nope")
    with pytest.raises(ParseError):
        load_scene(tmp_path / "m.json")


# CLI -----------------------------------------------------------------------


def test_cli_end_to_end(tmp_path, synth_dir, capsys):
    path, scene = synth_dir
    assert cli.main(["validate", str(path)]) == 0
    assert cli.main(["pseudolabel", str(path), "-o", str(tmp_path / "a"), "--intermediates"]) == 0
    assert cli.main(["pseudolabel", str(path), "-o", str(tmp_path / "b"),
                     "--set", "knn_k=1"]) == 0
    capsys.readouterr()
    assert cli.main(["eval", str(tmp_path / "a"), "--manifest", str(path),
                     "--out", str(tmp_path / "r.txt"), "--csv", str(tmp_path / "r.csv")]) == 0
    report = dict(line.split(" = ") for line in (tmp_path / "r.txt").read_text().splitlines())
    assert float(report["AP"]) == 1.0 and float(report["mIoU"]) == 1.0
    assert (tmp_path / "r.csv").read_text().startswith("class,iou,ap,ap50,ap25\n")
    assert cli.main(["prompts", str(path), "-o", str(tmp_path / "p.txt")]) == 0
    assert len((tmp_path / "p.txt").read_text().splitlines()) > 0
    assert cli.main(["export-ply", str(path), str(tmp_path / "a" / "instances.dbgt"),
                     "-o", str(tmp_path / "x.ply")]) == 0
    xyz, _ = read_ply(tmp_path / "x.ply")
    assert len(xyz) == len(scene.bundle.cloud)


def test_cli_determinism(tmp_path, synth_dir):
    path, _ = synth_dir
    for name in ("a", "b"):
        assert cli.main(["pseudolabel", str(path), "-o", str(tmp_path / name)]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_cli_exit_codes(tmp_path, synth_dir):
    path, _ = synth_dir
    assert cli.main(["validate", str(tmp_path / "missing.json")]) == 2
    assert cli.main(["pseudolabel", str(path), "-o", str(tmp_path / "o"),
                     "--set", "bfs_radius=-1"]) == 3
    assert cli.main(["pseudolabel", str(path), "-o", str(tmp_path / "o"),
                     "--set", "nonsense=1"]) == 2
    with pytest.raises(SystemExit) as err:
        cli.main(["pseudolabel"])
    assert err.value.code == 2


def test_cli_synth(tmp_path, capsys):
    spec = tmp_path / "spec.txt"
    spec.write_text("instances = 3\npoints_per_instance = 300, 500\n")
    assert cli.main(["synth", "-o", str(tmp_path / "s"), "--spec", str(spec), "--seed", "9"]) == 0
    assert load_scene(tmp_path / "s" / "manifest.json").ground_truth is not None
    spec.write_text("bogus = 1\n")
    assert cli.main(["synth", "-o", str(tmp_path / "t"), "--spec", str(spec)]) == 2
