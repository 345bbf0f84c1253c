"""Command line entry point.

Exit codes: 0 success, 2 input/parse error, 3 invariant violation,
4 internal error.
"""

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics, mgb, refine
from .config import load_config
from .errors import InvariantError, ParseError, StageError
from .manifest import load_scene
from .pipeline import run_pipeline, write_outputs
from .synth import SynthSpec, write_synthetic
from .tensorio import export_ply, read_dbgt

EXIT_OK, EXIT_INPUT, EXIT_INVARIANT, EXIT_INTERNAL = 0, 2, 3, 4

log = logging.getLogger("pseudolabel3d")


def _config(args):
    return load_config(args.config, args.set or ())


def cmd_pseudolabel(args):
    scene = load_scene(args.manifest)
    cfg = _config(args)
    result = run_pipeline(scene, cfg)
    write_outputs(result, args.out, intermediates=args.intermediates)
    d = result.diagnostics
    print(f"{d['scene_id']}: Q={d['coarse_masks']} W={d['fine_masks']} "
          f"|ensemble|={d['ensemble_masks']} instances={d['instances']} "
          f"labeled={d['instance_labeled_fraction']:.3f} -> {args.out}")
    for w in d["warnings"]:
        log.warning(w)
    log.info("stage timings: %s",
             " ".join(f"{k}={v:.3f}s" for k, v in d["timing_s"].items()))
    return EXIT_OK


def cmd_prompts(args):
    scene = load_scene(args.manifest)
    cfg = _config(args)
    sp = scene.superpoints
    if sp is None:
        sp = mgb.oversegment(scene.cloud, cfg.angle_threshold, cfg.knn_normals,
                             cfg.bfs_radius, cfg.min_superpoint_size)
    centroids = mgb.superpoint_centroids(scene.cloud, sp)
    prompts = mgb.project_prompts(scene.cloud, centroids, scene.frames, cfg.depth_tolerance)
    mgb.write_prompts(args.out, prompts)
    print(f"{len(prompts)} prompts for {sp.count} superpoints -> {args.out}")
    return EXIT_OK


def _load_gt(args):
    if args.manifest:
        scene = load_scene(args.manifest)
        if scene.ground_truth is None:
            raise InvariantError(f"{args.manifest} has no ground truth")
        return scene.ground_truth, len(scene.labels.classes), scene.labels.classes
    if not (args.gt_instances and args.gt_classes and args.num_classes):
        raise ParseError("<args>", "need --manifest or --gt-instances/--gt-classes/--num-classes")
    gt = metrics.GroundTruth(read_dbgt(args.gt_instances, dtype=np.int32, rank=1),
                             read_dbgt(args.gt_classes, dtype=np.int32, rank=1))
    return gt, args.num_classes, [str(k) for k in range(args.num_classes)]


def cmd_eval(args):
    gt, K, names = _load_gt(args)
    labels = Path(args.labels)
    inst = read_dbgt(labels / "instances.dbgt", dtype=np.int32, rank=1).astype(np.int64)
    sem = read_dbgt(labels / "semantics.dbgt", dtype=np.int32, rank=1).astype(np.int64)
    if len(inst) != len(gt.instances) or len(sem) != len(gt.instances):
        raise InvariantError("label files and ground truth differ in length")
    preds = metrics.predictions_from_labels(inst, refine.assign_instance_classes(inst, sem))
    ap = metrics.instance_ap(preds, gt)
    prec, rec = metrics.mprec_mrec(preds, gt)
    iou, miou = metrics.miou(sem, gt.classes, K)
    report = {"AP": ap.ap, "AP50": ap.ap50, "AP25": ap.ap25,
              "mPrec": prec, "mRec": rec, "mIoU": miou}
    text = metrics.format_report(report)
    rows = []
    for k in range(K):
        c = ap.per_class.get(k, {})
        rows.append([names[k], float(iou[k]), c.get("ap", float("nan")),
                     c.get("ap50", float("nan")), c.get("ap25", float("nan"))])
    table = metrics.format_csv(rows, ["class", "iou", "ap", "ap50", "ap25"])
    if args.out:
        Path(args.out).write_text(text)
    if args.csv:
        Path(args.csv).write_text(table)
    sys.stdout.write(text)
    return EXIT_OK


_SYNTH_TYPES = {f.name: f.type for f in dataclasses.fields(SynthSpec)}


def _synth_spec(args):
    values = {}
    if args.spec:
        for lineno, line in enumerate(Path(args.spec).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = (p.strip() for p in line.partition("="))
            if key not in _SYNTH_TYPES:
                raise ParseError(args.spec, f"line {lineno}: unknown key {key!r}")
            try:
                if key in ("points_per_instance", "image_size"):
                    values[key] = tuple(int(v) for v in val.split(","))
                else:
                    values[key] = type(getattr(SynthSpec(), key))(val)
            except ValueError as exc:
                raise ParseError(args.spec, f"line {lineno}: {key}: {exc}") from exc
    for key in ("seed", "instances", "classes", "frames", "room_extent",
                "feature_flip_rate", "mask_dilation", "depth_noise"):
        val = getattr(args, key)
        if val is not None:
            values[key] = val
    if args.points is not None:
        values["points_per_instance"] = tuple(args.points)
    return SynthSpec(**values)


def cmd_synth(args):
    spec = _synth_spec(args)
    path, scene = write_synthetic(spec, args.out)
    print(f"wrote {len(scene.bundle.cloud)} points, {spec.frames} frames -> {path}")
    return EXIT_OK


def cmd_export_ply(args):
    scene = load_scene(args.manifest)
    labels = read_dbgt(args.labels, rank=1)
    export_ply(args.out, scene.cloud, labels)
    print(f"-> {args.out}")
    return EXIT_OK


def cmd_validate(args):
    scene = load_scene(args.manifest)
    s = scene.summary()
    print(" ".join(f"{k}={v}" for k, v in s.items()))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="pseudolabel3d",
                                description="3D pseudo-label generation and evaluation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def config_opts(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config value (repeatable)")

    sp = sub.add_parser("pseudolabel", help="manifest + config -> pseudo labels")
    sp.add_argument("manifest")
    sp.add_argument("-o", "--out", required=True, help="output directory")
    sp.add_argument("--intermediates", action="store_true",
                    help="also dump scores, superpoints and coarse/fine masks")
    config_opts(sp)
    sp.set_defaults(func=cmd_pseudolabel)

    sp = sub.add_parser("prompts", help="export superpoint prompt pixels per frame")
    sp.add_argument("manifest")
    sp.add_argument("-o", "--out", required=True)
    config_opts(sp)
    sp.set_defaults(func=cmd_prompts)

    sp = sub.add_parser("eval", help="labels + ground truth -> metric report")
    sp.add_argument("labels", help="directory holding instances.dbgt and semantics.dbgt")
    sp.add_argument("--manifest", help="scene manifest carrying ground truth")
    sp.add_argument("--gt-instances")
    sp.add_argument("--gt-classes")
    sp.add_argument("--num-classes", type=int)
    sp.add_argument("--out", help="write key = value report here")
    sp.add_argument("--csv", help="write per-class CSV here")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("synth", help="generate a synthetic scene")
    sp.add_argument("-o", "--out", required=True)
    sp.add_argument("--spec", help="key = value synth spec file")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--instances", type=int)
    sp.add_argument("--classes", type=int)
    sp.add_argument("--frames", type=int)
    sp.add_argument("--points", type=int, nargs=2, metavar=("MIN", "MAX"))
    sp.add_argument("--room-extent", dest="room_extent", type=float)
    sp.add_argument("--feature-flip-rate", dest="feature_flip_rate", type=float)
    sp.add_argument("--mask-dilation", dest="mask_dilation", type=int)
    sp.add_argument("--depth-noise", dest="depth_noise", type=float)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("export-ply", help="colour a scene by a labeling")
    sp.add_argument("manifest")
    sp.add_argument("labels", help="int32 DBGT labeling (instances or semantics)")
    sp.add_argument("-o", "--out", required=True)
    sp.set_defaults(func=cmd_export_ply)

    sp = sub.add_parser("validate", help="check a manifest and everything it references")
    sp.add_argument("manifest")
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InvariantError as exc:
        print("invariant violation:", file=sys.stderr)
        for v in exc.violations:
            print(f"  - {v}", file=sys.stderr)
        return EXIT_INVARIANT
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, ParseError):
            return EXIT_INPUT
        if isinstance(exc.cause, InvariantError):
            return EXIT_INVARIANT
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error: %s", exc)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
