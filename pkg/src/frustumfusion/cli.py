"""Command-line interface.

Commands: generate-scene, train, extract-mesh, evaluate, render-depth,
gradcheck. Configuration comes from an optional TOML file plus repeated
``--set key=value`` overrides; the output root honors FRUSTUMFUSION_OUT.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import evaluation as ev
from . import io_formats as iof
from . import scene as sc
from .config import load_config
from .train import Trainer


def _out_root(path):
    if path:
        return path
    return os.environ.get("FRUSTUMFUSION_OUT", "runs")


def _add_config_args(p):
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="config override (repeatable)")


def _ablation_overrides(args):
    """Map the ablation flags onto config overrides."""
    extra = []
    if getattr(args, "stages", None) is not None:
        extra.append(f"fusion_stages={args.stages}")
    if getattr(args, "fusion", None) is not None:
        extra.append(f"fusion_mode={args.fusion}")
    if getattr(args, "no_pdc", False):
        extra.append("lambda_pdc_after=0")
    if getattr(args, "no_pgs", False):
        extra.append("lambda_pgs_after=0")
    return extra


def cmd_generate_scene(args):
    spec = sc.default_scene(image_size=args.image_size,
                            camera_count=args.views)
    ds = sc.generate_dataset(spec, args.out)
    print(f"wrote {ds.n_views} views at {args.image_size}x"
          f"{args.image_size} to {args.out}")
    return 0


def _make_trainer(args, require_dataset=True):
    cfg = load_config(args.config, list(args.overrides)
                      + _ablation_overrides(args))
    dataset = sc.load_dataset(args.dataset) if require_dataset else None
    out_dir = os.path.join(_out_root(getattr(args, "out", None) or None),
                           args.run) if getattr(args, "run", None) \
        else _out_root(getattr(args, "out", None))
    trainer = Trainer(cfg, dataset, out_dir)
    return trainer


def cmd_train(args):
    trainer = _make_trainer(args)
    if args.resume:
        trainer.load_checkpoint(args.resume)
        print(f"resumed at iteration {trainer.iteration}")
    t0 = time.time()

    def progress(tr, it, report):
        if it % args.print_every == 0:
            print(f"iter {it:6d} total {report.total:.5f} "
                  f"dep {report.dep:.5f} cc {report.cc:.5f} "
                  f"({time.time() - t0:.0f}s)", flush=True)

    trainer.train(on_iteration=progress)
    print(f"finished {trainer.iteration} iterations in "
          f"{time.time() - t0:.0f}s; outputs in {trainer.out_dir}")
    return 0


def cmd_extract_mesh(args):
    trainer = _make_trainer(args)
    trainer.load_checkpoint(args.checkpoint)
    views = [int(v) for v in args.views.split(",")] if args.views else None
    mesh, _ = ev.extract_mesh(trainer, args.resolution, views)
    if mesh.is_empty():
        print("warning: SDF has no zero crossing; writing an empty mesh",
              file=sys.stderr)
    iof.write_ply_mesh(args.out, mesh.vertices, mesh.faces)
    print(f"wrote {len(mesh.vertices)} vertices / {len(mesh.faces)} faces "
          f"to {args.out}")
    return 0


def cmd_evaluate(args):
    trainer = _make_trainer(args)
    trainer.load_checkpoint(args.checkpoint)
    if args.mesh:
        v, f = iof.read_ply(args.mesh)
        from .meshing import TriangleMesh
        mesh = TriangleMesh(v, f)
    else:
        mesh, _ = ev.extract_mesh(trainer)
    metrics = ev.evaluate(trainer, mesh)
    out = args.out or os.path.join(trainer.out_dir, "metrics.json")
    with open(out, "w") as fh:
        json.dump(metrics, fh, indent=1, sort_keys=True)
    print(json.dumps(metrics, indent=1, sort_keys=True))
    return 0


def cmd_render_depth(args):
    trainer = _make_trainer(args)
    trainer.load_checkpoint(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    depths, _ = trainer.finest_depths(range(trainer.dataset.n_views))
    for vid, d in depths.items():
        path = os.path.join(args.out, f"{vid:04d}_depth.pfm")
        iof.write_pfm(path, d)
    print(f"wrote {len(depths)} depth maps to {args.out}")
    return 0


def cmd_gradcheck(args):
    from . import gradcheck as gc
    report, ok = gc.run_all(seed=args.seed)
    e2e = gc.end_to_end_check(seed=args.seed)
    report["end_to_end"] = e2e
    ok = ok and e2e["passed"]
    worst = max(report.items(),
                key=lambda kv: kv[1]["error"])
    out = {"primitives": report, "all_passed": bool(ok),
           "worst": {"op": worst[0], "error": worst[1]["error"]}}
    if args.out:
        with open(args.out, "w") as f:
            json.dump(out, f, indent=1, sort_keys=True)
    for name, entry in sorted(report.items()):
        print(f"{name:22s} error={entry['error']:.3e} "
              f"{'pass' if entry['passed'] else 'FAIL'}")
    print("all passed" if ok else "FAILURES present")
    return 0 if ok else 1


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="frustumfusion",
        description="Multi-view neural SDF reconstruction via cascaded "
                    "cost-frustum fusion")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-scene",
                       help="render a synthetic dataset with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=96)
    p.add_argument("--views", type=int, default=6)
    p.set_defaults(func=cmd_generate_scene)

    p = sub.add_parser("train", help="train on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", help="output root (default $FRUSTUMFUSION_OUT "
                                 "or ./runs)")
    p.add_argument("--run", help="run name under the output root")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.add_argument("--stages", type=int, choices=(1, 2, 3))
    p.add_argument("--fusion", choices=("weighted", "addition"))
    p.add_argument("--no-pdc", action="store_true")
    p.add_argument("--no-pgs", action="store_true")
    p.add_argument("--print-every", type=int, default=25)
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract-mesh", help="marching cubes on the SDF")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int)
    p.add_argument("--views", help="comma-separated input view ids")
    p.add_argument("--stages", type=int, choices=(1, 2, 3))
    p.add_argument("--fusion", choices=("weighted", "addition"))
    _add_config_args(p)
    p.set_defaults(func=cmd_extract_mesh)

    p = sub.add_parser("evaluate", help="chamfer + depth MAE metrics")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mesh", help="evaluate an existing PLY instead of "
                                  "re-extracting")
    p.add_argument("--out", help="metrics JSON path")
    p.add_argument("--stages", type=int, choices=(1, 2, 3))
    p.add_argument("--fusion", choices=("weighted", "addition"))
    _add_config_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render-depth",
                       help="export cascade depth maps as PFM")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_render_depth)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of every primitive")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_gradcheck)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
