"""Command-line interface.

Verbs: gen-assets, gen-scenes, build-kb, train, estimate, eval, render-debug.
Exit codes: 0 ok, 1 error, 2 empty input.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_EMPTY = 2


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_ERROR
    try:
        return args.func(args)
    except Exception as exc:  # CLI boundary: report, don't trace
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cadpose", description=__doc__)
    _add_common(p, suppress=False)
    # global flags are also accepted after the verb (without clobbering)
    common = argparse.ArgumentParser(add_help=False)
    _add_common(common, suppress=True)
    sub = p.add_subparsers(dest="command")
    p.set_defaults(command=None)

    g = sub.add_parser("gen-assets", parents=[common], help="write the procedural meshes + symmetry sidecars")
    g.set_defaults(func=cmd_gen_assets)

    s = sub.add_parser("gen-scenes", parents=[common], help="render synthetic scenes into a dataset directory")
    s.add_argument("--assets", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--clutter", type=int, choices=(0, 1), default=0)
    s.set_defaults(func=cmd_gen_scenes)

    b = sub.add_parser("build-kb", parents=[common], help="build the multimodal knowledge base for one object")
    b.add_argument("--mesh", required=True)
    b.add_argument("--object-id", default=None)
    b.add_argument("--views", type=int, default=None)
    b.add_argument("--points", type=int, default=None)
    b.add_argument("--features", default=None, help="directory of per-view feature files (file mode)")
    b.set_defaults(func=cmd_build_kb)

    t = sub.add_parser("train", parents=[common], help="train the correspondence model")
    t.add_argument("--assets", required=True)
    t.add_argument("--scenes", required=True)
    t.add_argument("--kb-dir", required=True)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--ablate-retrieval", action="store_true", help="zero the retrieved features")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("estimate", parents=[common], help="estimate poses over a dataset, emit CSV")
    e.add_argument("--assets", required=True)
    e.add_argument("--kb-dir", required=True)
    e.add_argument("--scenes", required=True)
    e.add_argument("--ckpt", default=None)
    e.add_argument("--oracle", action="store_true", help="ground-truth correspondences (no network)")
    e.add_argument("--icp", action="store_true", help="depth-based ICP refinement")
    e.set_defaults(func=cmd_estimate)

    v = sub.add_parser("eval", parents=[common], help="score an estimates CSV against ground truth")
    v.add_argument("--estimates", required=True)
    v.add_argument("--gt", required=True)
    v.add_argument("--assets", required=True)
    v.set_defaults(func=cmd_eval)

    r = sub.add_parser("render-debug", parents=[common], help="render a mesh and write PNG + tensor maps")
    r.add_argument("--mesh", required=True)
    r.add_argument("--view-index", type=int, default=0)
    r.add_argument("--size", type=int, default=224)
    r.set_defaults(func=cmd_render_debug)
    return p


def _add_common(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="INI config file")
    p.add_argument("--seed", type=int, default=d if suppress else None, help="override config seed")
    p.add_argument("--workers", type=int, default=argparse.SUPPRESS if suppress else 1,
                   help="parallel workers where supported")
    p.add_argument("--out", default=d, help="output path (verb-specific)")


def _load_run_config(args):
    from .config import RunConfig, load_config

    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=args.seed)
    return cfg


def _require_out(args, default: str | None = None) -> Path:
    if args.out is None:
        if default is None:
            raise SystemExit("--out is required for this command")
        return Path(default)
    return Path(args.out)


def cmd_gen_assets(args) -> int:
    from .assets import write_assets

    cfg = _load_run_config(args)
    out = _require_out(args, "assets")
    manifest = write_assets(out, seed=cfg.seed)
    print(f"wrote {len(manifest['objects'])} objects to {out}")
    return EXIT_OK


def cmd_gen_scenes(args) -> int:
    from .assets import load_assets
    from .scenes import gen_scene, save_scene

    cfg = _load_run_config(args)
    if args.count <= 0:
        print("no scenes requested", file=sys.stderr)
        return EXIT_EMPTY
    assets = load_assets(args.assets)
    assets = {k: v for k, v in assets.items() if k in cfg.objects}
    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [cfg.seed + i for i in range(args.count)]
    jobs = [(args.assets, tuple(cfg.objects), cfg.camera, args.clutter, s, str(out)) for s in seeds]
    if args.workers > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(args.workers) as pool:
            pool.map(_gen_scene_job, jobs)
    else:
        for job in jobs:
            _gen_scene_job(job)
    print(f"wrote {args.count} clutter-{args.clutter} scenes to {out}")
    return EXIT_OK


def _gen_scene_job(job) -> None:
    from .assets import load_assets
    from .scenes import gen_scene, save_scene

    asset_dir, objects, cam, clutter, seed, out = job
    assets = {k: v for k, v in load_assets(asset_dir).items() if k in objects}
    sample = gen_scene(assets, cam, clutter, seed)
    save_scene(Path(out) / f"scene_{seed:05d}_c{clutter}", sample)


def cmd_build_kb(args) -> int:
    from .features import FileFeatureSource, load_feature_file
    from .geom import load_mesh
    from .knowledge import build_kb, save_kb
    from .render import viewpoints_for_count

    cfg = _load_run_config(args)
    mesh = load_mesh(args.mesh)
    object_id = args.object_id or Path(args.mesh).stem
    views = args.views if args.views is not None else cfg.kb.views
    points = args.points if args.points is not None else cfg.kb.points
    vps = viewpoints_for_count(views, cfg.kb.radius_factor * mesh.diameter)
    feature_maps = None
    if args.features:
        feature_maps = [
            load_feature_file(Path(args.features) / f"view_{i:03d}.ta", expect_dim=cfg.net.extractor.dim)
            for i in range(len(vps))
        ]
    kb = build_kb(
        mesh, object_id, vps,
        extractor=cfg.net.extractor, n_points=points, seed=cfg.seed,
        tau_vis=cfg.kb.tau_vis, bands=cfg.kb.bands, feature_maps=feature_maps,
    )
    out = _require_out(args, f"{object_id}.kb")
    save_kb(kb, out)
    covered = float((kb.view_count > 0).mean())
    print(f"kb {object_id}: {kb.n_points} points, {covered * 100:.1f}% covered, -> {out}")
    return EXIT_OK


def _load_kbs_and_assets(kb_dir, asset_dir, objects):
    from .assets import load_assets
    from .knowledge import load_kb

    assets = load_assets(asset_dir)
    kbs = {}
    missing = []
    for name in objects:
        path = Path(kb_dir) / f"{name}.kb"
        if not path.exists():
            missing.append(name)
            continue
        kbs[name] = load_kb(path)
    return assets, kbs, missing


def cmd_train(args) -> int:
    from dataclasses import replace

    from .pipeline import training_samples
    from .posenet import new_model, norm_stats_from_samples, train

    cfg = _load_run_config(args)
    assets, kbs, missing = _load_kbs_and_assets(args.kb_dir, args.assets, cfg.objects)
    if missing:
        print(f"missing knowledge bases: {missing}", file=sys.stderr)
        return EXIT_ERROR
    samples = [s for s in training_samples(args.scenes) if s.object_id in kbs]
    if not samples:
        print("no training samples found", file=sys.stderr)
        return EXIT_EMPTY
    tc = cfg.train
    if args.steps is not None:
        tc = replace(tc, steps=args.steps)
    if args.ablate_retrieval:
        tc = replace(tc, use_retrieval=False)
    meshes = {name: assets[name][0] for name in kbs}
    model = new_model(cfg.net, kbs, meshes, seed=cfg.seed, norm_stats=norm_stats_from_samples(samples))
    out = _require_out(args, "model.ckpt")
    history = train(model, samples, tc, log_path=str(out) + ".log.jsonl")
    model.save(out, extra_meta={"train_steps": tc.steps, "seed": cfg.seed})
    done = [h for h in history if "l_con" in h]
    if done:
        print(f"trained {tc.steps} steps; final l_con={done[-1]['l_con']:.4f} l_m={done[-1]['l_m']:.4f} -> {out}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    from .metrics import write_estimates_csv, write_gt_csv
    from .pipeline import estimate_dataset
    from .posenet import load_model
    from .scenes import scene_dirs

    cfg = _load_run_config(args)
    if not scene_dirs(args.scenes):
        print("no scenes found", file=sys.stderr)
        return EXIT_EMPTY
    assets, kbs, missing = _load_kbs_and_assets(args.kb_dir, args.assets, cfg.objects)
    if missing:
        print(f"skipping objects with missing KBs: {missing}", file=sys.stderr)
    model = None
    if not args.oracle:
        if args.ckpt is None:
            print("estimate needs --ckpt (or --oracle)", file=sys.stderr)
            return EXIT_ERROR
        meshes = {name: assets[name][0] for name in kbs}
        model = load_model(args.ckpt, kbs, meshes)
    out = _require_out(args, "estimates.csv")
    est_rows, gt_rows = estimate_dataset(model, args.scenes, cfg, oracle=args.oracle, use_depth=args.icp)
    if not est_rows:
        print("no estimates produced", file=sys.stderr)
        return EXIT_EMPTY
    write_estimates_csv(out, est_rows)
    write_gt_csv(Path(str(out).replace(".csv", "") + ".gt.csv"), gt_rows)
    print(f"wrote {len(est_rows)} estimates to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .assets import load_assets
    from .metrics import ObjectModel, average_recall, records_from_csv, write_report

    _ = _load_run_config(args)
    records = records_from_csv(args.estimates, args.gt)
    if not records:
        print("no joined records to evaluate", file=sys.stderr)
        return EXIT_EMPTY
    assets = load_assets(args.assets)
    objects = {name: ObjectModel(mesh=m, sym=s) for name, (m, s) in assets.items()}
    report = average_recall(records, objects)
    out = _require_out(args, "report")
    write_report(out, report)
    print(
        f"AR={report['AR']:.4f} (VSD {report['AR_VSD']:.4f}, MSSD {report['AR_MSSD']:.4f}, "
        f"MSPD {report['AR_MSPD']:.4f}) over {report['n_records']} records -> {out}"
    )
    return EXIT_OK


def cmd_render_debug(args) -> int:
    from PIL import Image

    from . import tensorio
    from .geom import CameraIntrinsics, load_mesh
    from .render import rasterize, viewpoints_for_count

    cfg = _load_run_config(args)
    mesh = load_mesh(args.mesh)
    vps = viewpoints_for_count(max(args.view_index + 1, 12), cfg.kb.radius_factor * mesh.diameter)
    vp = vps[args.view_index]
    size = args.size
    k = CameraIntrinsics(fx=1.6 * size, fy=1.6 * size, cx=size / 2, cy=size / 2, width=size, height=size)
    out = _require_out(args, "render_debug")
    out.mkdir(parents=True, exist_ok=True)
    rd = rasterize(mesh, vp.pose, k)
    Image.fromarray((rd.color * 255).astype(np.uint8)).save(out / "color.png")
    dmax = rd.depth.max() if rd.depth.max() > 0 else 1.0
    Image.fromarray((rd.depth / dmax * 255).astype(np.uint8)).save(out / "depth.png")
    Image.fromarray((rd.mask * 255).astype(np.uint8)).save(out / "mask.png")
    tensorio.write_archive(out / "coord.ta", {"coord_map": rd.coord_map}, meta={"view_index": args.view_index})
    print(f"wrote debug renders to {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
