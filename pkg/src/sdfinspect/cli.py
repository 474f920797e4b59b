"""Command-line entry point: ``sdfinspect <subcommand>``.

Exit codes: 0 success, 1 failed checks, 2 configuration error, 3 bad input
data (missing or malformed scene, checkpoint, ...), 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, scenes
from .config import RunConfig
from .errors import ConfigError, SdfInspectError
from .field import EnvField, FieldConfig, global_surface_points, isosurface_mesh, train_env_field
from .marching import GridSpec
from .mesh import TriangleMesh, load_mesh, normalize_to_box, save_ply
from .oracle import DistanceOracle, sample_tsdf_training_set
from .planner import memory_accounting, plan, trajectory_records

log = logging.getLogger("sdfinspect")

OUTPUT_ROOT_ENV = "SDFINSPECT_OUTPUT_ROOT"


# -- helpers ----------------------------------------------------------------------

def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    cfg = cfg.with_overrides(getattr(args, "set", None) or [])
    return cfg.validate()


def output_dir(cfg: RunConfig, override=None) -> Path:
    out = Path(override or cfg.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_scene(cfg: RunConfig) -> TriangleMesh:
    """Scene mesh with ``bounds`` set to the world box the field will cover."""
    sc = cfg.scene
    if sc.path.startswith("bundled:"):
        name = sc.path.split(":", 1)[1]
        if name not in scenes.SCENES:
            raise FileNotFoundError(f"scene not found: {sc.path} (bundled: {', '.join(scenes.SCENES)})")
        mesh = scenes.bundled_scene(name)
    else:
        mesh = load_mesh(sc.path, sc.format)
        lo = mesh.vertices.min(axis=0) - sc.margin
        hi = mesh.vertices.max(axis=0) + sc.margin
        mesh.bounds = np.array([lo, hi])
    if sc.box_min is not None or sc.box_max is not None:
        if sc.box_min is None or sc.box_max is None:
            raise ConfigError("scene.box_min and scene.box_max must be given together")
        if sc.normalize:
            return normalize_to_box(mesh, sc.box_min, sc.box_max, sc.margin)
        mesh.bounds = np.array([sc.box_min, sc.box_max], dtype=np.float64)
    elif sc.normalize:
        raise ConfigError("scene.normalize needs scene.box_min and scene.box_max")
    return mesh


def field_config(cfg: RunConfig, mesh: TriangleMesh) -> FieldConfig:
    import dataclasses
    f = cfg.field
    box_min = tuple(float(v) for v in (f.box_min if f.box_min is not None else mesh.bounds[0]))
    box_max = tuple(float(v) for v in (f.box_max if f.box_max is not None else mesh.bounds[1]))
    return dataclasses.replace(f, box_min=box_min, box_max=box_max)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def versions() -> dict:
    import matplotlib
    import numba
    import scipy
    import skimage
    return {"sdfinspect": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__, "scikit-image": skimage.__version__,
            "matplotlib": matplotlib.__version__}


def write_manifest(out: Path, command: str, cfg: RunConfig, outputs, inputs=None) -> None:
    manifest = {
        "command": command,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "versions": versions(),
        "inputs": inputs or {},
        "outputs": {name: sha256_file(out / name) for name in outputs},
        "config": cfg.to_dict(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


# -- commands ---------------------------------------------------------------------

def cmd_train_env(args) -> int:
    from .plotting import plot_loss

    cfg = load_config(args)
    mesh = load_scene(cfg)
    fcfg = field_config(cfg, mesh)
    out = output_dir(cfg, args.out)
    t0 = time.perf_counter()
    oracle = DistanceOracle(mesh)
    s = cfg.sampling
    samples = sample_tsdf_training_set(mesh, oracle, s.n_near, s.n_far, s.near_band, fcfg.tr, cfg.seed)
    train, hold = samples.split(s.holdout, cfg.seed)
    t1 = time.perf_counter()
    fld = train_env_field(train, fcfg, seed=cfg.seed, log_every=max(1, fcfg.epochs // 10))
    t2 = time.perf_counter()
    fld.meta = {"scene": cfg.scene.path, "seed": cfg.seed, "config_hash": cfg.config_hash(),
                "scene_scale": mesh.scale, "scene_offset": mesh.offset.tolist()}
    fld.save(out / "field.ckpt")

    write_csv(out / "loss.csv", ["epoch", "loss"], [(i + 1, v) for i, v in enumerate(fld.loss_history)])
    plot_loss(fld.loss_history, out / "loss.png")
    report = {"n_train": len(train), "n_holdout": len(hold), "tr": fcfg.tr,
              "n_params": fld.n_params, "field_bytes": fld.nbytes, "head_widths": fld.head.widths,
              "final_loss": fld.loss_history[-1], "grid": fld.grid.to_dict()}
    if len(hold):
        err = np.abs(fld.evaluate(hold.X) - hold.Y)
        near = hold.near_mask if hold.near_mask is not None else np.ones(len(hold), dtype=bool)
        report.update({"holdout_mae": float(err.mean()), "holdout_mae_over_tr": float(err.mean() / fcfg.tr),
                       "holdout_near_mae": float(err[near].mean()),
                       "holdout_near_mae_over_tr": float(err[near].mean() / fcfg.tr),
                       "holdout_near_count": int(near.sum())})
    write_json(out / "train_report.json", report)
    cfg.save(out / "config.yaml")
    write_json(out / "timing.json", {"sampling_s": t1 - t0, "training_s": t2 - t1})
    write_manifest(out, "train-env", cfg, ["field.ckpt", "loss.csv", "train_report.json", "config.yaml"])
    msg = f"field written to {out / 'field.ckpt'}"
    if "holdout_near_mae_over_tr" in report:
        msg += f"; held-out near-surface MAE = {report['holdout_near_mae_over_tr']:.4f} tr"
    print(msg)
    return 0


def check_field_matches(fld: EnvField, fcfg: FieldConfig) -> None:
    expected = fcfg.grid()
    problems = []
    if abs(fld.tr - fcfg.tr) > 1e-12:
        problems.append(f"tr {fld.tr} != {fcfg.tr}")
    if fld.grid != expected:
        problems.append(f"grid {fld.grid.to_dict()} != {expected.to_dict()}")
    hg = fld.fe.grid.config
    if hg != fcfg.hashgrid:
        problems.append(f"hash grid {hg} != {fcfg.hashgrid}")
    if fld.fe.blob.bins != fcfg.oneblob_bins:
        problems.append(f"one-blob bins {fld.fe.blob.bins} != {fcfg.oneblob_bins}")
    if list(fld.head.widths[1:-1]) != list(fcfg.hidden):
        problems.append(f"head hidden widths {fld.head.widths[1:-1]} != {list(fcfg.hidden)}")
    if problems:
        raise ConfigError("checkpoint does not match config: " + "; ".join(problems))


def cmd_plan(args) -> int:
    from .plotting import plot_coverage_history, plot_topdown

    cfg = load_config(args)
    mesh = load_scene(cfg)
    fcfg = field_config(cfg, mesh)
    fld = EnvField.load(args.field)
    check_field_matches(fld, fcfg)
    out = output_dir(cfg, args.out)
    geom = cfg.robot.build()
    sensor = cfg.sensor.build()
    settings = cfg.planner
    if settings.xi is None and not 1.5 * geom.spacing < fld.tr:
        raise ConfigError(f"default xi = 1.5 x spacing = {1.5 * geom.spacing:.4f} is not below tr = {fld.tr}")
    surface = global_surface_points(fld)

    def progress(tree, outcome):
        if tree.iteration % 100 == 0:
            best = tree.nodes[tree.best_leaf()]
            log.info("iteration %d: %d nodes, coverage %.4f", tree.iteration, len(tree), best.cov)

    res = plan(fld, geom, sensor, settings, surface=surface, progress=progress)

    recs = trajectory_records(res)
    write_json(out / "trajectory.json", {"configs": recs, "coverage": res.coverage, "cost": res.cost})
    keys = ["node", "x", "y", "z", "yaw", "pitch", "coverage", "cost"]
    write_csv(out / "trajectory.csv", keys, [[r[k] for k in keys] for r in recs])
    write_csv(out / "coverage_history.csv", ["iteration", "elapsed_s", "nodes", "coverage", "cost"],
              [[h["iteration"], h["elapsed_s"], h["nodes"], h["coverage"], h["cost"]] for h in res.history])
    eps = settings.resolved_eps(fld)
    covered = res.covered_mask(fld, eps)
    save_ply(out / "covered.ply", surface.points[covered])
    save_ply(out / "uncovered.ply", surface.points[~covered])
    memory = memory_accounting(res.tree, fld)
    memory["peak_tracked_bytes"] = res.peak_memory_bytes
    write_json(out / "memory.json", memory)
    report = {"coverage": res.coverage, "cost": res.cost, "nodes_created": res.nodes_created,
              "iterations": res.iterations, "rejections": res.rejections,
              "prune_iterations": res.prune_iterations, "stop_reason": res.stop_reason,
              "trajectory_length": len(res.trajectory), "surface_points": surface.count,
              "covered_surface_points": int(covered.sum()), "eps": eps,
              "scene_scale": mesh.scale, "cost_scene_units": mesh.to_original_units(res.cost)}
    write_json(out / "plan_report.json", report)
    plot_coverage_history(res.history, out / "coverage.png")
    plot_topdown(surface.points[covered], surface.points[~covered],
                 np.array([q.position for q in res.trajectory]), out / "topdown.png")
    cfg.save(out / "config.yaml")
    write_json(out / "timing.json", {"planning_s": res.elapsed_s})
    write_manifest(out, "plan", cfg, ["trajectory.json", "trajectory.csv", "covered.ply", "uncovered.ply",
                                      "memory.json", "plan_report.json", "config.yaml"],
                   inputs={"field": {"path": str(args.field), "sha256": sha256_file(args.field)}})
    print(f"coverage {res.coverage:.4f}, cost {res.cost:.3f} m, {res.nodes_created} nodes, "
          f"{res.iterations} iterations ({res.stop_reason}); outputs in {out}")
    return 0


def cmd_export_isosurface(args) -> int:
    fld = EnvField.load(args.field)
    grid = fld.grid
    if args.cell_size is not None:
        if args.cell_size <= 0:
            raise ConfigError("--cell-size must be positive")
        grid = GridSpec.from_box(grid.box_min, grid.box_max, args.cell_size)
    verts, faces = isosurface_mesh(fld, grid)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_ply(out, verts, faces, binary=not args.ascii)
    print(f"{len(verts)} vertices, {len(faces)} triangles -> {out}")
    return 0


def cmd_verify(args) -> int:
    from .checks import run_battery

    results = run_battery(args.field, quick=args.quick)
    width = max(len(r.name) for r, _ in results)
    print(f"{'check':<{width}}  result  time(s)  detail")
    for r, t in results:
        print(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {t:7.2f}  {r.detail}")
    failed = sum(not r.passed for r, _ in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_print_default_config(args) -> int:
    sys.stdout.write(RunConfig().to_yaml())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdfinspect", description="Inspection planning on implicit neural TSDFs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, need_config=True):
        sp.add_argument("--config", required=need_config, help="YAML run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--out", help=f"output directory (default: config output_dir, under ${OUTPUT_ROOT_ENV})")

    sp = sub.add_parser("train-env", help="train the global TSDF field from the scene mesh")
    common(sp)
    sp.set_defaults(func=cmd_train_env)

    sp = sub.add_parser("plan", help="plan an inspection path with a trained field")
    common(sp)
    sp.add_argument("--field", required=True, help="field checkpoint from train-env")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("export-isosurface", help="write the zero isosurface of a field as a PLY mesh")
    sp.add_argument("--field", required=True)
    sp.add_argument("--cell-size", type=float, default=None, help="override the lattice spacing")
    sp.add_argument("--out", default="isosurface.ply")
    sp.add_argument("--ascii", action="store_true", help="ASCII instead of binary PLY")
    sp.set_defaults(func=cmd_export_isosurface)

    sp = sub.add_parser("verify", help="run the reference-check battery")
    sp.add_argument("--config", help="accepted for symmetry; checks use bundled scenes")
    sp.add_argument("--field", help="also verify this checkpoint's checksum")
    sp.add_argument("--quick", action="store_true", help="fewer random queries")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("print-default-config", help="print the default configuration as YAML")
    sp.set_defaults(func=cmd_print_default_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SdfInspectError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
