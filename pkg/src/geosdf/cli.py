"""Command-line entry point: scene generation, training, evaluation,
regularizer ablation and mesh extraction, all reproducible from a config
file plus a seed.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric fault.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys


def _cap_threads():
    workers = os.environ.get("GEOSDF_NUM_WORKERS")
    if workers:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, workers)


_cap_threads()  # must run before numpy brings up its thread pools

import numpy as np  # noqa: E402

from . import evalmesh, fields, objectives, renderer, \
    synthscene, trainer  # noqa: E402
from .errors import DataError, GeosdfError, NumericFault, UsageError  # noqa: E402

ABLATION_KINDS = ("none", "smooth_normals", "numerical_eikonal",
                  "curvature_laplacian", "hybrid_pe")


# ---------------------------------------------------------------------------
# run configuration file

_TRAIN_KEYS = set(trainer.TrainConfig.__dataclass_fields__)
_FIELD_KEYS = set(fields.FieldConfig.__dataclass_fields__)
_GRID_KEYS = {"levels", "base_resolution", "growth_factor",
              "features_per_level", "table_size_log2", "box_min", "box_max"}
_PE_KEYS = {"enabled", "num_frequencies", "max_frequency_log2"}
_WEIGHT_KEYS = {"rgb", "alpha", "eikonal", "smooth", "curvature"}
_TOP_KEYS = {"dataset", "out", "train", "field", "seeds", "mesh_res"}


def _check_keys(d, allowed, where):
    unknown = set(d) - allowed
    if unknown:
        raise UsageError(f"unknown config key(s) in {where}: "
                         f"{', '.join(sorted(unknown))}")


def load_run_config(path):
    """Parse and validate a run config; unknown keys are rejected."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: bad JSON ({exc})") from None
    _check_keys(raw, _TOP_KEYS, "top level")
    tr = dict(raw.get("train", {}))
    _check_keys(tr, _TRAIN_KEYS, "train")
    if "weights" in tr:
        _check_keys(tr["weights"], _WEIGHT_KEYS, "train.weights")
    fd = dict(raw.get("field", {}))
    _check_keys(fd, _FIELD_KEYS, "field")
    if "grid" in fd:
        _check_keys(fd["grid"], _GRID_KEYS, "field.grid")
    if "pe" in fd:
        _check_keys(fd["pe"], _PE_KEYS, "field.pe")
    return raw


def build_configs(raw, dataset):
    tcfg = trainer.TrainConfig.from_dict(raw.get("train", {}))
    fdict = fields.FieldConfig(
        offset_enabled=dataset.scene.articulated).to_dict()
    user_field = dict(raw.get("field", {}))
    for key in ("grid", "pe"):
        if key in user_field:
            fdict[key].update(user_field.pop(key))
    fdict.update(user_field)
    fcfg = fields.FieldConfig.from_dict(fdict)
    return tcfg, fcfg


def write_resolved_config(out_dir, raw, tcfg, fcfg):
    os.makedirs(out_dir, exist_ok=True)
    resolved = {"dataset": raw.get("dataset"), "out": out_dir,
                "train": tcfg.to_dict(), "field": fcfg.to_dict()}
    if "seeds" in raw:
        resolved["seeds"] = raw["seeds"]
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as fh:
        json.dump(resolved, fh, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_scene(args):
    scene = synthscene.make_scene(args.shape, texture=args.texture,
                                  frames=args.frames, shading=args.shading)
    ds = synthscene.make_dataset(scene, args.out, views=args.views,
                                 image_size=args.size, seed=args.seed)
    print(f"wrote {ds.num_frames} views to {args.out} "
          f"(holdout: {ds.holdout})")
    return 0


def cmd_train(args):
    raw = load_run_config(args.config)
    ds_path = args.dataset or raw.get("dataset")
    if not ds_path or not os.path.isdir(ds_path):
        raise DataError(f"dataset directory not found: {ds_path!r}")
    dataset = synthscene.load_dataset(ds_path)
    tcfg, fcfg = build_configs(raw, dataset)
    if args.seed is not None:
        tcfg.seed = args.seed
    if args.regularizer is not None:
        tcfg.regularizer = args.regularizer
        objectives.RegularizerKind(args.regularizer)
    out_dir = args.out or raw.get("out")
    if not out_dir:
        raise UsageError("no output directory (config 'out' or --out)")
    write_resolved_config(out_dir, raw, tcfg, fcfg)
    tr = trainer.Trainer(tcfg, dataset, field_config=fcfg, out_dir=out_dir)
    if args.resume:
        tr.restore(args.resume)
    summary = tr.fit()
    print(f"trained {summary['iterations']} iterations at "
          f"{summary['its_per_sec']:.2f} it/s -> {out_dir}/final.ckpt")
    return 0


def _its_per_sec_from_log(ckpt_path):
    log = os.path.join(os.path.dirname(ckpt_path), "train_log.txt")
    if not os.path.exists(log):
        return 0.0
    vals = re.findall(r"its_per_sec=([0-9.eE+-]+)", open(log).read())
    return float(vals[-1]) if vals else 0.0


def _grid_from_checkpoint(ckpt_path, meta):
    store, _ = fields.load_checkpoint(ckpt_path)
    try:
        bits = store.view("occupancy.bits")
    except UsageError:
        return None
    res = meta["occupancy_resolution"]
    grid = renderer.OccupancyGrid(resolution=res)
    grid.bits = bits.reshape((res,) * 3) > 0.5
    return grid


def cmd_eval(args):
    if not os.path.exists(args.checkpoint):
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    model, meta = trainer.load_model(args.checkpoint)
    dataset = synthscene.load_dataset(args.dataset)
    grid = _grid_from_checkpoint(args.checkpoint, meta)
    report = evalmesh.evaluate_model(
        model, dataset, mesh_resolution=args.mesh_res, grid=grid,
        its_per_sec=_its_per_sec_from_log(args.checkpoint))
    out = args.out or "eval_report.json"
    with open(out, "w") as fh:
        fh.write(report.to_json() + "\n")
    print(report.to_json())
    return 0


def cmd_extract_mesh(args):
    if not os.path.exists(args.checkpoint):
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    model, _ = trainer.load_model(args.checkpoint)
    mesh = evalmesh.marching_cubes(model.sdf_np, evalmesh.CANONICAL_BOX,
                                   args.res)
    evalmesh.save_obj(args.out, mesh)
    ok, boundary = evalmesh.watertight_check(mesh)
    print(f"wrote {len(mesh.vertices)} vertices, {len(mesh.triangles)} "
          f"triangles to {args.out} (watertight: {ok}, "
          f"boundary edges: {boundary})")
    return 0


def run_ablation(raw, dataset, out_dir, seeds, kinds=ABLATION_KINDS,
                 mesh_res=96):
    """Train every regularizer kind over the seed set and collect metrics.

    Peak memory per run is measured with tracemalloc (numpy buffers are
    tracked); the uniform tracing overhead cancels out of the it/s ratios.
    """
    import tracemalloc
    results = {kind: [] for kind in kinds}
    for kind in kinds:
        for seed in seeds:
            tcfg, fcfg = build_configs(raw, dataset)
            tcfg.seed = seed
            if kind == "hybrid_pe":
                tcfg.regularizer = "none"
                fd = fcfg.to_dict()
                fd["pe"]["enabled"] = True
                fcfg = fields.FieldConfig.from_dict(fd)
            else:
                tcfg.regularizer = kind
            run_dir = os.path.join(out_dir, f"{kind}_seed{seed}")
            tracemalloc.start()
            try:
                tr = trainer.Trainer(tcfg, dataset, field_config=fcfg,
                                     out_dir=run_dir)
                summary = tr.fit()
                _, peak = tracemalloc.get_traced_memory()
            except GeosdfError as exc:
                raise type(exc)(f"ablation run {kind!r} failed: {exc}")
            finally:
                tracemalloc.stop()
            report = evalmesh.evaluate_model(
                tr.model, dataset, mesh_resolution=mesh_res, grid=tr.grid,
                its_per_sec=summary["its_per_sec"])
            results[kind].append({
                "seed": seed, "psnr": report.psnr, "ssim": report.ssim,
                "cd": report.cd, "nc": report.nc,
                "its_per_sec": summary["its_per_sec"],
                "peak_mem_bytes": peak})
    return results


def ablation_table(results):
    cols = ("psnr", "ssim", "cd", "nc", "its_per_sec")
    lines = ["kind                 " + "".join(f"{c:>22s}" for c in cols)]
    for kind, runs in results.items():
        cells = []
        for c in cols:
            vals = [r[c] for r in runs]
            mean, spread = float(np.mean(vals)), float(np.std(vals))
            cells.append(f"{mean:10.4f} ± {spread:7.4f}")
        lines.append(f"{kind:20s} " + " ".join(cells))
    return "\n".join(lines)


def cmd_ablate(args):
    raw = load_run_config(args.config)
    ds_path = args.dataset or raw.get("dataset")
    if not ds_path or not os.path.isdir(ds_path):
        raise DataError(f"dataset directory not found: {ds_path!r}")
    dataset = synthscene.load_dataset(ds_path)
    out_dir = args.out or raw.get("out")
    if not out_dir:
        raise UsageError("no output directory (config 'out' or --out)")
    os.makedirs(out_dir, exist_ok=True)
    seeds = raw.get("seeds", [1, 2, 3])
    results = run_ablation(raw, dataset, out_dir, seeds,
                           mesh_res=raw.get("mesh_res", 96))
    table = ablation_table(results)
    with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
        json.dump(results, fh, indent=1, sort_keys=True)
    with open(os.path.join(out_dir, "ablation_table.txt"), "w") as fh:
        fh.write(table + "\n")
    print(table)
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="geosdf")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="generate an analytic dataset")
    g.add_argument("--shape", required=True)
    g.add_argument("--views", type=int, default=20)
    g.add_argument("--frames", type=int, default=10)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--texture", default="normal")
    g.add_argument("--shading", default="lambert",
                   choices=["lambert", "none"])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_scene)

    t = sub.add_parser("train", help="train from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--dataset")
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--regularizer",
                   choices=[k.value for k in objectives.RegularizerKind])
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint against a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out")
    e.add_argument("--mesh-res", type=int, default=128)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="compare regularizer kinds")
    a.add_argument("--config", required=True)
    a.add_argument("--dataset")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    m = sub.add_parser("extract-mesh", help="marching cubes from a checkpoint")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--res", type=int, default=128)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_extract_mesh)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
