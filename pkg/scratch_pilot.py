"""Pilot: does the desk-scale torus reproduce the regularizer ordering?"""
import json
import sys
import tempfile
import time

import numpy as np

from geosdf import evalmesh, fields, synthscene, trainer

budget = int(sys.argv[1]) if len(sys.argv) > 1 else 700
rays = int(sys.argv[2]) if len(sys.argv) > 2 else 512
size = int(sys.argv[3]) if len(sys.argv) > 3 else 48
seeds = [int(s) for s in sys.argv[4].split(",")] if len(sys.argv) > 4 else [1]

scene = synthscene.make_scene("torus")
d = tempfile.mkdtemp()
ds = synthscene.make_dataset(scene, d, views=20, image_size=size)

out = {}
for kind in ("smooth_normals", "none", "numerical_eikonal",
             "curvature_laplacian"):
    out[kind] = []
    for seed in seeds:
        cfg = trainer.TrainConfig(iterations=budget, rays_per_batch=rays,
                                  log_every=200, seed=seed, chunk_rays=1024,
                                  regularizer=kind)
        t0 = time.time()
        tr, summary = trainer.fit(cfg, ds)
        m = evalmesh.geometry_metrics(tr.model.sdf_np, scene,
                                      mesh_resolution=96, samples=100000)
        psnr, ssim = evalmesh.render_metrics(tr.model, ds, grid=tr.grid)
        rec = dict(seed=seed, cd=round(float(m["cd"]), 5),
                   nc=round(float(m["nc"]), 4),
                   iou=round(float(m["iou"]), 4), psnr=round(psnr, 2),
                   its=round(summary["its_per_sec"], 3),
                   mins=round((time.time() - t0) / 60, 1),
                   beta=round(tr.model.beta_value(), 4),
                   final_log=tr.log_lines[-1] if tr.log_lines else "")
        out[kind].append(rec)
        print(kind, rec, flush=True)
print(json.dumps(out))
