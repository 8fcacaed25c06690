import hashlib
import json
import os

import numpy as np
import pytest

from geosdf import cli, evalmesh, synthscene, trainer


def tree_hash(root):
    h = hashlib.sha256()
    for dirpath, _, files in sorted(os.walk(root)):
        for f in sorted(files):
            h.update(f.encode())
            h.update(open(os.path.join(dirpath, f), "rb").read())
    return h.hexdigest()


def tiny_train_config(ds_dir, out_dir, iterations=12, **train_kw):
    train = dict(iterations=iterations, rays_per_batch=64, log_every=4,
                 occupancy_resolution=16, occupancy_update_period=50,
                 samples_per_ray=32, seed=0)
    train.update(train_kw)
    return {"dataset": str(ds_dir), "out": str(out_dir), "train": train}


@pytest.fixture(scope="module")
def sphere_ds_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("clids") / "sphere"
    rc = cli.main(["gen-scene", "--shape", "sphere", "--views", "8",
                   "--size", "16", "--out", str(out)])
    assert rc == 0
    return out


def test_gen_scene_writes_expected_tree(sphere_ds_dir):
    assert len(os.listdir(sphere_ds_dir / "images")) == 8
    assert len(os.listdir(sphere_ds_dir / "masks")) == 8
    assert (sphere_ds_dir / "cameras.txt").exists()
    assert (sphere_ds_dir / "poses.txt").exists()
    assert (sphere_ds_dir / "oracle.json").exists()


def test_gen_scene_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli.main(["gen-scene", "--shape", "torus", "--views", "5",
                         "--size", "12", "--seed", "3",
                         "--out", str(out)]) == 0
    assert tree_hash(a) == tree_hash(b)


def test_gen_scene_capsule2_pose_lines(tmp_path):
    out = tmp_path / "c2"
    assert cli.main(["gen-scene", "--shape", "capsule2", "--frames", "10",
                     "--size", "12", "--out", str(out)]) == 0
    lines = [l for l in open(out / "poses.txt")
             if l.strip() and not l.startswith(("#", "bones"))]
    assert len(lines) == 10


def test_gen_scene_bad_shape_exits_2(tmp_path):
    assert cli.main(["gen-scene", "--shape", "cube", "--out",
                     str(tmp_path / "x")]) == 2


def test_train_missing_dataset_exits_3(tmp_path):
    cfg = tiny_train_config(tmp_path / "definitely_missing", tmp_path / "o")
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    assert cli.main(["train", "--config", str(p)]) == 3


def test_config_unknown_key_rejected(tmp_path, sphere_ds_dir):
    cfg = tiny_train_config(sphere_ds_dir, tmp_path / "o")
    cfg["train"]["learning_rate_typo"] = 1.0
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    assert cli.main(["train", "--config", str(p)]) == 2


@pytest.fixture(scope="module")
def trained_run(sphere_ds_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "sphere"
    cfg = tiny_train_config(sphere_ds_dir, out, iterations=20)
    p = out.parent / "cfg.json"
    p.write_text(json.dumps(cfg))
    assert cli.main(["train", "--config", str(p)]) == 0
    return out


def test_train_outputs(trained_run):
    assert (trained_run / "final.ckpt").exists()
    assert (trained_run / "resolved_config.json").exists()
    log = (trained_run / "train_log.txt").read_text()
    assert "its_per_sec=" in log
    resolved = json.loads((trained_run / "resolved_config.json").read_text())
    assert resolved["train"]["iterations"] == 20


def test_train_regularizer_none_log_lacks_smooth(sphere_ds_dir, tmp_path):
    out = tmp_path / "none"
    cfg = tiny_train_config(sphere_ds_dir, out, iterations=8)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    assert cli.main(["train", "--config", str(p),
                     "--regularizer", "none"]) == 0
    log = (out / "train_log.txt").read_text()
    assert " rgb=" in log
    assert " smooth=" not in log


def test_train_seed_determinism(sphere_ds_dir, tmp_path):
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        cfg = tiny_train_config(sphere_ds_dir, out, iterations=8)
        p = tmp_path / f"{name}.json"
        p.write_text(json.dumps(cfg))
        assert cli.main(["train", "--config", str(p), "--seed", "7"]) == 0
        outs.append(out / "final.ckpt")
    assert outs[0].read_bytes() == outs[1].read_bytes()


def test_eval_report_fields(trained_run, sphere_ds_dir, tmp_path):
    report_path = tmp_path / "report.json"
    rc = cli.main(["eval", "--checkpoint", str(trained_run / "final.ckpt"),
                   "--dataset", str(sphere_ds_dir),
                   "--out", str(report_path), "--mesh-res", "32"])
    assert rc == 0
    rep = evalmesh.EvalReport.from_json(report_path.read_text())
    assert 0 <= rep.iou <= 1
    assert rep.psnr > 0
    assert rep.its_per_sec > 0


def test_eval_untrained_checkpoint_cd_matches_init_radius(
        sphere_ds_dir, tmp_path):
    out = tmp_path / "init"
    cfg = tiny_train_config(sphere_ds_dir, out, iterations=0)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    assert cli.main(["train", "--config", str(p)]) == 0
    model, _ = trainer.load_model(str(out / "final.ckpt"))
    ds = synthscene.load_dataset(str(sphere_ds_dir))
    m = evalmesh.geometry_metrics(model.sdf_np, ds.scene, mesh_resolution=64,
                                  samples=5000, iou_resolution=32)
    # concentric spheres 0.3 vs 0.5 sit 0.2 apart
    assert m["cd"] == pytest.approx(0.2, abs=0.05)


def test_eval_oracle_against_itself(sphere_ds_dir):
    # the chamfer sampling floor is ~0.5*sqrt(area/n); 2M samples push it
    # under the 1e-3 bar so only true meshing error remains
    ds = synthscene.load_dataset(str(sphere_ds_dir))
    m = evalmesh.geometry_metrics(ds.scene.sdf_fn(0), ds.scene,
                                  mesh_resolution=128, samples=2_000_000)
    assert m["cd"] < 1e-3
    assert m["nc"] > 0.999
    iou = evalmesh.voxel_iou(ds.scene.sdf_fn(0), ds.scene.sdf_fn(0),
                             evalmesh.CANONICAL_BOX, 128)
    assert iou > 0.999


def test_extract_mesh(trained_run, tmp_path):
    out = tmp_path / "mesh.obj"
    rc = cli.main(["extract-mesh", "--checkpoint",
                   str(trained_run / "final.ckpt"), "--res", "32",
                   "--out", str(out)])
    assert rc == 0
    assert out.read_text().count("\nf ") > 10


def test_eval_missing_checkpoint_exits_3(sphere_ds_dir, tmp_path):
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"),
                     "--dataset", str(sphere_ds_dir)]) == 3


def test_ablate_table_shape(sphere_ds_dir, tmp_path):
    out = tmp_path / "ablate"
    cfg = tiny_train_config(sphere_ds_dir, out, iterations=6)
    cfg["seeds"] = [1, 2]
    cfg["mesh_res"] = 24
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    assert cli.main(["ablate", "--config", str(p)]) == 0
    results = json.loads((out / "ablation.json").read_text())
    assert set(results) == set(cli.ABLATION_KINDS)
    for runs in results.values():
        assert len(runs) == 2
        assert {"psnr", "ssim", "cd", "nc", "its_per_sec",
                "peak_mem_bytes"} <= set(runs[0])
    table = (out / "ablation_table.txt").read_text().splitlines()
    assert len(table) == 1 + len(cli.ABLATION_KINDS)
    assert "±" in table[1]
