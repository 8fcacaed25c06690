import os

import numpy as np
import pytest

from geosdf import diffcore as dc
from geosdf import evalmesh, fields, synthscene, trainer
from geosdf.errors import NumericFault


def small_config(**kw):
    base = dict(iterations=10, rays_per_batch=128, log_every=5,
                occupancy_resolution=24, occupancy_update_period=50,
                chunk_rays=1024, seed=0)
    base.update(kw)
    return trainer.TrainConfig(**base)


@pytest.fixture(scope="module")
def sphere_ds(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds") / "redsphere"
    scene = synthscene.make_scene("sphere", texture="const:1,0,0",
                                  shading="none")
    return synthscene.make_dataset(scene, str(out), views=8, image_size=32)


@pytest.fixture(scope="module")
def trained(sphere_ds, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = small_config(iterations=300, rays_per_batch=256, log_every=50,
                       occupancy_resolution=32, occupancy_update_period=100)
    tr = trainer.Trainer(cfg, sphere_ds, out_dir=str(out))
    tr.fit()
    return tr


def parse_log(lines, term):
    out = {}
    for line in lines:
        if f" {term}=" not in line:
            continue
        it = int(line.split()[0].split("=")[1])
        val = float(line.split(f" {term}=")[1].split()[0])
        out[it] = val
    return out


def test_zero_learning_rate_leaves_params(sphere_ds):
    cfg = small_config(iterations=3, lr_features=0.0, lr_net=0.0)
    tr = trainer.Trainer(cfg, sphere_ds)
    before = tr.model.store.values.copy()
    tr.fit()
    assert np.array_equal(tr.model.store.values, before)


def test_fixed_seed_identical_trajectories(sphere_ds):
    def run():
        tr = trainer.Trainer(small_config(iterations=8, seed=3), sphere_ds)
        tr.fit()
        return tr.log_lines, tr.model.store.values.copy()

    log_a, vals_a = run()
    log_b, vals_b = run()
    strip = lambda ls: [l.split(" its_per_sec=")[0] for l in ls]
    assert strip(log_a) == strip(log_b)
    assert vals_a.tobytes() == vals_b.tobytes()


def test_zero_iterations_checkpoint_is_init(sphere_ds, tmp_path):
    cfg = small_config(iterations=0)
    tr = trainer.Trainer(cfg, sphere_ds, out_dir=str(tmp_path))
    init = tr.model.store.values.copy()
    tr.fit()
    store, meta = fields.load_checkpoint(tmp_path / "final.ckpt")
    n = len(init)
    assert store.values[:n].tobytes() == init.tobytes()
    assert meta["iteration"] == 0


def test_resume_matches_uninterrupted(sphere_ds, tmp_path):
    cfg = small_config(iterations=10, seed=5)
    straight = trainer.Trainer(cfg, sphere_ds, out_dir=str(tmp_path / "a"))
    straight.fit()

    cfg_head = small_config(iterations=6, seed=5)
    head = trainer.Trainer(cfg_head, sphere_ds, out_dir=str(tmp_path / "b"))
    head.fit()

    cfg_tail = small_config(iterations=10, seed=5)
    tail = trainer.Trainer(cfg_tail, sphere_ds, out_dir=str(tmp_path / "c"))
    tail.restore(str(tmp_path / "b" / "final.ckpt"))
    tail.fit()

    assert tail.model.store.values.tobytes() == \
        straight.model.store.values.tobytes()
    assert np.array_equal(tail.adam.m, straight.adam.m)
    assert np.array_equal(tail.grid.bits, straight.grid.bits)


def test_nonfinite_color_loss_aborts_with_checkpoint(sphere_ds, tmp_path):
    cfg = small_config(iterations=3)
    tr = trainer.Trainer(cfg, sphere_ds, out_dir=str(tmp_path))
    tr.update_occupancy()
    tr.model.store.view("tex.w0")[:] = np.nan
    frames, pix = tr.sample_pixels()
    with pytest.raises(NumericFault):
        tr.train_step(frames, pix)
    assert (tmp_path / "crash.ckpt").exists()


def test_nonfinite_parameters_detected_at_update(sphere_ds, tmp_path):
    cfg = small_config(iterations=3)
    tr = trainer.Trainer(cfg, sphere_ds, out_dir=str(tmp_path))
    tr.model.store.view("sdf.w0")[0] = np.nan
    with pytest.raises(NumericFault):
        tr.fit()
    assert (tmp_path / "crash.ckpt").exists()


def test_training_reduces_rgb_loss(trained):
    rgb = parse_log(trained.log_lines, "rgb")
    assert rgb[300] < rgb[50]


def test_beta_stays_positive_and_anneals(trained):
    beta = parse_log(trained.log_lines, "beta")
    assert all(b >= trained.model.config.beta_min for b in beta.values())
    assert beta[300] < beta[50]


def test_trained_color_is_red_on_surface(trained):
    model = trained.model
    mesh = evalmesh.marching_cubes(model.sdf_np, evalmesh.CANONICAL_BOX, 48)
    pts, _ = evalmesh.sample_surface(mesh, 2000, np.random.default_rng(0))
    leaf = model.store.leaf()
    with dc.no_grad():
        _, v = model.sdf(leaf, dc.Var(pts.astype(np.float32)))
        c = model.color(leaf, dc.Var(pts.astype(np.float32)), v)
    assert np.mean(np.abs(c.data - np.array([1.0, 0.0, 0.0]))) < 0.05


def test_log_has_expected_columns(trained):
    line = [l for l in trained.log_lines if " rgb=" in l][0]
    for col in ("rgb=", "alpha=", "eikonal=", "smooth=", "beta=",
                "its_per_sec="):
        assert col in line


def test_regularizer_none_drops_smooth_column(sphere_ds):
    tr = trainer.Trainer(small_config(iterations=5, regularizer="none"),
                         sphere_ds)
    tr.fit()
    assert all(" smooth=" not in l for l in tr.log_lines)


def test_multiscale_step_lengths_span_order_of_magnitude(trained, sphere_ds):
    # pair step lengths feeding the smoothing loss over one training batch
    frames, pix = trained.sample_pixels()
    chunks, _ = trained._plan_chunks(frames, pix)
    leaf = trained.model.store.leaf()
    steps = []
    for chunk in chunks:
        if not chunk["valid"].any():
            continue
        from geosdf import renderer
        batch = renderer.shade_samples(trained.model, leaf, chunk["o"],
                                       chunk["d"], chunk["t"],
                                       chunk["valid"], chunk["far"])
        d = np.linalg.norm(np.diff(batch.x_c.data, axis=0), axis=1)
        steps.append(d[batch.pair_left])
    steps = np.concatenate(steps)
    assert steps.max() / max(steps.min(), 1e-12) >= 10.0


def test_checkpoint_roundtrip_via_load_model(trained, tmp_path):
    path = tmp_path / "m.ckpt"
    trained.save_checkpoint(str(path))
    model, meta = trainer.load_model(str(path))
    assert meta["iteration"] == trained.iteration
    x = np.random.default_rng(1).uniform(-1, 1, (50, 3)).astype(np.float32)
    assert np.array_equal(model.sdf_np(x), trained.model.sdf_np(x))
