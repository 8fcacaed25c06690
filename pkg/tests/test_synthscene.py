import numpy as np
import pytest

from geosdf import articulation as art
from geosdf import renderer, synthscene
from geosdf.errors import GenerationError


def test_sphere_sdf_values():
    scene = synthscene.make_scene("sphere")
    assert scene.sdf(np.array([1.0, 0.0, 0.0]))[0] == pytest.approx(0.5)
    assert scene.sdf(np.zeros(3))[0] == pytest.approx(-0.5)


def test_torus_sdf_closed_form():
    scene = synthscene.AnalyticScene(
        shape={"kind": "torus", "major": 0.3, "minor": 0.1})
    assert scene.sdf(np.array([0.3, 0.0, 0.1]))[0] == pytest.approx(0.0, abs=1e-12)
    assert scene.sdf(np.array([0.4, 0.0, 0.0]))[0] == pytest.approx(0.0, abs=1e-12)
    assert synthscene.torus_sdf(np.array([[0.3, 0.0, 0.1]]), 0.3, 0.1)[0] == \
        pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("kind", ["sphere", "torus", "capsule", "capsule2"])
def test_oracle_unit_gradient(kind):
    scene = synthscene.make_scene(kind)
    frame = 3 if kind == "capsule2" else 0
    rng = np.random.default_rng(0)
    # near-surface points sit far from the medial set
    pts, nrm = scene.surface_samples(1000, rng, frame=frame)
    pts = pts + nrm * rng.uniform(-0.04, 0.04, size=(len(pts), 1))
    if kind == "capsule2":
        # stay clear of the union crease where the two rigid branches meet
        d0 = np.abs(scene.canonical_sdf(
            (pts - scene.frames[frame].translations[0])
            @ scene.frames[frame].rotations[0]))
        d1 = np.abs(scene.canonical_sdf(
            (pts - scene.frames[frame].translations[1])
            @ scene.frames[frame].rotations[1]))
        pts = pts[np.abs(d0 - d1) > 0.02]
    h = 1e-6
    g = np.zeros((len(pts), 3))
    for k in range(3):
        dx = np.zeros(3)
        dx[k] = h
        g[:, k] = (scene.sdf(pts + dx, frame) - scene.sdf(pts - dx, frame)) / (2 * h)
    assert np.allclose(np.linalg.norm(g, axis=1), 1.0, atol=1e-6)


def test_camera_looking_away_renders_background():
    scene = synthscene.make_scene("sphere")
    scene.light_dir = (0.0, 0.0, 1.0)
    cam = renderer.Camera.look_at((2, 0, 0), (4, 0, 0), (0, 0, 1), 40.0,
                                  32, 32, near=0.1, far=3.0)
    img, mask = synthscene.render_reference(scene, cam)
    assert not mask.any()
    assert np.allclose(img, np.asarray(scene.background))


def test_sphere_silhouette_radius_matches_projection():
    scene = synthscene.make_scene("sphere")
    scene.light_dir = (1.0, 0.0, 0.0)
    size = 128
    dist = 2.0
    cam = renderer.Camera.look_at((dist, 0, 0), (0, 0, 0), (0, 0, 1), 40.0,
                                  size, size, near=0.5, far=3.8)
    _, mask = synthscene.render_reference(scene, cam)
    area = mask.sum()
    radius_px = np.sqrt(area / np.pi)
    expect = cam.fx * np.tan(np.arcsin(0.5 / dist))
    assert abs(radius_px - expect) < 1.0


def test_articulated_identity_matches_static_capsule():
    cap = synthscene.make_scene("capsule")
    cap2 = synthscene.make_scene("capsule2", frames=3, max_bend_deg=45.0)
    cap2.frames[1] = art.BonePose.identity(2)
    cap.light_dir = cap2.light_dir = (0.0, 1.0, 0.0)
    cam = renderer.Camera.look_at((0, 2, 0.3), (0, 0, 0), (0, 0, 1), 40.0,
                                  48, 48, near=0.5, far=3.8)
    img_a, mask_a = synthscene.render_reference(cap, cam)
    img_b, mask_b = synthscene.render_reference(cap2, cam, frame=1)
    assert np.array_equal(mask_a, mask_b)
    assert np.allclose(img_a, img_b, atol=1e-9)


def test_trace_counts_nonconvergent_rays():
    o = np.zeros((10, 3))
    d = np.tile([1.0, 0, 0], (10, 1))
    t, hit, nonconv = synthscene.trace(lambda x: np.full(len(x), 1e-4),
                                       o, d, 0.0, 10.0, tol=1e-5,
                                       max_steps=64)
    assert nonconv == 10
    assert not hit.any()


def test_render_reference_raises_on_bad_tracing(monkeypatch):
    scene = synthscene.make_scene("sphere")
    scene.light_dir = (1.0, 0.0, 0.0)
    cam = renderer.Camera.look_at((2, 0, 0), (0, 0, 0), (0, 0, 1), 40.0,
                                  16, 16, near=0.5, far=3.8)
    monkeypatch.setattr(scene, "sdf_fn",
                        lambda frame=0: lambda x: np.full(len(x), 1e-4))
    with pytest.raises(GenerationError):
        synthscene.render_reference(scene, cam)


def test_ppm_pgm_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1, size=(7, 5, 3))
    synthscene.write_ppm(tmp_path / "a.ppm", img)
    back = synthscene.read_ppm(tmp_path / "a.ppm")
    assert back.shape == (7, 5, 3)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12
    mask = rng.uniform(0, 1, size=(7, 5)) > 0.5
    synthscene.write_pgm(tmp_path / "a.pgm", mask)
    assert np.array_equal(synthscene.read_pgm(tmp_path / "a.pgm"), mask)


@pytest.fixture(scope="module")
def sphere_ds(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds") / "sphere"
    scene = synthscene.make_scene("sphere")
    return synthscene.make_dataset(scene, str(out), views=20, image_size=32)


def test_dataset_counts_and_masks(sphere_ds):
    assert sphere_ds.num_frames == 20
    assert len(sphere_ds.cameras) == 20
    assert sphere_ds.images.shape == (20, 32, 32, 3)
    assert all(m.sum() > 0 for m in sphere_ds.masks)
    assert sphere_ds.holdout == [5, 15]
    assert len(sphere_ds.train_frames) == 18


def test_dataset_hit_pixels_differ_from_background(sphere_ds):
    bg = np.asarray(sphere_ds.scene.background)
    for i in [0, 7]:
        fg = sphere_ds.images[i][sphere_ds.masks[i]]
        assert np.all(np.linalg.norm(fg - bg, axis=1) > 0.01)


def test_dataset_regeneration_bit_identical(tmp_path):
    import hashlib
    import os

    def tree_hash(root):
        h = hashlib.sha256()
        for dirpath, _, files in sorted(os.walk(root)):
            for f in sorted(files):
                h.update(f.encode())
                h.update(open(os.path.join(dirpath, f), "rb").read())
        return h.hexdigest()

    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        scene = synthscene.make_scene("torus")
        synthscene.make_dataset(scene, str(out), views=6, image_size=24,
                                seed=3)
    assert tree_hash(a) == tree_hash(b)


def test_articulated_dataset_pairs_camera_and_pose(tmp_path):
    scene = synthscene.make_scene("capsule2", frames=6)
    ds = synthscene.make_dataset(scene, str(tmp_path / "c2"), image_size=24)
    assert ds.num_frames == 6
    assert len(ds.poses) == 6
    assert ds.holdout == [4, 5]
    assert ds.skeleton() is not None
    assert ds.pose(2) is not None
