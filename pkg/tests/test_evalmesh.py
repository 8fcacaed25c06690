import numpy as np
import pytest

from geosdf import evalmesh, synthscene

BOX = (np.full(3, -1.0), np.full(3, 1.0))


def sphere_field(r=0.5):
    return lambda x: np.linalg.norm(np.atleast_2d(x), axis=1) - r


def test_marching_cubes_constant_field_empty():
    mesh = evalmesh.marching_cubes(lambda x: np.ones(len(np.atleast_2d(x))),
                                   BOX, 16)
    assert mesh.empty


def test_marching_cubes_plane():
    mesh = evalmesh.marching_cubes(lambda x: np.atleast_2d(x)[:, 0], BOX, 32)
    assert not mesh.empty
    cell = 2.0 / 32
    assert np.max(np.abs(mesh.vertices[:, 0])) < cell


def test_marching_cubes_sphere_vertices_on_surface():
    mesh = evalmesh.marching_cubes(sphere_field(), BOX, 128)
    r = np.linalg.norm(mesh.vertices, axis=1)
    cell_diag = np.sqrt(3) * 2.0 / 128
    assert np.max(np.abs(r - 0.5)) < cell_diag


def test_marching_cubes_vertices_on_lattice_edges():
    mesh = evalmesh.marching_cubes(sphere_field(), BOX, 32)
    cell = 2.0 / 32
    frac = (mesh.vertices + 1.0) / cell
    on_lattice = np.isclose(frac, np.round(frac), atol=1e-9)
    # every vertex lies on a lattice edge: at least 2 of 3 coords integral
    assert np.all(on_lattice.sum(axis=1) >= 2)


def test_marching_cubes_normals_outward():
    mesh = evalmesh.marching_cubes(sphere_field(), BOX, 64)
    radial = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1,
                                            keepdims=True)
    dots = np.sum(mesh.normals * radial, axis=1)
    assert np.min(dots) > 0.99


def test_chamfer_identical_and_two_points():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(100, 3))
    assert evalmesh.chamfer(pts, pts) == 0.0
    a = np.array([[0.0, 0, 0]])
    b = np.array([[0.2, 0, 0]])
    assert evalmesh.chamfer(a, b) == pytest.approx(0.2)


def test_chamfer_concentric_spheres():
    rng = np.random.default_rng(1)
    dirs = rng.normal(size=(20000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    a = 0.5 * dirs
    dirs2 = rng.normal(size=(20000, 3))
    dirs2 /= np.linalg.norm(dirs2, axis=1, keepdims=True)
    b = 0.52 * dirs2
    assert evalmesh.chamfer(a, b) == pytest.approx(0.02, abs=0.002)


def test_chamfer_symmetry_and_empty():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(500, 3))
    b = rng.normal(size=(400, 3)) + 0.1
    assert evalmesh.chamfer(a, b) == pytest.approx(evalmesh.chamfer(b, a),
                                                   abs=1e-12)
    assert evalmesh.chamfer(np.zeros((0, 3)), b) == float("inf")


def test_normal_consistency_self_and_flipped():
    mesh = evalmesh.marching_cubes(sphere_field(), BOX, 48)
    assert evalmesh.normal_consistency(mesh, mesh) == pytest.approx(1.0,
                                                                    abs=1e-6)
    flipped = evalmesh.TriMesh(mesh.vertices, mesh.triangles, -mesh.normals)
    assert evalmesh.normal_consistency(mesh, flipped) == pytest.approx(
        1.0, abs=1e-6)  # absolute dot


def test_normal_consistency_sphere_vs_cube():
    sphere = evalmesh.marching_cubes(sphere_field(), BOX, 64)

    def cube_field(x):
        q = np.abs(np.atleast_2d(x)) - 0.5
        outside = np.linalg.norm(np.maximum(q, 0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside

    cube = evalmesh.marching_cubes(cube_field, BOX, 64)
    nc = evalmesh.normal_consistency(sphere, cube)
    assert 0.5 < nc < 0.98


def test_voxel_iou_cases():
    f = sphere_field()
    assert evalmesh.voxel_iou(f, f, BOX, 32) == 1.0
    g = lambda x: np.linalg.norm(np.atleast_2d(x) - [0.7, 0.7, 0.7], axis=1) - 0.1
    assert evalmesh.voxel_iou(f, g, BOX, 32) == 0.0


def test_voxel_iou_lens_formula():
    # spheres radius r with centers d apart: V_i = 2*pi*(r - d/2)^2*(2r + d/2)/3
    r, d = 0.5, 0.1
    f = sphere_field(r)
    g = lambda x: np.linalg.norm(np.atleast_2d(x) - [d, 0, 0], axis=1) - r
    v_sphere = 4 / 3 * np.pi * r ** 3
    h = r - d / 2
    v_lens = 2 * np.pi * h ** 2 * (r + d / 4) / 3 * 2
    expect = v_lens / (2 * v_sphere - v_lens)
    got = evalmesh.voxel_iou(f, g, BOX, 128)
    assert got == pytest.approx(expect, abs=0.01)


def test_voxel_iou_monotone_under_shrink():
    f = sphere_field(0.5)
    prev = 1.0
    for r in (0.45, 0.4, 0.3):
        val = evalmesh.voxel_iou(f, sphere_field(r), BOX, 64)
        assert val < prev
        prev = val


def test_psnr_cases():
    rng = np.random.default_rng(3)
    img = rng.uniform(0, 1, size=(32, 32, 3))
    p, s = evalmesh.image_metrics(img, img)
    assert p == 99.0
    assert s == pytest.approx(1.0, abs=1e-9)
    assert evalmesh.psnr(img, np.clip(img, 0, 1) * 0 + (img - 0.1)) == \
        pytest.approx(20.0, abs=1e-9)


def test_psnr_masked_region():
    img = np.zeros((8, 8, 3))
    noisy = img.copy()
    noisy[:4] += 0.5
    mask = np.zeros((8, 8), dtype=bool)
    mask[4:] = True
    assert evalmesh.psnr(noisy, img, mask=mask) == 99.0
    assert evalmesh.psnr(noisy, img) < 10.0


def test_ssim_inverted_checkerboard_negative():
    tile = np.indices((32, 32)).sum(axis=0) % 2
    img = np.repeat(tile[:, :, None], 3, axis=2).astype(np.float64)
    inv = 1.0 - img
    assert evalmesh.ssim(inv, img) < 0


def test_image_metrics_shape_mismatch():
    with pytest.raises(Exception):
        evalmesh.psnr(np.zeros((4, 4, 3)), np.zeros((5, 5, 3)))


def test_watertight_single_triangle():
    mesh = evalmesh.TriMesh(np.eye(3), np.array([[0, 1, 2]]),
                            np.tile([0, 0, 1.0], (3, 1)))
    ok, boundary = evalmesh.watertight_check(mesh)
    assert not ok
    assert boundary == 3


def test_watertight_marching_cubes_sphere():
    mesh = evalmesh.marching_cubes(sphere_field(), BOX, 64)
    ok, boundary = evalmesh.watertight_check(mesh)
    assert ok
    assert boundary == 0


def test_watertight_clipped_plane_is_open():
    mesh = evalmesh.marching_cubes(lambda x: np.atleast_2d(x)[:, 0] - 0.05,
                                   BOX, 16)
    ok, boundary = evalmesh.watertight_check(mesh)
    assert not ok
    assert boundary > 0


def test_torus_marching_cubes_watertight_and_accurate():
    scene = synthscene.make_scene("torus")
    mesh = evalmesh.marching_cubes(scene.sdf_fn(), BOX, 96)
    ok, _ = evalmesh.watertight_check(mesh)
    assert ok
    d = scene.sdf(mesh.vertices)
    assert np.max(np.abs(d)) < np.sqrt(3) * 2.0 / 96


def test_save_obj_parses(tmp_path):
    mesh = evalmesh.marching_cubes(sphere_field(), BOX, 16)
    path = tmp_path / "m.obj"
    evalmesh.save_obj(path, mesh)
    v = n = f = 0
    for line in open(path):
        kind = line.split()[0]
        v += kind == "v"
        n += kind == "vn"
        f += kind == "f"
    assert v == len(mesh.vertices)
    assert n == len(mesh.normals)
    assert f == len(mesh.triangles)


def test_eval_report_roundtrip():
    rep = evalmesh.EvalReport(cd=0.01, nc=0.98, iou=0.97, psnr=30.0,
                              ssim=0.95, its_per_sec=4.2)
    back = evalmesh.EvalReport.from_json(rep.to_json())
    assert back == rep
