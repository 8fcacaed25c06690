import numpy as np
import pytest

from geosdf import diffcore as dc
from geosdf import fields, hashenc, objectives as obj
from geosdf.errors import NumericFault, UsageError


def test_rgb_loss_cases():
    same = np.full((8, 3), 0.4)
    assert obj.rgb_loss(dc.Var(same), same).item() == 0.0
    black = np.zeros((8, 3))
    white = np.ones((8, 3))
    assert obj.rgb_loss(dc.Var(black), white).item() == pytest.approx(1.0)
    pred = np.zeros((10, 3))
    gt = np.zeros((10, 3))
    gt[:5, 0] = 0.2
    assert obj.rgb_loss(dc.Var(pred), gt).item() == \
        pytest.approx(0.2 / 3 / 2, abs=1e-12)


def test_rgb_loss_count_mismatch():
    with pytest.raises(UsageError):
        obj.rgb_loss(dc.Var(np.zeros((4, 3))), np.zeros((5, 3)))


def test_mask_loss_cases():
    m = np.array([1.0, 0.0, 1.0, 0.0])
    assert obj.mask_loss(dc.Var(m.copy()), m).item() == 0.0
    assert obj.mask_loss(dc.Var(np.full(4, 0.5)), m).item() == pytest.approx(0.5)
    a = np.array([0.9, 0.9, 0.1, 0.1])
    m2 = np.array([1.0, 1.0, 0.0, 0.0])
    assert obj.mask_loss(dc.Var(a), m2).item() == pytest.approx(0.1)


def sphere_program(scale=1.0):
    def prog(leaf, xv):
        return dc.mul(dc.sub(dc.safe_norm(xv, axis=1), 0.5), scale)
    return prog


def test_eikonal_exact_sphere_zero():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0.2, 0.9, size=(50, 3))
    val = obj.eikonal_loss(pts, sphere_program(), None).item()
    assert val < 1e-10


def test_eikonal_scaled_field_is_one():
    rng = np.random.default_rng(1)
    pts = rng.uniform(0.2, 0.9, size=(50, 3))
    val = obj.eikonal_loss(pts, sphere_program(scale=2.0), None).item()
    assert val == pytest.approx(1.0, abs=1e-9)


def test_smooth_loss_hand_case():
    n = dc.Var(np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    val = obj.smooth_loss(n, np.array([0, 0]), np.array([2])).item()
    assert val == pytest.approx(np.sqrt(2) / 2, abs=1e-9)


def test_smooth_loss_constant_normals_zero():
    n = dc.Var(np.tile([0.0, 0.0, 1.0], (6, 1)))
    val = obj.smooth_loss(n, np.array([0, 0, 0, 1, 1, 1]),
                          np.array([3, 3])).item()
    assert abs(val) < 1e-5


def test_smooth_addends_equal():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(100, 3))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b = rng.normal(size=(100, 3))
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    add_a, add_b = obj.smooth_loss_addends(a, b)
    assert np.max(np.abs(add_a.data - add_b.data)) < 1e-12
    # per-pair value equals the consecutive-normal difference
    total = add_a.data + add_b.data
    assert np.allclose(total, np.linalg.norm(b - a, axis=1), atol=1e-9)


def test_smooth_loss_single_sample_rays_skip():
    n = dc.Var(np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]]))
    # rays 0 and 2 have one sample each; ray 1 has one: no pairs anywhere
    val = obj.smooth_loss(n, np.array([0, 1, 2]), np.array([1, 1, 1])).item()
    assert val == 0.0


def test_numerical_eikonal_linear_field():
    def prog(leaf, xv):
        return dc.slice_(xv, (slice(None), 0))
    pts = np.random.default_rng(3).uniform(-1, 1, size=(20, 3))
    for eps in (1e-1, 1e-2, 1e-3):
        assert obj.numerical_eikonal_loss(pts, prog, None, eps).item() < 1e-12


def test_numerical_eikonal_sphere_small():
    rng = np.random.default_rng(4)
    pts = rng.uniform(0.3, 0.8, size=(30, 3))
    val = obj.numerical_eikonal_loss(pts, sphere_program(), None, 1e-3).item()
    assert val < 1e-5


def test_numerical_eikonal_touches_probe_cells():
    cfg = hashenc.HashGridConfig(levels=2, base_resolution=4,
                                 growth_factor=2.0, table_size_log2=8)
    fcfg = fields.FieldConfig(grid=cfg, sdf_hidden_width=16)
    model = fields.CanonicalModel(fcfg, dtype=np.float64, seed=0)
    eps = 0.3  # large enough that probes land in different cells
    pt = np.array([[0.1, 0.05, -0.12]])

    def prog(leaf, xv):
        return model.sdf(leaf, xv)[0]

    leaf = model.store.leaf()
    loss = obj.numerical_eikonal_loss(pt, prog, leaf, eps)
    model.store.zero_grads()
    dc.backward(loss, model.store)
    seg = model.store.segment("hash.features")
    nz = np.nonzero(model.store.grads[seg.offset:seg.offset + seg.length])[0]
    probes = np.concatenate([pt + e for e in np.vstack([np.eye(3), -np.eye(3)]) * eps])
    allowed = hashenc.feature_indices(cfg, hashenc.touched_cells(probes, cfg))
    assert set(nz).issubset(set(allowed))
    # and each probe contributes at least one touched cell
    for probe in probes:
        cells = hashenc.feature_indices(cfg, hashenc.touched_cells(probe, cfg))
        assert len(set(nz) & set(cells)) > 0


def test_curvature_linear_field_zero():
    def prog(leaf, xv):
        return dc.vsum(dc.mul(xv, dc.Var(np.array([1.0, 2.0, -0.5]))), axis=1)
    pts = np.random.default_rng(5).uniform(-1, 1, size=(20, 3))
    assert obj.curvature_loss(pts, prog, None, 1e-2).item() < 1e-9


def test_curvature_quadratic_field():
    def prog(leaf, xv):
        return dc.vsum(dc.square(xv), axis=1)
    pts = np.random.default_rng(6).uniform(-1, 1, size=(20, 3))
    val = obj.curvature_loss(pts, prog, None, 1e-2).item()
    assert val == pytest.approx(6.0, abs=1e-6)


def test_curvature_sphere_two_over_r():
    rng = np.random.default_rng(7)
    r = 0.6
    dirs = rng.normal(size=(30, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pts = r * dirs
    eps = 1e-3
    val = obj.curvature_loss(pts, sphere_program(), None, eps).item()
    assert val == pytest.approx(2.0 / r, abs=1e-4)


def test_total_loss_paper_weights_arithmetic():
    w = obj.LossWeights()
    parts = {"rgb": dc.Var(np.asarray(0.1)),
             "alpha": dc.Var(np.asarray(0.2)),
             "eikonal": dc.Var(np.asarray(0.3)),
             "smooth": dc.Var(np.asarray(0.4))}
    total, breakdown = obj.total_loss(parts, w, "smooth_normals")
    assert total.item() == pytest.approx(1.45, abs=1e-9)
    assert set(breakdown) == {"rgb", "alpha", "eikonal", "smooth", "total"}


def test_total_loss_kind_none_drops_smooth():
    w = obj.LossWeights()
    parts = {"rgb": dc.Var(np.asarray(0.1)),
             "alpha": dc.Var(np.asarray(0.2)),
             "eikonal": dc.Var(np.asarray(0.3))}
    total, breakdown = obj.total_loss(parts, w, "none")
    assert "smooth" not in breakdown
    assert total.item() == pytest.approx(10 * 0.1 + 0.1 * 0.2 + 0.1 * 0.3)


def test_total_loss_nonfinite_names_term():
    w = obj.LossWeights()
    parts = {"rgb": dc.Var(np.asarray(np.nan)),
             "alpha": dc.Var(np.asarray(0.0)),
             "eikonal": dc.Var(np.asarray(0.0))}
    with pytest.raises(NumericFault, match="rgb"):
        obj.total_loss(parts, w, "none")


def test_all_losses_nonnegative():
    rng = np.random.default_rng(8)
    n = dc.Var(rng.normal(size=(20, 3)))
    n = dc.normalize(n, axis=1)
    assert obj.smooth_loss(n, np.repeat(np.arange(4), 5),
                           np.full(4, 5)).item() >= 0
    assert obj.rgb_loss(dc.Var(rng.uniform(0, 1, (5, 3))),
                        rng.uniform(0, 1, (5, 3))).item() >= 0


def test_fd_eps_schedule():
    assert obj.fd_eps_schedule(0, 100) == pytest.approx(1e-2)
    assert obj.fd_eps_schedule(99, 100) == pytest.approx(1e-3)
    mid = obj.fd_eps_schedule(50, 101)
    assert 1e-3 < mid < 1e-2


def toy_model():
    cfg = hashenc.HashGridConfig(levels=2, base_resolution=4,
                                 growth_factor=2.0, table_size_log2=8)
    fcfg = fields.FieldConfig(grid=cfg, sdf_hidden_width=16)
    return fields.CanonicalModel(fcfg, dtype=np.float64, seed=1)


def test_eikonal_param_grads_match_fd_on_toy_grid():
    model = toy_model()
    rng = np.random.default_rng(9)
    pts = rng.uniform(-0.8, 0.8, size=(6, 3))

    def loss_fn():
        leaf = model.store.leaf()
        return obj.eikonal_loss(pts, lambda lf, xv: model.sdf(lf, xv)[0],
                                leaf).item()

    leaf = model.store.leaf()
    loss = obj.eikonal_loss(pts, lambda lf, xv: model.sdf(lf, xv)[0], leaf)
    model.store.zero_grads()
    dc.backward(loss, model.store)
    got = model.store.grads.copy()
    idx = rng.permutation(model.store.total())[:300]
    fd = dc.fd_param_gradient(loss_fn, model.store, h=1e-5, indices=idx)
    assert dc.relative_error(got[idx], fd, floor=1e-5) < 1e-3


def test_smooth_param_grads_match_fd_on_toy_grid():
    model = toy_model()
    rng = np.random.default_rng(10)
    # two short "rays" of points marching through the volume
    pts = np.concatenate([
        np.linspace([-0.5, -0.2, 0.0], [0.5, 0.3, 0.1], 4),
        np.linspace([0.0, -0.5, -0.3], [0.1, 0.5, 0.4], 4)])
    ray_id = np.repeat([0, 1], 4)
    counts = np.array([4, 4])

    def build():
        leaf = model.store.leaf()
        xv = dc.Var(pts)
        d, _ = model.sdf(leaf, xv)
        g = dc.grad(d, [xv], seed=dc.Var(np.ones_like(d.data)))[0]
        n = dc.normalize(g, axis=1)
        return obj.smooth_loss(n, ray_id, counts)

    loss = build()
    model.store.zero_grads()
    dc.backward(loss, model.store)
    got = model.store.grads.copy()
    idx = rng.permutation(model.store.total())[:300]
    fd = dc.fd_param_gradient(lambda: build().item(), model.store, h=1e-5,
                              indices=idx)
    assert dc.relative_error(got[idx], fd, floor=1e-5) < 1e-3
