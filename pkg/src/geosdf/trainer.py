"""The optimization loop: batch assembly, loss evaluation, Adam updates,
occupancy refresh, logging and checkpoints.

Determinism contract: all randomness flows from the config seed through
explicit generators (one for training, one derived per occupancy update),
reductions have fixed order, and checkpoints carry the generator state plus
optimizer moments and occupancy bits, so a resumed run is bit-identical to
an uninterrupted one.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import evalmesh, fields, objectives, renderer
from .errors import NumericFault, UsageError


@dataclass
class TrainConfig:
    iterations: int = 4000
    rays_per_batch: int = 1024
    lr_features: float = 5e-3
    lr_net: float = 5e-4
    lr_rho: float = 3e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-15
    seed: int = 0
    weights: objectives.LossWeights = field(
        default_factory=objectives.LossWeights)
    regularizer: str = "smooth_normals"
    eval_every: int = 0          # 0 disables periodic eval snapshots
    checkpoint_every: int = 0    # 0 keeps only the final checkpoint
    log_every: int = 50
    samples_per_ray: int = 64
    chunk_rays: int = 256
    occupancy_resolution: int = 64
    occupancy_update_period: int = 100
    foreground_fraction: float = 0.5
    fd_eps_start: float = 1e-2
    fd_eps_end: float = 1e-3

    def __post_init__(self):
        if self.iterations < 0 or self.rays_per_batch <= 0:
            raise UsageError("bad training budget")
        objectives.RegularizerKind(self.regularizer)

    def to_dict(self):
        d = dict(vars(self))
        d["weights"] = dict(vars(self.weights))
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "weights" in d:
            d["weights"] = objectives.LossWeights(**d["weights"])
        return cls(**d)


def _rng_state_to_meta(rng):
    st = rng.bit_generator.state
    return {"state": str(st["state"]["state"]),
            "inc": str(st["state"]["inc"]),
            "has_uint32": st["has_uint32"],
            "uinteger": st["uinteger"]}


def _rng_from_meta(meta):
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(meta["state"]), "inc": int(meta["inc"])},
        "has_uint32": meta["has_uint32"],
        "uinteger": meta["uinteger"]}
    return rng


class Adam:
    def __init__(self, store, lr_vector, beta1=0.9, beta2=0.99, eps=1e-15):
        self.lr = np.asarray(lr_vector, dtype=store.dtype)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(store.total(), dtype=store.dtype)
        self.v = np.zeros(store.total(), dtype=store.dtype)
        self.t = 0

    def step(self, store):
        g = store.grads
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        store.values = store.values - self.lr * mhat / (np.sqrt(vhat)
                                                        + self.eps)
        store._leaf = None


def lr_vector(store, lr_features, lr_net, lr_rho=None):
    lrs = np.full(store.total(), lr_net)
    for seg in store.segments:
        if seg.name == "hash.features":
            lrs[seg.offset:seg.offset + seg.length] = lr_features
        elif seg.name == "density.rho" and lr_rho is not None:
            lrs[seg.offset:seg.offset + seg.length] = lr_rho
    return lrs


class Trainer:
    def __init__(self, config, dataset, field_config=None, out_dir=None):
        self.config = config
        self.dataset = dataset
        self.out_dir = out_dir
        if field_config is None:
            field_config = fields.FieldConfig(
                offset_enabled=dataset.scene.articulated)
        self.model = fields.CanonicalModel(field_config, dtype=np.float32,
                                           seed=config.seed)
        self.grid = renderer.OccupancyGrid(
            resolution=config.occupancy_resolution,
            update_period=config.occupancy_update_period)
        self.adam = Adam(self.model.store,
                         lr_vector(self.model.store, config.lr_features,
                                   config.lr_net, config.lr_rho),
                         config.adam_beta1, config.adam_beta2,
                         config.adam_eps)
        self.rng = np.random.default_rng(config.seed)
        self.iteration = 0
        self.log_lines = []
        self._its_per_sec = 0.0
        self._prepare_pixel_pools()

    # --- setup -----------------------------------------------------------

    def _prepare_pixel_pools(self):
        ds = self.dataset
        self.train_frames = np.asarray(ds.train_frames)
        h, w = ds.images.shape[1:3]
        self.image_hw = (h, w)
        self.images_f32 = ds.images.astype(np.float32)
        self.masks_f32 = ds.masks.astype(np.float32)
        self.fg_pools = {}
        for f in self.train_frames:
            vu = np.argwhere(ds.masks[f])
            self.fg_pools[int(f)] = vu[:, ::-1].copy()  # (u, v)

    def skeleton(self):
        return self.dataset.skeleton()

    # --- occupancy -------------------------------------------------------

    def update_occupancy(self):
        try:
            self.model.check_finite()
        except NumericFault:
            self._dump_crash_checkpoint()
            raise
        poses = [self.dataset.pose(int(f)) for f in self.train_frames] \
            if self.dataset.scene.articulated else None
        rng = np.random.default_rng([self.config.seed, 7919, self.iteration])
        renderer.update_occupancy(self.grid, self.model, poses=poses,
                                  skel=self.skeleton(), rng=rng)

    # --- batch assembly --------------------------------------------------

    def sample_pixels(self):
        """Half the rays land on mask-foreground pixels, half anywhere."""
        cfg = self.config
        r = cfg.rays_per_batch
        h, w = self.image_hw
        frames = self.train_frames[self.rng.integers(0, len(self.train_frames),
                                                     size=r)]
        want_fg = self.rng.uniform(size=r) < cfg.foreground_fraction
        pix = np.empty((r, 2), dtype=np.int64)
        for f in np.unique(frames):
            sel = frames == f
            fg_sel = sel & want_fg
            pool = self.fg_pools[int(f)]
            if len(pool) and fg_sel.any():
                take = self.rng.integers(0, len(pool), size=int(fg_sel.sum()))
                pix[fg_sel] = pool[take]
            else:
                fg_sel = np.zeros_like(sel)
            rest = sel & ~fg_sel
            n_rest = int(rest.sum())
            pix[rest, 0] = self.rng.integers(0, w, size=n_rest)
            pix[rest, 1] = self.rng.integers(0, h, size=n_rest)
        return frames, pix

    # --- one optimization step --------------------------------------------

    def _plan_chunks(self, frames, pix):
        """Ray groups -> bounded-size chunks with sampling done up front.

        Returns (chunks, totals): each chunk carries rays, sampled t-values
        and supervision; totals hold the global denominators so per-chunk
        losses can be combined into exact global means.
        """
        cfg = self.config
        ds = self.dataset
        if ds.scene.articulated:
            groups = [(int(f), np.nonzero(frames == f)[0])
                      for f in np.unique(frames)]
        else:
            groups = [(None, np.arange(len(frames)))]
        chunks = []
        total_samples = 0
        for fkey, idx in groups:
            gpix = pix[idx]
            gframes = frames[idx]
            cam_lookup = gframes if fkey is None else np.full(len(idx), fkey)
            o = np.stack([ds.cameras[int(i)].origin for i in cam_lookup])
            d = np.empty((len(idx), 3))
            for i in np.unique(cam_lookup):
                m = cam_lookup == i
                _, dd = renderer.make_rays(ds.cameras[int(i)], gpix[m])
                d[m] = dd
            cam0 = ds.cameras[int(cam_lookup[0])]
            t, valid = renderer.sample_ray(
                o, d, self.grid, cfg.samples_per_ray, cam0.near, cam0.far,
                rng=self.rng,
                min_step=(cam0.far - cam0.near) / cfg.samples_per_ray)
            gt_c = self.images_f32[gframes, gpix[:, 1], gpix[:, 0]]
            gt_m = self.masks_f32[gframes, gpix[:, 1], gpix[:, 0]]
            for lo in range(0, len(idx), cfg.chunk_rays):
                sl = slice(lo, lo + cfg.chunk_rays)
                tv = t[sl] if t.size else np.zeros((len(gpix[sl]), 0))
                vv = valid[sl] if valid.size else np.zeros(
                    (len(gpix[sl]), 0), dtype=bool)
                chunks.append({"fkey": fkey, "o": o[sl], "d": d[sl],
                               "t": tv, "valid": vv, "far": cam0.far,
                               "gt_c": gt_c[sl], "gt_m": gt_m[sl]})
                total_samples += int(vv.sum())
        return chunks, {"rays": len(frames), "samples": total_samples}

    def train_step(self, frames, pix):
        """One render + loss + backward + Adam update over a pixel batch.

        Chunks are processed with their own tape and an immediate backward
        pass (gradients accumulate in the store), which bounds peak memory
        and keeps buffer sizes recyclable; the summed result equals the
        whole-batch loss because every chunk term is scaled by the global
        denominator before its backward runs.
        """
        cfg = self.config
        ds = self.dataset
        kind = objectives.RegularizerKind(cfg.regularizer)
        model = self.model
        skel = self.skeleton()
        need_normals = kind == objectives.RegularizerKind.SMOOTH_NORMALS
        need_grads = kind != objectives.RegularizerKind.NUMERICAL_EIKONAL
        eps = objectives.fd_eps_schedule(self.iteration, cfg.iterations,
                                         cfg.fd_eps_start, cfg.fd_eps_end)
        chunks, totals = self._plan_chunks(frames, pix)
        geom_term = {objectives.RegularizerKind.NUMERICAL_EIKONAL:
                     "eikonal_fd"}.get(kind, "eikonal")

        def sdf_prog(lf, xv):
            return model.sdf(lf, xv)[0]

        model.store.zero_grads()
        leaf = model.store.leaf()
        breakdown = {"rgb": 0.0, "alpha": 0.0, geom_term: 0.0}
        if need_normals:
            breakdown["smooth"] = 0.0
        if kind == objectives.RegularizerKind.CURVATURE_LAPLACIAN:
            breakdown["curvature"] = 0.0
        w = cfg.weights
        bg = np.asarray(ds.scene.background, dtype=np.float32)

        for chunk in chunks:
            r_k = len(chunk["o"])
            ray_scale = r_k / totals["rays"]
            m_k = int(chunk["valid"].sum())
            parts = []
            if m_k:
                batch = renderer.shade_samples(
                    model, leaf, chunk["o"], chunk["d"], chunk["t"],
                    chunk["valid"], chunk["far"],
                    pose=ds.pose(chunk["fkey"]) if chunk["fkey"] is not None
                    else None,
                    skel=skel if chunk["fkey"] is not None else None,
                    need_normals=need_grads or need_normals)
                c_hat, a_hat, _ = renderer.composite_compact(batch)
                c_hat = renderer.composite_background(c_hat, a_hat, bg)
                sample_scale = m_k / max(totals["samples"], 1)
                if need_grads:
                    term = objectives.eikonal_from_grads(batch.grads)
                    parts.append(("eikonal", term, w.eikonal, sample_scale))
                else:
                    term = objectives.numerical_eikonal_loss(
                        batch.x_c.data, sdf_prog, leaf, eps)
                    parts.append(("eikonal_fd", term, w.eikonal,
                                  sample_scale))
                if need_normals:
                    cnt = np.zeros(batch.shape[0], dtype=np.int64)
                    np.add.at(cnt, batch.ray_id, 1)
                    term = objectives.smooth_loss(batch.normals,
                                                  batch.ray_id, cnt)
                    parts.append(("smooth", term, w.smooth, ray_scale))
                if kind == objectives.RegularizerKind.CURVATURE_LAPLACIAN:
                    term = objectives.curvature_loss(batch.x_c.data,
                                                     sdf_prog, leaf, eps)
                    parts.append(("curvature", term, w.curvature,
                                  sample_scale))
            else:
                a_hat = dc.Var(np.zeros(r_k, dtype=np.float32))
                c_hat = dc.Var(np.broadcast_to(bg, (r_k, 3)))
            parts.append(("rgb", objectives.rgb_loss(c_hat, chunk["gt_c"]),
                          w.rgb, ray_scale))
            parts.append(("alpha", objectives.mask_loss(a_hat,
                                                        chunk["gt_m"]),
                          w.alpha, ray_scale))

            total = None
            for name, term, weight, scale in parts:
                val = float(term.data)
                if not np.isfinite(val):
                    self._dump_crash_checkpoint()
                    raise NumericFault(f"loss term {name!r} is non-finite "
                                       f"at iteration {self.iteration}")
                breakdown[name] += val * scale
                piece = dc.mul(term, weight * scale)
                total = piece if total is None else dc.add(total, piece)
            if m_k:
                dc.backward(total, model.store)

        if not np.isfinite(model.store.grads).all():
            self._dump_crash_checkpoint()
            raise NumericFault("non-finite gradients at iteration "
                               f"{self.iteration}")
        breakdown["total"] = sum(
            {"rgb": w.rgb, "alpha": w.alpha, "eikonal": w.eikonal,
             "eikonal_fd": w.eikonal, "smooth": w.smooth,
             "curvature": w.curvature}[k] * v
            for k, v in breakdown.items())
        self.adam.step(model.store)
        breakdown["beta"] = model.beta_value()
        return breakdown

    def _dump_crash_checkpoint(self):
        if self.out_dir:
            os.makedirs(self.out_dir, exist_ok=True)
            self.save_checkpoint(os.path.join(self.out_dir, "crash.ckpt"))

    # --- checkpointing -----------------------------------------------------

    def save_checkpoint(self, path, extra_meta=None):
        ck = dc.ParamStore(dtype=self.model.store.dtype)
        for seg in self.model.store.segments:
            ck.add(seg.name, self.model.store.view(seg.name))
        ck.add("optim.m", self.adam.m)
        ck.add("optim.v", self.adam.v)
        ck.add("occupancy.bits",
               self.grid.bits.astype(np.float32).ravel())
        canon = getattr(self.grid, "_canon_bits", None)
        if canon is None:
            canon = np.ones_like(self.grid.bits)
        ck.add("occupancy.canon", canon.astype(np.float32).ravel())
        meta = {
            "iteration": self.iteration,
            "adam_t": self.adam.t,
            "rng": _rng_state_to_meta(self.rng),
            "field_config": self.model.config.to_dict(),
            "train_config": self.config.to_dict(),
            "occupancy_resolution": self.grid.resolution,
        }
        if extra_meta:
            meta.update(extra_meta)
        fields.save_checkpoint(path, ck, meta)

    def restore(self, path):
        store, meta = fields.load_checkpoint(path)
        expect = fields.FieldConfig.from_dict(meta["field_config"])
        if expect.to_dict() != self.model.config.to_dict():
            raise UsageError("checkpoint field config does not match")
        for seg in self.model.store.segments:
            self.model.store.view(seg.name)[:] = store.view(seg.name)
        self.model.store._leaf = None
        self.adam.m = store.view("optim.m").copy()
        self.adam.v = store.view("optim.v").copy()
        self.adam.t = meta["adam_t"]
        res = meta["occupancy_resolution"]
        self.grid.bits = (store.view("occupancy.bits")
                          .reshape((res,) * 3) > 0.5)
        self.grid._canon_bits = (store.view("occupancy.canon")
                                 .reshape((res,) * 3) > 0.5)
        self.rng = _rng_from_meta(meta["rng"])
        self.iteration = meta["iteration"]

    # --- main loop ---------------------------------------------------------

    def fit(self):
        cfg = self.config
        if self.out_dir:
            os.makedirs(self.out_dir, exist_ok=True)
        t0 = time.perf_counter()
        window_t0, window_it = t0, self.iteration
        while self.iteration < cfg.iterations:
            if self.iteration % self.grid.update_period == 0:
                self.update_occupancy()
            frames, pix = self.sample_pixels()
            breakdown = self.train_step(frames, pix)
            self.iteration += 1

            if cfg.log_every and self.iteration % cfg.log_every == 0:
                now = time.perf_counter()
                its = (self.iteration - window_it) / max(now - window_t0,
                                                         1e-9)
                window_t0, window_it = now, self.iteration
                self._its_per_sec = its
                self._log(breakdown, its)
            if cfg.eval_every and self.iteration % cfg.eval_every == 0:
                self._eval_snapshot()
            if cfg.checkpoint_every and self.out_dir \
                    and self.iteration % cfg.checkpoint_every == 0:
                self.save_checkpoint(os.path.join(
                    self.out_dir, f"iter_{self.iteration:06d}.ckpt"))

        elapsed = time.perf_counter() - t0
        summary = {
            "iterations": self.iteration,
            "elapsed_sec": elapsed,
            "its_per_sec": self.iteration / elapsed if elapsed > 0 else 0.0,
        }
        if self.out_dir:
            # timings live in the log only; checkpoints stay bit-reproducible
            self.save_checkpoint(os.path.join(self.out_dir, "final.ckpt"))
            with open(os.path.join(self.out_dir, "train_log.txt"), "w") as fh:
                fh.write("\n".join(self.log_lines) + "\n")
        return summary

    def _log(self, breakdown, its):
        terms = " ".join(f"{k}={v:.6g}" for k, v in breakdown.items())
        line = f"it={self.iteration} {terms} its_per_sec={its:.3g}"
        self.log_lines.append(line)

    def _eval_snapshot(self):
        ds = self.dataset
        if not ds.holdout:
            return
        i = ds.holdout[0]
        pose = ds.pose(i)
        img, _ = renderer.render_image(
            self.model, ds.cameras[i], pose=pose,
            skel=self.skeleton() if pose is not None else None,
            grid=self.grid, background=ds.scene.background)
        val = evalmesh.psnr(img, ds.images[i])
        self.log_lines.append(f"it={self.iteration} eval_psnr={val:.4f}")


def fit(config, dataset, field_config=None, out_dir=None):
    """Train from scratch; returns (trainer, summary)."""
    tr = Trainer(config, dataset, field_config=field_config, out_dir=out_dir)
    summary = tr.fit()
    return tr, summary


def load_model(path):
    """Rebuild a CanonicalModel from a training checkpoint."""
    store, meta = fields.load_checkpoint(path)
    cfg = fields.FieldConfig.from_dict(meta["field_config"])
    model = fields.CanonicalModel(cfg, dtype=store.dtype, seed=0)
    for seg in model.store.segments:
        model.store.view(seg.name)[:] = store.view(seg.name)
    model.store._leaf = None
    return model, meta
