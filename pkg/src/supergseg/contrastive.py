"""Stage-1 training: photometric, instance-contrastive, and level-ordered losses.

Feature maps are rendered once per step; losses are evaluated on seeded pixel
samples and their gradients are pushed back through the blending weights into
anchor segmentation features and the decoder heads. Region mean features are
treated as constants in all gradients, and the level-ordered loss clamps
against detached thresholds; both can be frozen explicitly so that finite
differences probe exactly the function the analytic gradient describes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .masks import PatchDecomposition
from .optim import Adam, lr_schedule, namespaced
from .rasterizer import (BlendState, blend_gradient, compute_blend_state,
                         render_channels)
from .scene import Camera, Scene

log = logging.getLogger(__name__)

NORM_EPS = 1e-12


@dataclass
class Stage1Config:
    tau: float = 0.1
    lambda_decay: float = 0.5
    lambda_g: float = 1.0
    lambda_h: float = 1.0
    pixels_per_mask: int = 256
    iterations: int = 2000
    lr_initial: float = 0.01
    lr_final: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("temperature must be positive")
        if not 0 < self.lambda_decay <= 1:
            raise ConfigError("level decay must lie in (0, 1]")
        if self.pixels_per_mask < 2:
            raise ConfigError("need at least 2 sampled pixels per mask")


def normalize_rows(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norms, NORM_EPS), norms


def normalize_rows_backward(d_unit: np.ndarray, unit: np.ndarray,
                            norms: np.ndarray) -> np.ndarray:
    inner = np.sum(d_unit * unit, axis=-1, keepdims=True)
    return (d_unit - unit * inner) / np.maximum(norms, NORM_EPS)


def sample_region_pixels(region_map: np.ndarray, budget: int,
                         rng: np.random.Generator) -> dict[int, np.ndarray]:
    """Flat pixel indices per region id >= 0, at most ``budget`` each."""
    flat = region_map.reshape(-1)
    out: dict[int, np.ndarray] = {}
    for rid in np.unique(flat):
        if rid < 0:
            continue
        idx = np.flatnonzero(flat == rid)
        if idx.size > budget:
            idx = rng.choice(idx, size=budget, replace=False)
        out[int(rid)] = np.sort(idx)
    return out


def _gather_normalized(feat_map: np.ndarray, sample: dict[int, np.ndarray]):
    """Stack sampled features region by region; returns rows plus caches."""
    h, w, d = feat_map.shape
    flat = feat_map.reshape(h * w, d)
    ids = sorted(sample)
    rows, region_of_row, pixel_of_row = [], [], []
    for k, rid in enumerate(ids):
        px = sample[rid]
        rows.append(flat[px])
        region_of_row.append(np.full(px.size, k))
        pixel_of_row.append(px)
    raw = np.concatenate(rows) if rows else np.empty((0, d))
    region_of_row = np.concatenate(region_of_row) if rows else np.empty(0, dtype=int)
    pixel_of_row = np.concatenate(pixel_of_row) if rows else np.empty(0, dtype=int)
    unit, norms = normalize_rows(raw)
    return ids, unit, norms, region_of_row, pixel_of_row


def region_mean_features(unit_rows: np.ndarray, region_of_row: np.ndarray,
                         n_regions: int) -> np.ndarray:
    """Per-region mean of unit rows, renormalized. Held constant in gradients."""
    sums = np.zeros((n_regions, unit_rows.shape[1]))
    np.add.at(sums, region_of_row, unit_rows)
    counts = np.bincount(region_of_row, minlength=n_regions)[:, None]
    means = sums / np.maximum(counts, 1)
    means, _ = normalize_rows(means)
    return means


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def instance_loss(g_map: np.ndarray, instance_map: np.ndarray, cfg: Stage1Config,
                  rng: np.random.Generator | None = None,
                  sample: dict[int, np.ndarray] | None = None,
                  means: np.ndarray | None = None):
    """Softmax contrast of sampled pixel features against instance means.

    Per sampled pixel of instance p the loss is the negative log-probability
    of p under a softmax over all instance means (scaled by 1/tau); the total
    averages over instances, then over that instance's sampled pixels.
    Returns (loss, d_loss/d_map, aux); single-instance views are skipped.
    """
    if g_map.shape[:2] != instance_map.shape:
        raise ContractError("feature map and instance map disagree on size")
    if sample is None:
        rng = rng or np.random.default_rng(cfg.seed)
        sample = sample_region_pixels(instance_map, cfg.pixels_per_mask, rng)
    aux = {"sample": sample, "means": means, "skipped": False}
    grad = np.zeros_like(g_map)
    if len(sample) < 2:
        log.info("instance loss skipped: fewer than two instances in view")
        aux["skipped"] = True
        return 0.0, grad, aux

    ids, unit, norms, region_of_row, pixel_of_row = _gather_normalized(g_map, sample)
    n_regions = len(ids)
    if means is None:
        means = region_mean_features(unit, region_of_row, n_regions)
        aux["means"] = means

    logits = unit @ means.T / cfg.tau
    probs = _softmax(logits)
    t_counts = np.bincount(region_of_row, minlength=n_regions)
    row_w = 1.0 / (n_regions * t_counts[region_of_row])
    picked = probs[np.arange(len(region_of_row)), region_of_row]
    loss = float(np.sum(row_w * -np.log(np.maximum(picked, 1e-300))))

    d_logits = probs.copy()
    d_logits[np.arange(len(region_of_row)), region_of_row] -= 1.0
    d_logits *= row_w[:, None]
    d_unit = d_logits @ means / cfg.tau
    d_raw = normalize_rows_backward(d_unit, unit, norms)
    flat_grad = grad.reshape(-1, g_map.shape[2])
    np.add.at(flat_grad, pixel_of_row, d_raw)
    return loss, grad, aux


def hierarchical_loss(h_map: np.ndarray, decomp: PatchDecomposition, cfg: Stage1Config,
                      rng: np.random.Generator | None = None,
                      sample: dict[int, np.ndarray] | None = None,
                      means: np.ndarray | None = None,
                      thresholds: dict[int, np.ndarray] | None = None):
    """Level-ordered contrast of patch pixels against patch means.

    For each patch p and level d, per-pixel losses against the level's patches
    are clamped from below by the worst per-pixel loss of the previous level
    (a detached threshold), scaled by decay^(d-1)/|level|, and summed. Pass
    ``thresholds`` (from aux) to freeze the clamp for finite differencing.
    """
    if h_map.shape[:2] != decomp.patch_map.shape:
        raise ContractError("feature map and patch map disagree on size")
    if sample is None:
        rng = rng or np.random.default_rng(cfg.seed)
        sample = sample_region_pixels(decomp.patch_map, cfg.pixels_per_mask, rng)
    grad = np.zeros_like(h_map)
    aux = {"sample": sample, "means": means, "thresholds": {}}
    if not sample:
        return 0.0, grad, aux

    ids, unit, norms, region_of_row, pixel_of_row = _gather_normalized(h_map, sample)
    n_regions = len(ids)
    col_of_patch = {pid: k for k, pid in enumerate(ids)}
    if means is None:
        means = region_mean_features(unit, region_of_row, n_regions)
        aux["means"] = means

    logits = unit @ means.T / cfg.tau                      # (T, P)
    probs = _softmax(logits)
    lse = logits.max(axis=1) + np.log(np.exp(
        logits - logits.max(axis=1, keepdims=True)).sum(axis=1))
    loss_mat = lse[:, None] - logits                       # -log softmax per column

    total = 0.0
    coeff = np.zeros_like(loss_mat)                        # weight on each (t, r) term
    for k, pid in enumerate(ids):
        rows = np.flatnonzero(region_of_row == k)
        if rows.size == 0:
            continue
        lm = loss_mat[rows]
        frozen = thresholds.get(pid) if thresholds is not None else None
        thr_record = np.empty((rows.size, len(decomp.levels[pid])))
        running = np.full(rows.size, -np.inf)
        for d, level in enumerate(decomp.levels[pid]):
            cols = np.array([col_of_patch[r] for r in level if r in col_of_patch])
            if cols.size == 0:
                thr_record[:, d] = running
                continue
            thr_in = frozen[:, d] if frozen is not None else running
            thr_record[:, d] = thr_in
            lvl = lm[:, cols]
            clamped = np.maximum(lvl, thr_in[:, None])
            w = cfg.lambda_decay**d / level.size
            total += w * float(clamped.sum())
            passed = lvl >= thr_in[:, None]
            for j, c in enumerate(cols):
                coeff[rows, c] += w * passed[:, j]
            running = lvl.max(axis=1)   # clamp for the next level only
        aux["thresholds"][pid] = thr_record

    row_tot = coeff.sum(axis=1, keepdims=True)
    d_logits = (row_tot * probs - coeff)
    d_unit = d_logits @ means / cfg.tau
    d_raw = normalize_rows_backward(d_unit, unit, norms)
    flat_grad = grad.reshape(-1, h_map.shape[2])
    np.add.at(flat_grad, pixel_of_row, d_raw)
    return float(total), grad, aux


def rgb_l1(rendered: np.ndarray, target: np.ndarray):
    """Mean absolute error and its subgradient (sign(0) = 0)."""
    if rendered.shape != target.shape:
        raise ContractError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    loss = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size
    return loss, grad


@dataclass
class ViewData:
    camera: Camera
    decomposition: PatchDecomposition
    rgb: np.ndarray


class Stage1Trainer:
    """Optimizes colors, segmentation features, and decoder heads.

    Geometry is frozen, so each view's blending weights are computed once up
    front; a step renders the three channel stacks through the cached weights,
    evaluates the combined loss, and runs one Adam update.
    """

    def __init__(self, scene: Scene, views: list[ViewData], cfg: Stage1Config):
        if not views:
            raise ConfigError("stage-1 training needs at least one view")
        self.scene = scene
        self.views = views
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        mu, cov, alpha = scene.spawn_geometry()
        self.states: list[BlendState] = [
            compute_blend_state(mu, cov, alpha, v.camera) for v in views]
        self.params: dict[str, np.ndarray] = {"f_s": scene.f_s}
        for head in ("color", "inst", "hier"):
            self.params.update(namespaced(head, scene.decoders[head].params()))
        self.opt = Adam()
        self.history: list[dict] = []

    def _forward_values(self):
        """Per-Gaussian colors/instance/hier rows plus caches for backward."""
        sc = self.scene
        n, k, d = sc.n_anchors, sc.config.k_spawn, sc.config.feat_dim
        raw_c, cache_c = sc.decoders["color"].forward(sc.f_g)
        colors = 1.0 / (1.0 + np.exp(-raw_c))
        feat_in = sc.feature_inputs()
        raw_g, cache_g = sc.decoders["inst"].forward(feat_in)
        raw_h, cache_h = sc.decoders["hier"].forward(feat_in)
        values = {
            "color": colors.reshape(n * k, 3),
            "inst": raw_g.reshape(n * k, d),
            "hier": raw_h.reshape(n * k, d),
        }
        caches = {"color": (cache_c, colors), "inst": cache_g, "hier": cache_h}
        return values, caches

    def evaluate_view(self, view_idx: int, aux: dict | None = None,
                      want_grads: bool = True):
        """One view's loss (and parameter gradients).

        ``aux`` freezes pixel samples, region means, and clamp thresholds from
        a previous evaluation so repeated calls differentiate one function.
        """
        view = self.views[view_idx]
        state = self.states[view_idx]
        cfg = self.cfg
        values, caches = self._forward_values()
        stacked = np.concatenate([values["color"], values["inst"], values["hier"]], axis=1)
        img = render_channels(state, stacked)
        d = self.scene.config.feat_dim
        color_img, g_img, h_img = img[:, :, :3], img[:, :, 3:3 + d], img[:, :, 3 + d:]

        prev_g = (aux or {}).get("g", {})
        prev_h = (aux or {}).get("h", {})
        l_c, d_color = rgb_l1(color_img, view.rgb)
        l_g, d_g, aux_g = instance_loss(
            g_img, view.decomposition.instance_map, cfg, rng=self.rng,
            sample=prev_g.get("sample"), means=prev_g.get("means"))
        l_h, d_h, aux_h = hierarchical_loss(
            h_img, view.decomposition, cfg, rng=self.rng,
            sample=prev_h.get("sample"), means=prev_h.get("means"),
            thresholds=prev_h.get("thresholds"))
        losses = {"l_c": l_c, "l_g": l_g, "l_h": l_h,
                  "total": l_c + cfg.lambda_g * l_g + cfg.lambda_h * l_h}
        out_aux = {"g": aux_g, "h": aux_h}
        if not want_grads:
            return losses, None, out_aux

        d_img = np.concatenate(
            [d_color, cfg.lambda_g * d_g, cfg.lambda_h * d_h], axis=2)
        d_values = blend_gradient(state, d_img)
        sc = self.scene
        n, k = sc.n_anchors, sc.config.k_spawn
        grads: dict[str, np.ndarray] = {}

        cache_c, colors = caches["color"]
        d_raw_c = d_values[:, :3].reshape(n, k * 3) * (colors * (1.0 - colors))
        _, g_c = sc.decoders["color"].backward(d_raw_c, cache_c)
        grads.update(namespaced("color", g_c))

        d_fs = np.zeros_like(sc.f_s)
        for head, sl in (("inst", slice(3, 3 + d)), ("hier", slice(3 + d, 3 + 2 * d))):
            d_raw = d_values[:, sl].reshape(n, k * d)
            d_in, g_w = sc.decoders[head].backward(d_raw, caches[head])
            grads.update(namespaced(head, g_w))
            d_fs += d_in[:, : sc.config.seg_dim]
        grads["f_s"] = d_fs
        return losses, grads, out_aux

    def step(self, i: int) -> dict:
        view_idx = i % len(self.views)
        losses, grads, _ = self.evaluate_view(view_idx)
        bad = [k for k, v in losses.items() if not np.isfinite(v)]
        lr = lr_schedule(i, self.cfg.iterations, self.cfg.lr_initial, self.cfg.lr_final)
        if bad:
            log.warning("step %d aborted: non-finite loss terms %s", i, bad)
        else:
            self.opt.step(self.params, grads, lr)
        entry = {"step": i, "l_c": losses["l_c"], "l_g": losses["l_g"],
                 "l_h": losses["l_h"], "lr": lr}
        self.history.append(entry)
        return entry

    def run(self, log_path=None):
        fh = open(log_path, "w", encoding="utf-8") if log_path else None
        try:
            for i in range(self.cfg.iterations):
                entry = self.step(i)
                if fh:
                    fh.write(json.dumps(entry) + "\n")
        finally:
            if fh:
                fh.close()
        return self.history
