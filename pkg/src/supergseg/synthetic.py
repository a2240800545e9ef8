"""Synthetic desk-scale scenes with exact ground truth.

Objects are adjacent axis-aligned slabs of anchors, each split into vertical
part bands, so neighbouring objects share a full contact plane: clustering on
coordinates alone has to straddle instance boundaries there, while feature
clustering does not. Per-view ground truth (part / instance / semantic maps,
RGB targets, and the mask stacks that stand in for an external segmenter) is
derived from the frozen geometry by dominant blending weight, so masks are
exact projections of the scene the renderer actually sees.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .codec import f32_clean
from .errors import GenerationError
from .masks import INSTANCE_MAGIC, PATCH_MAGIC, write_id_map, write_mask_set
from .mlp import TinyMLP
from .rasterizer import (FeatureImage, compute_blend_state, render_channels,
                         write_feature_image)
from .scene import Scene, SceneConfig, look_at_camera, save_scene

COVER_THRESHOLD = 0.5   # blended weight below this leaves a pixel background


@dataclass
class SynthSpec:
    objects: int = 3
    parts_per_object: int = 2
    anchors_per_object: int = 250
    image_size: int = 64
    train_views: int = 8
    heldout_views: int = 4
    k_spawn: int = 5
    lang_dim: int = 16
    seed: int = 0
    # slab geometry, world units
    # toast-rack layout: each object owns every objects-th slat in a row of
    # thin slats, so clusters built from coordinates alone must straddle
    # object boundaries while features can still separate them
    slats_per_object: int = 3
    slab_width: float = 0.16
    slab_depth: float = 0.9
    slab_height: float = 1.3
    gap: float = 0.02
    part_seam: float = 0.08     # anchor-free margin around part boundaries,
                                # fraction of slab height
    footprint_px: float = 1.6   # target on-screen Gaussian sigma, pixels


@dataclass
class SceneBundle:
    """Everything one training run consumes, in memory."""

    spec: SynthSpec
    scene: Scene
    labels: list[str]
    vocab: dict[str, np.ndarray]
    palette: np.ndarray            # (n_parts, 3)
    anchor_instance: np.ndarray    # (n_anchors,)
    anchor_part: np.ndarray        # (n_anchors,)
    masks: list[np.ndarray]        # per view: (M, H, W) bool
    mask_labels: list[np.ndarray]  # per view: label index per mask, -1 for parts
    gt_part: list[np.ndarray]      # per view: (H, W) int32
    gt_instance: list[np.ndarray]
    gt_semantic: list[np.ndarray]
    gt_rgb: list[np.ndarray]       # per view: (H, W, 3)

    @property
    def train_view_ids(self) -> list[int]:
        return [i for i, c in enumerate(self.scene.cameras) if c.tag == "train"]

    @property
    def heldout_view_ids(self) -> list[int]:
        return [i for i, c in enumerate(self.scene.cameras) if c.tag == "heldout"]


def _part_palette(n_parts: int) -> np.ndarray:
    cols = [colorsys.hsv_to_rgb(i / n_parts, 0.75, 0.55 + 0.4 * (i % 2)) for i in range(n_parts)]
    return np.array(cols)


def _orthogonal_vocabulary(labels: list[str], dim: int, rng: np.random.Generator):
    if len(labels) > dim:
        raise GenerationError(
            f"{len(labels)} labels cannot be mutually orthogonal in {dim} dims")
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    vecs = q[:, : len(labels)].T
    return {lab: f32_clean(v / np.linalg.norm(v)) for lab, v in zip(labels, vecs)}


def _build_decoders(cfg: SceneConfig, rng: np.random.Generator,
                    sigma_world: float) -> dict[str, TinyMLP]:
    k = cfg.k_spawn
    nets: dict[str, TinyMLP] = {}
    nets["alpha"] = TinyMLP([cfg.geom_dim, cfg.hidden_dim, k], rng=rng, last_bias=3.0)
    nets["scale"] = TinyMLP([cfg.geom_dim, cfg.hidden_dim, 3 * k], rng=rng,
                            last_bias=float(np.log(sigma_world)))
    quat_bias = np.tile([1.0, 0.0, 0.0, 0.0], k)
    nets["rot"] = TinyMLP([cfg.geom_dim, cfg.hidden_dim, 4 * k], rng=rng, last_bias=quat_bias)
    nets["color"] = TinyMLP([cfg.geom_dim, cfg.hidden_dim, 3 * k], rng=rng)
    nets["inst"] = TinyMLP([cfg.seg_dim + 3, cfg.hidden_dim, cfg.feat_dim * k], rng=rng)
    nets["hier"] = TinyMLP([cfg.seg_dim + 3, cfg.hidden_dim, cfg.feat_dim * k], rng=rng)
    # Geometry heads stay frozen; squash their random spread so opacities sit
    # near the bias and scales/rotations stay close to round.
    for head, squash in (("alpha", 0.3), ("scale", 0.05), ("rot", 0.05)):
        for w in nets[head].weights:
            w *= squash
    return nets


def generate_synthetic_scene(spec: SynthSpec) -> SceneBundle:
    """Build a deterministic scene plus all per-view ground truth."""
    if spec.parts_per_object < 2:
        raise GenerationError("objects need at least 2 parts")
    n_parts = spec.objects * spec.parts_per_object
    if n_parts > spec.image_size * spec.image_size:
        raise GenerationError(
            f"{n_parts} parts cannot be resolved by {spec.image_size}x{spec.image_size} views")
    if spec.anchors_per_object < spec.parts_per_object:
        raise GenerationError("fewer anchors than parts per object")

    rng = np.random.default_rng(spec.seed)
    cfg = SceneConfig(k_spawn=spec.k_spawn, lang_dim=spec.lang_dim)

    # A row of thin slats along x, centered on the origin; slat i belongs to
    # object i mod objects, so neighbouring slats never share an object.
    # Anchors live on the observed surfaces (top, front, back, outer ends),
    # the way anchor clouds grown from observed points do; occluded faces
    # carry none.
    n_slats = spec.objects * spec.slats_per_object
    pitch = spec.slab_width + spec.gap
    x_start = -0.5 * pitch * (n_slats - 1)
    positions = []
    inst_of_anchor = []
    part_of_anchor = []
    band = spec.slab_height / spec.parts_per_object
    hw, hd, hh = spec.slab_width / 2, spec.slab_depth / 2, spec.slab_height / 2
    per_slat = int(np.ceil(spec.anchors_per_object / spec.slats_per_object))
    for slat in range(n_slats):
        obj = slat % spec.objects
        cx = x_start + slat * pitch
        n_a = per_slat
        faces = [("top", 2, hh), ("front", 1, -hd), ("back", 1, hd)]
        if slat == 0:
            faces.append(("end", 0, -hw))
        if slat == n_slats - 1:
            faces.append(("end", 0, hw))
        areas = np.array([spec.slab_width * spec.slab_depth if axis == 2 else
                          spec.slab_width * spec.slab_height if axis == 1 else
                          spec.slab_depth * spec.slab_height
                          for _, axis, _ in faces])
        face_pick = rng.choice(len(faces), size=n_a, p=areas / areas.sum())
        pts = rng.uniform(low=[-hw, -hd, -hh], high=[hw, hd, hh], size=(n_a, 3))
        for f, (_, axis, value) in enumerate(faces):
            rows = face_pick == f
            pts[rows, axis] = value
        pts += 0.1 * spec.slab_width * rng.standard_normal((n_a, 3))
        pts[:, 0] = np.clip(pts[:, 0], -hw, hw)
        pts[:, 2] = np.clip(pts[:, 2], -hh, hh)
        pts[:, 0] += cx
        # push anchors off the part boundaries so parts have a visible seam
        seam = spec.part_seam * spec.slab_height
        for b in range(1, spec.parts_per_object):
            zb = -hh + b * band
            near = np.abs(pts[:, 2] - zb) < seam
            side = np.where(pts[near, 2] >= zb, 1.0, -1.0)
            pts[near, 2] = zb + side * seam
        pts[:, 2] = np.clip(pts[:, 2], -hh, hh)
        part_band = np.clip(((pts[:, 2] + hh) // band).astype(int),
                            0, spec.parts_per_object - 1)
        # guarantee every band is populated
        for b in range(spec.parts_per_object):
            if not np.any(part_band == b):
                part_band[b] = b
                pts[b, 2] = -hh + (b + 0.5) * band
        positions.append(pts)
        inst_of_anchor.append(np.full(n_a, obj))
        part_of_anchor.append(obj * spec.parts_per_object + part_band)
    x = np.concatenate(positions)
    anchor_instance = np.concatenate(inst_of_anchor)
    anchor_part = np.concatenate(part_of_anchor)
    n = x.shape[0]

    # Per-part structure in the frozen geometry feature makes colors learnable
    # and gives the geometry-difference net something to latch onto.
    part_basis = rng.standard_normal((n_parts, cfg.geom_dim))
    f_g = 0.8 * part_basis[anchor_part] + 0.3 * rng.standard_normal((n, cfg.geom_dim))
    f_s = 0.1 * rng.standard_normal((n, cfg.seg_dim))
    l = np.full(n, 0.25 * spec.slab_width)
    offsets = 0.4 * rng.standard_normal((n, spec.k_spawn, 3))

    scene_radius = float(np.linalg.norm(x, axis=1).max()) + 0.3 * spec.slab_width
    cam_dist = 5.0 * scene_radius
    w_img = h_img = spec.image_size
    focal = 0.75 * w_img * cam_dist / (2.0 * scene_radius)
    sigma_world = spec.footprint_px * cam_dist / focal

    decoders = _build_decoders(cfg, rng, sigma_world)

    n_views = spec.train_views + spec.heldout_views
    cameras = []
    for i in range(n_views):
        az = 2.0 * np.pi * i / n_views + 0.3
        elev = np.deg2rad(18.0 + 14.0 * (i % 3))
        eye = cam_dist * np.array([np.cos(az) * np.cos(elev),
                                   np.sin(az) * np.cos(elev),
                                   np.sin(elev)])
        tag = "train" if i < spec.train_views else "heldout"
        cameras.append(look_at_camera(eye, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0],
                                      focal, focal, w_img, h_img, tag=tag))

    scene = Scene(cfg,
                  x=f32_clean(x), f_g=f32_clean(f_g), f_s=f32_clean(f_s),
                  l=f32_clean(l), offsets=f32_clean(offsets),
                  decoders=decoders, cameras=cameras)
    for nets in decoders.values():
        nets.weights = [f32_clean(w) for w in nets.weights]
        nets.biases = [f32_clean(b) for b in nets.biases]

    labels = [f"object_{i}" for i in range(spec.objects)]
    vocab = _orthogonal_vocabulary(labels, spec.lang_dim, rng)
    palette = _part_palette(n_parts)

    # Ground truth by dominant blending weight over the frozen geometry.
    mu, cov, alpha = scene.spawn_geometry()
    part_of_gauss = anchor_part[np.repeat(np.arange(n), spec.k_spawn)]
    gauss_colors = palette[part_of_gauss]

    masks, mask_labels = [], []
    gt_part, gt_instance, gt_semantic, gt_rgb = [], [], [], []
    for cam in cameras:
        state = compute_blend_state(mu, cov, alpha, cam)
        wh = w_img * h_img
        per_part = np.zeros((wh, n_parts))
        np.add.at(per_part, (state.pixel, part_of_gauss[state.gauss]), state.weight)
        totals = per_part.sum(axis=1)
        owner_part = np.where(totals >= COVER_THRESHOLD,
                              per_part.argmax(axis=1), -1).astype(np.int32)
        owner_inst = np.where(owner_part >= 0, owner_part // spec.parts_per_object, -1)
        part_map = owner_part.reshape(h_img, w_img)
        inst_map = owner_inst.reshape(h_img, w_img).astype(np.int32)
        sem_map = inst_map.copy()  # label index == object index

        view_masks, view_mask_labels = [], []
        for obj in range(spec.objects):
            m = inst_map == obj
            if m.any():
                view_masks.append(m)
                view_mask_labels.append(obj)
        for part in range(n_parts):
            m = part_map == part
            if m.any():
                view_masks.append(m)
                view_mask_labels.append(-1)
        masks.append(np.stack(view_masks))
        mask_labels.append(np.array(view_mask_labels, dtype=np.int32))
        gt_part.append(part_map)
        gt_instance.append(inst_map)
        gt_semantic.append(sem_map)
        gt_rgb.append(render_channels(state, gauss_colors))

    return SceneBundle(spec=spec, scene=scene, labels=labels, vocab=vocab,
                       palette=palette, anchor_instance=anchor_instance,
                       anchor_part=anchor_part, masks=masks, mask_labels=mask_labels,
                       gt_part=gt_part, gt_instance=gt_instance,
                       gt_semantic=gt_semantic, gt_rgb=gt_rgb)


def write_bundle(bundle: SceneBundle, out_dir) -> None:
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(exist_ok=True)
    save_scene(bundle.scene, out / "scene.json")
    vocab_doc = {"dim": bundle.spec.lang_dim,
                 "entries": {k: v.tolist() for k, v in bundle.vocab.items()}}
    (out / "vocab.json").write_text(json.dumps(vocab_doc))
    meta = {
        "spec": asdict(bundle.spec),
        "labels": bundle.labels,
        "palette": bundle.palette.tolist(),
        "anchor_instance": bundle.anchor_instance.tolist(),
        "anchor_part": bundle.anchor_part.tolist(),
        "mask_labels": [ml.tolist() for ml in bundle.mask_labels],
        "train_views": bundle.train_view_ids,
        "heldout_views": bundle.heldout_view_ids,
    }
    (out / "meta.json").write_text(json.dumps(meta))
    for i, view_masks in enumerate(bundle.masks):
        write_mask_set(view_masks, out / "masks" / f"view_{i:03d}.sgmk")
        write_id_map(bundle.gt_part[i], out / "gt" / f"part_{i:03d}.sgpm", PATCH_MAGIC)
        write_id_map(bundle.gt_instance[i], out / "gt" / f"instance_{i:03d}.sgim", INSTANCE_MAGIC)
        write_id_map(bundle.gt_semantic[i], out / "gt" / f"semantic_{i:03d}.sgim", INSTANCE_MAGIC)
        img = FeatureImage.from_array(bundle.gt_rgb[i])
        write_feature_image(img, out / "gt" / f"rgb_{i:03d}.sgfi")
