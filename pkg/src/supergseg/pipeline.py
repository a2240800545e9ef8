"""End-to-end orchestration: bundle loading, the three stages, evaluation.

The CLI binds these steps to files in a run directory; tests drive them in
memory. Blend states depend only on frozen geometry, so one per-view cache is
shared by training, rendering, and evaluation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import f32_clean
from .contrastive import Stage1Config, Stage1Trainer, ViewData
from .errors import ConfigError, ParseError
from .evaluation import ConfusionAccumulator, object_selection_eval
from .language import (EmbeddingVocabulary, LanguageField, LanguageViewTarget,
                       Stage3Config, semantic_map, text_query_3d, train_stage3)
from .masks import MaskSet, build_decomposition, read_mask_set
from .rasterizer import (BlendState, compute_blend_state, read_feature_image,
                         render_channels, selection_mask)
from .scene import Scene, load_scene
from .supergaussian import (ClusterConfig, Stage2Result, cluster_from_doc,
                            cluster_to_doc, group_instances_graph,
                            group_parts_graph, superg_features, train_stage2,
                            kmeans_baseline, members_from_hard, SuperGaussianSet,
                            AssociationMap)
from .synthetic import SceneBundle, SynthSpec, generate_synthetic_scene

log = logging.getLogger(__name__)

SCENE1_FILE = "scene_stage1.json"
CLUSTER_FILE = "cluster.json"
LANG_FILE = "language.json"


def load_bundle_dir(bundle_dir) -> SceneBundle:
    """Reassemble a generated bundle from its on-disk layout."""
    root = Path(bundle_dir)
    try:
        meta = json.loads((root / "meta.json").read_text())
    except FileNotFoundError:
        raise ConfigError(f"{root} does not contain meta.json; generate a scene first")
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed meta.json at byte offset {exc.pos}") from None
    scene = load_scene(root / "scene.json")
    vocab_doc = json.loads((root / "vocab.json").read_text())
    vocab = {k: np.asarray(v) for k, v in vocab_doc["entries"].items()}
    spec = SynthSpec(**meta["spec"])
    n_views = len(scene.cameras)
    masks, gt_part, gt_instance, gt_semantic, gt_rgb = [], [], [], [], []
    from .masks import INSTANCE_MAGIC, PATCH_MAGIC, read_id_map
    for i in range(n_views):
        masks.append(read_mask_set(root / "masks" / f"view_{i:03d}.sgmk", i).masks)
        gt_part.append(read_id_map(root / "gt" / f"part_{i:03d}.sgpm", PATCH_MAGIC))
        gt_instance.append(read_id_map(root / "gt" / f"instance_{i:03d}.sgim", INSTANCE_MAGIC))
        gt_semantic.append(read_id_map(root / "gt" / f"semantic_{i:03d}.sgim", INSTANCE_MAGIC))
        gt_rgb.append(read_feature_image(root / "gt" / f"rgb_{i:03d}.sgfi").data)
    return SceneBundle(
        spec=spec, scene=scene, labels=list(meta["labels"]), vocab=vocab,
        palette=np.asarray(meta["palette"]),
        anchor_instance=np.asarray(meta["anchor_instance"]),
        anchor_part=np.asarray(meta["anchor_part"]),
        masks=masks,
        mask_labels=[np.asarray(ml) for ml in meta["mask_labels"]],
        gt_part=gt_part, gt_instance=gt_instance, gt_semantic=gt_semantic,
        gt_rgb=gt_rgb)


class PipelineRun:
    """Holds one scene plus caches shared across stages."""

    def __init__(self, bundle: SceneBundle):
        self.bundle = bundle
        self.scene = bundle.scene
        self._decomps: dict[int, object] = {}
        self._states: dict[int, BlendState] = {}
        self._geometry = None

    # cached geometry and per-view blend states -------------------------
    def geometry(self):
        if self._geometry is None:
            self._geometry = self.scene.spawn_geometry()
        return self._geometry

    def reset_geometry(self):
        self._geometry = None
        self._states.clear()

    def state(self, view_id: int) -> BlendState:
        if view_id not in self._states:
            mu, cov, alpha = self.geometry()
            self._states[view_id] = compute_blend_state(
                mu, cov, alpha, self.scene.cameras[view_id])
        return self._states[view_id]

    def decomposition(self, view_id: int):
        if view_id not in self._decomps:
            self._decomps[view_id] = build_decomposition(
                MaskSet(view_id, self.bundle.masks[view_id]))
        return self._decomps[view_id]

    @property
    def anchor_of_gauss(self) -> np.ndarray:
        return np.repeat(np.arange(self.scene.n_anchors), self.scene.config.k_spawn)

    def anchors_dict(self) -> dict[str, np.ndarray]:
        return {"x": self.scene.x, "f_s": self.scene.f_s, "f_g": self.scene.f_g}

    # stages -------------------------------------------------------------
    def run_stage1(self, cfg: Stage1Config, log_path=None) -> Stage1Trainer:
        views = [ViewData(camera=self.scene.cameras[v],
                          decomposition=self.decomposition(v),
                          rgb=self.bundle.gt_rgb[v])
                 for v in self.bundle.train_view_ids]
        trainer = Stage1Trainer(self.scene, views, cfg)
        # share the trainer's states (same frozen geometry)
        for vid, st in zip(self.bundle.train_view_ids, trainer.states):
            self._states.setdefault(vid, st)
        trainer.run(log_path)
        return trainer

    def run_stage2(self, cfg: ClusterConfig):
        result = train_stage2(self.anchors_dict(), cfg)
        inst_labels, part_labels = self.group_result(result.supergs, result.hard, cfg)
        return result, inst_labels, part_labels

    def rendered_superg_features(self, values: np.ndarray, hard: np.ndarray,
                                 n_centers: int) -> np.ndarray:
        """Per-center feature read off the trained field as rendered.

        A plain mean over member Gaussians is dominated by rows the blending
        never disciplined (weak or occluded Gaussians keep their random
        initialization), so each center instead averages the normalized
        rendered feature over the pixels its members contribute to. Each
        contribution is weighted by the member's blending weight times the
        center's weight share at that pixel, which discounts seam pixels
        whose blends mix several regions.
        """
        assign = hard[self.anchor_of_gauss]
        acc = np.zeros((n_centers, values.shape[1]))
        for v in self.bundle.train_view_ids:
            st = self.state(v)
            n_pix = st.height * st.width
            img = render_channels(st, values).reshape(-1, values.shape[1])
            norms = np.linalg.norm(img, axis=1, keepdims=True)
            unit = img / np.maximum(norms, 1e-12)
            pair_center = assign[st.gauss]
            share = np.zeros((n_pix, n_centers))
            np.add.at(share, (st.pixel, pair_center), st.weight)
            totals = share.sum(axis=1, keepdims=True)
            share /= np.maximum(totals, 1e-12)
            w = st.weight * share[st.pixel, pair_center]
            np.add.at(acc, pair_center, w[:, None] * unit[st.pixel])
        out_norms = np.linalg.norm(acc, axis=1, keepdims=True)
        out = acc / np.maximum(out_norms, 1e-12)
        out[out_norms[:, 0] <= 1e-12] = 0.0
        return out

    def sg_feature_pair(self, supergs: SuperGaussianSet, hard: np.ndarray):
        g, h = self.scene.decode_features()
        return (self.rendered_superg_features(g, hard, supergs.count),
                self.rendered_superg_features(h, hard, supergs.count))

    def group_result(self, supergs: SuperGaussianSet, hard: np.ndarray,
                     cfg: ClusterConfig):
        inst_feats, hier_feats = self.sg_feature_pair(supergs, hard)
        # centers that never render confidently have no observable identity
        valid = (supergs.member_counts() > 0) & (np.linalg.norm(inst_feats, axis=1) > 0)
        inst_labels = group_instances_graph(supergs.x, inst_feats, cfg, valid=valid)
        part_labels = group_parts_graph(supergs.x, hier_feats, inst_labels, cfg)
        return inst_labels, part_labels

    def language_targets(self, view_id: int) -> LanguageViewTarget:
        """Per-pixel supervision: each derived instance's pixels carry the
        embedding of the label attached to its owning mask."""
        decomp = self.decomposition(view_id)
        mask_labels = self.bundle.mask_labels[view_id]
        vocab_mat = np.stack([self.bundle.vocab[l] for l in self.bundle.labels])
        h, w = decomp.instance_map.shape
        d = vocab_mat.shape[1]
        target = np.zeros((h, w, d))
        valid = np.zeros((h, w), dtype=bool)
        for inst_id, owner_mask in enumerate(decomp.instance_owner_mask):
            lab = int(mask_labels[owner_mask])
            sel = decomp.instance_map == inst_id
            if lab < 0:
                log.warning("view %d: instance %d has no labeled mask; excluded",
                            view_id, inst_id)
                continue
            target[sel] = vocab_mat[lab]
            valid |= sel
        return LanguageViewTarget(state=self.state(view_id), target=target, valid=valid)

    def run_stage3(self, supergs: SuperGaussianSet, hard: np.ndarray,
                   cfg: Stage3Config) -> tuple[LanguageField, list[dict]]:
        views = [self.language_targets(v) for v in self.bundle.train_view_ids]
        field_ = LanguageField(supergs.count, self.scene.config.lang_dim, cfg)
        hist = train_stage3(field_, supergs.x, hard, self.anchor_of_gauss,
                            views, cfg)
        return field_, hist

    # evaluation ----------------------------------------------------------
    def vocabulary(self) -> EmbeddingVocabulary:
        return EmbeddingVocabulary(
            {l: self.bundle.vocab[l] for l in self.bundle.labels},
            self.scene.config.lang_dim)

    def semantic_prediction(self, field_: LanguageField, supergs: SuperGaussianSet,
                            hard: np.ndarray, view_id: int) -> np.ndarray:
        decoded = field_.decoded(supergs.x)
        values = decoded[hard[self.anchor_of_gauss]]
        img = render_channels(self.state(view_id), values)
        return semantic_map(self.vocabulary(), img)

    def semantic_eval(self, field_: LanguageField, supergs: SuperGaussianSet,
                      hard: np.ndarray, view_ids) -> dict:
        acc = ConfusionAccumulator(len(self.bundle.labels))
        for v in view_ids:
            pred = self.semantic_prediction(field_, supergs, hard, v)
            acc.add(pred, self.bundle.gt_semantic[v])
        return acc.summary()

    def selection_eval(self, field_: LanguageField, supergs: SuperGaussianSet,
                       hard: np.ndarray, inst_labels: np.ndarray, view_ids) -> dict:
        decoded = field_.decoded(supergs.x)
        query_masks, gt_masks = {}, {}
        anchor_of_gauss = self.anchor_of_gauss
        for li, label in enumerate(self.bundle.labels):
            _, _, winner = text_query_3d(self.bundle.vocab[label], decoded, inst_labels)
            win_centers = np.flatnonzero(inst_labels == winner)
            anchor_sel = np.isin(hard, win_centers)
            gauss_sel = anchor_sel[anchor_of_gauss]
            for v in view_ids:
                q = f"{label}@view{v}"
                query_masks[q] = selection_mask(self.state(v), gauss_sel)
                gt_masks[q] = self.bundle.gt_instance[v] == li
        return object_selection_eval(query_masks, gt_masks)

    def full_report(self, field_, supergs, hard, inst_labels) -> dict:
        held = self.bundle.heldout_view_ids
        return {
            "semantic": self.semantic_eval(field_, supergs, hard, held),
            "selection": self.selection_eval(field_, supergs, hard, inst_labels, held),
            "views": held,
            "labels": self.bundle.labels,
        }


def kmeans_stage2(run: PipelineRun, cfg: ClusterConfig) -> Stage2Result:
    """Drop-in replacement for learned clustering: hard labels from Lloyd's."""
    anchors = run.anchors_dict()
    hard, _ = kmeans_baseline(anchors, cfg.S, cfg.seed)
    members = members_from_hard(hard, cfg.S)
    x = np.stack([anchors["x"][m].mean(axis=0) if m.size else np.zeros(3)
                  for m in members])
    f_s = np.stack([anchors["f_s"][m].mean(axis=0) if m.size else
                    np.zeros(anchors["f_s"].shape[1]) for m in members])
    f_g = np.stack([anchors["f_g"][m].mean(axis=0) if m.size else
                    np.zeros(anchors["f_g"].shape[1]) for m in members])
    orphan = np.array([m.size == 0 for m in members])
    soft = np.ones((hard.size, 1))
    assoc = AssociationMap(neighbors=hard[:, None].astype(np.int64), soft=soft,
                           logits=np.zeros_like(soft))
    sg = SuperGaussianSet(x=x, f_s=f_s, f_g=f_g,
                          f_l=np.zeros((cfg.S, 32)), members=members, orphan=orphan)
    return Stage2Result(supergs=sg, assoc=assoc, hard=hard, nets=None, history=[])


ABLATION_VARIANTS = ("full", "coords_only_clustering", "no_instance_feat",
                     "no_hier_feat", "kmeans")


def run_ablation_variants(bundle: SceneBundle, variants, stage1_cfg=None,
                          cluster_cfg=None, stage3_cfg=None) -> dict:
    """Train the requested variants on copies of the same bundle and report
    held-out semantic metrics per variant, plus s/k sweeps when named like
    "s=500" or "k_nn=5"."""
    stage1_cfg = stage1_cfg or Stage1Config()
    cluster_cfg = cluster_cfg or ClusterConfig()
    stage3_cfg = stage3_cfg or Stage3Config()
    report = {}
    base_run: dict[str, PipelineRun] = {}

    def stage1_for(key: str, s1: Stage1Config) -> PipelineRun:
        if key not in base_run:
            fresh = generate_synthetic_scene(bundle.spec)
            run = PipelineRun(fresh)
            run.run_stage1(s1)
            run.reset_geometry()
            base_run[key] = run
        return base_run[key]

    for variant in variants:
        s1 = Stage1Config(**{**stage1_cfg.__dict__})
        c2 = ClusterConfig(**{**cluster_cfg.__dict__})
        stage1_key = "default"
        if variant == "no_instance_feat":
            s1.lambda_g = 0.0
            stage1_key = "no_inst"
        elif variant == "no_hier_feat":
            s1.lambda_h = 0.0
            stage1_key = "no_hier"
        elif variant == "coords_only_clustering":
            c2.use_feature_inputs = False
            c2.recon_attributes = ("x",)
        elif variant.startswith("s="):
            c2.S = int(variant.split("=")[1])
        elif variant.startswith("k_nn="):
            c2.k_nn = int(variant.split("=")[1])
        elif variant not in ("full", "kmeans"):
            raise ConfigError(f"unknown ablation variant {variant!r}")

        run = stage1_for(stage1_key, s1)
        if variant == "kmeans":
            result = kmeans_stage2(run, c2)
            inst_labels, _ = run.group_result(result.supergs, result.hard, c2)
        else:
            result, inst_labels, _ = run.run_stage2(c2)
        field_, _ = run.run_stage3(result.supergs, result.hard, stage3_cfg)
        sem = run.semantic_eval(field_, result.supergs, result.hard,
                                run.bundle.heldout_view_ids)
        report[variant] = {"miou": sem["miou"], "macc": sem["macc"]}
    return report
