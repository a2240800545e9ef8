"""Stage-2 clustering: learned soft association of anchors to Super-Gaussians.

Cluster centers start from farthest point sampling. Each anchor looks at its
k nearest centers; four small nets score the position/segmentation/geometry
differences into logits, softmaxed per anchor. Centers are re-estimated as
association-weighted anchor means each iteration, and the training loss
(attribute reconstruction + spatial compactness) differentiates through both
the softmax and that weighted re-estimation, which is what lets compactness
shape the assignment at all. Anchor attributes stay frozen throughout.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .codec import decode_f32, encode_f32
from .errors import ConfigError, ContractError, DivergenceError, ParseError
from .mlp import TinyMLP
from .optim import Adam, lr_schedule, namespaced

log = logging.getLogger(__name__)

CLUSTER_SCHEMA = "supergseg-cluster/1"
ATTRIBUTES = ("x", "f_s", "f_g")
NORM_EPS = 1e-12


@dataclass
class ClusterConfig:
    S: int = 1000
    k_nn: int = 3
    iterations: int = 1000
    knn_refresh_period: int = 100
    w_recon: float = 1.0
    w_compact: float = 1.0
    tau_ins: float = 0.8
    tau_hier: float = 0.9
    lr_initial: float = 0.01
    lr_final: float = 0.001
    seed: int = 0
    use_feature_inputs: bool = True
    recon_attributes: tuple[str, ...] = ATTRIBUTES

    def __post_init__(self):
        if self.S < self.k_nn or self.k_nn < 1:
            raise ConfigError("need S >= k_nn >= 1")
        for name in ("tau_ins", "tau_hier"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigError(f"{name} must lie in (0, 1]")


@dataclass
class AssociationMap:
    neighbors: np.ndarray   # (n, k) center ids
    soft: np.ndarray        # (n, k) probabilities, rows sum to 1
    logits: np.ndarray      # (n, k)

    def validate(self):
        if np.any(self.soft < 0):
            raise ContractError("association probabilities must be non-negative")
        if np.abs(self.soft.sum(axis=1) - 1.0).max() > 1e-6:
            raise ContractError("association rows must sum to 1")


@dataclass
class SuperGaussianSet:
    x: np.ndarray            # (S, 3)
    f_s: np.ndarray          # (S, seg)
    f_g: np.ndarray          # (S, geom)
    f_l: np.ndarray          # (S, 32) latent language feature, trained later
    members: list[np.ndarray]  # anchor ids per center, from the hard assignment
    orphan: np.ndarray       # (S,) no anchor lists this center as a neighbor

    @property
    def count(self) -> int:
        return self.x.shape[0]

    def member_counts(self) -> np.ndarray:
        return np.array([m.size for m in self.members])


def farthest_point_sample(positions: np.ndarray, s: int,
                          seed_or_rng) -> np.ndarray:
    """Greedy max-min subset: the first index is drawn uniformly, every next
    index maximizes its distance to the chosen set (ties to the lowest index)."""
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if s > n:
        raise ConfigError(f"cannot sample {s} centers from {n} anchors")
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) \
        else np.random.default_rng(seed_or_rng)
    chosen = np.empty(s, dtype=np.int64)
    chosen[0] = rng.integers(n)
    d2 = np.sum((positions - positions[chosen[0]]) ** 2, axis=1)
    for i in range(1, s):
        nxt = int(np.argmax(d2))      # argmax returns the lowest index on ties
        chosen[i] = nxt
        d2 = np.minimum(d2, np.sum((positions - positions[nxt]) ** 2, axis=1))
    return chosen


def nearest_centers(anchor_x: np.ndarray, center_x: np.ndarray, k: int) -> np.ndarray:
    """Per anchor, ids of its k nearest centers (ties to the lower id)."""
    if k > center_x.shape[0]:
        raise ConfigError(f"k_nn={k} exceeds {center_x.shape[0]} centers")
    d2 = ((anchor_x[:, None, :] - center_x[None, :, :]) ** 2).sum(axis=2)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]


class AssociationNets:
    """Three difference-embedding nets feeding one scoring net.

    With ``use_features`` off, the segmentation/geometry embeddings are forced
    to zero, so the score sees coordinate differences only (ablation mode).
    The scorer's last layer starts at zero: the initial association is uniform.
    """

    def __init__(self, seg_dim=32, geom_dim=32, embed_dim=16, hidden=32,
                 seed=0, use_features=True):
        rng = np.random.default_rng(seed)
        self.use_features = use_features
        self.phi = TinyMLP([3, hidden, embed_dim], rng=rng)
        self.phi_s = TinyMLP([seg_dim, hidden, embed_dim], rng=rng)
        self.psi = TinyMLP([geom_dim, hidden, embed_dim], rng=rng)
        self.score = TinyMLP([3 * embed_dim, hidden, 1], rng=rng, zero_last=True)
        self.embed_dim = embed_dim

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        out.update(namespaced("phi", self.phi.params()))
        out.update(namespaced("phi_s", self.phi_s.params()))
        out.update(namespaced("psi", self.psi.params()))
        out.update(namespaced("score", self.score.params()))
        return out

    def forward(self, dx, ds, dg):
        e1, c1 = self.phi.forward(dx)
        if self.use_features:
            e2, c2 = self.phi_s.forward(ds)
            e3, c3 = self.psi.forward(dg)
        else:
            e2 = np.zeros((dx.shape[0], self.embed_dim))
            e3 = np.zeros((dx.shape[0], self.embed_dim))
            c2 = c3 = None
        cat = np.concatenate([e1, e2, e3], axis=1)
        logit, c4 = self.score.forward(cat)
        return logit[:, 0], (c1, c2, c3, c4)

    def backward(self, d_logit, caches):
        c1, c2, c3, c4 = caches
        d_cat, g4 = self.score.backward(d_logit[:, None], c4)
        e = self.embed_dim
        grads = namespaced("score", g4)
        _, g1 = self.phi.backward(d_cat[:, :e], c1)
        grads.update(namespaced("phi", g1))
        if self.use_features:
            _, g2 = self.phi_s.backward(d_cat[:, e:2 * e], c2)
            _, g3 = self.psi.backward(d_cat[:, 2 * e:], c3)
            grads.update(namespaced("phi_s", g2))
            grads.update(namespaced("psi", g3))
        return grads


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_rows_backward(soft: np.ndarray, d_soft: np.ndarray) -> np.ndarray:
    inner = np.sum(soft * d_soft, axis=1, keepdims=True)
    return soft * (d_soft - inner)


def associate(anchors: dict[str, np.ndarray], centers: dict[str, np.ndarray],
              nets: AssociationNets, neighbors: np.ndarray):
    """Soft assignment of each anchor over its neighbor centers.

    Logits come from the scoring net applied to attribute differences;
    each anchor's row is softmaxed over its k neighbors.
    """
    n, k = neighbors.shape
    rows = np.repeat(np.arange(n), k)
    flat = neighbors.reshape(-1)
    dx = anchors["x"][rows] - centers["x"][flat]
    ds = anchors["f_s"][rows] - centers["f_s"][flat]
    dg = anchors["f_g"][rows] - centers["f_g"][flat]
    logit_flat, caches = nets.forward(dx, ds, dg)
    logits = logit_flat.reshape(n, k)
    soft = _softmax_rows(logits)
    return AssociationMap(neighbors=neighbors.copy(), soft=soft, logits=logits), caches


def update_supergs(anchors: dict[str, np.ndarray], assoc: AssociationMap,
                   prev: dict[str, np.ndarray]):
    """Association-weighted anchor means per center; orphans keep their
    previous attributes and are flagged."""
    s = prev["x"].shape[0]
    flat_n = assoc.neighbors.reshape(-1)
    flat_a = assoc.soft.reshape(-1)
    rows = np.repeat(np.arange(assoc.neighbors.shape[0]), assoc.neighbors.shape[1])
    denom = np.bincount(flat_n, weights=flat_a, minlength=s)
    orphan = denom == 0.0
    out = {}
    for key in ATTRIBUTES:
        attr = anchors[key]
        num = np.empty((s, attr.shape[1]))
        for d in range(attr.shape[1]):
            num[:, d] = np.bincount(flat_n, weights=flat_a * attr[rows, d],
                                    minlength=s)
        new = prev[key].copy()
        new[~orphan] = num[~orphan] / denom[~orphan, None]
        out[key] = new
    return out, orphan, denom


def _norm_rows(v: np.ndarray) -> np.ndarray:
    return np.linalg.norm(v, axis=-1)


def stage2_losses(anchors: dict[str, np.ndarray], assoc: AssociationMap,
                  prev: dict[str, np.ndarray], cfg: ClusterConfig,
                  attributes: tuple[str, ...] | None = None):
    """Reconstruction + compactness with gradients w.r.t. the logits.

    Both terms are functions of the soft map twice over: directly, and through
    the weighted center update. Returns (parts dict, d_logits, new_centers,
    orphan flags).
    """
    attributes = attributes if attributes is not None else cfg.recon_attributes
    neighbors, soft = assoc.neighbors, assoc.soft
    n, k = neighbors.shape
    s = prev["x"].shape[0]
    rows = np.repeat(np.arange(n), k)
    flat_n = neighbors.reshape(-1)
    flat_a = soft.reshape(-1)

    new, orphan, denom = update_supergs(anchors, assoc, prev)
    safe_denom = np.where(orphan, 1.0, denom)

    d_soft = np.zeros_like(soft)
    d_center: dict[str, np.ndarray] = {key: np.zeros_like(new[key])
                                       for key in ATTRIBUTES}
    parts: dict[str, float] = {}

    # reconstruction per attribute: mean_i || attr_i - sum_m soft[i,m] * center ||
    for key in attributes:
        attr = anchors[key]
        cen = new[key]
        recon = (soft.reshape(n, k, 1) * cen[neighbors]).sum(axis=1)
        e = attr - recon
        norm = _norm_rows(e)
        parts[f"recon_{key}"] = float(norm.mean())
        u = e / np.maximum(norm, NORM_EPS)[:, None]
        u[norm <= NORM_EPS] = 0.0
        scale = cfg.w_recon / n
        # direct path through soft
        d_soft += -scale * np.einsum("id,imd->im", u, cen[neighbors])
        # path through the centers
        du_flat = (-scale) * flat_a[:, None] * u[rows]
        for d in range(cen.shape[1]):
            d_center[key][:, d] += np.bincount(flat_n, weights=du_flat[:, d],
                                               minlength=s)

    # compactness: per center, mean member distance to the updated position
    member_count = np.bincount(flat_n, minlength=s)
    diff = anchors["x"][rows] - new["x"][flat_n]
    dist = _norm_rows(diff)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_center = np.bincount(flat_n, weights=dist, minlength=s)
        mean_member = np.where(member_count > 0, per_center / np.maximum(member_count, 1), 0.0)
    parts["compact"] = float(mean_member.sum() / s)
    unit = diff / np.maximum(dist, NORM_EPS)[:, None]
    unit[dist <= NORM_EPS] = 0.0
    c_scale = cfg.w_compact / (s * np.maximum(member_count, 1))
    d_center["x"] += -np.stack([
        np.bincount(flat_n, weights=c_scale[flat_n] * unit[:, d], minlength=s)
        for d in range(3)], axis=1)

    # pull the center cotangents back through the weighted update
    for key in ATTRIBUTES:
        dc = d_center[key]
        if not dc.any():
            continue
        attr = anchors[key]
        contrib = np.sum(dc[flat_n] * (attr[rows] - new[key][flat_n]), axis=1)
        d_soft += (contrib / safe_denom[flat_n]).reshape(n, k)

    total = cfg.w_recon * sum(parts[f"recon_{key}"] for key in attributes) \
        + cfg.w_compact * parts["compact"]
    parts["total"] = float(total)
    d_logits = _softmax_rows_backward(soft, d_soft)
    return parts, d_logits, new, orphan


def reconstruction_loss(anchors: dict[str, np.ndarray], supergs: dict[str, np.ndarray],
                        assoc: AssociationMap, attribute: str, cfg: ClusterConfig):
    """Loss + d/d_logits for one attribute, through softmax and center update."""
    if attribute not in ATTRIBUTES:
        raise ContractError(f"attribute must be one of {ATTRIBUTES}")
    solo = ClusterConfig(S=cfg.S, k_nn=cfg.k_nn, w_recon=1.0, w_compact=0.0,
                         tau_ins=cfg.tau_ins, tau_hier=cfg.tau_hier, seed=cfg.seed)
    parts, d_logits, _, _ = stage2_losses(anchors, assoc, supergs, solo,
                                          attributes=(attribute,))
    return parts[f"recon_{attribute}"], d_logits


def compactness_loss(anchors: dict[str, np.ndarray], supergs: dict[str, np.ndarray],
                     assoc: AssociationMap, cfg: ClusterConfig):
    solo = ClusterConfig(S=cfg.S, k_nn=cfg.k_nn, w_recon=0.0, w_compact=1.0,
                         tau_ins=cfg.tau_ins, tau_hier=cfg.tau_hier, seed=cfg.seed)
    parts, d_logits, _, _ = stage2_losses(anchors, assoc, supergs, solo,
                                          attributes=())
    return parts["compact"], d_logits


def harden(assoc: AssociationMap) -> np.ndarray:
    """Per-anchor argmax over the soft row; exact ties go to the lower center id."""
    row_max = assoc.soft.max(axis=1, keepdims=True)
    candidates = np.where(assoc.soft == row_max, assoc.neighbors,
                          np.iinfo(np.int64).max)
    return candidates.min(axis=1)


def members_from_hard(hard: np.ndarray, s: int) -> list[np.ndarray]:
    return [np.flatnonzero(hard == j) for j in range(s)]


@dataclass
class Stage2Result:
    supergs: SuperGaussianSet
    assoc: AssociationMap
    hard: np.ndarray
    nets: AssociationNets
    history: list[dict] = field(default_factory=list)


def train_stage2(anchors: dict[str, np.ndarray], cfg: ClusterConfig) -> Stage2Result:
    """Optimize the association nets over frozen anchors.

    Each iteration: score current centers, softly re-estimate them, take one
    Adam step on the combined loss, and adopt the re-estimated centers.
    Neighbor sets refresh periodically as centers move.
    """
    n = anchors["x"].shape[0]
    rng = np.random.default_rng(cfg.seed)
    fps = farthest_point_sample(anchors["x"], cfg.S, rng)
    centers = {key: anchors[key][fps].copy() for key in ATTRIBUTES}
    nets = AssociationNets(seg_dim=anchors["f_s"].shape[1],
                           geom_dim=anchors["f_g"].shape[1],
                           seed=cfg.seed, use_features=cfg.use_feature_inputs)
    params = nets.params()
    opt = Adam()
    neighbors = nearest_centers(anchors["x"], centers["x"], cfg.k_nn)
    history = []
    for it in range(cfg.iterations):
        assoc, caches = associate(anchors, centers, nets, neighbors)
        parts, d_logits, new_centers, orphan = stage2_losses(
            anchors, assoc, centers, cfg)
        if not np.isfinite(parts["total"]) or parts["total"] > 1e6:
            raise DivergenceError(
                f"stage-2 loss diverged at iteration {it}: {parts}")
        grads = nets.backward(d_logits.reshape(-1), caches)
        lr = lr_schedule(it, cfg.iterations, cfg.lr_initial, cfg.lr_final)
        opt.step(params, grads, lr)
        centers = new_centers
        history.append({"step": it, **{k: v for k, v in parts.items()}, "lr": lr})
        if (it + 1) % cfg.knn_refresh_period == 0:
            neighbors = nearest_centers(anchors["x"], centers["x"], cfg.k_nn)
    assoc, _ = associate(anchors, centers, nets, neighbors)
    hard = harden(assoc)
    members = members_from_hard(hard, cfg.S)
    incoming = np.bincount(assoc.neighbors.reshape(-1), minlength=cfg.S)
    supergs = SuperGaussianSet(
        x=centers["x"], f_s=centers["f_s"], f_g=centers["f_g"],
        f_l=np.zeros((cfg.S, 32)), members=members, orphan=incoming == 0)
    return Stage2Result(supergs=supergs, assoc=assoc, hard=hard, nets=nets,
                        history=history)


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _knn_similarity_components(positions, feats, node_ids, k, threshold):
    """Connected components over a kNN graph gated by cosine similarity."""
    m = node_ids.size
    if m == 0:
        return {}
    uf = _UnionFind(m)
    if m > 1:
        kk = min(k, m - 1)
        d2 = ((positions[node_ids][:, None, :] - positions[node_ids][None, :, :]) ** 2).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        order = np.argsort(d2, axis=1, kind="stable")[:, :kk]
        f = feats[node_ids]
        for a in range(m):
            for b in order[a]:
                sim = float(f[a] @ f[b])
                if sim > threshold:
                    uf.union(a, int(b))
    comp_of = {}
    roots = {}
    for a in range(m):
        r = uf.find(a)
        roots.setdefault(r, []).append(a)
    # deterministic labels: components ordered by their lowest node id
    ordered = sorted(roots.values(), key=lambda nodes: node_ids[nodes].min())
    for label, nodes in enumerate(ordered):
        for a in nodes:
            comp_of[int(node_ids[a])] = label
    return comp_of


def group_instances_graph(positions: np.ndarray, inst_feats: np.ndarray,
                          cfg: ClusterConfig,
                          valid: np.ndarray | None = None) -> np.ndarray:
    """Instance label per center: components of the kNN graph whose edges
    require instance-feature cosine above tau_ins. Invalid centers get -1."""
    s = positions.shape[0]
    if valid is None:
        valid = np.ones(s, dtype=bool)
    labels = np.full(s, -1, dtype=np.int64)
    comp = _knn_similarity_components(positions, inst_feats,
                                      np.flatnonzero(valid), cfg.k_nn, cfg.tau_ins)
    for node, lab in comp.items():
        labels[node] = lab
    return labels


def group_parts_graph(positions: np.ndarray, hier_feats: np.ndarray,
                      instance_labels: np.ndarray, cfg: ClusterConfig) -> np.ndarray:
    """Part label per center, a refinement of the instance partition: the same
    graph construction inside each instance with the tau_hier gate."""
    s = positions.shape[0]
    labels = np.full(s, -1, dtype=np.int64)
    next_label = 0
    for inst in np.unique(instance_labels[instance_labels >= 0]):
        nodes = np.flatnonzero(instance_labels == inst)
        comp = _knn_similarity_components(positions, hier_feats, nodes,
                                          cfg.k_nn, cfg.tau_hier)
        n_comp = max(comp.values()) + 1 if comp else 0
        for node, lab in comp.items():
            labels[node] = next_label + lab
        next_label += n_comp
    return labels


def superg_features(values: np.ndarray, anchor_of_value: np.ndarray,
                    hard: np.ndarray, s: int) -> np.ndarray:
    """Normalized mean of per-Gaussian feature rows over each center's members."""
    assign = hard[anchor_of_value]
    sums = np.zeros((s, values.shape[1]))
    np.add.at(sums, assign, values)
    counts = np.bincount(assign, minlength=s)[:, None]
    means = sums / np.maximum(counts, 1)
    norms = np.linalg.norm(means, axis=1, keepdims=True)
    means = means / np.maximum(norms, NORM_EPS)
    means[counts[:, 0] == 0] = 0.0
    return means


def click_query(pixel: tuple[int, int], hier_map: np.ndarray,
                sg_hier_feats: np.ndarray, instance_labels: np.ndarray,
                mode: str, cfg: ClusterConfig):
    """Centers matching the clicked pixel's rendered hierarchy feature.

    Part mode keeps centers whose feature cosine clears tau_hier; instance
    mode widens that selection to every center sharing its instance labels.
    Returns (ids, status) where status is "empty" for background clicks and
    "no_match" when nothing clears the threshold.
    """
    if mode not in ("part", "instance"):
        raise ContractError(f"mode must be part|instance, got {mode!r}")
    u, v = pixel
    h, w = hier_map.shape[:2]
    if not (0 <= u < w and 0 <= v < h):
        raise ContractError(f"pixel {pixel} outside {w}x{h} image")
    f = hier_map[v, u]
    norm = np.linalg.norm(f)
    if norm < 1e-8:
        return np.empty(0, dtype=np.int64), "empty"
    z = f / norm
    sims = sg_hier_feats @ z
    part_sel = np.flatnonzero(sims > cfg.tau_hier)
    if part_sel.size == 0:
        return part_sel, "no_match"
    if mode == "part":
        return part_sel, "ok"
    modes = np.unique(instance_labels[part_sel])
    modes = modes[modes >= 0]
    sel = np.flatnonzero(np.isin(instance_labels, modes))
    sel = np.union1d(sel, part_sel)
    return sel, "ok"


def kmeans_baseline(anchors: dict[str, np.ndarray], s: int, seed: int,
                    max_iter: int = 100, tol: float = 1e-6):
    """Lloyd's algorithm on standardized (position, features) rows.

    Greedy++ seeding; empty clusters re-seed from the point farthest from its
    assigned center. Returns (hard assignment, per-iteration objective).
    """
    feats = np.concatenate([anchors["x"], anchors["f_s"], anchors["f_g"]], axis=1)
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    std[std == 0] = 1.0
    x = (feats - mean) / std
    n = x.shape[0]
    if s > n:
        raise ConfigError(f"cannot make {s} clusters from {n} anchors")
    rng = np.random.default_rng(seed)

    centers = np.empty((s, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, s):
        total = d2.sum()
        if total <= 0:
            centers[j] = x[rng.integers(n)]
        else:
            centers[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))

    objective = []
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2_all = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2_all.argmin(axis=1)
        objective.append(float(d2_all[np.arange(n), assign].sum()))
        new_centers = centers.copy()
        for j in range(s):
            rows = assign == j
            if rows.any():
                new_centers[j] = x[rows].mean(axis=0)
            else:
                far = int(np.argmax(d2_all[np.arange(n), assign]))
                new_centers[j] = x[far]
        shift = np.linalg.norm(new_centers - centers, axis=1).max()
        centers = new_centers
        if shift < tol:
            break
    d2_all = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assign = d2_all.argmin(axis=1)
    objective.append(float(d2_all[np.arange(n), assign].sum()))
    return assign, objective


def cluster_to_doc(result: Stage2Result, cfg: ClusterConfig,
                   instance_labels: np.ndarray, part_labels: np.ndarray) -> dict:
    sg = result.supergs
    return {
        "schema": CLUSTER_SCHEMA,
        "config": {"S": cfg.S, "k_nn": cfg.k_nn, "iterations": cfg.iterations,
                   "knn_refresh_period": cfg.knn_refresh_period,
                   "w_recon": cfg.w_recon, "w_compact": cfg.w_compact,
                   "tau_ins": cfg.tau_ins, "tau_hier": cfg.tau_hier,
                   "seed": cfg.seed,
                   "use_feature_inputs": cfg.use_feature_inputs,
                   "recon_attributes": list(cfg.recon_attributes)},
        "count": sg.count,
        "seg_dim": sg.f_s.shape[1],
        "geom_dim": sg.f_g.shape[1],
        "latent_dim": sg.f_l.shape[1],
        "x": encode_f32(sg.x),
        "f_s": encode_f32(sg.f_s),
        "f_g": encode_f32(sg.f_g),
        "f_l": encode_f32(sg.f_l),
        "orphan": sg.orphan.astype(int).tolist(),
        "hard": result.hard.tolist(),
        "instance_labels": instance_labels.tolist(),
        "part_labels": part_labels.tolist(),
    }


def cluster_from_doc(doc: dict):
    if doc.get("schema") != CLUSTER_SCHEMA:
        raise ParseError(f"not a cluster document: {doc.get('schema')!r}")
    s = int(doc["count"])
    hard = np.asarray(doc["hard"], dtype=np.int64)
    sg = SuperGaussianSet(
        x=decode_f32(doc["x"], (s, 3)),
        f_s=decode_f32(doc["f_s"], (s, int(doc["seg_dim"]))),
        f_g=decode_f32(doc["f_g"], (s, int(doc["geom_dim"]))),
        f_l=decode_f32(doc["f_l"], (s, int(doc["latent_dim"]))),
        members=members_from_hard(hard, s),
        orphan=np.asarray(doc["orphan"], dtype=bool))
    cfg_doc = dict(doc["config"])
    cfg_doc["recon_attributes"] = tuple(cfg_doc.get("recon_attributes", ATTRIBUTES))
    cfg = ClusterConfig(**cfg_doc)
    inst = np.asarray(doc["instance_labels"], dtype=np.int64)
    part = np.asarray(doc["part_labels"], dtype=np.int64)
    return sg, hard, inst, part, cfg
